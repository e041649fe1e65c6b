#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace fairbranch {

using Index = Eigen::Index;

// Tabular multi-task dataset. Protected attribute: 0 is group g, 1 is group g-bar.
struct Dataset {
  Eigen::MatrixXd features;        // n x m
  Eigen::VectorXi protected_attr;  // n, values in {0,1}
  Eigen::MatrixXi labels;          // n x T, values in {0,1}
  std::vector<std::string> feature_names;
  std::vector<std::string> task_names;

  Index n_samples() const { return features.rows(); }
  Index n_features() const { return features.cols(); }
  Index n_tasks() const { return labels.cols(); }

  // Throws SchemaError on shape disagreement or non-binary values. When
  // require_both_groups is set, each protected group must be present.
  void validate(bool require_both_groups = true) const;

  Dataset subset(std::span<const Index> rows) const;
  Dataset single_task(Index task) const;
};

struct TaskMeta {
  int family = 0;
  bool biased = false;
};

struct SyntheticSpec {
  Index n_samples = 10000;
  Index n_features = 10;
  Index n_tasks = 6;
  Index n_families = 3;
  double bias_strength = 0.0;  // extra flip-to-0 probability for positives of g-bar on biased tasks
  double noise = 0.0;          // symmetric label-flip rate
  double proxy_strength = 1.0; // shift of feature 0 by group, so the protected attribute leaks into X
  double perturbation = 0.1;   // std of per-task deviation from the family weight vector
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticData {
  Dataset data;
  std::vector<TaskMeta> meta;  // one per task
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

// Sidecar of the form {task_name: {"family": int, "biased": bool}}.
nlohmann::json metadata_json(const Dataset& d, std::span<const TaskMeta> meta);

Dataset load_csv(const std::filesystem::path& path, const std::string& protected_column,
                 const std::vector<std::string>& task_columns);

// Columns: features in order, then the protected column, then the tasks.
void write_csv(const Dataset& d, const std::filesystem::path& path,
               const std::string& protected_column = "protected");

enum class Stratify { Protected, None };

struct SplitSpec {
  double train_fraction = 0.7;
  Stratify stratify_on = Stratify::Protected;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<Index> train;
  std::vector<Index> test;
};

SplitIndices split_indices(const Dataset& d, const SplitSpec& s);
std::pair<Dataset, Dataset> stratified_split(const Dataset& d, const SplitSpec& s);

// Seeded permutation of 0..n-1 (re-derived from seed and epoch), chunked.
std::vector<std::vector<Index>> batch_iter(Index n_samples, Index batch_size, std::uint64_t seed,
                                           int epoch);
inline std::vector<std::vector<Index>> batch_iter(const Dataset& d, Index batch_size,
                                                  std::uint64_t seed, int epoch) {
  return batch_iter(d.n_samples(), batch_size, seed, epoch);
}

// Per-column standardization fitted on a training split.
struct FeatureScaler {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static FeatureScaler fit(const Eigen::MatrixXd& x);
  static FeatureScaler identity(Index n_features);
  Eigen::MatrixXd transform(const Eigen::MatrixXd& x) const;
  Dataset apply(const Dataset& d) const;

  nlohmann::json to_json() const;
  static FeatureScaler from_json(const nlohmann::json& j);
};

}  // namespace fairbranch
