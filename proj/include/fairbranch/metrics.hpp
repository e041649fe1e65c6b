#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fairbranch/conflict.hpp"
#include "fairbranch/data.hpp"
#include "fairbranch/network.hpp"

namespace fairbranch {

// EP: true-positive-rate gap. EO: TPR gap plus FPR gap. EOLiteral: the two
// conditions {yhat=1,y=1} and {yhat=0,y=1}, which always sum to 2 * EP.
enum class ViolationKind { EP, EO, EOLiteral };

inline constexpr double kDecisionThreshold = 0.5;

// pred holds hard 0/1 predictions. Throws MetricError naming any empty
// (class, group) cell the measure needs.
double fairness_violation(const Eigen::Ref<const Eigen::VectorXi>& pred,
                          const Eigen::Ref<const Eigen::VectorXi>& y,
                          const Eigen::Ref<const Eigen::VectorXi>& s, ViolationKind kind);

// Negative means negative transfer.
double knowledge_gain(double mtl_acc, double stl_acc);
// Positive means bias transfer.
double discrimination_gain(double mtl_viol, double stl_viol);

inline bool is_negative_transfer(double kg) { return kg < 0.0; }
inline bool is_bias_transfer(double dg) { return dg > 0.0; }

struct TaskMetrics {
  double accuracy = 0.0;
  double ep_viol = 0.0;
  double eo_viol = 0.0;
};

// Metrics of each column of `probabilities` against the dataset's labels.
std::vector<TaskMetrics> task_metrics(const Eigen::MatrixXd& probabilities, const Dataset& d);

struct TaskEvaluation {
  std::string name;
  TaskMetrics model;
  TaskMetrics baseline;
  double kg = 0.0;
  double dg_ep = 0.0;
  double dg_eo = 0.0;
};

struct EvalResult {
  std::vector<TaskEvaluation> tasks;
  double mean_accuracy = 0.0;
  double mean_ep = 0.0;
  double mean_eo = 0.0;
  double mean_kg = 0.0;
  double mean_dg_ep = 0.0;
  double mean_dg_eo = 0.0;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

EvalResult evaluate_predictions(const Eigen::MatrixXd& probabilities, const Dataset& d,
                                std::span<const TaskMetrics> baseline);

// `d` must already be in the model's feature space (scaled).
EvalResult evaluate(const Topology& top, const Dataset& d, std::span<const TaskMetrics> baseline);

// Cumulative unordered-pair conflict counts for one kind (symmetric, zero diagonal).
Eigen::MatrixXi conflict_heatmap(const ConflictLog& log, int num_tasks, ConflictKind kind);

struct AngleSummary {
  int epoch = 0;
  ConflictKind kind = ConflictKind::Accuracy;
  Index count = 0;
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;  // degrees
};

std::vector<AngleSummary> angle_summary(const ConflictLog& log);

// Writes conflicts.csv, angles.csv, heatmap_accuracy.csv and heatmap_fairness.csv.
void conflict_report(const ConflictLog& log, const std::vector<std::string>& task_names,
                     const std::filesystem::path& dir);

}  // namespace fairbranch
