#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairbranch/branching.hpp"
#include "fairbranch/conflict.hpp"
#include "fairbranch/data.hpp"
#include "fairbranch/grouping.hpp"
#include "fairbranch/network.hpp"

namespace fairbranch {

// When the intra-task lambda gate is re-evaluated: every batch, or once on the
// first batch of each epoch.
enum class LambdaGate { PerBatch, PerEpoch };

struct ConvergenceConfig {
  double rel_tol = 1e-4;
  int patience = 10;
};

struct TrainConfig {
  std::vector<Index> hidden_widths{32, 32};
  double eta = 0.05;
  Index batch_size = 256;
  int max_epochs = 200;
  double tau = 0.7;
  double lambda_default = 1.0;
  LambdaGate lambda_gate = LambdaGate::PerBatch;
  BranchSchedule schedule;
  ConvergenceConfig convergence;
  std::uint64_t seed = 0;
  bool standardize = true;
  bool stl_fairness = true;     // STL baselines train L_t + lambda_t F_t as well
  bool fbgrad_shuffle = true;   // seeded-random correction order
  bool log_conflicts = true;
  bool common_head_init = true;  // all heads start from the same weights

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep the values of `base`.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochStats {
  int epoch = 0;
  std::vector<double> train_acc_loss, train_fair_loss;
  std::vector<double> val_acc_loss, val_fair_loss;
  double val_total = 0.0;  // mean over tasks of L_t + F_t on validation
};

struct TrainReport {
  std::string mode;
  std::vector<int> task_ids;  // tasks of the source dataset this model covers
  std::vector<std::string> task_names;
  TrainConfig config;
  std::vector<EpochStats> history;
  std::vector<BranchEvent> branch_events;
  ConflictLog conflicts;
  Topology topology;
  FeatureScaler scaler;
  TaskGrouping groups;
  int epochs_run = 0;
  bool converged = false;

  // Everything except the raw conflict log and parameters.
  nlohmann::json to_json() const;
};

TrainReport train_fairbranch(const Dataset& train, const Dataset& val, const TrainConfig& cfg);
TrainReport train_vanilla_mtl(const Dataset& train, const Dataset& val, const TrainConfig& cfg);
TrainReport train_stl(const Dataset& train, const Dataset& val, int task, const TrainConfig& cfg);

// True once the best value has gone `patience` epochs without a relative
// improvement larger than rel_tol.
bool convergence_check(std::span<const double> history, double rel_tol, int patience);

}  // namespace fairbranch
