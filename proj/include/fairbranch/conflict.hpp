#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fairbranch/network.hpp"

namespace fairbranch {

enum class ConflictKind { Accuracy, Fairness };

std::string to_string(ConflictKind kind);

struct ConflictRecord {
  int epoch = 0;
  int depth = 0;
  int task_a = 0;  // task_a < task_b
  int task_b = 0;
  ConflictKind kind = ConflictKind::Accuracy;
  double cosine = 0.0;
  bool corrected = false;

  bool operator==(const ConflictRecord&) const = default;
};

using ConflictLog = std::vector<ConflictRecord>;

// True iff g1 . g2 < 0.
bool detect_conflict(const Eigen::Ref<const Eigen::VectorXd>& g1,
                     const Eigen::Ref<const Eigen::VectorXd>& g2);

// Cosine clamped to [-1,1]; nullopt when either vector has zero norm.
std::optional<double> conflict_cosine(const Eigen::Ref<const Eigen::VectorXd>& g1,
                                      const Eigen::Ref<const Eigen::VectorXd>& g2);

// Removes from g1 its component along g2. Callers must have detected a conflict.
Eigen::VectorXd fbgrad_project(const Eigen::Ref<const Eigen::VectorXd>& g1,
                               const Eigen::Ref<const Eigen::VectorXd>& g2);

// One member's view of a correction group: its working gradient starts at the
// original and is projected against every other member's original gradient
// it conflicts with, in the given opponent order.
struct CorrectionOutcome {
  std::vector<Eigen::VectorXd> corrected;
  std::vector<std::vector<bool>> projected;  // projected[i][j]: i was projected onto j's normal plane
};

CorrectionOutcome correct_fairness_conflicts(const std::vector<Eigen::VectorXd>& working,
                                             const std::vector<Eigen::VectorXd>& originals,
                                             const std::vector<std::size_t>& member_order,
                                             const std::vector<std::vector<std::size_t>>& opponent_order);

struct FbgradOptions {
  bool correct = true;         // false: detection and logging only
  bool shuffle_order = true;   // false: ascending task order
  bool log_shared_fairness = true;
};

struct FbgradResult {
  GradientSet gradients;
  ConflictLog records;
  int corrections = 0;
};

// Corrects fairness conflicts between tasks that share a branch layer (depths
// above the current shared depth). Shared layers and heads are only inspected
// for logging. Accuracy gradients are never modified. Tasks with lambda_t == 0
// take no part in fairness pairing.
FbgradResult fbgrad_pass(const Topology& top, const GradientSet& grads,
                         const std::vector<double>& lambdas, int epoch, std::mt19937_64& rng,
                         const FbgradOptions& options = {});

}  // namespace fairbranch
