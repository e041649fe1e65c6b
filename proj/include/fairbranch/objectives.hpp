#pragma once

#include <array>

#include <Eigen/Dense>

namespace fairbranch {

struct GradientSet;

// Mean NLL per (class y, group s) cell of one task's batch.
struct GroupClassLosses {
  std::array<std::array<double, 2>, 2> loss{};         // [y][s]
  std::array<std::array<Eigen::Index, 2>, 2> count{};  // [y][s]

  bool present(int y, int s) const { return count[y][s] > 0; }
};

struct FairnessLoss {
  double value = 0.0;
  GroupClassLosses cells;
};

struct BatchLosses {
  double acc_loss = 0.0;
  double fair_loss = 0.0;
  GroupClassLosses cells;
};

// Mean binary cross-entropy. Throws MetricError on empty input.
double nll_loss(const Eigen::Ref<const Eigen::VectorXd>& p, const Eigen::Ref<const Eigen::VectorXi>& y);

// Sum over classes of the worse group's conditional NLL. A class with a single
// present group uses that group; an empty class contributes 0.
FairnessLoss robust_fairness_loss(const Eigen::Ref<const Eigen::VectorXd>& p,
                                  const Eigen::Ref<const Eigen::VectorXi>& y,
                                  const Eigen::Ref<const Eigen::VectorXi>& s);

// Group carrying the fairness gradient for each class; -1 when the class is
// empty. Ties go to group 0.
struct SubgroupSelection {
  std::array<int, 2> group{-1, -1};
};

SubgroupSelection fairness_backprop_selector(const GroupClassLosses& cells);

// dL/dz and dF/dz for a sigmoid head, z the pre-activation logits.
Eigen::VectorXd accuracy_logit_gradient(const Eigen::Ref<const Eigen::VectorXd>& p,
                                        const Eigen::Ref<const Eigen::VectorXi>& y);
Eigen::VectorXd fairness_logit_gradient(const Eigen::Ref<const Eigen::VectorXd>& p,
                                        const Eigen::Ref<const Eigen::VectorXi>& y,
                                        const Eigen::Ref<const Eigen::VectorXi>& s,
                                        const SubgroupSelection& selection);

// Zero when the task head's accuracy and fairness gradients point against each
// other (negative dot product), lambda_default otherwise.
double intra_task_lambda(const GradientSet& grads, int task, double lambda_default);

}  // namespace fairbranch
