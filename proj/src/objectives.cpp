#include "fairbranch/objectives.hpp"

#include <cmath>

#include "fairbranch/errors.hpp"
#include "fairbranch/network.hpp"

namespace fairbranch {

namespace {

inline double sample_nll(double p, int y) { return y == 1 ? -std::log(p) : -std::log1p(-p); }

void check_lengths(Eigen::Index a, Eigen::Index b) {
  if (a != b) throw ShapeError("probability and label vectors differ in length");
}

}  // namespace

double nll_loss(const Eigen::Ref<const Eigen::VectorXd>& p, const Eigen::Ref<const Eigen::VectorXi>& y) {
  check_lengths(p.size(), y.size());
  if (p.size() == 0) throw MetricError("NLL loss is undefined on an empty batch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) total += sample_nll(p(i), y(i));
  return total / static_cast<double>(p.size());
}

FairnessLoss robust_fairness_loss(const Eigen::Ref<const Eigen::VectorXd>& p,
                                  const Eigen::Ref<const Eigen::VectorXi>& y,
                                  const Eigen::Ref<const Eigen::VectorXi>& s) {
  check_lengths(p.size(), y.size());
  check_lengths(p.size(), s.size());
  FairnessLoss out;
  auto& cells = out.cells;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    cells.loss[y(i)][s(i)] += sample_nll(p(i), y(i));
    ++cells.count[y(i)][s(i)];
  }
  for (int c = 0; c < 2; ++c) {
    for (int g = 0; g < 2; ++g) {
      if (cells.count[c][g] > 0) cells.loss[c][g] /= static_cast<double>(cells.count[c][g]);
    }
  }
  const auto sel = fairness_backprop_selector(cells);
  for (int c = 0; c < 2; ++c) {
    if (sel.group[c] >= 0) out.value += cells.loss[c][sel.group[c]];
  }
  return out;
}

SubgroupSelection fairness_backprop_selector(const GroupClassLosses& cells) {
  SubgroupSelection sel;
  for (int c = 0; c < 2; ++c) {
    const bool g0 = cells.present(c, 0), g1 = cells.present(c, 1);
    if (g0 && g1) {
      sel.group[c] = cells.loss[c][1] > cells.loss[c][0] ? 1 : 0;
    } else if (g0) {
      sel.group[c] = 0;
    } else if (g1) {
      sel.group[c] = 1;
    }
  }
  return sel;
}

Eigen::VectorXd accuracy_logit_gradient(const Eigen::Ref<const Eigen::VectorXd>& p,
                                        const Eigen::Ref<const Eigen::VectorXi>& y) {
  check_lengths(p.size(), y.size());
  return (p - y.cast<double>()) / static_cast<double>(p.size());
}

Eigen::VectorXd fairness_logit_gradient(const Eigen::Ref<const Eigen::VectorXd>& p,
                                        const Eigen::Ref<const Eigen::VectorXi>& y,
                                        const Eigen::Ref<const Eigen::VectorXi>& s,
                                        const SubgroupSelection& selection) {
  check_lengths(p.size(), y.size());
  check_lengths(p.size(), s.size());
  std::array<Eigen::Index, 2> selected_count{0, 0};
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (s(i) == selection.group[y(i)]) ++selected_count[y(i)];
  }
  Eigen::VectorXd g = Eigen::VectorXd::Zero(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const int c = y(i);
    if (s(i) == selection.group[c]) {
      g(i) = (p(i) - static_cast<double>(c)) / static_cast<double>(selected_count[c]);
    }
  }
  return g;
}

double intra_task_lambda(const GradientSet& grads, int task, double lambda_default) {
  const auto& tg = grads.tasks.at(static_cast<std::size_t>(task));
  if (tg.acc.empty() || tg.fair.empty()) {
    throw InternalError("head gradients missing for task " + std::to_string(task));
  }
  const double dot = tg.acc.back().flat().dot(tg.fair.back().flat());
  return dot < 0.0 ? 0.0 : lambda_default;
}

}  // namespace fairbranch
