#include "fairbranch/conflict.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fairbranch/errors.hpp"

namespace fairbranch {

std::string to_string(ConflictKind kind) {
  return kind == ConflictKind::Accuracy ? "accuracy" : "fairness";
}

bool detect_conflict(const Eigen::Ref<const Eigen::VectorXd>& g1,
                     const Eigen::Ref<const Eigen::VectorXd>& g2) {
  if (g1.size() != g2.size()) throw InternalError("gradient length mismatch in conflict check");
  return g1.dot(g2) < 0.0;
}

std::optional<double> conflict_cosine(const Eigen::Ref<const Eigen::VectorXd>& g1,
                                      const Eigen::Ref<const Eigen::VectorXd>& g2) {
  if (g1.size() != g2.size()) throw InternalError("gradient length mismatch in cosine");
  const double n1 = g1.norm(), n2 = g2.norm();
  if (n1 == 0.0 || n2 == 0.0) return std::nullopt;
  return std::clamp(g1.dot(g2) / (n1 * n2), -1.0, 1.0);
}

Eigen::VectorXd fbgrad_project(const Eigen::Ref<const Eigen::VectorXd>& g1,
                               const Eigen::Ref<const Eigen::VectorXd>& g2) {
  if (!detect_conflict(g1, g2)) {
    throw InternalError("fbgrad_project called on non-conflicting gradients");
  }
  return g1 - (g1.dot(g2) / g2.squaredNorm()) * g2;
}

CorrectionOutcome correct_fairness_conflicts(const std::vector<Eigen::VectorXd>& working,
                                             const std::vector<Eigen::VectorXd>& originals,
                                             const std::vector<std::size_t>& member_order,
                                             const std::vector<std::vector<std::size_t>>& opponent_order) {
  const std::size_t k = originals.size();
  CorrectionOutcome out;
  out.corrected = working;
  out.projected.assign(k, std::vector<bool>(k, false));
  for (std::size_t i : member_order) {
    auto& g = out.corrected[i];
    for (std::size_t j : opponent_order[i]) {
      if (j == i) continue;
      const auto& opp = originals[j];
      if (opp.squaredNorm() == 0.0) continue;
      if (detect_conflict(g, opp)) {
        g = fbgrad_project(g, opp);
        out.projected[i][j] = true;
      }
    }
  }
  return out;
}

namespace {

std::vector<std::size_t> ordering(std::size_t k, bool shuffle, std::mt19937_64& rng) {
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace

FbgradResult fbgrad_pass(const Topology& top, const GradientSet& grads,
                         const std::vector<double>& lambdas, int epoch, std::mt19937_64& rng,
                         const FbgradOptions& options) {
  if (static_cast<int>(lambdas.size()) != top.num_tasks ||
      static_cast<int>(grads.tasks.size()) != top.num_tasks) {
    throw InternalError("fbgrad_pass: gradients or lambdas do not cover every task");
  }
  FbgradResult result;
  result.gradients = grads;
  const int d = top.depth();

  for (int b = 1; b <= d; ++b) {
    const bool branched = b > top.current_depth;
    const auto slot = static_cast<std::size_t>(b - 1);
    for (const auto& layer : top.hidden[slot]) {
      if (layer.tasks.size() < 2) continue;
      const auto& tasks = layer.tasks;

      for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto gi = grads.tasks[static_cast<std::size_t>(tasks[i])].acc[slot].flat();
        for (std::size_t j = i + 1; j < tasks.size(); ++j) {
          const auto gj = grads.tasks[static_cast<std::size_t>(tasks[j])].acc[slot].flat();
          if (!detect_conflict(gi, gj)) continue;
          if (auto cos = conflict_cosine(gi, gj)) {
            result.records.push_back(
                {epoch, b, tasks[i], tasks[j], ConflictKind::Accuracy, *cos, false});
          }
        }
      }

      std::vector<int> active;
      for (int t : tasks) {
        if (lambdas[static_cast<std::size_t>(t)] > 0.0) active.push_back(t);
      }
      if (active.size() < 2) continue;
      if (!branched && !options.log_shared_fairness) continue;

      std::vector<Eigen::VectorXd> originals;
      for (int t : active) originals.push_back(grads.tasks[static_cast<std::size_t>(t)].fair[slot].flat());
      const std::size_t k = active.size();

      std::vector<std::vector<bool>> projected(k, std::vector<bool>(k, false));
      if (branched && options.correct) {
        const auto member_order = ordering(k, options.shuffle_order, rng);
        std::vector<std::vector<std::size_t>> opponent_order(k);
        for (std::size_t i : member_order) opponent_order[i] = ordering(k, options.shuffle_order, rng);
        auto outcome = correct_fairness_conflicts(originals, originals, member_order, opponent_order);
        for (std::size_t i = 0; i < k; ++i) {
          const bool touched = std::find(outcome.projected[i].begin(), outcome.projected[i].end(),
                                         true) != outcome.projected[i].end();
          if (!touched) continue;
          ++result.corrections;
          result.gradients.tasks[static_cast<std::size_t>(active[i])].fair[slot].assign_flat(
              outcome.corrected[i]);
        }
        projected = std::move(outcome.projected);
      }

      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
          if (!detect_conflict(originals[i], originals[j])) continue;
          if (auto cos = conflict_cosine(originals[i], originals[j])) {
            result.records.push_back({epoch, b, active[i], active[j], ConflictKind::Fairness, *cos,
                                      projected[i][j] || projected[j][i]});
          }
        }
      }
    }
  }
  return result;
}

}  // namespace fairbranch
