#pragma once

#include <algorithm>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fairbranch/branching.hpp"
#include "fairbranch/data.hpp"
#include "fairbranch/network.hpp"
#include "fairbranch/objectives.hpp"

namespace fbtest {

using namespace fairbranch;

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::path(FAIRBRANCH_TEST_TMP) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Random labels and groups with every (class, group) cell populated.
inline Dataset random_batch(std::mt19937_64& rng, Index n, Index m, int T) {
  std::normal_distribution<double> normal;
  std::bernoulli_distribution coin(0.5);
  Dataset d;
  d.features.resize(n, m);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j) d.features(i, j) = normal(rng);
  d.protected_attr.resize(n);
  d.labels.resize(n, T);
  for (Index i = 0; i < n; ++i) {
    d.protected_attr(i) = coin(rng) ? 1 : 0;
    for (int t = 0; t < T; ++t) d.labels(i, t) = coin(rng) ? 1 : 0;
  }
  for (int k = 0; k < 4 && k < n; ++k) {
    d.protected_attr(k) = k & 1;
    for (int t = 0; t < T; ++t) d.labels(k, t) = k >> 1;
  }
  for (Index j = 0; j < m; ++j) d.feature_names.push_back("f" + std::to_string(j));
  for (int t = 0; t < T; ++t) d.task_names.push_back("task_" + std::to_string(t));
  return d;
}

// Random grouping of the tasks into nonempty blocks, consistent with a
// coarser grouping (each block lies inside one block of `within`).
inline TaskGrouping refine_grouping(std::mt19937_64& rng, const TaskGrouping& within) {
  TaskGrouping out;
  for (const auto& g : within) {
    TaskSet members = g.members;
    std::shuffle(members.begin(), members.end(), rng);
    std::uniform_int_distribution<std::size_t> cut(1, members.size());
    const std::size_t k = cut(rng);
    TaskGroup a, b;
    a.members.assign(members.begin(), members.begin() + static_cast<long>(k));
    b.members.assign(members.begin() + static_cast<long>(k), members.end());
    for (auto* part : {&a, &b}) {
      if (part->members.empty()) continue;
      std::sort(part->members.begin(), part->members.end());
      out.push_back(*part);
    }
  }
  std::sort(out.begin(), out.end(),
            [](const TaskGroup& x, const TaskGroup& y) { return x.min_task() < y.min_task(); });
  return out;
}

// Adds noise to every parameter so replicas stop being identical.
inline void jitter(Topology& top, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> normal(0.0, scale);
  auto shake = [&](Layer& l) {
    for (Index i = 0; i < l.weights.size(); ++i) l.weights.data()[i] += normal(rng);
    for (Index i = 0; i < l.bias.size(); ++i) l.bias(i) += normal(rng);
  };
  for (auto& depth : top.hidden)
    for (auto& l : depth) shake(l);
  for (auto& h : top.heads) shake(h);
}

// Random topology after `events` branch events with nested groupings.
inline Topology random_topology(std::mt19937_64& rng, Index m, std::vector<Index> widths, int T,
                                int events) {
  Topology top = init_model(m, widths, T, rng());
  TaskGrouping groups;
  TaskGroup all;
  for (int t = 0; t < T; ++t) all.members.push_back(t);
  groups.push_back(all);
  // Groups at shallower depths must be unions of the deeper ones, so build the
  // chain from the shallowest event down and apply it deepest first.
  std::vector<TaskGrouping> chain;
  for (int e = 0; e < events; ++e) {
    groups = refine_grouping(rng, groups);
    chain.push_back(groups);
  }
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) top = form_branches(top, *it);
  jitter(top, rng, 0.05);
  return top;
}

inline Layer& layer_at(Topology& top, int task, int b) {
  if (b == top.depth() + 1) return top.heads[static_cast<std::size_t>(task)];
  return top.hidden[static_cast<std::size_t>(b - 1)][top.layer_index(task, b)];
}

inline double task_acc_loss(const Topology& top, const Dataset& d, int t) {
  const Eigen::MatrixXd p = predict_proba(top, d.features);
  return nll_loss(p.col(t), d.labels.col(t));
}

inline double task_fair_loss(const Topology& top, const Dataset& d, int t) {
  const Eigen::MatrixXd p = predict_proba(top, d.features);
  return robust_fairness_loss(p.col(t), d.labels.col(t), d.protected_attr).value;
}

// Pattern of active ReLUs plus the fairness subgroup selection of task t. A
// finite difference is only meaningful when this does not change across it.
inline std::vector<int> kink_signature(const Topology& top, const Dataset& d, int t) {
  const auto cache = forward(top, d.features);
  std::vector<int> sig;
  for (std::size_t b = 1; b < cache.activations.size(); ++b)
    for (const auto& a : cache.activations[b])
      for (Index i = 0; i < a.size(); ++i) sig.push_back(a.data()[i] > 0.0 ? 1 : 0);
  const auto fair = robust_fairness_loss(cache.probabilities.col(t), d.labels.col(t), d.protected_attr);
  const auto sel = fairness_backprop_selector(fair.cells);
  sig.push_back(sel.group[0]);
  sig.push_back(sel.group[1]);
  for (Index i = 0; i < cache.probabilities.size(); ++i) {
    const double p = cache.probabilities.data()[i];
    sig.push_back(p <= kProbabilityClamp || p >= 1.0 - kProbabilityClamp ? 1 : 0);
  }
  return sig;
}

// Relative error with a floor for partials that are numerically zero.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
}

struct GradCheck {
  int checked = 0;
  int skipped = 0;
  double worst = 0.0;
};

// Central differences for every parameter on task t's path, for L_t and F_t.
inline GradCheck check_gradients(Topology top, const Dataset& d, double h = 1e-5) {
  GradCheck out;
  const auto analytic = per_task_gradients(top, d).gradients;
  for (int t = 0; t < top.num_tasks; ++t) {
    const auto& tg = analytic.tasks[static_cast<std::size_t>(t)];
    for (int b = 1; b <= top.depth() + 1; ++b) {
      Layer& layer = layer_at(top, t, b);
      const auto& ga = tg.acc[static_cast<std::size_t>(b - 1)];
      const auto& gf = tg.fair[static_cast<std::size_t>(b - 1)];
      auto probe = [&](double& theta, double acc_partial, double fair_partial) {
        const double keep = theta;
        theta = keep + h;
        const auto sig_plus = kink_signature(top, d, t);
        const double lp = task_acc_loss(top, d, t), fp = task_fair_loss(top, d, t);
        theta = keep - h;
        const auto sig_minus = kink_signature(top, d, t);
        const double lm = task_acc_loss(top, d, t), fm = task_fair_loss(top, d, t);
        theta = keep;
        if (sig_plus != sig_minus) {
          ++out.skipped;
          return;
        }
        out.worst = std::max(out.worst, relative_error(acc_partial, (lp - lm) / (2 * h)));
        out.worst = std::max(out.worst, relative_error(fair_partial, (fp - fm) / (2 * h)));
        out.checked += 2;
      };
      for (Index i = 0; i < layer.weights.rows(); ++i)
        for (Index j = 0; j < layer.weights.cols(); ++j)
          probe(layer.weights(i, j), ga.weights(i, j), gf.weights(i, j));
      for (Index i = 0; i < layer.bias.size(); ++i) probe(layer.bias(i), ga.bias(i), gf.bias(i));
    }
  }
  return out;
}

}  // namespace fbtest
