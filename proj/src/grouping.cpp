#include "fairbranch/grouping.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "fairbranch/errors.hpp"

namespace fairbranch {

nlohmann::json TaskGroup::to_json() const {
  nlohmann::json j = {{"members", members}};
  if (formed_at_depth) j["formed_at_depth"] = *formed_at_depth;
  if (!children.empty()) {
    j["children"] = nlohmann::json::array();
    for (const auto& c : children) j["children"].push_back(c.to_json());
  }
  return j;
}

TaskGrouping singleton_groups(int num_tasks) {
  TaskGrouping groups;
  for (int t = 0; t < num_tasks; ++t) groups.push_back(TaskGroup{{t}, {}, std::nullopt});
  return groups;
}

Eigen::MatrixXd center_gram(const Eigen::MatrixXd& k) {
  if (k.rows() != k.cols()) throw ShapeError("center_gram expects a square matrix");
  const auto n = k.rows();
  if (n == 0) return k;
  const Eigen::MatrixXd h = Eigen::MatrixXd::Identity(n, n) -
                            Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
  return h * k * h;
}

double linear_cka(const Eigen::MatrixXd& theta_a, const Eigen::MatrixXd& theta_b) {
  if (theta_a.rows() != theta_b.rows()) {
    throw ShapeError("linear_cka: row dimensions differ (" + std::to_string(theta_a.rows()) +
                     " vs " + std::to_string(theta_b.rows()) + ")");
  }
  const Eigen::MatrixXd ka = center_gram(theta_a * theta_a.transpose());
  const Eigen::MatrixXd kb = center_gram(theta_b * theta_b.transpose());
  // tr(A B) for symmetric A, B is the elementwise inner product.
  const double norm_a = std::sqrt(ka.cwiseProduct(ka).sum());
  const double norm_b = std::sqrt(kb.cwiseProduct(kb).sum());
  if (norm_a < 1e-12 || norm_b < 1e-12) return 0.0;
  const double v = ka.cwiseProduct(kb).sum() / (norm_a * norm_b);
  return std::clamp(v, 0.0, 1.0);
}

AffinityTable affinity_set(const TaskGrouping& groups, std::span<const Eigen::MatrixXd> params,
                           double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
  if (params.size() != groups.size()) {
    throw InternalError("affinity_set: need exactly one parameter matrix per group");
  }
  AffinityTable table;
  table.tau = tau;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    for (std::size_t j = i + 1; j < groups.size(); ++j) {
      const double v = linear_cka(params[i], params[j]);
      if (v >= tau) table.entries.push_back({i, j, v});
    }
  }
  return table;
}

std::vector<GroupPair> slhc_pair(const TaskGrouping& groups, const AffinityTable& table) {
  auto key = [&](const Affinity& a) {
    const int x = groups.at(a.first).min_task(), y = groups.at(a.second).min_task();
    return std::make_pair(std::min(x, y), std::max(x, y));
  };
  std::vector<Affinity> remaining = table.entries;
  std::vector<GroupPair> pairs;
  while (!remaining.empty()) {
    auto best = remaining.begin();
    for (auto it = std::next(remaining.begin()); it != remaining.end(); ++it) {
      if (it->value > best->value || (it->value == best->value && key(*it) < key(*best))) best = it;
    }
    const std::size_t a = std::min(best->first, best->second);
    const std::size_t b = std::max(best->first, best->second);
    pairs.emplace_back(a, b);
    std::erase_if(remaining, [&](const Affinity& e) {
      return e.first == a || e.first == b || e.second == a || e.second == b;
    });
  }
  return pairs;
}

TaskGrouping update_task_groups(const TaskGrouping& groups, const std::vector<GroupPair>& pairs,
                                std::optional<int> formed_at_depth) {
  std::vector<bool> used(groups.size(), false);
  for (const auto& [a, b] : pairs) {
    if (a >= groups.size() || b >= groups.size() || a == b || used[a] || used[b]) {
      throw InternalError("update_task_groups: pairs do not form a matching");
    }
    used[a] = used[b] = true;
  }
  TaskGrouping out;
  for (const auto& [a, b] : pairs) {
    TaskGroup merged;
    merged.members = groups[a].members;
    merged.members.insert(merged.members.end(), groups[b].members.begin(), groups[b].members.end());
    std::sort(merged.members.begin(), merged.members.end());
    merged.children = {groups[a], groups[b]};
    if (merged.children[1].min_task() < merged.children[0].min_task()) {
      std::swap(merged.children[0], merged.children[1]);
    }
    merged.formed_at_depth = formed_at_depth;
    out.push_back(std::move(merged));
  }
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (!used[i]) out.push_back(groups[i]);
  }
  std::sort(out.begin(), out.end(),
            [](const TaskGroup& x, const TaskGroup& y) { return x.min_task() < y.min_task(); });
  return out;
}

}  // namespace fairbranch
