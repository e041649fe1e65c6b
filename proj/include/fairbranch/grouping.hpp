#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fairbranch/network.hpp"

namespace fairbranch {

struct TaskGroup {
  TaskSet members;                  // sorted, nonempty
  std::vector<TaskGroup> children;  // empty or the two merged groups
  std::optional<int> formed_at_depth;

  int min_task() const { return members.front(); }
  nlohmann::json to_json() const;
};

// Pairwise disjoint groups covering every task, ordered by smallest member.
using TaskGrouping = std::vector<TaskGroup>;

TaskGrouping singleton_groups(int num_tasks);

// H K H with H = I - 11^T/n.
Eigen::MatrixXd center_gram(const Eigen::MatrixXd& k);

// Linear CKA of the Gram matrices theta theta^T. Both inputs share their row
// dimension. Returns 0 when either centered Gram is (numerically) zero.
double linear_cka(const Eigen::MatrixXd& theta_a, const Eigen::MatrixXd& theta_b);

struct Affinity {
  std::size_t first = 0;  // indices into the grouping, first < second
  std::size_t second = 0;
  double value = 0.0;
};

struct AffinityTable {
  std::vector<Affinity> entries;
  double tau = 0.7;
};

// Pairs whose similarity is at least tau. params[i] belongs to grouping[i].
AffinityTable affinity_set(const TaskGrouping& groups, std::span<const Eigen::MatrixXd> params,
                           double tau);

using GroupPair = std::pair<std::size_t, std::size_t>;

// Greedy single-linkage matching: take the best remaining pair, drop every
// entry touching either member, repeat. Equal values resolve to the pair with
// the lexicographically smallest (min task, min task) key.
std::vector<GroupPair> slhc_pair(const TaskGrouping& groups, const AffinityTable& table);

// Each pair becomes one group with the pair as children; the rest carry over.
TaskGrouping update_task_groups(const TaskGrouping& groups, const std::vector<GroupPair>& pairs,
                                std::optional<int> formed_at_depth = std::nullopt);

}  // namespace fairbranch
