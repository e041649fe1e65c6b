#pragma once

#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fairbranch/grouping.hpp"
#include "fairbranch/network.hpp"

namespace fairbranch {

struct BranchSchedule {
  int warm_up = 5;    // first epoch at which an event may fire
  int interval = 5;   // epochs between events after warm-up
  bool literal_mode = false;  // admit every epoch
  bool branch_only_on_merge = false;

  void validate() const;
};

// epoch counts completed epochs (1-based).
bool branch_condition(const TaskGrouping& groups, int current_depth, int epoch,
                      const BranchSchedule& schedule);

// The weight matrix each group owns directly above the current shared depth:
// the task heads before the first event, branch layers afterwards.
std::vector<Eigen::MatrixXd> group_parameters_above(const Topology& top, const TaskGrouping& groups);

// Replaces the shared layer at the current depth by one replica per group and
// decrements the current depth. Outputs are unchanged by construction. The
// trainer stops at depth 1; branching depth 1 as well gives fully separate towers.
Topology form_branches(const Topology& top, const TaskGrouping& groups);

struct AffinityRecord {
  TaskSet first;
  TaskSet second;
  double value = 0.0;
};

struct BranchEvent {
  int epoch = 0;
  int depth_before = 0;
  std::vector<TaskSet> groups;           // grouping after clustering
  std::vector<AffinityRecord> affinities;  // entries that passed tau
  std::vector<std::pair<TaskSet, TaskSet>> merges;

  nlohmann::json to_json() const;
  static BranchEvent from_json(const nlohmann::json& j);
};

struct BranchOutcome {
  bool applied = false;
  Topology topology;
  TaskGrouping groups;
  BranchEvent event;
};

// Affinity, clustering, regrouping and branch formation for one event. When
// branch_only_on_merge is set and no pair clears tau, nothing changes.
BranchOutcome branching_step(const Topology& top, const TaskGrouping& groups, double tau, int epoch,
                             bool branch_only_on_merge);

}  // namespace fairbranch
