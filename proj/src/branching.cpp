#include "fairbranch/branching.hpp"

#include <algorithm>

#include "fairbranch/errors.hpp"

namespace fairbranch {

void BranchSchedule::validate() const {
  if (warm_up < 0) throw ConfigError("schedule warm_up must be >= 0");
  if (interval < 1) throw ConfigError("schedule interval must be >= 1");
}

bool branch_condition(const TaskGrouping& groups, int current_depth, int epoch,
                      const BranchSchedule& schedule) {
  if (groups.size() < 2 || current_depth <= 1) return false;
  if (schedule.literal_mode) return true;
  if (epoch < std::max(1, schedule.warm_up)) return false;
  return (epoch - std::max(1, schedule.warm_up)) % schedule.interval == 0;
}

std::vector<Eigen::MatrixXd> group_parameters_above(const Topology& top, const TaskGrouping& groups) {
  const int above = top.current_depth + 1;
  std::vector<Eigen::MatrixXd> params;
  params.reserve(groups.size());
  for (const auto& g : groups) {
    if (above == top.depth() + 1) {
      if (g.members.size() != 1) {
        throw InternalError("a multi-task group cannot own a head");
      }
      params.push_back(top.heads[static_cast<std::size_t>(g.members.front())].weights);
      continue;
    }
    const auto& layers = top.hidden[static_cast<std::size_t>(above - 1)];
    auto it = std::find_if(layers.begin(), layers.end(),
                           [&](const Layer& l) { return l.tasks == g.members; });
    if (it == layers.end()) {
      throw InternalError("no branch layer at depth " + std::to_string(above) +
                          " matches a task group");
    }
    params.push_back(it->weights);
  }
  return params;
}

Topology form_branches(const Topology& top, const TaskGrouping& groups) {
  const int dc = top.current_depth;
  if (dc < 1) throw InternalError("no shared layer left to branch");
  if (groups.empty()) throw InternalError("cannot branch into zero groups");
  const auto slot = static_cast<std::size_t>(dc - 1);
  const Layer shared = top.hidden[slot].front();

  Topology next = top;
  next.hidden[slot].clear();
  for (const auto& g : groups) {
    Layer replica = shared;
    replica.tasks = g.members;
    next.hidden[slot].push_back(std::move(replica));
  }
  next.current_depth = dc - 1;
  try {
    next.validate();
  } catch (const InternalError& e) {
    throw InternalError(std::string("branch rewiring broke the topology: ") + e.what());
  }
  return next;
}

nlohmann::json BranchEvent::to_json() const {
  nlohmann::json aff = nlohmann::json::array();
  for (const auto& a : affinities) aff.push_back({{"a", a.first}, {"b", a.second}, {"value", a.value}});
  nlohmann::json mer = nlohmann::json::array();
  for (const auto& [a, b] : merges) mer.push_back({a, b});
  return {{"epoch", epoch}, {"d_c_before", depth_before}, {"groups", groups},
          {"affinities", aff}, {"merges", mer}};
}

BranchEvent BranchEvent::from_json(const nlohmann::json& j) {
  BranchEvent e;
  e.epoch = j.at("epoch").get<int>();
  e.depth_before = j.at("d_c_before").get<int>();
  e.groups = j.at("groups").get<std::vector<TaskSet>>();
  for (const auto& a : j.at("affinities")) {
    e.affinities.push_back({a.at("a").get<TaskSet>(), a.at("b").get<TaskSet>(),
                            a.at("value").get<double>()});
  }
  for (const auto& m : j.at("merges")) {
    e.merges.emplace_back(m.at(0).get<TaskSet>(), m.at(1).get<TaskSet>());
  }
  return e;
}

BranchOutcome branching_step(const Topology& top, const TaskGrouping& groups, double tau, int epoch,
                             bool branch_only_on_merge) {
  const auto params = group_parameters_above(top, groups);
  const auto table = affinity_set(groups, params, tau);
  const auto pairs = slhc_pair(groups, table);

  BranchOutcome out;
  out.event.epoch = epoch;
  out.event.depth_before = top.current_depth;
  for (const auto& a : table.entries) {
    out.event.affinities.push_back({groups[a.first].members, groups[a.second].members, a.value});
  }
  for (const auto& [a, b] : pairs) out.event.merges.emplace_back(groups[a].members, groups[b].members);

  if (pairs.empty() && branch_only_on_merge) {
    out.topology = top;
    out.groups = groups;
    return out;
  }
  out.groups = update_task_groups(groups, pairs, top.current_depth);
  for (const auto& g : out.groups) out.event.groups.push_back(g.members);
  out.topology = form_branches(top, out.groups);
  out.applied = true;
  return out;
}

}  // namespace fairbranch
