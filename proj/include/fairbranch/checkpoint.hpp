#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fairbranch/branching.hpp"
#include "fairbranch/data.hpp"
#include "fairbranch/network.hpp"

namespace fairbranch {

struct TrainReport;

struct Checkpoint {
  std::string mode;
  std::vector<int> task_ids;
  std::vector<std::string> task_names;
  Topology topology;
  FeatureScaler scaler;
  std::vector<BranchEvent> branch_events;
};

Checkpoint make_checkpoint(const TrainReport& report);

// Writes <dir>/checkpoint.json (manifest) and <dir>/checkpoint.bin: every
// layer in manifest order as little-endian float64, weights row-major
// (in_dim x out_dim) followed by the bias.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace fairbranch
