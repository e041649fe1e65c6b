#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "fairbranch/data.hpp"
#include "fairbranch/objectives.hpp"

namespace fairbranch {

// Sorted task ids served by a layer.
using TaskSet = std::vector<int>;

// Affine layer. Weights are in_dim x out_dim so the Gram matrix W W^T lives in
// the input space and is comparable across all layers at one depth.
struct Layer {
  Eigen::MatrixXd weights;
  Eigen::VectorXd bias;
  int depth = 1;
  TaskSet tasks;

  Index in_dim() const { return weights.rows(); }
  Index out_dim() const { return weights.cols(); }
  Index parameter_count() const { return weights.size() + bias.size(); }
};

// Multi-head network. hidden[b-1] holds the layers at depth b (1..d). Depths
// up to current_depth hold a single layer shared by every task; deeper depths
// hold branch layers whose task sets partition the tasks. heads[t] sits at d+1.
struct Topology {
  Index input_dim = 0;
  std::vector<Index> widths;
  int num_tasks = 0;
  int current_depth = 0;  // d_c
  std::vector<std::vector<Layer>> hidden;
  std::vector<Layer> heads;

  int depth() const { return static_cast<int>(widths.size()); }

  // Index of the layer serving `task` at hidden depth b (1-based).
  std::size_t layer_index(int task, int b) const;
  const Layer& layer_on_path(int task, int b) const;

  // Index at depth b-1 of the layer feeding layer k at depth b (b >= 2).
  std::size_t parent_index(int b, std::size_t k) const;

  // Throws InternalError when a structural invariant is broken.
  void validate() const;

  Index parameter_count() const;
};

// Common gives every head the same initial weights.
enum class HeadInit { Independent, Common };

Topology init_model(Index input_dim, const std::vector<Index>& hidden_widths, int num_tasks,
                    std::uint64_t seed, HeadInit head_init = HeadInit::Independent);

// Activations kept for backprop. activations[b][k] is the post-ReLU output of
// layer k at depth b; activations[0][0] is the input batch.
struct ForwardCache {
  std::vector<std::vector<Eigen::MatrixXd>> activations;
  Eigen::MatrixXd probabilities;  // n x T, clamped to [1e-7, 1 - 1e-7]
};

inline constexpr double kProbabilityClamp = 1e-7;

ForwardCache forward(const Topology& top, const Eigen::MatrixXd& x);
Eigen::MatrixXd predict_proba(const Topology& top, const Eigen::MatrixXd& x);

struct ParamGrad {
  Eigen::MatrixXd weights;
  Eigen::VectorXd bias;

  // weights (column-major) followed by bias.
  Eigen::VectorXd flat() const;
  void assign_flat(const Eigen::Ref<const Eigen::VectorXd>& v);
};

// acc[b-1] / fair[b-1] belong to the layer on the task's path at depth b;
// index d is the task head. Fairness gradients are unscaled by lambda.
struct TaskGradients {
  std::vector<ParamGrad> acc;
  std::vector<ParamGrad> fair;
};

struct GradientSet {
  std::vector<TaskGradients> tasks;
};

struct BackpropResult {
  GradientSet gradients;
  std::vector<BatchLosses> losses;  // per task, on this batch
};

// Backpropagates each task's accuracy loss and robust fairness loss through
// the task's own path.
BackpropResult per_task_gradients(const Topology& top, const Dataset& batch);

// theta <- theta - eta * sum over tasks on the path of (acc + lambda_t * fair).
void apply_update(Topology& top, const GradientSet& grads, const std::vector<double>& lambdas,
                  double eta);

Index parameter_count(const Topology& top);

// Parameter count of one single-task network with the same trunk.
Index stl_parameter_count(Index input_dim, const std::vector<Index>& hidden_widths);

// parameter_count(top) / (T * stl_parameter_count).
double relative_parameters(const Topology& top, Index input_dim,
                           const std::vector<Index>& hidden_widths, int num_tasks);

}  // namespace fairbranch
