#include "fairbranch/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "fairbranch/errors.hpp"

namespace fairbranch {

namespace {

bool serves(const Layer& layer, int task) {
  return std::binary_search(layer.tasks.begin(), layer.tasks.end(), task);
}

Index expected_in_dim(const Topology& top, int b) {
  return b == 1 ? top.input_dim : top.widths[static_cast<std::size_t>(b - 2)];
}

std::string depth_tag(int b) { return "depth " + std::to_string(b); }

std::vector<ParamGrad> backprop_path(const Topology& top, const ForwardCache& cache,
                                     const std::vector<std::size_t>& path, int task,
                                     const Eigen::VectorXd& dz) {
  const int d = top.depth();
  std::vector<ParamGrad> grads(static_cast<std::size_t>(d + 1));
  const auto& head = top.heads[static_cast<std::size_t>(task)];
  const Eigen::MatrixXd& top_act = cache.activations[static_cast<std::size_t>(d)][path[static_cast<std::size_t>(d)]];
  auto& hg = grads[static_cast<std::size_t>(d)];
  hg.weights = top_act.transpose() * dz;
  hg.bias = Eigen::VectorXd::Constant(1, dz.sum());

  Eigen::MatrixXd d_act = dz * head.weights.transpose();
  for (int b = d; b >= 1; --b) {
    const auto ub = static_cast<std::size_t>(b);
    const auto& layer = top.hidden[ub - 1][path[ub]];
    const Eigen::MatrixXd& act = cache.activations[ub][path[ub]];
    const Eigen::MatrixXd d_pre = (d_act.array() * (act.array() > 0.0).cast<double>()).matrix();
    const Eigen::MatrixXd& prev = cache.activations[ub - 1][b == 1 ? 0 : path[ub - 1]];
    auto& g = grads[ub - 1];
    g.weights = prev.transpose() * d_pre;
    g.bias = d_pre.colwise().sum().transpose();
    if (b > 1) d_act = d_pre * layer.weights.transpose();
  }
  return grads;
}

}  // namespace

std::size_t Topology::layer_index(int task, int b) const {
  const auto& layers = hidden.at(static_cast<std::size_t>(b - 1));
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (serves(layers[k], task)) return k;
  }
  throw InternalError("task " + std::to_string(task) + " has no layer at " + depth_tag(b));
}

const Layer& Topology::layer_on_path(int task, int b) const {
  return hidden[static_cast<std::size_t>(b - 1)][layer_index(task, b)];
}

std::size_t Topology::parent_index(int b, std::size_t k) const {
  const auto& layer = hidden.at(static_cast<std::size_t>(b - 1)).at(k);
  if (layer.tasks.empty()) throw InternalError("layer with empty task set at " + depth_tag(b));
  return layer_index(layer.tasks.front(), b - 1);
}

void Topology::validate() const {
  const int d = depth();
  if (d < 1 || static_cast<int>(hidden.size()) != d) {
    throw InternalError("hidden layer stack does not match widths");
  }
  if (current_depth < 0 || current_depth > d) {
    throw InternalError("current depth " + std::to_string(current_depth) + " outside [0, d]");
  }
  if (static_cast<int>(heads.size()) != num_tasks || num_tasks < 1) {
    throw InternalError("expected one head per task");
  }
  for (int b = 1; b <= d; ++b) {
    const auto& layers = hidden[static_cast<std::size_t>(b - 1)];
    if (layers.empty()) throw InternalError("no layers at " + depth_tag(b));
    if (b <= current_depth && layers.size() != 1) {
      throw InternalError("shared " + depth_tag(b) + " holds " + std::to_string(layers.size()) +
                          " layers");
    }
    std::vector<int> owner(static_cast<std::size_t>(num_tasks), -1);
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& layer = layers[k];
      if (layer.depth != b) throw InternalError("layer depth tag mismatch at " + depth_tag(b));
      if (layer.in_dim() != expected_in_dim(*this, b) ||
          layer.out_dim() != widths[static_cast<std::size_t>(b - 1)] ||
          layer.bias.size() != layer.out_dim()) {
        throw InternalError("layer shape mismatch at " + depth_tag(b));
      }
      if (!layer.weights.allFinite() || !layer.bias.allFinite()) {
        throw InternalError("non-finite parameter at " + depth_tag(b));
      }
      if (layer.tasks.empty() || !std::is_sorted(layer.tasks.begin(), layer.tasks.end())) {
        throw InternalError("task set at " + depth_tag(b) + " is empty or unsorted");
      }
      for (int t : layer.tasks) {
        if (t < 0 || t >= num_tasks) throw InternalError("task id out of range at " + depth_tag(b));
        if (owner[static_cast<std::size_t>(t)] != -1) {
          throw InternalError("task " + std::to_string(t) + " served twice at " + depth_tag(b));
        }
        owner[static_cast<std::size_t>(t)] = static_cast<int>(k);
      }
      if (b > 1) {
        const auto& parent = hidden[static_cast<std::size_t>(b - 2)][parent_index(b, k)];
        if (!std::includes(parent.tasks.begin(), parent.tasks.end(), layer.tasks.begin(),
                           layer.tasks.end())) {
          throw InternalError("path inconsistency at " + depth_tag(b));
        }
      }
    }
    if (std::find(owner.begin(), owner.end(), -1) != owner.end()) {
      throw InternalError("task sets at " + depth_tag(b) + " do not cover every task");
    }
  }
  for (int t = 0; t < num_tasks; ++t) {
    const auto& head = heads[static_cast<std::size_t>(t)];
    if (head.tasks != TaskSet{t} || head.depth != d + 1 ||
        head.in_dim() != widths.back() || head.out_dim() != 1 || head.bias.size() != 1) {
      throw InternalError("malformed head for task " + std::to_string(t));
    }
    if (!head.weights.allFinite() || !head.bias.allFinite()) {
      throw InternalError("non-finite head parameter for task " + std::to_string(t));
    }
  }
}

Index Topology::parameter_count() const {
  Index total = 0;
  for (const auto& layers : hidden)
    for (const auto& layer : layers) total += layer.parameter_count();
  for (const auto& head : heads) total += head.parameter_count();
  return total;
}

Topology init_model(Index input_dim, const std::vector<Index>& hidden_widths, int num_tasks,
                    std::uint64_t seed, HeadInit head_init) {
  if (input_dim < 1) throw ConfigError("input dimension must be >= 1");
  if (hidden_widths.size() < 2) {
    throw ConfigError("at least two hidden layers are required for branching");
  }
  for (auto w : hidden_widths) {
    if (w < 1) throw ConfigError("hidden widths must be >= 1");
  }
  if (num_tasks < 1) throw ConfigError("at least one task is required");

  Topology top;
  top.input_dim = input_dim;
  top.widths = hidden_widths;
  top.num_tasks = num_tasks;
  top.current_depth = static_cast<int>(hidden_widths.size());

  std::mt19937_64 rng(seed);
  auto he_uniform = [&](Index fan_in, Index fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Eigen::MatrixXd w(fan_in, fan_out);
    for (Index j = 0; j < fan_out; ++j)
      for (Index i = 0; i < fan_in; ++i) w(i, j) = dist(rng);
    return w;
  };

  TaskSet all(static_cast<std::size_t>(num_tasks));
  for (int t = 0; t < num_tasks; ++t) all[static_cast<std::size_t>(t)] = t;

  Index in = input_dim;
  for (std::size_t b = 0; b < hidden_widths.size(); ++b) {
    Layer layer;
    layer.weights = he_uniform(in, hidden_widths[b]);
    layer.bias = Eigen::VectorXd::Zero(hidden_widths[b]);
    layer.depth = static_cast<int>(b + 1);
    layer.tasks = all;
    top.hidden.push_back({std::move(layer)});
    in = hidden_widths[b];
  }
  const Eigen::MatrixXd common = head_init == HeadInit::Common ? he_uniform(in, 1) : Eigen::MatrixXd();
  for (int t = 0; t < num_tasks; ++t) {
    Layer head;
    head.weights = head_init == HeadInit::Common ? common : he_uniform(in, 1);
    head.bias = Eigen::VectorXd::Zero(1);
    head.depth = top.depth() + 1;
    head.tasks = {t};
    top.heads.push_back(std::move(head));
  }
  top.validate();
  return top;
}

ForwardCache forward(const Topology& top, const Eigen::MatrixXd& x) {
  if (x.cols() != top.input_dim) {
    throw ShapeError("batch has " + std::to_string(x.cols()) + " columns, model expects " +
                     std::to_string(top.input_dim));
  }
  const int d = top.depth();
  ForwardCache cache;
  cache.activations.resize(static_cast<std::size_t>(d + 1));
  cache.activations[0].push_back(x);
  for (int b = 1; b <= d; ++b) {
    const auto ub = static_cast<std::size_t>(b);
    const auto& layers = top.hidden[ub - 1];
    auto& out = cache.activations[ub];
    out.reserve(layers.size());
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& prev = cache.activations[ub - 1][b == 1 ? 0 : top.parent_index(b, k)];
      Eigen::MatrixXd pre = prev * layers[k].weights;
      pre.rowwise() += layers[k].bias.transpose();
      if (!pre.allFinite()) throw NumericError("non-finite activation at " + depth_tag(b));
      out.push_back(pre.cwiseMax(0.0));
    }
  }
  cache.probabilities.resize(x.rows(), top.num_tasks);
  for (int t = 0; t < top.num_tasks; ++t) {
    const auto& head = top.heads[static_cast<std::size_t>(t)];
    const auto& act = cache.activations[static_cast<std::size_t>(d)][top.layer_index(t, d)];
    Eigen::VectorXd z = act * head.weights.col(0);
    z.array() += head.bias(0);
    if (!z.allFinite()) throw NumericError("non-finite activation at " + depth_tag(d + 1));
    cache.probabilities.col(t) = (1.0 / (1.0 + (-z.array()).exp()))
                                     .cwiseMax(kProbabilityClamp)
                                     .cwiseMin(1.0 - kProbabilityClamp)
                                     .matrix();
  }
  return cache;
}

Eigen::MatrixXd predict_proba(const Topology& top, const Eigen::MatrixXd& x) {
  return forward(top, x).probabilities;
}

Eigen::VectorXd ParamGrad::flat() const {
  Eigen::VectorXd v(weights.size() + bias.size());
  v.head(weights.size()) = Eigen::Map<const Eigen::VectorXd>(weights.data(), weights.size());
  v.tail(bias.size()) = bias;
  return v;
}

void ParamGrad::assign_flat(const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (v.size() != weights.size() + bias.size()) throw InternalError("flat gradient size mismatch");
  Eigen::Map<Eigen::VectorXd>(weights.data(), weights.size()) = v.head(weights.size());
  bias = v.tail(bias.size());
}

BackpropResult per_task_gradients(const Topology& top, const Dataset& batch) {
  if (batch.n_samples() == 0) throw ConfigError("empty batch");
  if (batch.n_tasks() != top.num_tasks) throw ShapeError("batch task count differs from model");
  const ForwardCache cache = forward(top, batch.features);
  const int d = top.depth();

  BackpropResult result;
  result.gradients.tasks.resize(static_cast<std::size_t>(top.num_tasks));
  result.losses.resize(static_cast<std::size_t>(top.num_tasks));
  for (int t = 0; t < top.num_tasks; ++t) {
    std::vector<std::size_t> path(static_cast<std::size_t>(d + 1), 0);
    for (int b = 1; b <= d; ++b) path[static_cast<std::size_t>(b)] = top.layer_index(t, b);

    const Eigen::VectorXd p = cache.probabilities.col(t);
    const Eigen::VectorXi y = batch.labels.col(t);
    const auto fair = robust_fairness_loss(p, y, batch.protected_attr);
    auto& losses = result.losses[static_cast<std::size_t>(t)];
    losses.acc_loss = nll_loss(p, y);
    losses.fair_loss = fair.value;
    losses.cells = fair.cells;

    const auto selection = fairness_backprop_selector(fair.cells);
    auto& tg = result.gradients.tasks[static_cast<std::size_t>(t)];
    tg.acc = backprop_path(top, cache, path, t, accuracy_logit_gradient(p, y));
    tg.fair = backprop_path(top, cache, path, t,
                            fairness_logit_gradient(p, y, batch.protected_attr, selection));
  }
  return result;
}

void apply_update(Topology& top, const GradientSet& grads, const std::vector<double>& lambdas,
                  double eta) {
  const int d = top.depth();
  if (static_cast<int>(grads.tasks.size()) != top.num_tasks ||
      static_cast<int>(lambdas.size()) != top.num_tasks) {
    throw InternalError("gradient set or lambdas do not cover every task");
  }
  for (const auto& tg : grads.tasks) {
    if (static_cast<int>(tg.acc.size()) != d + 1 || static_cast<int>(tg.fair.size()) != d + 1) {
      throw InternalError("gradient path length does not match the topology");
    }
  }

  auto step = [&](Layer& layer, int b) {
    Eigen::MatrixXd dw = Eigen::MatrixXd::Zero(layer.weights.rows(), layer.weights.cols());
    Eigen::VectorXd db = Eigen::VectorXd::Zero(layer.bias.size());
    for (int t : layer.tasks) {
      const auto& tg = grads.tasks[static_cast<std::size_t>(t)];
      const auto& acc = tg.acc[static_cast<std::size_t>(b - 1)];
      const auto& fair = tg.fair[static_cast<std::size_t>(b - 1)];
      if (acc.weights.rows() != dw.rows() || acc.weights.cols() != dw.cols() ||
          fair.weights.rows() != dw.rows() || fair.weights.cols() != dw.cols() ||
          acc.bias.size() != db.size() || fair.bias.size() != db.size()) {
        throw InternalError("gradient shape mismatch at " + depth_tag(b));
      }
      const double lambda = lambdas[static_cast<std::size_t>(t)];
      dw += acc.weights + lambda * fair.weights;
      db += acc.bias + lambda * fair.bias;
    }
    layer.weights -= eta * dw;
    layer.bias -= eta * db;
  };

  for (int b = 1; b <= d; ++b) {
    for (auto& layer : top.hidden[static_cast<std::size_t>(b - 1)]) step(layer, b);
  }
  for (auto& head : top.heads) step(head, d + 1);
}

Index parameter_count(const Topology& top) { return top.parameter_count(); }

Index stl_parameter_count(Index input_dim, const std::vector<Index>& hidden_widths) {
  Index total = 0;
  Index in = input_dim;
  for (auto w : hidden_widths) {
    total += in * w + w;
    in = w;
  }
  return total + in + 1;
}

double relative_parameters(const Topology& top, Index input_dim,
                           const std::vector<Index>& hidden_widths, int num_tasks) {
  const auto stl = stl_parameter_count(input_dim, hidden_widths);
  return static_cast<double>(top.parameter_count()) /
         (static_cast<double>(num_tasks) * static_cast<double>(stl));
}

}  // namespace fairbranch
