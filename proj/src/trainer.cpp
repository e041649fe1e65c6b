#include "fairbranch/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "fairbranch/errors.hpp"
#include "fairbranch/objectives.hpp"

namespace fairbranch {

namespace {

enum class Mode { FairBranch, Vanilla, Stl };

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::FairBranch: return "fairbranch";
    case Mode::Vanilla: return "vanilla";
    case Mode::Stl: return "stl";
  }
  return "?";
}

void check_compatible(const Dataset& train, const Dataset& val) {
  train.validate();
  val.validate(false);
  if (train.n_features() != val.n_features() || train.n_tasks() != val.n_tasks()) {
    throw ConfigError("training and validation sets differ in features or tasks");
  }
  if (val.n_samples() == 0) throw ConfigError("validation set is empty");
}

void evaluate_split(const Topology& top, const Dataset& d, std::vector<double>& acc,
                    std::vector<double>& fair) {
  const Eigen::MatrixXd p = predict_proba(top, d.features);
  acc.resize(static_cast<std::size_t>(d.n_tasks()));
  fair.resize(static_cast<std::size_t>(d.n_tasks()));
  for (Index t = 0; t < d.n_tasks(); ++t) {
    const Eigen::VectorXd pt = p.col(t);
    const Eigen::VectorXi yt = d.labels.col(t);
    acc[static_cast<std::size_t>(t)] = nll_loss(pt, yt);
    fair[static_cast<std::size_t>(t)] = robust_fairness_loss(pt, yt, d.protected_attr).value;
  }
}

TrainReport run(const Dataset& train_raw, const Dataset& val_raw, const TrainConfig& cfg, Mode mode,
                std::vector<int> task_ids) {
  cfg.validate();
  check_compatible(train_raw, val_raw);
  const int T = static_cast<int>(train_raw.n_tasks());

  TrainReport report;
  report.mode = mode_name(mode);
  report.task_ids = std::move(task_ids);
  report.task_names = train_raw.task_names;
  report.config = cfg;
  report.scaler = cfg.standardize ? FeatureScaler::fit(train_raw.features)
                                  : FeatureScaler::identity(train_raw.n_features());
  const Dataset train = report.scaler.apply(train_raw);
  const Dataset val = report.scaler.apply(val_raw);

  Topology top = init_model(train.n_features(), cfg.hidden_widths, T, cfg.seed,
                            cfg.common_head_init ? HeadInit::Common : HeadInit::Independent);
  TaskGrouping groups = singleton_groups(T);
  std::mt19937_64 correction_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  FbgradOptions fb_options;
  fb_options.correct = mode == Mode::FairBranch;
  fb_options.shuffle_order = cfg.fbgrad_shuffle;

  std::vector<double> val_totals;
  std::vector<double> lambdas(static_cast<std::size_t>(T), cfg.lambda_default);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_acc_loss.assign(static_cast<std::size_t>(T), 0.0);
    stats.train_fair_loss.assign(static_cast<std::size_t>(T), 0.0);

    const auto batches = batch_iter(train, cfg.batch_size, cfg.seed, epoch - 1);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      try {
        const Dataset batch = train.subset(batches[bi]);
        auto bp = per_task_gradients(top, batch);
        if (cfg.lambda_gate == LambdaGate::PerBatch || bi == 0) {
          for (int t = 0; t < T; ++t) {
            lambdas[static_cast<std::size_t>(t)] =
                intra_task_lambda(bp.gradients, t, cfg.lambda_default);
          }
        }
        const double weight = static_cast<double>(batch.n_samples()) /
                              static_cast<double>(train.n_samples());
        for (int t = 0; t < T; ++t) {
          stats.train_acc_loss[static_cast<std::size_t>(t)] += weight * bp.losses[static_cast<std::size_t>(t)].acc_loss;
          stats.train_fair_loss[static_cast<std::size_t>(t)] += weight * bp.losses[static_cast<std::size_t>(t)].fair_loss;
        }
        if (T >= 2) {
          auto fb = fbgrad_pass(top, bp.gradients, lambdas, epoch, correction_rng, fb_options);
          if (cfg.log_conflicts) {
            report.conflicts.insert(report.conflicts.end(), fb.records.begin(), fb.records.end());
          }
          apply_update(top, fb.gradients, lambdas, cfg.eta);
        } else {
          apply_update(top, bp.gradients, lambdas, cfg.eta);
        }
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) +
                           ": " + e.what());
      }
    }

    if (mode == Mode::FairBranch &&
        branch_condition(groups, top.current_depth, epoch, cfg.schedule)) {
      auto outcome = branching_step(top, groups, cfg.tau, epoch, cfg.schedule.branch_only_on_merge);
      if (outcome.applied) {
        top = std::move(outcome.topology);
        groups = std::move(outcome.groups);
        report.branch_events.push_back(std::move(outcome.event));
      }
    }
    top.validate();

    try {
      evaluate_split(top, val, stats.val_acc_loss, stats.val_fair_loss);
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(epoch) + ", validation: " + e.what());
    }
    double total = 0.0;
    for (int t = 0; t < T; ++t) {
      total += stats.val_acc_loss[static_cast<std::size_t>(t)] + stats.val_fair_loss[static_cast<std::size_t>(t)];
    }
    stats.val_total = total / static_cast<double>(T);
    if (!std::isfinite(stats.val_total)) {
      throw NumericError("epoch " + std::to_string(epoch) + ": validation loss is not finite");
    }
    val_totals.push_back(stats.val_total);
    report.history.push_back(std::move(stats));
    report.epochs_run = epoch;
    if (convergence_check(val_totals, cfg.convergence.rel_tol, cfg.convergence.patience)) {
      report.converged = true;
      break;
    }
  }

  report.topology = std::move(top);
  report.groups = std::move(groups);
  return report;
}

std::vector<int> all_tasks(const Dataset& d) {
  std::vector<int> ids(static_cast<std::size_t>(d.n_tasks()));
  for (std::size_t t = 0; t < ids.size(); ++t) ids[t] = static_cast<int>(t);
  return ids;
}

const char* gate_name(LambdaGate g) { return g == LambdaGate::PerBatch ? "per_batch" : "per_epoch"; }

}  // namespace

void TrainConfig::validate() const {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
  if (!(lambda_default >= 0.0)) throw ConfigError("lambda_default must be >= 0");
  if (convergence.patience < 1) throw ConfigError("patience must be >= 1");
  if (!(convergence.rel_tol >= 0.0)) throw ConfigError("rel_tol must be >= 0");
  if (hidden_widths.size() < 2) throw ConfigError("at least two hidden layers are required");
  schedule.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"hidden_widths", hidden_widths},
          {"eta", eta},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"tau", tau},
          {"lambda_default", lambda_default},
          {"lambda_gate", gate_name(lambda_gate)},
          {"schedule",
           {{"warm_up", schedule.warm_up},
            {"interval", schedule.interval},
            {"literal_mode", schedule.literal_mode},
            {"branch_only_on_merge", schedule.branch_only_on_merge}}},
          {"convergence", {{"rel_tol", convergence.rel_tol}, {"patience", convergence.patience}}},
          {"seed", seed},
          {"standardize", standardize},
          {"stl_fairness", stl_fairness},
          {"fbgrad_shuffle", fbgrad_shuffle},
          {"log_conflicts", log_conflicts},
          {"common_head_init", common_head_init}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& base) {
  static const std::vector<std::string> known = {
      "hidden_widths", "eta",  "batch_size",  "max_epochs",   "tau",
      "lambda_default", "lambda_gate", "schedule", "convergence", "seed",
      "standardize", "stl_fairness", "fbgrad_shuffle", "log_conflicts", "common_head_init"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  TrainConfig c = base;
  try {
    if (j.contains("hidden_widths")) c.hidden_widths = j["hidden_widths"].get<std::vector<Index>>();
    if (j.contains("eta")) c.eta = j["eta"].get<double>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<Index>();
    if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<int>();
    if (j.contains("tau")) c.tau = j["tau"].get<double>();
    if (j.contains("lambda_default")) c.lambda_default = j["lambda_default"].get<double>();
    if (j.contains("lambda_gate")) {
      const auto g = j["lambda_gate"].get<std::string>();
      if (g == "per_batch") c.lambda_gate = LambdaGate::PerBatch;
      else if (g == "per_epoch") c.lambda_gate = LambdaGate::PerEpoch;
      else throw ConfigError("lambda_gate must be per_batch or per_epoch");
    }
    if (j.contains("schedule")) {
      const auto& s = j["schedule"];
      c.schedule.warm_up = s.value("warm_up", c.schedule.warm_up);
      c.schedule.interval = s.value("interval", c.schedule.interval);
      c.schedule.literal_mode = s.value("literal_mode", c.schedule.literal_mode);
      c.schedule.branch_only_on_merge = s.value("branch_only_on_merge", c.schedule.branch_only_on_merge);
    }
    if (j.contains("convergence")) {
      const auto& s = j["convergence"];
      c.convergence.rel_tol = s.value("rel_tol", c.convergence.rel_tol);
      c.convergence.patience = s.value("patience", c.convergence.patience);
    }
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("standardize")) c.standardize = j["standardize"].get<bool>();
    if (j.contains("stl_fairness")) c.stl_fairness = j["stl_fairness"].get<bool>();
    if (j.contains("fbgrad_shuffle")) c.fbgrad_shuffle = j["fbgrad_shuffle"].get<bool>();
    if (j.contains("log_conflicts")) c.log_conflicts = j["log_conflicts"].get<bool>();
    if (j.contains("common_head_init")) c.common_head_init = j["common_head_init"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

nlohmann::json TrainReport::to_json() const {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& h : history) {
    hist.push_back({{"epoch", h.epoch},
                    {"train_acc_loss", h.train_acc_loss},
                    {"train_fair_loss", h.train_fair_loss},
                    {"val_acc_loss", h.val_acc_loss},
                    {"val_fair_loss", h.val_fair_loss},
                    {"val_total", h.val_total}});
  }
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : branch_events) events.push_back(e.to_json());
  nlohmann::json final_groups = nlohmann::json::array();
  for (const auto& g : groups) final_groups.push_back(g.to_json());
  Index accuracy_conflicts = 0, fairness_conflicts = 0, corrected = 0;
  for (const auto& r : conflicts) {
    (r.kind == ConflictKind::Accuracy ? accuracy_conflicts : fairness_conflicts) += 1;
    corrected += r.corrected ? 1 : 0;
  }
  return {{"mode", mode},
          {"task_ids", task_ids},
          {"task_names", task_names},
          {"config", config.to_json()},
          {"epochs_run", epochs_run},
          {"converged", converged},
          {"history", hist},
          {"branch_events", events},
          {"final_groups", final_groups},
          {"current_depth", topology.current_depth},
          {"parameter_count", topology.parameter_count()},
          {"relative_parameters",
           relative_parameters(topology, topology.input_dim, topology.widths, topology.num_tasks)},
          {"scaler", scaler.to_json()},
          {"conflict_counts",
           {{"accuracy", accuracy_conflicts}, {"fairness", fairness_conflicts}, {"corrected", corrected}}}};
}

TrainReport train_fairbranch(const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
  return run(train, val, cfg, Mode::FairBranch, all_tasks(train));
}

TrainReport train_vanilla_mtl(const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
  return run(train, val, cfg, Mode::Vanilla, all_tasks(train));
}

TrainReport train_stl(const Dataset& train, const Dataset& val, int task, const TrainConfig& cfg) {
  if (task < 0 || task >= train.n_tasks()) {
    throw ConfigError("task id " + std::to_string(task) + " out of range");
  }
  TrainConfig c = cfg;
  if (!cfg.stl_fairness) c.lambda_default = 0.0;
  return run(train.single_task(task), val.single_task(task), c, Mode::Stl, {task});
}

bool convergence_check(std::span<const double> history, double rel_tol, int patience) {
  if (history.empty()) return false;
  double best = history.front();
  int stale = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] < best - rel_tol * std::abs(best)) {
      best = history[i];
      stale = 0;
    } else {
      ++stale;
    }
  }
  return stale >= patience;
}

}  // namespace fairbranch
