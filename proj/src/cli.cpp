#include "fairbranch/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fairbranch/checkpoint.hpp"
#include "fairbranch/data.hpp"
#include "fairbranch/errors.hpp"
#include "fairbranch/metrics.hpp"
#include "fairbranch/trainer.hpp"

namespace fairbranch::cli {

namespace fs = std::filesystem;

namespace {

// Raised for bad flags or flag combinations; maps to exit code 2.
class UsageError : public Error {
  using Error::Error;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::string> csv_header(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return split_list(line);
}

std::vector<std::string> resolve_task_columns(const fs::path& data, const std::string& explicit_list,
                                              const std::string& prefix) {
  if (!explicit_list.empty()) return split_list(explicit_list);
  std::vector<std::string> cols;
  for (const auto& c : csv_header(data)) {
    if (c.rfind(prefix, 0) == 0) cols.push_back(c);
  }
  if (cols.empty()) throw UsageError("no task columns with prefix '" + prefix + "' in " + data.string());
  return cols;
}

void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw UsageError("output directory " + dir.string() + " is not empty (use --force)");
  }
  fs::create_directories(dir);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SchemaError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json invocation(const std::string& command, const std::vector<std::string>& args) {
  return {{"command", command}, {"args", args}};
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct TrainFlags {
  std::string data;
  std::string protected_column = "protected";
  std::string task_columns;
  std::string task_prefix = "task_";
  std::string config_path;
  std::string widths;
  std::optional<double> tau, eta, lambda;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  double train_fraction = 0.7;
  bool force = false;
  std::string out;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--data", data, "Dataset CSV")->required();
    cmd->add_option("--protected", protected_column, "Protected attribute column");
    cmd->add_option("--task-columns", task_columns, "Comma-separated task columns");
    cmd->add_option("--task-prefix", task_prefix, "Prefix selecting task columns when none are listed");
    cmd->add_option("--config", config_path, "TrainConfig JSON file");
    cmd->add_option("--widths", widths, "Comma-separated hidden widths");
    cmd->add_option("--tau", tau, "Similarity threshold in (0,1]");
    cmd->add_option("--eta", eta, "Learning rate");
    cmd->add_option("--lambda", lambda, "Default fairness weight");
    cmd->add_option("--epochs", epochs, "Maximum epochs");
    cmd->add_option("--seed", seed, "Seed for split, init, batching and correction order");
    cmd->add_option("--train-fraction", train_fraction, "Training share of the stratified split");
    cmd->add_option("-o,--out", out, "Output directory")->required();
    cmd->add_flag("--force", force, "Allow writing into a non-empty output directory");
  }

  TrainConfig config() const {
    TrainConfig cfg;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw UsageError("cannot open config " + config_path);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("config is not valid JSON: ") + e.what());
      }
      cfg = TrainConfig::from_json(j, cfg);
    }
    if (tau) cfg.tau = *tau;
    if (eta) cfg.eta = *eta;
    if (lambda) cfg.lambda_default = *lambda;
    if (epochs) cfg.max_epochs = *epochs;
    if (seed) cfg.seed = *seed;
    if (!widths.empty()) {
      cfg.hidden_widths.clear();
      for (const auto& w : split_list(widths)) cfg.hidden_widths.push_back(std::stoll(w));
    }
    cfg.validate();
    return cfg;
  }

  std::pair<Dataset, Dataset> load_split(std::uint64_t split_seed) const {
    const auto tasks = resolve_task_columns(data, task_columns, task_prefix);
    const Dataset d = load_csv(data, protected_column, tasks);
    SplitSpec spec;
    spec.train_fraction = train_fraction;
    spec.seed = split_seed;
    return stratified_split(d, spec);
  }
};

void write_run(const fs::path& dir, const TrainReport& report) {
  write_json(dir / "report.json", report.to_json());
  save_checkpoint(dir, make_checkpoint(report));
  conflict_report(report.conflicts, report.task_names, dir);
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : report.branch_events) events.push_back(e.to_json());
  write_json(dir / "groups.json", events);
}

// Columns of `d` in the order of `names`.
Dataset task_view(const Dataset& d, const std::vector<std::string>& names) {
  Dataset view = d;
  view.labels.resize(d.n_samples(), static_cast<Index>(names.size()));
  view.task_names = names;
  for (std::size_t k = 0; k < names.size(); ++k) {
    auto it = std::find(d.task_names.begin(), d.task_names.end(), names[k]);
    if (it == d.task_names.end()) throw UsageError("dataset lacks task column '" + names[k] + "'");
    view.labels.col(static_cast<Index>(k)) = d.labels.col(it - d.task_names.begin());
  }
  return view;
}

Eigen::MatrixXd checkpoint_predictions(const Checkpoint& ckpt, const Dataset& d) {
  return predict_proba(ckpt.topology, ckpt.scaler.transform(d.features));
}

int cmd_generate(const std::vector<std::string>& args, SyntheticSpec spec, const fs::path& out_dir,
                 bool force, std::ostream& out) {
  spec.validate();
  prepare_output_dir(out_dir, force);
  const auto synth = generate_synthetic(spec);
  write_csv(synth.data, out_dir / "data.csv");
  write_json(out_dir / "data.meta.json", metadata_json(synth.data, synth.meta));
  write_json(out_dir / "invocation.json", invocation("generate", args));
  const auto& d = synth.data;
  const double share = d.protected_attr.cast<double>().mean();
  out << "n=" << d.n_samples() << " m=" << d.n_features() << " T=" << d.n_tasks()
      << " protected_share=" << share << '\n';
  for (Index t = 0; t < d.n_tasks(); ++t) {
    double pos[2] = {0, 0}, cnt[2] = {0, 0};
    for (Index i = 0; i < d.n_samples(); ++i) {
      cnt[d.protected_attr(i)] += 1;
      pos[d.protected_attr(i)] += d.labels(i, t);
    }
    out << d.task_names[static_cast<std::size_t>(t)] << ": P(y=1|g)=" << pos[0] / cnt[0]
        << " P(y=1|gbar)=" << pos[1] / cnt[1] << '\n';
  }
  return kExitOk;
}

int cmd_train(const std::vector<std::string>& args, const TrainFlags& flags, const std::string& mode,
              std::optional<int> task, std::ostream& out) {
  const TrainConfig cfg = flags.config();
  if (mode == "stl" && !task) throw UsageError("--mode stl requires --task");
  if (mode != "stl" && task) throw UsageError("--task is only valid with --mode stl");
  const auto [train, val] = flags.load_split(cfg.seed);
  if (task && (*task < 0 || *task >= train.n_tasks())) {
    throw UsageError("--task " + std::to_string(*task) + " out of range");
  }
  prepare_output_dir(flags.out, flags.force);
  write_json(fs::path(flags.out) / "invocation.json", invocation("train", args));

  TrainReport report;
  if (mode == "fairbranch") report = train_fairbranch(train, val, cfg);
  else if (mode == "vanilla") report = train_vanilla_mtl(train, val, cfg);
  else report = train_stl(train, val, *task, cfg);
  write_run(flags.out, report);
  out << "mode=" << report.mode << " epochs=" << report.epochs_run
      << " converged=" << (report.converged ? "true" : "false")
      << " branch_events=" << report.branch_events.size()
      << " parameters=" << report.topology.parameter_count() << '\n';
  return kExitOk;
}

int cmd_evaluate(const std::vector<std::string>&, const std::string& checkpoint_dir,
                 const std::string& data, const std::string& protected_column,
                 const std::string& task_columns, const std::vector<std::string>& baselines,
                 const std::string& format, const std::string& out_path, std::ostream& out) {
  const Checkpoint model = load_checkpoint(checkpoint_dir);
  const auto tasks = task_columns.empty() ? model.task_names : split_list(task_columns);
  const Dataset d = load_csv(data, protected_column, tasks);

  std::map<std::string, TaskMetrics> baseline;
  for (const auto& dir : baselines) {
    const Checkpoint b = load_checkpoint(dir);
    const Dataset view = task_view(d, b.task_names);
    const auto metrics = task_metrics(checkpoint_predictions(b, view), view);
    for (std::size_t k = 0; k < metrics.size(); ++k) baseline.emplace(b.task_names[k], metrics[k]);
  }
  std::vector<std::string> missing;
  std::vector<TaskMetrics> base;
  for (const auto& name : model.task_names) {
    auto it = baseline.find(name);
    if (it == baseline.end()) missing.push_back(name);
    else base.push_back(it->second);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw UsageError("missing baseline for tasks: " + list);
  }

  const Dataset view = task_view(d, model.task_names);
  const EvalResult r = evaluate_predictions(checkpoint_predictions(model, view), view, base);

  std::string text;
  if (format == "json") text = r.to_json().dump(2) + "\n";
  else text = r.to_csv();
  if (out_path.empty()) {
    out << text;
  } else {
    std::ofstream f(out_path, std::ios::binary);
    if (!f) throw SchemaError("cannot write " + out_path);
    f << text;
  }
  return kExitOk;
}

int cmd_sweep(const std::vector<std::string>& args, const TrainFlags& flags,
              const std::string& taus_flag, std::ostream& out) {
  const TrainConfig base_cfg = flags.config();
  std::vector<double> taus;
  for (const auto& s : split_list(taus_flag)) {
    try {
      taus.push_back(std::stod(s));
    } catch (const std::exception&) {
      throw UsageError("bad tau value '" + s + "'");
    }
  }
  if (taus.empty()) throw UsageError("--taus needs at least one value");
  for (double tau : taus) {
    if (!(tau > 0.0 && tau <= 1.0)) throw UsageError("tau must lie in (0, 1]");
  }
  const auto [train, val] = flags.load_split(base_cfg.seed);
  const fs::path root = flags.out;
  prepare_output_dir(root, flags.force);
  write_json(root / "invocation.json", invocation("sweep", args));

  std::vector<TaskMetrics> stl(static_cast<std::size_t>(train.n_tasks()));
  for (int t = 0; t < train.n_tasks(); ++t) {
    const auto rep = train_stl(train, val, t, base_cfg);
    const Dataset v = rep.scaler.apply(val.single_task(t));
    stl[static_cast<std::size_t>(t)] = task_metrics(predict_proba(rep.topology, v.features), v).front();
    const fs::path dir = root / ("stl_" + std::to_string(t));
    fs::create_directories(dir);
    write_run(dir, rep);
  }
  double stl_acc = 0, stl_ep = 0, stl_eo = 0;
  for (const auto& m : stl) {
    stl_acc += m.accuracy;
    stl_ep += m.ep_viol;
    stl_eo += m.eo_viol;
  }

  std::ofstream table(root / "sweep.csv", std::ios::binary);
  const std::string header = "tau,ara,arf_ep,arf_eo,rp,mean_kg,mean_dg_ep,mean_dg_eo,branch_events";
  table << header << '\n';
  out << header << '\n';
  for (double tau : taus) {
    TrainConfig cfg = base_cfg;
    cfg.tau = tau;
    const auto rep = train_fairbranch(train, val, cfg);
    const auto eval = evaluate(rep.topology, rep.scaler.apply(val), stl);
    char name[32];
    std::snprintf(name, sizeof name, "tau_%g", tau);
    const fs::path dir = root / name;
    fs::create_directories(dir);
    write_run(dir, rep);
    write_json(dir / "eval.json", eval.to_json());

    const double T = static_cast<double>(stl.size());
    const double rp = relative_parameters(rep.topology, rep.topology.input_dim, rep.topology.widths,
                                          rep.topology.num_tasks);
    const double ara = eval.mean_accuracy / (stl_acc / T);
    const double arf_ep = eval.mean_ep / (stl_ep / T);
    const double arf_eo = eval.mean_eo / (stl_eo / T);
    std::ostringstream row;
    row << fmt(tau) << ',' << fmt(ara) << ',' << fmt(arf_ep) << ',' << fmt(arf_eo) << ','
        << fmt(rp) << ',' << fmt(eval.mean_kg) << ',' << fmt(eval.mean_dg_ep) << ','
        << fmt(eval.mean_dg_eo) << ',' << rep.branch_events.size();
    table << row.str() << '\n';
    out << row.str() << '\n';
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fair multi-task learning with similarity-driven branching"};
  app.require_subcommand(1);

  SyntheticSpec spec;
  std::string gen_out;
  bool gen_force = false;
  auto* gen = app.add_subcommand("generate", "Write a synthetic multi-task dataset");
  gen->add_option("--samples", spec.n_samples, "Number of samples");
  gen->add_option("--features", spec.n_features, "Number of features");
  gen->add_option("--tasks", spec.n_tasks, "Number of tasks");
  gen->add_option("--families", spec.n_families, "Number of planted task families");
  gen->add_option("--bias", spec.bias_strength, "Flip-to-negative rate for biased tasks in group 1");
  gen->add_option("--noise", spec.noise, "Symmetric label noise");
  gen->add_option("--proxy", spec.proxy_strength, "Group shift of feature 0");
  gen->add_option("--seed", spec.seed, "Generator seed");
  gen->add_option("-o,--out", gen_out, "Output directory")->required();
  gen->add_flag("--force", gen_force, "Allow writing into a non-empty output directory");

  TrainFlags train_flags;
  std::string mode = "fairbranch";
  std::optional<int> task;
  auto* train = app.add_subcommand("train", "Train a model and write a run directory");
  train_flags.add_to(train);
  train->add_option("--mode", mode, "fairbranch | vanilla | stl")
      ->check(CLI::IsMember({"fairbranch", "vanilla", "stl"}));
  train->add_option("--task", task, "Task index for --mode stl");

  std::string ckpt_dir, eval_data, eval_protected = "protected", eval_tasks, format = "json",
                                   eval_out;
  std::vector<std::string> baselines;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a checkpoint against baselines");
  evaluate_cmd->add_option("--checkpoint", ckpt_dir, "Run directory of the model")->required();
  evaluate_cmd->add_option("--data", eval_data, "Evaluation CSV")->required();
  evaluate_cmd->add_option("--protected", eval_protected, "Protected attribute column");
  evaluate_cmd->add_option("--task-columns", eval_tasks, "Comma-separated task columns");
  evaluate_cmd->add_option("--baselines", baselines, "Baseline run directories")->required();
  evaluate_cmd->add_option("--format", format, "json | csv")->check(CLI::IsMember({"json", "csv"}));
  evaluate_cmd->add_option("-o,--out", eval_out, "Output file (default stdout)");

  TrainFlags sweep_flags;
  std::string taus = "0.6,0.7,0.8";
  auto* sweep = app.add_subcommand("sweep", "Train and score one model per tau");
  sweep_flags.add_to(sweep);
  sweep->add_option("--taus", taus, "Comma-separated tau values");

  std::vector<std::string> argv_storage;
  argv_storage.push_back("fairbranch");
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_storage) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(args, spec, gen_out, gen_force, out);
    if (train->parsed()) return cmd_train(args, train_flags, mode, task, out);
    if (evaluate_cmd->parsed()) {
      return cmd_evaluate(args, ckpt_dir, eval_data, eval_protected, eval_tasks, baselines, format,
                          eval_out, out);
    }
    if (sweep->parsed()) return cmd_sweep(args, sweep_flags, taus, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace fairbranch::cli
