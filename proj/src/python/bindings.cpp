#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "fairbranch/cli.hpp"
#include "fairbranch/errors.hpp"
#include "fairbranch/grouping.hpp"
#include "fairbranch/metrics.hpp"
#include "fairbranch/trainer.hpp"

namespace py = pybind11;
using namespace fairbranch;

namespace {

Dataset make_dataset(const Eigen::MatrixXd& features, const Eigen::VectorXi& protected_attr,
                     const Eigen::MatrixXi& labels) {
  Dataset d;
  d.features = features;
  d.protected_attr = protected_attr;
  d.labels = labels;
  for (Index j = 0; j < d.n_features(); ++j) d.feature_names.push_back("x" + std::to_string(j));
  for (Index t = 0; t < d.n_tasks(); ++t) d.task_names.push_back("task_" + std::to_string(t));
  d.validate();
  return d;
}

TrainConfig parse_config(const std::string& config_json) {
  return config_json.empty() ? TrainConfig{} : TrainConfig::from_json(nlohmann::json::parse(config_json));
}

// A trained model: the report minus anything python cannot use directly.
struct Model {
  TrainReport report;

  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& x) const {
    return fairbranch::predict_proba(report.topology, report.scaler.transform(x));
  }
  std::string report_json() const { return report.to_json().dump(); }
  Index parameter_count() const { return report.topology.parameter_count(); }
  double relative_parameters() const {
    return fairbranch::relative_parameters(report.topology, report.topology.input_dim,
                                           report.config.hidden_widths, report.topology.num_tasks);
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "FairBranch multi-task learning core";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  m.def(
      "generate_synthetic",
      [](Index n_samples, Index n_features, Index n_tasks, Index n_families, double bias, double noise,
         double proxy_strength, double perturbation, std::uint64_t seed) {
        SyntheticSpec s;
        s.n_samples = n_samples;
        s.n_features = n_features;
        s.n_tasks = n_tasks;
        s.n_families = n_families;
        s.bias_strength = bias;
        s.noise = noise;
        s.proxy_strength = proxy_strength;
        s.perturbation = perturbation;
        s.seed = seed;
        auto syn = generate_synthetic(s);
        std::vector<int> family;
        std::vector<bool> biased;
        for (const auto& t : syn.meta) {
          family.push_back(t.family);
          biased.push_back(t.biased);
        }
        return py::make_tuple(syn.data.features, syn.data.protected_attr, syn.data.labels, family, biased);
      },
      py::arg("n_samples") = 10000, py::arg("n_features") = 10, py::arg("n_tasks") = 6,
      py::arg("n_families") = 3, py::arg("bias") = 0.0, py::arg("noise") = 0.0,
      py::arg("proxy_strength") = 1.0, py::arg("perturbation") = 0.1, py::arg("seed") = 0,
      "Returns (features, protected, labels, family, biased).");

  m.def(
      "split_indices",
      [](const Eigen::MatrixXd& x, const Eigen::VectorXi& s, const Eigen::MatrixXi& y, double train_fraction,
         bool stratify, std::uint64_t seed) {
        SplitSpec spec;
        spec.train_fraction = train_fraction;
        spec.stratify_on = stratify ? Stratify::Protected : Stratify::None;
        spec.seed = seed;
        auto idx = split_indices(make_dataset(x, s, y), spec);
        return py::make_tuple(idx.train, idx.test);
      },
      py::arg("features"), py::arg("protected"), py::arg("labels"), py::arg("train_fraction") = 0.7,
      py::arg("stratify") = true, py::arg("seed") = 0);

  m.def("linear_cka", &linear_cka, py::arg("a"), py::arg("b"));

  py::class_<Model>(m, "Model")
      .def("predict_proba", &Model::predict_proba, py::arg("features"))
      .def("report_json", &Model::report_json)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property_readonly("relative_parameters", &Model::relative_parameters)
      .def_property_readonly("epochs_run", [](const Model& mdl) { return mdl.report.epochs_run; })
      .def_property_readonly("branch_events", [](const Model& mdl) { return mdl.report.branch_events.size(); })
      .def_property_readonly("mode", [](const Model& mdl) { return mdl.report.mode; });

  m.def(
      "train",
      [](const std::string& mode, const Eigen::MatrixXd& xt, const Eigen::VectorXi& st, const Eigen::MatrixXi& yt,
         const Eigen::MatrixXd& xv, const Eigen::VectorXi& sv, const Eigen::MatrixXi& yv,
         const std::string& config_json, int task) {
        const auto cfg = parse_config(config_json);
        const auto train = make_dataset(xt, st, yt), val = make_dataset(xv, sv, yv);
        py::gil_scoped_release release;
        if (mode == "fairbranch") return Model{train_fairbranch(train, val, cfg)};
        if (mode == "vanilla") return Model{train_vanilla_mtl(train, val, cfg)};
        if (mode == "stl") return Model{train_stl(train, val, task, cfg)};
        throw ConfigError("mode must be fairbranch, vanilla or stl");
      },
      py::arg("mode"), py::arg("train_features"), py::arg("train_protected"), py::arg("train_labels"),
      py::arg("val_features"), py::arg("val_protected"), py::arg("val_labels"), py::arg("config_json") = "",
      py::arg("task") = 0);

  m.def(
      "task_metrics",
      [](const Eigen::MatrixXd& p, const Eigen::VectorXi& s, const Eigen::MatrixXi& y) {
        Dataset d = make_dataset(Eigen::MatrixXd::Zero(p.rows(), 1), s, y);
        std::vector<std::tuple<double, double, double>> out;
        for (const auto& t : task_metrics(p, d)) out.emplace_back(t.accuracy, t.ep_viol, t.eo_viol);
        return out;
      },
      py::arg("probabilities"), py::arg("protected"), py::arg("labels"),
      "Per task (accuracy, EP violation, EO violation).");

  m.def(
      "evaluate_json",
      [](const Eigen::MatrixXd& p, const Eigen::VectorXi& s, const Eigen::MatrixXi& y,
         const std::vector<std::tuple<double, double, double>>& baseline) {
        Dataset d = make_dataset(Eigen::MatrixXd::Zero(p.rows(), 1), s, y);
        std::vector<TaskMetrics> base;
        for (const auto& [a, ep, eo] : baseline) base.push_back({a, ep, eo});
        return evaluate_predictions(p, d, base).to_json().dump();
      },
      py::arg("probabilities"), py::arg("protected"), py::arg("labels"), py::arg("baseline"));

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command line tool in-process; returns (exit code, stdout, stderr).");
}
