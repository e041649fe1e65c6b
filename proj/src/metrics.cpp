#include "fairbranch/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "fairbranch/errors.hpp"

namespace fairbranch {

namespace {

// P(pred = 1 | y = cls, s = group).
double positive_rate(const Eigen::Ref<const Eigen::VectorXi>& pred,
                     const Eigen::Ref<const Eigen::VectorXi>& y,
                     const Eigen::Ref<const Eigen::VectorXi>& s, int cls, int group) {
  Index hits = 0, total = 0;
  for (Index i = 0; i < pred.size(); ++i) {
    if (y(i) == cls && s(i) == group) {
      ++total;
      hits += pred(i) == 1 ? 1 : 0;
    }
  }
  if (total == 0) {
    throw MetricError("fairness metric undefined: no samples with y=" + std::to_string(cls) +
                      " in group " + std::to_string(group));
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

void write_heatmap(const Eigen::MatrixXi& m, const std::vector<std::string>& names,
                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  out << "task";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  for (Index i = 0; i < m.rows(); ++i) {
    out << names[static_cast<std::size_t>(i)];
    for (Index j = 0; j < m.cols(); ++j) out << ',' << m(i, j);
    out << '\n';
  }
}

}  // namespace

double fairness_violation(const Eigen::Ref<const Eigen::VectorXi>& pred,
                          const Eigen::Ref<const Eigen::VectorXi>& y,
                          const Eigen::Ref<const Eigen::VectorXi>& s, ViolationKind kind) {
  if (pred.size() != y.size() || pred.size() != s.size()) {
    throw ShapeError("fairness_violation: input lengths differ");
  }
  const double tpr_gap = std::abs(positive_rate(pred, y, s, 1, 0) - positive_rate(pred, y, s, 1, 1));
  switch (kind) {
    case ViolationKind::EP:
      return tpr_gap;
    case ViolationKind::EO:
      return tpr_gap +
             std::abs(positive_rate(pred, y, s, 0, 0) - positive_rate(pred, y, s, 0, 1));
    case ViolationKind::EOLiteral: {
      const double fnr_gap = std::abs((1.0 - positive_rate(pred, y, s, 1, 0)) -
                                      (1.0 - positive_rate(pred, y, s, 1, 1)));
      return tpr_gap + fnr_gap;
    }
  }
  throw InternalError("unknown violation kind");
}

double knowledge_gain(double mtl_acc, double stl_acc) { return mtl_acc - stl_acc; }

double discrimination_gain(double mtl_viol, double stl_viol) { return mtl_viol - stl_viol; }

std::vector<TaskMetrics> task_metrics(const Eigen::MatrixXd& probabilities, const Dataset& d) {
  if (probabilities.rows() != d.n_samples() || probabilities.cols() != d.n_tasks()) {
    throw ShapeError("prediction matrix does not match the dataset");
  }
  std::vector<TaskMetrics> out;
  for (Index t = 0; t < d.n_tasks(); ++t) {
    const Eigen::VectorXi pred = (probabilities.col(t).array() >= kDecisionThreshold).cast<int>();
    const Eigen::VectorXi y = d.labels.col(t);
    TaskMetrics m;
    m.accuracy = static_cast<double>((pred.array() == y.array()).count()) /
                 static_cast<double>(std::max<Index>(1, y.size()));
    m.ep_viol = fairness_violation(pred, y, d.protected_attr, ViolationKind::EP);
    m.eo_viol = fairness_violation(pred, y, d.protected_attr, ViolationKind::EO);
    out.push_back(m);
  }
  return out;
}

EvalResult evaluate_predictions(const Eigen::MatrixXd& probabilities, const Dataset& d,
                                std::span<const TaskMetrics> baseline) {
  if (static_cast<Index>(baseline.size()) != d.n_tasks()) {
    throw ConfigError("baseline metrics must cover every task");
  }
  const auto model = task_metrics(probabilities, d);
  EvalResult r;
  const auto T = static_cast<double>(model.size());
  for (std::size_t t = 0; t < model.size(); ++t) {
    TaskEvaluation e;
    e.name = d.task_names[t];
    e.model = model[t];
    e.baseline = baseline[t];
    e.kg = knowledge_gain(e.model.accuracy, e.baseline.accuracy);
    e.dg_ep = discrimination_gain(e.model.ep_viol, e.baseline.ep_viol);
    e.dg_eo = discrimination_gain(e.model.eo_viol, e.baseline.eo_viol);
    r.mean_accuracy += e.model.accuracy;
    r.mean_ep += e.model.ep_viol;
    r.mean_eo += e.model.eo_viol;
    r.mean_kg += e.kg;
    r.mean_dg_ep += e.dg_ep;
    r.mean_dg_eo += e.dg_eo;
    r.tasks.push_back(std::move(e));
  }
  if (T > 0) {
    r.mean_accuracy /= T;
    r.mean_ep /= T;
    r.mean_eo /= T;
    r.mean_kg /= T;
    r.mean_dg_ep /= T;
    r.mean_dg_eo /= T;
  }
  return r;
}

EvalResult evaluate(const Topology& top, const Dataset& d, std::span<const TaskMetrics> baseline) {
  return evaluate_predictions(predict_proba(top, d.features), d, baseline);
}

nlohmann::json EvalResult::to_json() const {
  nlohmann::json per_task = nlohmann::json::array();
  for (const auto& t : tasks) {
    per_task.push_back({{"task", t.name},
                        {"accuracy", t.model.accuracy},
                        {"ep_viol", t.model.ep_viol},
                        {"eo_viol", t.model.eo_viol},
                        {"baseline_accuracy", t.baseline.accuracy},
                        {"baseline_ep_viol", t.baseline.ep_viol},
                        {"baseline_eo_viol", t.baseline.eo_viol},
                        {"kg", t.kg},
                        {"dg_ep", t.dg_ep},
                        {"dg_eo", t.dg_eo},
                        {"negative_transfer", is_negative_transfer(t.kg)},
                        {"bias_transfer_ep", is_bias_transfer(t.dg_ep)},
                        {"bias_transfer_eo", is_bias_transfer(t.dg_eo)}});
  }
  return {{"tasks", per_task},
          {"mean",
           {{"accuracy", mean_accuracy},
            {"ep_viol", mean_ep},
            {"eo_viol", mean_eo},
            {"kg", mean_kg},
            {"dg_ep", mean_dg_ep},
            {"dg_eo", mean_dg_eo}}}};
}

std::string EvalResult::to_csv() const {
  std::ostringstream out;
  out << "task,accuracy,ep_viol,eo_viol,baseline_accuracy,baseline_ep_viol,baseline_eo_viol,kg,dg_ep,dg_eo\n";
  for (const auto& t : tasks) {
    out << t.name << ',' << fmt(t.model.accuracy) << ',' << fmt(t.model.ep_viol) << ','
        << fmt(t.model.eo_viol) << ',' << fmt(t.baseline.accuracy) << ','
        << fmt(t.baseline.ep_viol) << ',' << fmt(t.baseline.eo_viol) << ',' << fmt(t.kg) << ','
        << fmt(t.dg_ep) << ',' << fmt(t.dg_eo) << '\n';
  }
  out << "mean," << fmt(mean_accuracy) << ',' << fmt(mean_ep) << ',' << fmt(mean_eo) << ",,,,"
      << fmt(mean_kg) << ',' << fmt(mean_dg_ep) << ',' << fmt(mean_dg_eo) << '\n';
  return out.str();
}

Eigen::MatrixXi conflict_heatmap(const ConflictLog& log, int num_tasks, ConflictKind kind) {
  Eigen::MatrixXi m = Eigen::MatrixXi::Zero(num_tasks, num_tasks);
  for (const auto& r : log) {
    if (r.kind != kind || r.task_a == r.task_b) continue;
    if (r.task_a < 0 || r.task_b < 0 || r.task_a >= num_tasks || r.task_b >= num_tasks) {
      throw InternalError("conflict record references an unknown task");
    }
    ++m(r.task_a, r.task_b);
    ++m(r.task_b, r.task_a);
  }
  return m;
}

std::vector<AngleSummary> angle_summary(const ConflictLog& log) {
  std::map<std::pair<int, int>, std::vector<double>> buckets;
  for (const auto& r : log) {
    buckets[{r.epoch, static_cast<int>(r.kind)}].push_back(std::acos(r.cosine) * 180.0 /
                                                            std::numbers::pi);
  }
  std::vector<AngleSummary> out;
  for (auto& [key, angles] : buckets) {
    std::sort(angles.begin(), angles.end());
    AngleSummary a;
    a.epoch = key.first;
    a.kind = static_cast<ConflictKind>(key.second);
    a.count = static_cast<Index>(angles.size());
    a.min = angles.front();
    a.q1 = quantile(angles, 0.25);
    a.median = quantile(angles, 0.5);
    a.q3 = quantile(angles, 0.75);
    a.max = angles.back();
    out.push_back(a);
  }
  return out;
}

void conflict_report(const ConflictLog& log, const std::vector<std::string>& task_names,
                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "conflicts.csv", std::ios::binary);
    out << "epoch,depth,task_a,task_b,kind,cosine,corrected\n";
    for (const auto& r : log) {
      out << r.epoch << ',' << r.depth << ',' << r.task_a << ',' << r.task_b << ','
          << to_string(r.kind) << ',' << fmt(r.cosine) << ',' << (r.corrected ? 1 : 0) << '\n';
    }
  }
  {
    std::ofstream out(dir / "angles.csv", std::ios::binary);
    out << "epoch,kind,count,min_deg,q1_deg,median_deg,q3_deg,max_deg\n";
    for (const auto& a : angle_summary(log)) {
      out << a.epoch << ',' << to_string(a.kind) << ',' << a.count << ',' << fmt(a.min) << ','
          << fmt(a.q1) << ',' << fmt(a.median) << ',' << fmt(a.q3) << ',' << fmt(a.max) << '\n';
    }
  }
  const int T = static_cast<int>(task_names.size());
  write_heatmap(conflict_heatmap(log, T, ConflictKind::Accuracy), task_names,
                dir / "heatmap_accuracy.csv");
  write_heatmap(conflict_heatmap(log, T, ConflictKind::Fairness), task_names,
                dir / "heatmap_fairness.csv");
}

}  // namespace fairbranch
