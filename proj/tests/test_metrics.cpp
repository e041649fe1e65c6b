#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "fairbranch/errors.hpp"
#include "fairbranch/metrics.hpp"
#include "support.hpp"

using namespace fairbranch;

namespace {

Eigen::VectorXi ivec(std::initializer_list<int> v) {
  Eigen::VectorXi out(static_cast<Index>(v.size()));
  Index i = 0;
  for (int x : v) out(i++) = x;
  return out;
}

struct Counts {
  double acc, ep, eo;
};

// Confusion-matrix counting per (group, class).
Counts brute_metrics(const Eigen::VectorXd& p, const Eigen::VectorXi& y, const Eigen::VectorXi& s) {
  double tp[2] = {0, 0}, fn[2] = {0, 0}, fp[2] = {0, 0}, tn[2] = {0, 0};
  double correct = 0;
  for (Index i = 0; i < p.size(); ++i) {
    const bool yes = p(i) >= 0.5;
    const int g = s(i);
    if (y(i) == 1) (yes ? tp : fn)[g] += 1;
    else (yes ? fp : tn)[g] += 1;
    correct += (yes ? 1 : 0) == y(i);
  }
  const double tpr0 = tp[0] / (tp[0] + fn[0]), tpr1 = tp[1] / (tp[1] + fn[1]);
  const double fpr0 = fp[0] / (fp[0] + tn[0]), fpr1 = fp[1] / (fp[1] + tn[1]);
  return {correct / static_cast<double>(p.size()), std::abs(tpr0 - tpr1),
          std::abs(tpr0 - tpr1) + std::abs(fpr0 - fpr1)};
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("violation examples") {
  // TPR(g) = 9/10, TPR(gbar) = 7/10.
  Eigen::VectorXi pred(20), y(20), s(20);
  for (int i = 0; i < 20; ++i) {
    y(i) = 1;
    s(i) = i < 10 ? 0 : 1;
    pred(i) = (i < 9) || (i >= 10 && i < 17) ? 1 : 0;
  }
  CHECK(fairness_violation(pred, y, s, ViolationKind::EP) == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(fairness_violation(pred, y, s, ViolationKind::EOLiteral) == doctest::Approx(0.4).epsilon(1e-14));
  CHECK_THROWS_AS(fairness_violation(pred, y, s, ViolationKind::EO), MetricError);

  const auto sym_pred = ivec({1, 1, 0, 0, 1, 1, 0, 0});
  const auto sym_y = ivec({1, 1, 0, 0, 1, 1, 0, 0});
  const auto sym_s = ivec({0, 1, 0, 1, 0, 1, 0, 1});
  CHECK(fairness_violation(sym_pred, sym_y, sym_s, ViolationKind::EP) == 0.0);
  CHECK(fairness_violation(sym_pred, sym_y, sym_s, ViolationKind::EO) == 0.0);
}

TEST_CASE("empty cell names the cell") {
  try {
    fairness_violation(ivec({1, 0}), ivec({1, 0}), ivec({0, 0}), ViolationKind::EP);
    FAIL("expected MetricError");
  } catch (const MetricError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("y=1") != std::string::npos);
    CHECK(msg.find("group 1") != std::string::npos);
  }
}

TEST_CASE("gain signs") {
  CHECK(knowledge_gain(0.80, 0.75) == doctest::Approx(0.05));
  CHECK(knowledge_gain(0.7, 0.7) == 0.0);
  CHECK(is_negative_transfer(knowledge_gain(0.70, 0.75)));
  CHECK(discrimination_gain(0.10, 0.15) == doctest::Approx(-0.05));
  CHECK(discrimination_gain(0.1, 0.1) == 0.0);
  CHECK(is_bias_transfer(discrimination_gain(0.15, 0.10)));
  CHECK_FALSE(is_bias_transfer(0.0));
  CHECK_FALSE(is_negative_transfer(0.0));
}

TEST_CASE("evaluate against a brute-force confusion-matrix oracle") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<Index> size(8, 1000);
  std::uniform_int_distribution<int> tasks(1, 4);
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = size(rng);
    const int T = tasks(rng);
    Dataset d = fbtest::random_batch(rng, n, 1, T);
    Eigen::MatrixXd p(n, T);
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
    p(0, 0) = 0.5;  // threshold boundary counts as positive
    std::vector<TaskMetrics> base(static_cast<std::size_t>(T));
    for (auto& b : base) b = {u(rng), u(rng), 2 * u(rng)};
    const auto r = evaluate_predictions(p, d, base);
    double mk = 0, md = 0;
    for (int t = 0; t < T; ++t) {
      const auto bf = brute_metrics(p.col(t), d.labels.col(t), d.protected_attr);
      const auto& e = r.tasks[static_cast<std::size_t>(t)];
      CHECK(std::abs(e.model.accuracy - bf.acc) < 1e-12);
      CHECK(std::abs(e.model.ep_viol - bf.ep) < 1e-12);
      CHECK(std::abs(e.model.eo_viol - bf.eo) < 1e-12);
      CHECK(std::abs(e.kg - (bf.acc - base[t].accuracy)) < 1e-12);
      CHECK(std::abs(e.dg_ep - (bf.ep - base[t].ep_viol)) < 1e-12);
      CHECK(std::abs(e.dg_eo - (bf.eo - base[t].eo_viol)) < 1e-12);
      CHECK(e.model.ep_viol <= 1.0);
      CHECK(e.model.eo_viol <= 2.0);
      mk += e.kg / T;
      md += e.dg_ep / T;

      const Eigen::VectorXi pred = (p.col(t).array() >= 0.5).cast<int>();
      const Eigen::VectorXi y = d.labels.col(t);
      const Eigen::VectorXi flipped = (1 - d.protected_attr.array()).matrix();
      CHECK(fairness_violation(pred, y, flipped, ViolationKind::EO) ==
            doctest::Approx(e.model.eo_viol).epsilon(1e-14));
      CHECK(std::abs(fairness_violation(pred, y, d.protected_attr, ViolationKind::EOLiteral) -
                     2 * e.model.ep_viol) < 1e-12);
    }
    CHECK(std::abs(r.mean_kg - mk) < 1e-12);
    CHECK(std::abs(r.mean_dg_ep - md) < 1e-12);
  }
}

TEST_CASE("model as its own baseline and a constant predictor") {
  std::mt19937_64 rng(2);
  const Dataset d = fbtest::random_batch(rng, 100, 2, 2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd p(100, 2);
  for (Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  const auto own = task_metrics(p, d);
  const auto r = evaluate_predictions(p, d, own);
  for (const auto& e : r.tasks) {
    CHECK(e.kg == 0.0);
    CHECK(e.dg_ep == 0.0);
    CHECK(e.dg_eo == 0.0);
  }

  Dataset bal = d;
  for (Index i = 0; i < 100; ++i) bal.labels(i, 0) = i % 2;
  const auto c = task_metrics(Eigen::MatrixXd::Constant(100, 2, 0.9), bal);
  CHECK(c[0].accuracy == 0.5);
  CHECK(c[0].ep_viol == 0.0);
  CHECK_THROWS_AS(evaluate_predictions(p, d, std::vector<TaskMetrics>(1)), ConfigError);
}

TEST_CASE("heatmaps and angle summaries") {
  ConflictLog log{{1, 2, 0, 1, ConflictKind::Accuracy, -0.5, false},
                  {1, 2, 0, 2, ConflictKind::Accuracy, -0.1, false},
                  {2, 3, 0, 1, ConflictKind::Fairness, -1.0, true}};
  const auto acc = conflict_heatmap(log, 3, ConflictKind::Accuracy);
  Eigen::MatrixXi expect(3, 3);
  expect << 0, 1, 1, 1, 0, 0, 1, 0, 0;
  CHECK(acc == expect);
  const auto fair = conflict_heatmap(log, 3, ConflictKind::Fairness);
  CHECK(fair(0, 1) == 1);
  CHECK(fair(1, 0) == 1);
  CHECK(fair.sum() == 2);
  CHECK(acc == acc.transpose());
  CHECK(acc.diagonal().isZero());

  const auto summary = angle_summary(log);
  REQUIRE(summary.size() == 2);
  CHECK(summary[0].epoch == 1);
  CHECK(summary[0].count == 2);
  CHECK(summary[0].min == doctest::Approx(std::acos(-0.1) * 180 / M_PI));
  CHECK(summary[0].max == doctest::Approx(120.0));
  CHECK(summary[1].median == doctest::Approx(180.0));
}

TEST_CASE("conflict report files") {
  const auto dir = fbtest::scratch_dir("report");
  conflict_report({}, {"a", "b"}, dir / "empty");
  CHECK(read_file(dir / "empty" / "conflicts.csv") == "epoch,depth,task_a,task_b,kind,cosine,corrected\n");
  CHECK(read_file(dir / "empty" / "heatmap_fairness.csv") == "task,a,b\na,0,0\nb,0,0\n");
  CHECK(read_file(dir / "empty" / "angles.csv").find('\n') + 1 == read_file(dir / "empty" / "angles.csv").size());

  ConflictLog log{{4, 2, 0, 1, ConflictKind::Fairness, -0.25, true}};
  conflict_report(log, {"a", "b"}, dir / "one");
  CHECK(read_file(dir / "one" / "conflicts.csv") ==
        "epoch,depth,task_a,task_b,kind,cosine,corrected\n4,2,0,1,fairness,-0.25,1\n");
  CHECK(read_file(dir / "one" / "heatmap_accuracy.csv") == "task,a,b\na,0,0\nb,0,0\n");
}

TEST_CASE("eval result exports agree") {
  std::mt19937_64 rng(3);
  const Dataset d = fbtest::random_batch(rng, 50, 2, 2);
  Eigen::MatrixXd p = Eigen::MatrixXd::Constant(50, 2, 0.3);
  p.col(1).setConstant(0.7);
  const auto r = evaluate_predictions(p, d, task_metrics(Eigen::MatrixXd::Constant(50, 2, 0.6), d));
  const auto j = r.to_json();
  CHECK(j["tasks"].size() == 2);
  CHECK(j["mean"]["kg"].get<double>() == r.mean_kg);
  std::istringstream csv(r.to_csv());
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  CHECK(row.rfind("task_0,", 0) == 0);
}
