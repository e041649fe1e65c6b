#include <doctest.h>

#include <cmath>
#include <random>

#include "fairbranch/conflict.hpp"
#include "fairbranch/errors.hpp"
#include "support.hpp"

using namespace fairbranch;

namespace {

Eigen::VectorXd v2(double a, double b) {
  Eigen::VectorXd v(2);
  v << a, b;
  return v;
}

Eigen::VectorXd random_vec(std::mt19937_64& rng, Index n) {
  std::normal_distribution<double> normal;
  Eigen::VectorXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = normal(rng);
  return v;
}

bool same_gradients(const GradientSet& a, const GradientSet& b, bool fairness) {
  for (std::size_t t = 0; t < a.tasks.size(); ++t) {
    const auto& x = fairness ? a.tasks[t].fair : a.tasks[t].acc;
    const auto& y = fairness ? b.tasks[t].fair : b.tasks[t].acc;
    for (std::size_t k = 0; k < x.size(); ++k) {
      if (x[k].weights != y[k].weights || x[k].bias != y[k].bias) return false;
    }
  }
  return true;
}

// Topology with depth-2 branch layers {0,1} and {2}.
Topology two_branch_topology() {
  auto top = init_model(3, {4, 4}, 3, 1);
  TaskGrouping groups(2);
  groups[0].members = {0, 1};
  groups[1].members = {2};
  return form_branches(top, groups);
}

}  // namespace

TEST_CASE("detect_conflict examples and oracle") {
  CHECK_FALSE(detect_conflict(v2(1, 0), v2(0, 1)));
  CHECK(detect_conflict(v2(1, 0), v2(-1, 0.1)));
  CHECK_THROWS_AS(detect_conflict(v2(1, 0), Eigen::VectorXd::Zero(3)), InternalError);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_vec(rng, 1000), b = random_vec(rng, 1000);
    double dot = 0.0;
    for (Index i = 0; i < 1000; ++i) dot += a(i) * b(i);
    // Summation order only matters when the dot is within rounding of zero.
    if (std::abs(dot) > 1e-9) CHECK(detect_conflict(a, b) == (dot < 0.0));
  }
}

TEST_CASE("conflict_cosine") {
  CHECK(*conflict_cosine(v2(3, 4), v2(3, 4)) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(*conflict_cosine(v2(3, 4), v2(-6, -8)) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(*conflict_cosine(v2(1, 0), v2(1, 1)) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
  CHECK_FALSE(conflict_cosine(v2(0, 0), v2(1, 1)).has_value());
  std::mt19937_64 rng(4);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_vec(rng, 5);
    const double c = *conflict_cosine(a, 1e6 * a);
    CHECK(c <= 1.0);
    CHECK(c >= -1.0);
  }
}

TEST_CASE("fbgrad_project examples and property") {
  CHECK(fbgrad_project(v2(1, 0), v2(-1, 0)).isZero());
  const auto g = fbgrad_project(v2(2, 1), v2(-1, 1));
  CHECK(g(0) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(g(1) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(std::abs(g.dot(v2(-1, 1))) < 1e-15);
  CHECK_THROWS_AS(fbgrad_project(v2(1, 0), v2(1, 1)), InternalError);

  std::mt19937_64 rng(6);
  std::uniform_int_distribution<Index> dim(2, 512);
  int tested = 0;
  while (tested < 300) {
    const Index n = dim(rng);
    const auto a = random_vec(rng, n), b = random_vec(rng, n);
    if (!detect_conflict(a, b)) continue;
    const auto p = fbgrad_project(a, b);
    CHECK(std::abs(p.dot(b)) < 1e-9 * a.norm() * b.norm());
    CHECK(p.norm() <= a.norm() * (1 + 1e-12));
    ++tested;
  }
}

TEST_CASE("correction projects against originals") {
  // Three members: 0 conflicts with 1 and 2. Working copy of 0 is projected
  // against 1's original even after 1 has itself been projected.
  std::vector<Eigen::VectorXd> orig{v2(1, 0), v2(-1, 1), v2(-1, -2)};
  const auto out = correct_fairness_conflicts(orig, orig, {1, 0, 2}, {{1, 2}, {0, 2}, {0, 1}});
  const auto p1 = fbgrad_project(orig[1], orig[0]);
  CHECK(out.projected[1][0]);
  CHECK(out.corrected[1].isApprox(detect_conflict(p1, orig[2]) ? fbgrad_project(p1, orig[2]) : p1));
  auto p0 = fbgrad_project(orig[0], orig[1]);
  if (detect_conflict(p0, orig[2])) p0 = fbgrad_project(p0, orig[2]);
  CHECK(out.corrected[0].isApprox(p0));
}

TEST_CASE("fbgrad_pass before any branch leaves gradients alone") {
  std::mt19937_64 rng(1);
  const auto top = init_model(3, {4, 4}, 3, 2);
  const auto batch = fbtest::random_batch(rng, 20, 3, 3);
  const auto g = per_task_gradients(top, batch).gradients;
  std::mt19937_64 order(5);
  const auto r = fbgrad_pass(top, g, {1, 1, 1}, 3, order);
  CHECK(r.corrections == 0);
  CHECK(same_gradients(r.gradients, g, true));
  CHECK(same_gradients(r.gradients, g, false));
  for (const auto& rec : r.records) {
    CHECK_FALSE(rec.corrected);
    CHECK(rec.task_a < rec.task_b);
    CHECK(rec.epoch == 3);
  }
}

TEST_CASE("opposed fairness gradients on a shared branch cancel") {
  const auto top = two_branch_topology();
  std::mt19937_64 rng(2);
  const auto batch = fbtest::random_batch(rng, 20, 3, 3);
  auto g = per_task_gradients(top, batch).gradients;
  g.tasks[1].fair[1].weights = -g.tasks[0].fair[1].weights;
  g.tasks[1].fair[1].bias = -g.tasks[0].fair[1].bias;
  std::mt19937_64 order(9);
  const auto r = fbgrad_pass(top, g, {1, 1, 1}, 1, order);
  CHECK(r.gradients.tasks[0].fair[1].weights.cwiseAbs().maxCoeff() < 1e-15);
  CHECK(r.gradients.tasks[1].fair[1].weights.cwiseAbs().maxCoeff() < 1e-15);
  CHECK(r.corrections == 2);
  // Shared depth 1, the singleton branch and the heads are untouched.
  for (int t = 0; t < 3; ++t) {
    CHECK(r.gradients.tasks[t].fair[0].weights == g.tasks[t].fair[0].weights);
    CHECK(r.gradients.tasks[t].fair[2].weights == g.tasks[t].fair[2].weights);
  }
  CHECK(r.gradients.tasks[2].fair[1].weights == g.tasks[2].fair[1].weights);
  CHECK(same_gradients(r.gradients, g, false));
  bool logged = false;
  for (const auto& rec : r.records) {
    if (rec.kind == ConflictKind::Fairness && rec.depth == 2) {
      logged = true;
      CHECK(rec.task_a == 0);
      CHECK(rec.task_b == 1);
      CHECK(rec.corrected);
      CHECK(rec.cosine == doctest::Approx(-1.0));
    }
  }
  CHECK(logged);
}

TEST_CASE("aligned fairness gradients are a no-op") {
  const auto top = two_branch_topology();
  std::mt19937_64 rng(3);
  const auto batch = fbtest::random_batch(rng, 20, 3, 3);
  auto g = per_task_gradients(top, batch).gradients;
  g.tasks[1].fair[1] = g.tasks[0].fair[1];
  g.tasks[1].fair[1].weights *= 2.0;
  g.tasks[1].fair[1].bias *= 2.0;
  std::mt19937_64 order(1);
  const auto r = fbgrad_pass(top, g, {1, 1, 1}, 1, order);
  CHECK(r.corrections == 0);
  CHECK(same_gradients(r.gradients, g, true));
  for (const auto& rec : r.records) {
    if (rec.depth == 2) CHECK(rec.kind == ConflictKind::Accuracy);
  }
}

TEST_CASE("tasks with zero lambda are excluded from fairness pairing") {
  const auto top = two_branch_topology();
  std::mt19937_64 rng(4);
  const auto batch = fbtest::random_batch(rng, 20, 3, 3);
  auto g = per_task_gradients(top, batch).gradients;
  g.tasks[1].fair[1].weights = -g.tasks[0].fair[1].weights;
  g.tasks[1].fair[1].bias = -g.tasks[0].fair[1].bias;
  std::mt19937_64 order(1);
  const auto r = fbgrad_pass(top, g, {1, 0, 1}, 1, order);
  CHECK(r.corrections == 0);
  CHECK(same_gradients(r.gradients, g, true));
}

TEST_CASE("correction can be switched off while still logging") {
  const auto top = two_branch_topology();
  std::mt19937_64 rng(4);
  const auto batch = fbtest::random_batch(rng, 20, 3, 3);
  auto g = per_task_gradients(top, batch).gradients;
  g.tasks[1].fair[1].weights = -g.tasks[0].fair[1].weights;
  g.tasks[1].fair[1].bias = -g.tasks[0].fair[1].bias;
  std::mt19937_64 order(1);
  FbgradOptions opt;
  opt.correct = false;
  const auto r = fbgrad_pass(top, g, {1, 1, 1}, 1, order, opt);
  CHECK(same_gradients(r.gradients, g, true));
  int fair = 0;
  for (const auto& rec : r.records) fair += rec.kind == ConflictKind::Fairness && rec.depth == 2;
  CHECK(fair == 1);
}

TEST_CASE("post-condition, determinism and idempotence on random branched nets") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const auto top = fbtest::random_topology(rng, 4, {6, 5, 4}, 5, 1 + trial % 2);
    const auto batch = fbtest::random_batch(rng, 30, 4, 5);
    const auto g = per_task_gradients(top, batch).gradients;
    const std::vector<double> lambdas(5, 1.0);
    std::mt19937_64 o1(trial), o2(trial);
    const auto r = fbgrad_pass(top, g, lambdas, 1, o1);
    const auto again = fbgrad_pass(top, g, lambdas, 1, o2);
    CHECK(r.records == again.records);
    CHECK(same_gradients(r.gradients, again.gradients, true));
    CHECK(same_gradients(r.gradients, g, false));

    for (int b = top.current_depth + 1; b <= top.depth(); ++b) {
      const auto slot = static_cast<std::size_t>(b - 1);
      for (const auto& layer : top.hidden[slot]) {
        if (layer.tasks.size() != 2) continue;
        const int t = layer.tasks[0], u = layer.tasks[1];
        const auto ct = r.gradients.tasks[t].fair[slot].flat();
        const auto cu = r.gradients.tasks[u].fair[slot].flat();
        const auto ot = g.tasks[t].fair[slot].flat();
        const auto ou = g.tasks[u].fair[slot].flat();
        CHECK(ct.dot(ou) >= -1e-9 * ct.norm() * ou.norm());
        CHECK(cu.dot(ot) >= -1e-9 * cu.norm() * ot.norm());
      }
    }
    // Shared layers are never corrected.
    for (int b = 1; b <= top.current_depth; ++b) {
      for (int t = 0; t < 5; ++t) CHECK(r.gradients.tasks[t].fair[b - 1].weights == g.tasks[t].fair[b - 1].weights);
    }
    for (int t = 0; t < 5; ++t) CHECK(r.gradients.tasks[t].fair.back().weights == g.tasks[t].fair.back().weights);
  }
}

TEST_CASE("idempotent for two-member branches when rerun against the same snapshot") {
  std::vector<Eigen::VectorXd> orig{v2(2, 1), v2(-1, 1)};
  const auto first = correct_fairness_conflicts(orig, orig, {0, 1}, {{1}, {0}});
  const auto second = correct_fairness_conflicts(first.corrected, orig, {0, 1}, {{1}, {0}});
  CHECK(second.corrected[0].isApprox(first.corrected[0]));
  CHECK(second.corrected[1].isApprox(first.corrected[1]));
}
