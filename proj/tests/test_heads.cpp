#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tbps/gradcheck.hpp"
#include "tbps/heads.hpp"

using namespace tbps;
using ad::Var;

namespace {

Tensor randn(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal();
  return t;
}

Tensor unit_rows(Tensor t) {
  const int d = t.dim(1);
  for (int i = 0; i < t.dim(0); ++i) {
    double s = 0;
    for (int j = 0; j < d; ++j) s += t.at(i, j) * t.at(i, j);
    for (int j = 0; j < d; ++j) t.at(i, j) /= std::sqrt(s);
  }
  return t;
}

// lut = first L standard basis vectors of R^D.
OimState basis_state(int l, int d, int queue, double tau) {
  OimConfig c;
  c.queue = queue;
  c.temperature = tau;
  Rng rng(0);
  OimState s = OimState::init(l, d, c, rng);
  s.lut.fill(0.0);
  for (int i = 0; i < l; ++i) s.lut.at(i, i) = 1.0;
  return s;
}

}  // namespace

TEST_CASE("oim loss on orthonormal prototypes has a closed form") {
  for (int l : {1, 2, 5, 8}) {
    const double tau = 0.1;
    const OimState s = basis_state(l, 8, 4, tau);
    Tensor e({1, 8});
    e.at(0, l - 1) = 1.0;
    const OimResult r = oim_loss(ad::constant(e), {l - 1}, s);
    const double want = -std::log(std::exp(1 / tau) / (std::exp(1 / tau) + (l - 1)));
    CHECK(r.loss.value()[0] == doctest::Approx(want).epsilon(1e-12));
  }
  const OimState s = basis_state(3, 8, 4, 0.1);
  CHECK(oim_loss(ad::constant(unit_rows(Tensor({2, 8}, 1.0))), {kUnlabeled, kUnlabeled}, s).loss.value()[0] == 0.0);
  CHECK_THROWS_AS(oim_loss(ad::constant(Tensor({1, 8}, 1.0)), {3}, s), Error);
  CHECK_THROWS_AS(oim_loss(ad::constant(Tensor({2, 8}, 1.0)), {0}, s), Error);
}

TEST_CASE("oim queue entries act as extra negatives") {
  const double tau = 0.5;
  OimState s = basis_state(2, 4, 3, tau);
  const double q[4] = {0, 0, 1, 0};
  s.push(q);
  Tensor e({1, 4});
  e.at(0, 0) = 1.0;
  const double got = oim_loss(ad::constant(e), {0}, s).loss.value()[0];
  // Similarities: own prototype 1, other prototype 0, queue row 0.
  CHECK(got == doctest::Approx(-std::log(std::exp(1 / tau) / (std::exp(1 / tau) + 2))).epsilon(1e-12));
}

TEST_CASE("oim lut update is a normalised momentum step") {
  Rng rng(1);
  OimConfig c;
  c.momentum = 0.5;
  OimState s = OimState::init(4, 6, c, rng);
  for (int step = 0; step < 1000; ++step) {
    const Tensor e = unit_rows(randn({3, 6}, rng));
    const std::vector<int> labels{rng.range(0, 3), kUnlabeled, rng.range(0, 3)};
    const OimState before = s;
    s = oim_loss(ad::constant(e), labels, s).state;
    if (labels[0] != labels[2]) {
      // A single update of prototype labels[0]: direction of m*u + (1-m)*x.
      double dot = 0, norm = 0;
      for (int j = 0; j < 6; ++j) {
        const double want = 0.5 * before.lut.at(labels[0], j) + 0.5 * e.at(0, j);
        dot += want * s.lut.at(labels[0], j);
        norm += want * want;
      }
      CHECK(dot == doctest::Approx(std::sqrt(norm)).epsilon(1e-9));
    }
  }
  for (int i = 0; i < 4; ++i) {
    double n = 0;
    for (int j = 0; j < 6; ++j) n += s.lut.at(i, j) * s.lut.at(i, j);
    CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("oim queue is first in first out") {
  OimState s = basis_state(2, 3, 3, 0.1);
  CHECK(s.queue_order().empty());
  for (int i = 0; i < 5; ++i) {
    const double row[3] = {1.0 * (i + 1), 0, 0};
    s.push(row);
  }
  // Five pushes into three slots leave pushes 3, 4, 5 (slots 2, 0, 1).
  CHECK(s.queue_count == 3);
  CHECK(s.queue_order() == std::vector<int>{2, 0, 1});
  for (int q : s.queue_order()) CHECK(s.queue.at(q, 0) == doctest::Approx(1.0));

  OimState empty = basis_state(2, 3, 0, 0.1);
  const double row[3] = {1, 0, 0};
  empty.push(row);
  CHECK(empty.queue_count == 0);

  // Unlabelled embeddings land in the queue of the returned state only.
  const OimState s0 = basis_state(2, 3, 2, 0.1);
  const OimResult r = oim_loss(ad::constant(Tensor({1, 3}, 1.0)), {kUnlabeled}, s0);
  CHECK(s0.queue_count == 0);
  CHECK(r.state.queue_count == 1);
}

TEST_CASE("zero detection weights give even odds and identity refinement") {
  Rng rng(2);
  ModelConfig m;
  m.base_channels = 4;
  m.det_channels = 3;
  m.roi_size = 2;
  DetNetParams p = DetNetParams::init(m, rng);
  p.fc_w.mutable_value().fill(0.0);
  const DetOutput out = det_forward(ad::constant(randn({5, 4, 2, 2}, rng)), p);
  CHECK(out.logits.shape() == std::vector<int>{5, 2});
  for (double v : out.person_prob()) CHECK(v == 0.5);
  const std::vector<BBox> props{{1, 2, 30, 40}, {0, 0, 64, 64}, {10, 10, 12, 20}, {5, 5, 6, 6}, {3, 9, 50, 11}};
  CHECK(refine_boxes(props, out.delta_values(), 64, 64) == props);
  // Refinement clips to the image.
  CHECK(refine_boxes({{-5, -5, 80, 70}}, {Deltas{}}, 64, 64)[0] == BBox{0, 0, 64, 64});
}

TEST_CASE("person probability is the two-way softmax") {
  DetOutput o;
  Tensor l({2, 2});
  l.at(0, 0) = 0.3;
  l.at(0, 1) = 1.7;
  l.at(1, 0) = 2.0;
  l.at(1, 1) = -1.0;
  o.logits = ad::constant(l);
  const auto p = o.person_prob();
  CHECK(p[0] == doctest::Approx(std::exp(1.7) / (std::exp(0.3) + std::exp(1.7))));
  CHECK(p[1] == doctest::Approx(std::exp(-1.0) / (std::exp(2.0) + std::exp(-1.0))));
}

TEST_CASE("head gradients pass the finite-difference suite") {
  GradCheckOptions o;
  o.only = {"oim_loss", "det_head", "detection_losses"};
  for (const auto& row : run_gradcheck(o)) {
    INFO(row.name);
    CHECK(row.pass);
  }
}
