#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "tbps/backbone.hpp"
#include "tbps/gradcheck.hpp"
#include "tbps/proposal.hpp"

using namespace tbps;
using ad::Var;

namespace {

Tensor randn(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal();
  return t;
}

BBox random_box(Rng& rng, double extent) {
  const double x = rng.uniform(0, extent), y = rng.uniform(0, extent);
  return {x, y, x + rng.uniform(1, extent / 2), y + rng.uniform(1, extent / 2)};
}

Config small_config() {
  Config c = make_profile("desk");
  c.model.base_channels = 8;
  c.model.reduction = 2;
  c.model.rpn_channels = 6;
  c.model.dim = 5;
  return c;
}

// Straight-line restatement of the selection stage: O(n^2) suppression over a
// fully materialised candidate list.
std::vector<BBox> oracle_select(const std::vector<BBox>& anchors, const std::vector<double>& a,
                                const std::vector<double>& b, const std::vector<Deltas>& d, int w, int h,
                                const ProposalBudget& budget) {
  struct Cand {
    double score;
    int k;
  };
  std::vector<Cand> c;
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    double s = 1 / (1 + std::exp(-a[k]));
    if (!b.empty()) s += 1 / (1 + std::exp(-b[k]));
    c.push_back({s, static_cast<int>(k)});
  }
  std::sort(c.begin(), c.end(), [](const Cand& x, const Cand& y) {
    return x.score != y.score ? x.score > y.score : x.k < y.k;
  });
  if (static_cast<int>(c.size()) > budget.pre_nms) c.resize(budget.pre_nms);
  std::vector<BBox> live;
  for (const Cand& x : c) {
    const BBox bx = clip(decode_box(anchors[x.k], d[x.k]), w, h);
    if (bx.width() >= budget.min_size && bx.height() >= budget.min_size) live.push_back(bx);
  }
  std::vector<BBox> kept;
  std::vector<bool> dead(live.size(), false);
  for (std::size_t i = 0; i < live.size() && static_cast<int>(kept.size()) < budget.post_nms; ++i) {
    if (dead[i]) continue;
    kept.push_back(live[i]);
    for (std::size_t j = i + 1; j < live.size(); ++j)
      if (iou(live[i], live[j]) > budget.nms) dead[j] = true;
  }
  return kept;
}

}  // namespace

TEST_CASE("anchor grid layout") {
  const auto anchors = make_anchors(8, 8, 8, {8, 16, 32}, {1, 2}, 1.5);
  CHECK(anchors.size() == 384);
  // First location centre is (4,4); side 12 for the unit square.
  CHECK(anchors[0].cx() == doctest::Approx(4));
  CHECK(anchors[0].width() == doctest::Approx(12));
  CHECK(anchors[0].height() == doctest::Approx(12));
  // Ratio 2 keeps the area and doubles height / width.
  CHECK(anchors[1].area() == doctest::Approx(144));
  CHECK(anchors[1].height() / anchors[1].width() == doctest::Approx(2));
  // Location (h=1, w=2) starts at (1*8+2)*6.
  CHECK(anchors[60].cx() == doctest::Approx(20));
  CHECK(anchors[60].cy() == doctest::Approx(12));
}

TEST_CASE("rpn head with zero weights gives zero logits and deltas") {
  Rng rng(1);
  const Config c = small_config();
  RpnHeadParams p = RpnHeadParams::init(c.model, 6, rng);
  p.cls_w.mutable_value().fill(0.0);
  p.reg_w.mutable_value().fill(0.0);
  const RpnOutput out = rpn_head(ad::constant(randn({8, 4, 5}, rng)), p);
  CHECK(out.anchor_count() == 120);
  for (double v : out.logit_values()) CHECK(v == 0.0);
  for (const Deltas& d : out.delta_values())
    for (double v : d) CHECK(v == 0.0);
}

TEST_CASE("anchor labels follow the overlap rules") {
  const std::vector<BBox> anchors{{0, 0, 10, 10}, {0, 0, 10, 9}, {0, 0, 10, 6}, {50, 50, 60, 60}, {0, 0, 10, 2}};
  const AnchorLabels l = assign_anchor_labels(anchors, {{0, 0, 10, 10}}, LabelMode::kAllPersons);
  CHECK(l.labels == std::vector<int>{1, 1, -1, 0, 0});
  CHECK(l.matched[0] == 0);

  // A gt whose best anchor is below pos_iou still gets that anchor.
  const AnchorLabels weak = assign_anchor_labels({{0, 0, 10, 5}, {40, 40, 50, 50}}, {{0, 0, 10, 10}},
                                                 LabelMode::kAllPersons);
  CHECK(weak.labels == std::vector<int>{1, 0});

  // Without gt everything is background, except text-relevant mode which needs a target.
  const AnchorLabels none = assign_anchor_labels(anchors, {}, LabelMode::kAllPersons);
  CHECK(std::all_of(none.labels.begin(), none.labels.end(), [](int v) { return v == 0; }));
  CHECK_THROWS_AS(assign_anchor_labels(anchors, {}, LabelMode::kTextRelevant), Error);
}

TEST_CASE("label sampling respects the batch and positive fraction") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> labels(rng.range(1, 300));
    for (int& v : labels) v = rng.range(-1, 1);
    const int batch = rng.range(1, 64);
    const double frac = rng.uniform(0, 1);
    const auto s = sample_anchor_labels(labels, batch, frac, rng);
    int np = 0, nn = 0, avail_p = 0, avail_n = 0;
    for (std::size_t k = 0; k < labels.size(); ++k) {
      avail_p += labels[k] == 1;
      avail_n += labels[k] == 0;
      if (s[k] != -1) CHECK(s[k] == labels[k]);
      np += s[k] == 1;
      nn += s[k] == 0;
    }
    const int max_pos = static_cast<int>(batch * frac);
    CHECK(np == std::min(avail_p, max_pos));
    CHECK(nn == std::min(avail_n, batch - np));
  }
}

TEST_CASE("proposal selection agrees with a brute-force restatement") {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.range(1, 40);
    std::vector<BBox> anchors;
    std::vector<double> a(n), b;
    std::vector<Deltas> d(n);
    for (int k = 0; k < n; ++k) {
      anchors.push_back(random_box(rng, 40));
      // Coarse logits so that ties occur.
      a[k] = rng.range(-3, 3) * 0.5;
      for (double& v : d[k]) v = rng.uniform(-0.3, 0.3);
    }
    if (rng.uniform() < 0.5) {
      b.resize(n);
      for (double& v : b) v = rng.range(-3, 3) * 0.5;
    }
    ProposalBudget budget{rng.range(1, n + 2), rng.range(0, n), rng.uniform(0.2, 0.9), rng.uniform(0, 6)};
    const ProposalSet got = select_proposals(anchors, a, b, d, 48, 48, budget);
    const auto want = oracle_select(anchors, a, b, d, 48, 48, budget);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(got.boxes[i] == want[i]);
    CHECK(std::is_sorted(got.scores.rbegin(), got.scores.rend()));
    CHECK(got.sdrpn_scores.size() == (b.empty() ? 0 : got.size()));
    for (std::size_t i = 0; i < got.size(); ++i) {
      const double fused = got.rpn_scores[i] + (b.empty() ? 0.0 : got.sdrpn_scores[i]);
      CHECK(got.scores[i] == doctest::Approx(fused));
    }
  }
  CHECK_THROWS_AS(select_proposals({{0, 0, 1, 1}}, {0.0}, {}, {}, 8, 8, {}), Error);
  CHECK_THROWS_AS(select_proposals({{0, 0, 1, 1}}, {0.0}, {}, {Deltas{}}, 8, 8, {}, "max"), Error);
}

TEST_CASE("logit fusion adds raw logits") {
  const std::vector<BBox> anchors{{0, 0, 10, 10}, {20, 20, 30, 30}};
  const std::vector<Deltas> d(2);
  const ProposalSet s = select_proposals(anchors, {1.0, 3.0}, {2.0, -1.0}, d, 40, 40, {10, 10, 0.7, 1}, "logit");
  REQUIRE(s.size() == 2);
  CHECK(s.scores[0] == doctest::Approx(3.0));
  CHECK(s.scores[1] == doctest::Approx(2.0));
  CHECK(s.anchors == std::vector<int>{0, 1});
}

TEST_CASE("excitation values and reweighting") {
  Rng rng(4);
  const Config c = small_config();
  ExcitationParams p = ExcitationParams::init(c.model, rng);
  CHECK(p.w1.shape() == std::vector<int>{4, 5});
  CHECK(p.w2.shape() == std::vector<int>{8, 4});
  const Tensor zt = randn({5}, rng);
  const Tensor s = excite(ad::constant(zt), p).value();
  // Direct evaluation of sigmoid(W2 relu(W1 z + b1) + b2).
  for (int i = 0; i < 8; ++i) {
    double acc = p.b2.value()[i];
    for (int j = 0; j < 4; ++j) {
      double h = p.b1.value()[j];
      for (int k = 0; k < 5; ++k) h += p.w1.value().at(j, k) * zt[k];
      acc += p.w2.value().at(i, j) * std::max(h, 0.0);
    }
    CHECK(s[i] == doctest::Approx(1 / (1 + std::exp(-acc))).epsilon(1e-12));
    CHECK(s[i] > 0.0);
    CHECK(s[i] < 1.0);
  }
  CHECK_THROWS_AS(excite(ad::constant(Tensor({4})), p), Error);

  const Tensor fm = randn({8, 3, 2}, rng);
  const Tensor out = reweight(ad::constant(fm), ad::constant(s)).value();
  for (int ch = 0; ch < 8; ++ch)
    for (int i = 0; i < 6; ++i) CHECK(out[ch * 6 + i] == doctest::Approx(s[ch] * fm[ch * 6 + i]));
  CHECK(reweight(ad::constant(fm), ad::constant(Tensor({8}, 1.0))).value().storage() == fm.storage());
  CHECK(std::all_of(reweight(ad::constant(fm), ad::constant(Tensor({8}))).value().values().begin(),
                    reweight(ad::constant(fm), ad::constant(Tensor({8}))).value().values().end(),
                    [](double v) { return v == 0.0; }));
}

TEST_CASE("saturated excitation with tied heads doubles the rpn probability") {
  Rng rng(5);
  Config c = small_config();
  c.model.score_fusion = "prob";
  ProposalParams p;
  p.rpn = RpnHeadParams::init(c.model, 6, rng);
  p.sdrpn = p.rpn;
  p.excitation = ExcitationParams::init(c.model, rng);
  p.excitation.b2.mutable_value().fill(60.0);  // sigmoid rounds to exactly 1
  const Var fm = ad::constant(randn({8, 6, 6}, rng));
  const Var z = ad::constant(randn({5}, rng));

  const ProposalOutputs both = propose(fm, z, p, c, Phase::kInfer, 48, 48);
  const ProposalOutputs plain = propose(fm, std::nullopt, p, c, Phase::kInfer, 48, 48);
  REQUIRE(both.sdrpn.has_value());
  CHECK_FALSE(plain.sdrpn.has_value());
  for (double v : both.excitation.value().values()) CHECK(v == 1.0);
  REQUIRE(both.proposals.size() == plain.proposals.size());
  for (std::size_t i = 0; i < plain.proposals.size(); ++i) {
    CHECK(both.proposals.boxes[i] == plain.proposals.boxes[i]);
    CHECK(both.proposals.scores[i] == doctest::Approx(2 * plain.proposals.scores[i]));
  }

  // Disabling the branch in the config ignores z.
  c.model.sdrpn = false;
  const ProposalOutputs off = propose(fm, z, p, c, Phase::kInfer, 48, 48);
  CHECK_FALSE(off.sdrpn.has_value());
  CHECK(off.proposals.scores == plain.proposals.scores);
  CHECK(off.proposals.sdrpn_scores.empty());
}

TEST_CASE("proposal budgets follow the phase") {
  RpnConfig r;
  CHECK(train_budget(r).pre_nms == r.pre_nms_train);
  CHECK(train_budget(r).post_nms == r.post_nms_train);
  CHECK(infer_budget(r).pre_nms == r.pre_nms_infer);
  CHECK(infer_budget(r).post_nms == r.post_nms_infer);
}

TEST_CASE("proposal gradients pass the finite-difference suite") {
  GradCheckOptions o;
  o.only = {"excite", "rpn_head"};
  for (const auto& row : run_gradcheck(o)) {
    INFO(row.name);
    CHECK(row.pass);
  }
}
