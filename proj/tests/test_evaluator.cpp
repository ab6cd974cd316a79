#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "tbps/evaluator.hpp"

using namespace tbps;

namespace {

// Boxes on a coarse grid: two boxes either coincide or do not overlap.
BBox cell(int i) { return {i * 20.0, 0, i * 20.0 + 10, 10}; }

RankedResult ranked(const std::vector<std::pair<int, int>>& scene_cells) {
  RankedResult r;
  double score = 100;
  for (auto [s, c] : scene_cells) r.entries.push_back({s, 0, cell(c), score--});
  return r;
}

// Precision at each relevant rank, where relevance is set membership with
// each gt used once.
double ap_oracle(const RankedResult& r, const std::vector<GtBox>& gt) {
  std::multiset<std::pair<int, double>> pool;
  for (const auto& g : gt) pool.insert({g.scene, g.box.x1});
  double sum = 0;
  int hits = 0;
  for (std::size_t k = 0; k < r.entries.size(); ++k) {
    auto it = pool.find({r.entries[k].scene, r.entries[k].box.x1});
    if (it == pool.end()) continue;
    pool.erase(it);
    sum += static_cast<double>(++hits) / (k + 1);
  }
  return sum / gt.size();
}

int first_hit_oracle(const RankedResult& r, const std::vector<GtBox>& gt) {
  for (std::size_t k = 0; k < r.entries.size(); ++k)
    for (const auto& g : gt)
      if (g.scene == r.entries[k].scene && g.box == r.entries[k].box) return static_cast<int>(k);
  return -1;
}

Config tiny_config() {
  Config c = make_profile("desk");
  c.data.identities = 12;
  c.data.train_scenes = 6;
  c.data.gallery_scenes = 12;
  c.data.query_persons = 3;
  c.data.distractors = 2;
  c.data.image_w = 64;
  c.data.image_h = 64;
  c.data.persons_max = 3;
  c.model.dim = 8;
  c.model.base_channels = 8;
  c.model.stem1_channels = 4;
  c.model.stem2_channels = 4;
  c.model.reduction = 2;
  c.model.rpn_channels = 4;
  c.model.id_channels = 4;
  c.model.det_channels = 2;
  c.model.text_ffn = 8;
  c.model.text_layers = 1;
  c.rpn.pre_nms_infer = 100;
  c.rpn.post_nms_infer = 20;
  c.det.score_threshold = 0.0;
  return c;
}

}  // namespace

TEST_CASE("hand-computed average precision") {
  const std::vector<GtBox> one{{0, cell(1)}};
  CHECK(evaluate_query(ranked({{0, 1}, {0, 2}}), one).ap == doctest::Approx(1.0));
  CHECK(evaluate_query(ranked({{0, 2}, {0, 1}}), one).ap == doctest::Approx(0.5));
  CHECK(evaluate_query(ranked({{1, 1}, {0, 3}}), one).ap == 0.0);  // right box, wrong scene
  // Two targets found at ranks 1 and 3: (1 + 2/3) / 2.
  const std::vector<GtBox> two{{0, cell(1)}, {2, cell(4)}};
  const QueryOutcome o = evaluate_query(ranked({{0, 1}, {0, 5}, {2, 4}}), two);
  CHECK(o.ap == doctest::Approx((1 + 2.0 / 3) / 2));
  CHECK(o.correct == std::vector<bool>{true, false, true});
  // A duplicate detection of a matched box is a false positive.
  CHECK(evaluate_query(ranked({{0, 1}, {0, 1}}), one).correct == std::vector<bool>{true, false});
  // Missing targets cap AP.
  CHECK(evaluate_query(ranked({{0, 1}}), two).ap == doctest::Approx(0.5));
  CHECK(evaluate_query(RankedResult{}, one).ap == 0.0);
  CHECK_THROWS_AS(evaluate_query(ranked({{0, 1}}), {}), Error);
}

TEST_CASE("the overlap threshold is strict") {
  const std::vector<GtBox> gt{{0, {0, 0, 100, 100}}};
  auto one = [](BBox b) {
    RankedResult r;
    r.entries.push_back({0, 0, b, 1.0});
    return r;
  };
  // Widths chosen so IoU with the gt box is exactly 0.51, 0.50 and 0.49.
  CHECK(evaluate_query(one({0, 0, 51, 100}), gt).correct[0]);
  CHECK_FALSE(evaluate_query(one({0, 0, 50, 100}), gt).correct[0]);
  CHECK_FALSE(evaluate_query(one({0, 0, 49, 100}), gt).correct[0]);
}

TEST_CASE("ap and cmc agree with set-based oracles on random rankings") {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const int scenes = rng.range(1, 4), cells = rng.range(1, 5);
    std::vector<GtBox> gt;
    for (int g = rng.range(1, 3); g > 0; --g) gt.push_back({rng.range(0, scenes - 1), cell(rng.range(0, cells - 1))});
    std::vector<std::pair<int, int>> list;
    for (int k = rng.range(0, 12); k > 0; --k) list.push_back({rng.range(0, scenes - 1), rng.range(0, cells - 1)});
    const RankedResult r = ranked(list);
    const QueryOutcome o = evaluate_query(r, gt);
    CHECK(o.ap == doctest::Approx(ap_oracle(r, gt)).epsilon(1e-12));
    CHECK(o.ap >= 0.0);
    CHECK(o.ap <= 1.0 + 1e-12);

    const MetricReport rep = evaluate({r}, {gt}, 0.5, {1, 2, 3, 5, 10});
    const int first = first_hit_oracle(r, gt);
    double prev = 0;
    for (auto [k, v] : rep.cmc) {
      CHECK(v == ((first >= 0 && first < k) ? 1.0 : 0.0));
      CHECK(v >= prev);
      prev = v;
    }
  }
}

TEST_CASE("ranking breaks ties by scene then detection and ignores monotone rescaling") {
  std::vector<Detection> d(5);
  const int scene[] = {2, 0, 1, 0, 0};
  const int index[] = {0, 3, 0, 1, 2};
  for (int i = 0; i < 5; ++i) {
    d[i].scene = scene[i];
    d[i].index = index[i];
    d[i].box = cell(i);
  }
  const RankedResult r = rank(0, d, {0.5, 0.5, 0.9, 0.5, 0.1});
  std::vector<std::pair<int, int>> got;
  for (const auto& e : r.entries) got.push_back({e.scene, e.detection});
  CHECK(got == std::vector<std::pair<int, int>>{{1, 0}, {0, 1}, {0, 3}, {2, 0}, {0, 2}});
  CHECK_THROWS_AS(rank(0, d, {1.0}), Error);

  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Detection> dets(rng.range(1, 10));
    std::vector<double> s(dets.size()), t(dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i) {
      dets[i].scene = rng.range(0, 2);
      dets[i].index = static_cast<int>(i);
      dets[i].box = cell(rng.range(0, 3));
      s[i] = rng.range(-3, 3);
      t[i] = std::exp(0.5 * s[i]) + 7;  // strictly increasing transform
    }
    const std::vector<GtBox> gt{{dets[0].scene, dets[0].box}};
    const RankedResult a = rank(0, dets, s), b = rank(0, dets, t);
    CHECK(evaluate_query(a, gt).ap == evaluate_query(b, gt).ap);
    for (std::size_t i = 1; i < a.entries.size(); ++i) CHECK(a.entries[i - 1].score >= a.entries[i].score);
  }
}

TEST_CASE("random baselines match exhaustive enumeration") {
  for (int n = 1; n <= 8; ++n)
    for (int r = 1; r <= n; ++r) {
      // Every placement of r relevant items among n positions is equally likely.
      double ap = 0, count = 0;
      std::vector<double> cmc(n + 1, 0.0);
      for (unsigned mask = 0; mask < (1u << n); ++mask) {
        if (__builtin_popcount(mask) != r) continue;
        ++count;
        int hits = 0, first = -1;
        double sum = 0;
        for (int k = 0; k < n; ++k)
          if (mask & (1u << k)) {
            sum += static_cast<double>(++hits) / (k + 1);
            if (first < 0) first = k;
          }
        ap += sum / r;
        for (int k = 1; k <= n; ++k) cmc[k] += first < k;
      }
      CHECK(random_ap(r, n) == doctest::Approx(ap / count).epsilon(1e-12));
      for (int k = 1; k <= n; ++k) CHECK(random_cmc(r, n, k) == doctest::Approx(cmc[k] / count).epsilon(1e-12));
      CHECK(random_cmc(r, n, n + 3) == doctest::Approx(1.0));
    }
  CHECK_THROWS_AS(random_ap(0, 5), Error);
  CHECK_THROWS_AS(random_cmc(6, 5, 1), Error);
}

TEST_CASE("gallery sampling") {
  for (int q = 0; q < 50; ++q) {
    const auto g = sample_gallery(q % 20, 20, 7, 11, q);
    CHECK(g.size() == 7);
    CHECK(std::is_sorted(g.begin(), g.end()));
    CHECK(std::adjacent_find(g.begin(), g.end()) == g.end());
    CHECK(std::find(g.begin(), g.end(), q % 20) != g.end());
    CHECK(g == sample_gallery(q % 20, 20, 7, 11, q));
  }
  CHECK(sample_gallery(3, 20, 20, 11, 0).size() == 20);
  CHECK(sample_gallery(3, 20, 1, 11, 0) == std::vector<int>{3});
  CHECK(sample_gallery(3, 20, 7, 11, 0) != sample_gallery(3, 20, 7, 11, 1));
  CHECK_THROWS_AS(sample_gallery(3, 20, 21, 11, 0), Error);
  CHECK_THROWS_AS(sample_gallery(3, 20, 0, 11, 0), Error);
}

TEST_CASE("evaluate aggregates queries") {
  const std::vector<GtBox> gt{{0, cell(1)}};
  const MetricReport rep = evaluate({ranked({{0, 1}}), ranked({{0, 2}, {0, 1}}), RankedResult{}}, {gt, gt, gt});
  CHECK(rep.queries == 3);
  CHECK(rep.map == doctest::Approx((1 + 0.5 + 0) / 3));
  CHECK(rep.cmc.at(1) == doctest::Approx(1.0 / 3));
  CHECK(rep.cmc.at(5) == doctest::Approx(2.0 / 3));
  CHECK_THROWS_AS(evaluate({RankedResult{}}, {}), Error);
}

TEST_CASE("gallery sweep over an untrained model") {
  const Config c = tiny_config();
  const DatasetSplit data = generate_dataset(c.data, 4);
  const Model m = Model::init(c, caption_vocabulary(data), 12, 5);
  SearchEngine engine(m, data.gallery);
  const SweepOutput out = gallery_sweep(engine, data, {2, 12}, 3);
  REQUIRE(out.reports.size() == 2);
  for (std::size_t s = 0; s < 2; ++s) {
    const MetricReport& rep = out.reports[s];
    CHECK(rep.queries == static_cast<int>(data.queries.size()));
    CHECK(rep.random_map > 0.0);
    CHECK(rep.random_map <= 1.0);
    for (std::size_t q = 0; q < data.queries.size(); ++q) {
      const auto scenes = sample_gallery(data.queries[q].scene, 12, rep.gallery_size, 3, static_cast<int>(q));
      for (const auto& e : out.results[s][q].entries)
        CHECK(std::find(scenes.begin(), scenes.end(), e.scene) != scenes.end());
      CHECK_FALSE(out.gt[s][q].empty());
    }
  }
  // The full gallery has at least as many gt instances per query.
  for (std::size_t q = 0; q < data.queries.size(); ++q) CHECK(out.gt[1][q].size() >= out.gt[0][q].size());
  CHECK(out.reports[1].random_map <= out.reports[0].random_map + 1e-12);

  SearchEngine again(m, data.gallery);
  const SweepOutput repeat = gallery_sweep(again, data, {2}, 3);
  CHECK(repeat.reports[0].map == out.reports[0].map);
  CHECK_THROWS_AS(gallery_sweep(engine, data, {13}, 3), Error);
  CHECK_THROWS_AS(gallery_sweep(engine, data, {0}, 3), Error);
}

TEST_CASE("detections are unit-norm and ordered") {
  const Config c = tiny_config();
  const DatasetSplit data = generate_dataset(c.data, 4);
  const Model m = Model::init(c, caption_vocabulary(data), 12, 5);
  SearchEngine engine(m, data.gallery);
  const auto q = engine.encode_query(data.queries[0].caption);
  const auto& dets = engine.detect(0, q);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    CHECK(dets[i].scene == 0);
    CHECK(dets[i].index == static_cast<int>(i));
    CHECK(dets[i].box.valid());
    double n = 0;
    for (double v : dets[i].embedding.values()) n += v * v;
    CHECK(n == doctest::Approx(1.0));
    if (i > 0) CHECK(dets[i - 1].prob >= dets[i].prob);
  }
}
