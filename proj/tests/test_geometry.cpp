#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "tbps/geometry.hpp"
#include "tbps/rng.hpp"
#include "tbps/tensor.hpp"

using namespace tbps;

namespace {

BBox random_int_box(Rng& rng, int size) {
  const int x1 = rng.range(0, size - 2), y1 = rng.range(0, size - 2);
  return BBox{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(rng.range(x1 + 1, size)),
              static_cast<double>(rng.range(y1 + 1, size))};
}

// Counts unit cells covered by integer boxes.
double cell_iou(const BBox& a, const BBox& b, int size) {
  int inter = 0, uni = 0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool ia = x >= a.x1 && x + 1 <= a.x2 && y >= a.y1 && y + 1 <= a.y2;
      const bool ib = x >= b.x1 && x + 1 <= b.x2 && y >= b.y1 && y + 1 <= b.y2;
      inter += ia && ib;
      uni += ia || ib;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

}  // namespace

TEST_CASE("iou hand cases") {
  CHECK(iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0);
  CHECK(iou({0, 0, 10, 10}, {5, 5, 15, 15}) == doctest::Approx(25.0 / 175.0));
  CHECK(iou({0, 0, 10, 10}, {0, 0, 10, 10}) == 1.0);
  CHECK(iou({0, 0, 10, 10}, {10, 0, 20, 10}) == 0.0);
}

TEST_CASE("iou equals the cell-counting oracle on integer boxes") {
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const BBox a = random_int_box(rng, 12), b = random_int_box(rng, 12);
    CHECK(iou(a, b) == doctest::Approx(cell_iou(a, b, 12)).epsilon(1e-12));
    CHECK(iou(a, b) == iou(b, a));
  }
}

TEST_CASE("box coding round trips and zero deltas are the identity") {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const BBox a = random_int_box(rng, 50), t = random_int_box(rng, 50);
    const BBox d = decode_box(a, encode_box(a, t));
    CHECK(d.x1 == doctest::Approx(t.x1));
    CHECK(d.y2 == doctest::Approx(t.y2));
    const BBox same = decode_box(a, Deltas{0, 0, 0, 0});
    CHECK(same.x1 == doctest::Approx(a.x1));
    CHECK(same.x2 == doctest::Approx(a.x2));
    CHECK(same.y1 == doctest::Approx(a.y1));
    CHECK(same.y2 == doctest::Approx(a.y2));
  }
  CHECK_THROWS_AS(decode_box({5, 5, 5, 9}, Deltas{0, 0, 0, 0}), Error);
}

TEST_CASE("clip and flip") {
  const BBox c = clip({-3, 2, 140, 90}, 128, 64);
  CHECK(c == BBox{0, 2, 128, 64});
  const BBox f = hflip({10, 5, 30, 40}, 100);
  CHECK(f == BBox{70, 5, 90, 40});
  CHECK(hflip(f, 100) == BBox{10, 5, 30, 40});
}

TEST_CASE("nms hand cases") {
  CHECK(nms({{0, 0, 5, 5}}, {0.3}, 0.5) == std::vector<int>{0});
  CHECK(nms({{0, 0, 10, 10}, {0, 0, 10, 10}}, {0.9, 0.8}, 0.5) == std::vector<int>{0});
  CHECK(nms({{0, 0, 1, 1}, {2, 2, 3, 3}, {4, 4, 5, 5}}, {0.1, 0.3, 0.2}, 0.5) == std::vector<int>{1, 2, 0});
  CHECK(nms({{0, 0, 1, 1}, {2, 2, 3, 3}, {4, 4, 5, 5}}, {0.1, 0.3, 0.2}, 0.5, 2) == std::vector<int>{1, 2});
  CHECK_THROWS_AS(nms({{0, 0, 1, 1}}, {}, 0.5), Error);
}

TEST_CASE("nms output satisfies the greedy characterisation on random instances") {
  // K is the greedy result iff each kept box overlaps no better-ranked kept
  // box and each dropped box overlaps some better-ranked kept box.
  Rng rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.range(1, 12);
    std::vector<BBox> boxes;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      boxes.push_back(random_int_box(rng, 10));
      scores.push_back(rng.range(0, 5) / 5.0);  // ties on purpose
    }
    const double thr = rng.uniform(0.1, 0.8);
    const auto keep = nms(boxes, scores, thr);
    auto better = [&](int i, int j) { return scores[i] > scores[j] || (scores[i] == scores[j] && i < j); };
    std::vector<bool> kept(n, false);
    for (int k : keep) kept[k] = true;
    for (int j = 0; j < n; ++j) {
      bool covered = false;
      for (int i = 0; i < n; ++i)
        if (i != j && kept[i] && better(i, j) && iou(boxes[i], boxes[j]) > thr) covered = true;
      CHECK(kept[j] == !covered);
    }
    for (std::size_t a = 1; a < keep.size(); ++a) CHECK(better(keep[a - 1], keep[a]));
    const int cap = rng.range(0, n);
    const auto capped = nms(boxes, scores, thr, cap);
    CHECK(capped == std::vector<int>(keep.begin(), keep.begin() + std::min<std::size_t>(cap, keep.size())));
  }
}

TEST_CASE("nms is independent of input order when scores are distinct") {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.range(2, 10);
    std::vector<BBox> boxes;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      boxes.push_back(random_int_box(rng, 10));
      scores.push_back(rng.uniform());
    }
    const auto perm = rng.permutation(n);
    std::vector<BBox> pb(n);
    std::vector<double> ps(n);
    for (int i = 0; i < n; ++i) {
      pb[i] = boxes[perm[i]];
      ps[i] = scores[perm[i]];
    }
    std::vector<int> a = nms(boxes, scores, 0.4), b;
    for (int k : nms(pb, ps, 0.4)) b.push_back(perm[k]);
    CHECK(a == b);
  }
}

TEST_CASE("argsort_desc breaks ties by index") {
  CHECK(argsort_desc({0.5, 0.9, 0.5, 0.1}) == std::vector<int>{1, 0, 2, 3});
}
