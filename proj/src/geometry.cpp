#include "tbps/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tbps/tensor.hpp"

namespace tbps {
namespace {

// exp() clamp for dw/dh, as in the reference detectors.
const double kMaxLogScale = std::log(1000.0 / 16.0);

void check_anchor(const BBox& a) {
  require(a.width() > 0 && a.height() > 0, "anchor with non-positive width or height");
}

}  // namespace

double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

BBox clip(const BBox& b, int image_w, int image_h) {
  return {std::clamp(b.x1, 0.0, static_cast<double>(image_w)),
          std::clamp(b.y1, 0.0, static_cast<double>(image_h)),
          std::clamp(b.x2, 0.0, static_cast<double>(image_w)),
          std::clamp(b.y2, 0.0, static_cast<double>(image_h))};
}

BBox hflip(const BBox& b, int image_w) { return {image_w - b.x2, b.y1, image_w - b.x1, b.y2}; }

Deltas encode_box(const BBox& anchor, const BBox& target) {
  check_anchor(anchor);
  require(target.valid(), "encode_box: invalid target box");
  return {(target.cx() - anchor.cx()) / anchor.width(), (target.cy() - anchor.cy()) / anchor.height(),
          std::log(target.width() / anchor.width()), std::log(target.height() / anchor.height())};
}

BBox decode_box(const BBox& anchor, const Deltas& d) {
  check_anchor(anchor);
  const double cx = anchor.cx() + d[0] * anchor.width();
  const double cy = anchor.cy() + d[1] * anchor.height();
  const double w = anchor.width() * std::exp(std::min(d[2], kMaxLogScale));
  const double h = anchor.height() * std::exp(std::min(d[3], kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<Deltas> encode_boxes(const std::vector<BBox>& anchors, const std::vector<BBox>& targets) {
  require(anchors.size() == targets.size(), "encode_boxes: length mismatch");
  std::vector<Deltas> out;
  out.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) out.push_back(encode_box(anchors[i], targets[i]));
  return out;
}

std::vector<BBox> decode_boxes(const std::vector<BBox>& anchors, const std::vector<Deltas>& deltas) {
  require(anchors.size() == deltas.size(), "decode_boxes: length mismatch");
  std::vector<BBox> out;
  out.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) out.push_back(decode_box(anchors[i], deltas[i]));
  return out;
}

std::vector<int> argsort_desc(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  return order;
}

std::vector<int> nms(const std::vector<BBox>& boxes, const std::vector<double>& scores,
                     double threshold, int max_keep) {
  require(boxes.size() == scores.size(), "nms: boxes and scores differ in length");
  const std::vector<int> order = argsort_desc(scores);
  std::vector<char> suppressed(boxes.size(), 0);
  std::vector<int> keep;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    if (max_keep >= 0 && static_cast<int>(keep.size()) >= max_keep) break;
    const int i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const int j = order[oj];
      if (!suppressed[j] && iou(boxes[i], boxes[j]) > threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

}  // namespace tbps
