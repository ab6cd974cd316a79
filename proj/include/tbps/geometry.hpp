#pragma once

#include <array>
#include <vector>

namespace tbps {

// Axis-aligned box in pixel coordinates, x1 < x2 and y1 < y2.
struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return x1 + 0.5 * width(); }
  double cy() const { return y1 + 0.5 * height(); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  bool operator==(const BBox&) const = default;
};

using Deltas = std::array<double, 4>;  // dx, dy, dw, dh

double iou(const BBox& a, const BBox& b);

BBox clip(const BBox& b, int image_w, int image_h);
BBox hflip(const BBox& b, int image_w);

// Faster R-CNN box parameterisation. Both throw on non-positive anchor sides.
Deltas encode_box(const BBox& anchor, const BBox& target);
BBox decode_box(const BBox& anchor, const Deltas& d);
std::vector<Deltas> encode_boxes(const std::vector<BBox>& anchors, const std::vector<BBox>& targets);
std::vector<BBox> decode_boxes(const std::vector<BBox>& anchors, const std::vector<Deltas>& deltas);

// Greedy suppression in descending score order; equal scores keep the lower
// index first. A box is dropped when its IoU with a kept box exceeds
// `threshold`. At most `max_keep` indices are returned (negative = no cap).
std::vector<int> nms(const std::vector<BBox>& boxes, const std::vector<double>& scores,
                     double threshold, int max_keep = -1);

// Indices sorted by descending score, ties by ascending index.
std::vector<int> argsort_desc(const std::vector<double>& scores);

}  // namespace tbps
