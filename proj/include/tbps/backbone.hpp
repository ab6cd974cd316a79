#pragma once

#include <vector>

#include "tbps/autodiff.hpp"
#include "tbps/config.hpp"
#include "tbps/geometry.hpp"
#include "tbps/nn.hpp"

namespace tbps {

constexpr int kBackboneStride = 8;

struct BaseNetParams {
  ad::Var w1, b1, w2, b2, w3, b3;

  static BaseNetParams init(const ModelConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, Group group, ParamList& out) const;
};

// image [3,H,W] -> [C1, ceil(H/8), ceil(W/8)]; three stride-2 3x3 convs with
// ReLU. Throws on a non-3-channel input.
ad::Var base_forward(const ad::Var& image, const BaseNetParams& p);

// Aligned RoIAlign of boxes in image coordinates from fm [C,H',W'] into
// [N,C,P,P]. spatial_scale maps image to feature coordinates. If `box_grad`
// is defined it must be [N,4] holding the same boxes; its gradient is then
// accumulated. Throws on a box with non-positive projected extent.
ad::Var roi_align(const ad::Var& fm, const std::vector<BBox>& boxes, int pooled, double spatial_scale,
                  int sampling_ratio, const ad::Var& box_grad = ad::Var());

// pooled [N,C,P,P]: reorders k equal horizontal stripes per roi. A null rng
// keeps the identity order (inference). Throws when P % k != 0.
ad::Var split_shuffle(const ad::Var& pooled, int k, Rng* rng, std::vector<std::vector<int>>* perms = nullptr);

struct IdNetParams {
  ad::Var conv_w, conv_b;
  ad::Var global_w, global_b;
  ad::Var region_w, region_b;
  ad::Var local_w, local_b;

  static IdNetParams init(const ModelConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, Group group, ParamList& out) const;
};

// ID-Net trunk: 3x3 conv + ReLU over [N,C1,P,P].
ad::Var id_net(const ad::Var& pooled, const IdNetParams& p);

struct MultiScaleVisualFeatures {
  int rois = 0;
  ad::Var global;  // [N,D]
  std::vector<ad::Var> region;  // region_stripes x [N,D]
  std::vector<ad::Var> local;   // local_stripes x [N,D]

  // [N*m,D], roi-major: global, region..., local...
  ad::Var mixed() const;
  int parts() const { return 1 + static_cast<int>(region.size() + local.size()); }
};

// rng == nullptr disables shuffling (inference).
MultiScaleVisualFeatures extract_multiscale(const ad::Var& pooled, const IdNetParams& p,
                                            int region_stripes, int local_stripes, Rng* rng);

// Global pass only: ID-Net, average pool, projection.
ad::Var global_feature(const ad::Var& pooled, const IdNetParams& p);

// Unit-norm identity embeddings [N,D].
ad::Var id_forward(const ad::Var& pooled, const IdNetParams& p);

}  // namespace tbps
