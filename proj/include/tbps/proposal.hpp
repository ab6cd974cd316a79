#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tbps/autodiff.hpp"
#include "tbps/config.hpp"
#include "tbps/geometry.hpp"
#include "tbps/nn.hpp"

namespace tbps {

struct ExcitationParams {
  int reduction = 16;
  ad::Var w1, b1;  // [C1/r, D], [C1/r]
  ad::Var w2, b2;  // [C1, C1/r], [C1]

  static ExcitationParams init(const ModelConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, Group group, ParamList& out) const;
};

// s = sigmoid(W2 relu(W1 z + b1) + b2), z is [D] or [1,D]; returns [C1].
ad::Var excite(const ad::Var& z, const ExcitationParams& p);

// X_hat[c,h,w] = s[c] * X[c,h,w].
ad::Var reweight(const ad::Var& fm, const ad::Var& s);

struct RpnHeadParams {
  ad::Var conv_w, conv_b;
  ad::Var cls_w, cls_b;  // A outputs
  ad::Var reg_w, reg_b;  // 4A outputs

  static RpnHeadParams init(const ModelConfig& cfg, int anchors_per_location, Rng& rng);
  void collect(const std::string& prefix, Group group, ParamList& out) const;
};

// Anchor k at location (h,w) with shape a has k = (h*W' + w)*A + a. Its logit
// sits at flat index a*H'W' + h*W' + w of `logits`, and delta component j at
// (4a + j)*H'W' + h*W' + w of `deltas`.
struct RpnOutput {
  ad::Var logits;  // [A,H',W']
  ad::Var deltas;  // [4A,H',W']
  int anchors_per_location = 0;

  int height() const { return logits.shape()[1]; }
  int width() const { return logits.shape()[2]; }
  int anchor_count() const { return anchors_per_location * height() * width(); }
  int logit_index(int anchor) const;
  int delta_index(int anchor, int component) const;
  std::vector<double> logit_values() const;
  std::vector<Deltas> delta_values() const;
};

RpnOutput rpn_head(const ad::Var& fm, const RpnHeadParams& p);

// Anchors for every feature location in image coordinates. Shapes: scale *
// unit as side of the square, ratio = height / width at equal area.
std::vector<BBox> make_anchors(int feat_h, int feat_w, int stride, const std::vector<double>& scales,
                               const std::vector<double>& ratios, double unit);

enum class LabelMode { kAllPersons, kTextRelevant };

struct AnchorLabels {
  std::vector<int> labels;   // 1 positive, 0 negative, -1 ignore
  std::vector<int> matched;  // best gt index per anchor, -1 without gt
};

AnchorLabels assign_anchor_labels(const std::vector<BBox>& anchors, const std::vector<BBox>& gt,
                                  LabelMode mode, double pos_iou = 0.7, double neg_iou = 0.3);

// Random subset of at most `batch` labelled anchors with at most
// batch*pos_fraction positives; the rest become ignore (-1).
std::vector<int> sample_anchor_labels(const std::vector<int>& labels, int batch, double pos_fraction, Rng& rng);

struct ProposalSet {
  std::vector<BBox> boxes;
  std::vector<double> scores;        // fused, descending
  std::vector<double> rpn_scores;    // branch scores (probabilities or logits)
  std::vector<double> sdrpn_scores;  // empty when the branch is disabled
  std::vector<int> anchors;          // source anchor index per proposal

  std::size_t size() const { return boxes.size(); }
};

struct ProposalBudget {
  int pre_nms = 6000;
  int post_nms = 300;
  double nms = 0.7;
  double min_size = 1.0;
};

ProposalBudget train_budget(const RpnConfig& c);
ProposalBudget infer_budget(const RpnConfig& c);

// Pure selection stage: fuse, keep the top pre_nms anchors, decode with the
// given deltas, clip, drop boxes smaller than min_size, NMS, keep post_nms.
// An empty sdrpn_logits disables the semantic branch.
ProposalSet select_proposals(const std::vector<BBox>& anchors, const std::vector<double>& rpn_logits,
                             const std::vector<double>& sdrpn_logits, const std::vector<Deltas>& deltas,
                             int image_w, int image_h, const ProposalBudget& budget,
                             const std::string& fusion = "prob");

enum class Phase { kTrain, kInfer };

struct ProposalParams {
  RpnHeadParams rpn;
  RpnHeadParams sdrpn;
  ExcitationParams excitation;
};

struct ProposalOutputs {
  RpnOutput rpn;
  std::optional<RpnOutput> sdrpn;
  ad::Var excitation;  // [C1], undefined without z
  ProposalSet proposals;
};

// Runs both heads; a missing z (or cfg.model.sdrpn == false) falls back to
// RPN-only scoring.
ProposalOutputs propose(const ad::Var& fm, const std::optional<ad::Var>& z, const ProposalParams& params,
                        const Config& cfg, Phase phase, int image_w, int image_h);

}  // namespace tbps
