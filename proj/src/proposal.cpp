#include "tbps/proposal.hpp"

#include <algorithm>
#include <cmath>

#include "tbps/backbone.hpp"

namespace tbps {

using ad::Var;

ExcitationParams ExcitationParams::init(const ModelConfig& cfg, Rng& rng) {
  require(cfg.reduction > 0 && cfg.base_channels % cfg.reduction == 0,
          "excitation: reduction must divide base_channels");
  ExcitationParams p;
  p.reduction = cfg.reduction;
  const int hidden = cfg.base_channels / cfg.reduction;
  p.w1 = linear_param(hidden, cfg.dim, rng);
  p.b1 = zero_param({hidden});
  p.w2 = linear_param(cfg.base_channels, hidden, rng);
  p.b2 = zero_param({cfg.base_channels});
  return p;
}

void ExcitationParams::collect(const std::string& prefix, Group group, ParamList& out) const {
  out.push_back({prefix + ".w1", w1, group});
  out.push_back({prefix + ".b1", b1, group});
  out.push_back({prefix + ".w2", w2, group});
  out.push_back({prefix + ".b2", b2, group});
}

Var excite(const Var& z, const ExcitationParams& p) {
  const int d = p.w1.shape()[1];
  require(static_cast<int>(z.size()) == d, "excite: z has " + std::to_string(z.size()) +
                                               " components, expected " + std::to_string(d));
  Var h = ad::relu(linear(ad::reshape(z, {1, d}), p.w1, p.b1));
  Var s = ad::sigmoid(linear(h, p.w2, p.b2));
  return ad::reshape(s, {p.w2.shape()[0]});
}

Var reweight(const Var& fm, const Var& s) { return ad::channel_scale(fm, s); }

RpnHeadParams RpnHeadParams::init(const ModelConfig& cfg, int a, Rng& rng) {
  RpnHeadParams p;
  p.conv_w = conv_param(cfg.rpn_channels, cfg.base_channels, 3, rng);
  p.conv_b = zero_param({cfg.rpn_channels});
  p.cls_w = normal_param({a, cfg.rpn_channels, 1, 1}, 0.01, rng);
  p.cls_b = zero_param({a});
  p.reg_w = normal_param({4 * a, cfg.rpn_channels, 1, 1}, 0.01, rng);
  p.reg_b = zero_param({4 * a});
  return p;
}

void RpnHeadParams::collect(const std::string& prefix, Group group, ParamList& out) const {
  out.push_back({prefix + ".conv_w", conv_w, group});
  out.push_back({prefix + ".conv_b", conv_b, group});
  out.push_back({prefix + ".cls_w", cls_w, group});
  out.push_back({prefix + ".cls_b", cls_b, group});
  out.push_back({prefix + ".reg_w", reg_w, group});
  out.push_back({prefix + ".reg_b", reg_b, group});
}

int RpnOutput::logit_index(int anchor) const {
  const int loc = anchor / anchors_per_location, a = anchor % anchors_per_location;
  return a * height() * width() + loc;
}

int RpnOutput::delta_index(int anchor, int component) const {
  const int loc = anchor / anchors_per_location, a = anchor % anchors_per_location;
  return (4 * a + component) * height() * width() + loc;
}

std::vector<double> RpnOutput::logit_values() const {
  std::vector<double> out(anchor_count());
  for (int k = 0; k < anchor_count(); ++k) out[k] = logits.value()[logit_index(k)];
  return out;
}

std::vector<Deltas> RpnOutput::delta_values() const {
  std::vector<Deltas> out(anchor_count());
  for (int k = 0; k < anchor_count(); ++k)
    for (int j = 0; j < 4; ++j) out[k][j] = deltas.value()[delta_index(k, j)];
  return out;
}

RpnOutput rpn_head(const Var& fm, const RpnHeadParams& p) {
  Var h = ad::relu(ad::conv2d(fm, p.conv_w, p.conv_b, 1, 1));
  RpnOutput out;
  out.logits = ad::conv2d(h, p.cls_w, p.cls_b, 1, 0);
  out.deltas = ad::conv2d(h, p.reg_w, p.reg_b, 1, 0);
  out.anchors_per_location = p.cls_w.shape()[0];
  return out;
}

std::vector<BBox> make_anchors(int feat_h, int feat_w, int stride, const std::vector<double>& scales,
                               const std::vector<double>& ratios, double unit) {
  std::vector<BBox> shapes;
  for (double s : scales)
    for (double r : ratios) {
      const double side = s * unit;
      const double w = side / std::sqrt(r), h = side * std::sqrt(r);
      shapes.push_back({-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h});
    }
  std::vector<BBox> anchors;
  anchors.reserve(static_cast<std::size_t>(feat_h) * feat_w * shapes.size());
  for (int y = 0; y < feat_h; ++y)
    for (int x = 0; x < feat_w; ++x) {
      const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
      for (const BBox& s : shapes) anchors.push_back({cx + s.x1, cy + s.y1, cx + s.x2, cy + s.y2});
    }
  return anchors;
}

AnchorLabels assign_anchor_labels(const std::vector<BBox>& anchors, const std::vector<BBox>& gt,
                                  LabelMode mode, double pos_iou, double neg_iou) {
  if (mode == LabelMode::kTextRelevant)
    require(!gt.empty(), "assign_anchor_labels: text-relevant mode needs at least one box");
  const std::size_t n = anchors.size();
  AnchorLabels out{std::vector<int>(n, 0), std::vector<int>(n, -1)};
  if (gt.empty()) return out;
  std::vector<double> best(n, -1.0), gt_best(gt.size(), 0.0);
  std::vector<std::vector<double>> overlaps(gt.size(), std::vector<double>(n));
  for (std::size_t g = 0; g < gt.size(); ++g)
    for (std::size_t k = 0; k < n; ++k) {
      const double v = iou(anchors[k], gt[g]);
      overlaps[g][k] = v;
      if (v > best[k]) {
        best[k] = v;
        out.matched[k] = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  for (std::size_t k = 0; k < n; ++k)
    out.labels[k] = best[k] >= pos_iou ? 1 : (best[k] < neg_iou ? 0 : -1);
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (gt_best[g] <= 0) continue;
    for (std::size_t k = 0; k < n; ++k)
      if (overlaps[g][k] == gt_best[g]) {
        out.labels[k] = 1;
        out.matched[k] = static_cast<int>(g);
      }
  }
  return out;
}

std::vector<int> sample_anchor_labels(const std::vector<int>& labels, int batch, double pos_fraction, Rng& rng) {
  std::vector<int> pos, neg;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] == 1) pos.push_back(static_cast<int>(k));
    if (labels[k] == 0) neg.push_back(static_cast<int>(k));
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  const int max_pos = static_cast<int>(batch * pos_fraction);
  pos.resize(std::min<std::size_t>(pos.size(), max_pos));
  neg.resize(std::min<std::size_t>(neg.size(), batch - pos.size()));
  std::vector<int> out(labels.size(), -1);
  for (int k : pos) out[k] = 1;
  for (int k : neg) out[k] = 0;
  return out;
}

ProposalBudget train_budget(const RpnConfig& c) { return {c.pre_nms_train, c.post_nms_train, c.nms, c.min_size}; }
ProposalBudget infer_budget(const RpnConfig& c) { return {c.pre_nms_infer, c.post_nms_infer, c.nms, c.min_size}; }

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

ProposalSet select_proposals(const std::vector<BBox>& anchors, const std::vector<double>& rpn_logits,
                             const std::vector<double>& sdrpn_logits, const std::vector<Deltas>& deltas,
                             int image_w, int image_h, const ProposalBudget& budget, const std::string& fusion) {
  const std::size_t n = anchors.size();
  require(rpn_logits.size() == n && deltas.size() == n, "select_proposals: length mismatch");
  require(sdrpn_logits.empty() || sdrpn_logits.size() == n, "select_proposals: sdrpn length mismatch");
  require(fusion == "prob" || fusion == "logit", "select_proposals: unknown fusion '" + fusion + "'");
  const bool prob = fusion == "prob";
  std::vector<double> rpn(n), sd(sdrpn_logits.empty() ? 0 : n), fused(n);
  for (std::size_t k = 0; k < n; ++k) {
    rpn[k] = prob ? sigmoid(rpn_logits[k]) : rpn_logits[k];
    fused[k] = rpn[k];
    if (!sd.empty()) {
      sd[k] = prob ? sigmoid(sdrpn_logits[k]) : sdrpn_logits[k];
      fused[k] += sd[k];
    }
  }
  std::vector<int> order = argsort_desc(fused);
  if (budget.pre_nms >= 0 && order.size() > static_cast<std::size_t>(budget.pre_nms)) order.resize(budget.pre_nms);

  std::vector<BBox> boxes;
  std::vector<double> scores;
  std::vector<int> source;
  for (int k : order) {
    const BBox b = clip(decode_box(anchors[k], deltas[k]), image_w, image_h);
    if (b.width() < budget.min_size || b.height() < budget.min_size) continue;
    boxes.push_back(b);
    scores.push_back(fused[k]);
    source.push_back(k);
  }
  ProposalSet out;
  for (int i : nms(boxes, scores, budget.nms, budget.post_nms)) {
    out.boxes.push_back(boxes[i]);
    out.scores.push_back(scores[i]);
    out.anchors.push_back(source[i]);
    out.rpn_scores.push_back(rpn[source[i]]);
    if (!sd.empty()) out.sdrpn_scores.push_back(sd[source[i]]);
  }
  return out;
}

ProposalOutputs propose(const Var& fm, const std::optional<Var>& z, const ProposalParams& params,
                        const Config& cfg, Phase phase, int image_w, int image_h) {
  ProposalOutputs out;
  out.rpn = rpn_head(fm, params.rpn);
  const bool semantic = z.has_value() && z->defined() && cfg.model.sdrpn;
  if (semantic) {
    out.excitation = excite(*z, params.excitation);
    out.sdrpn = rpn_head(reweight(fm, out.excitation), params.sdrpn);
  }
  const auto anchors = make_anchors(out.rpn.height(), out.rpn.width(), kBackboneStride, cfg.model.anchor_scales,
                                    cfg.model.anchor_ratios, cfg.model.anchor_unit);
  std::vector<Deltas> deltas = out.rpn.delta_values();
  if (semantic && cfg.model.sdrpn_deltas) {
    const auto other = out.sdrpn->delta_values();
    for (std::size_t k = 0; k < deltas.size(); ++k)
      for (int j = 0; j < 4; ++j) deltas[k][j] = 0.5 * (deltas[k][j] + other[k][j]);
  }
  out.proposals = select_proposals(anchors, out.rpn.logit_values(),
                                   semantic ? out.sdrpn->logit_values() : std::vector<double>{}, deltas,
                                   image_w, image_h, phase == Phase::kTrain ? train_budget(cfg.rpn) : infer_budget(cfg.rpn),
                                   cfg.model.score_fusion);
  return out;
}

}  // namespace tbps
