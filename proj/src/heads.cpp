#include "tbps/heads.hpp"

#include <cmath>

namespace tbps {

using ad::Var;

DetNetParams DetNetParams::init(const ModelConfig& cfg, Rng& rng) {
  DetNetParams p;
  p.conv_w = conv_param(cfg.det_channels, cfg.base_channels, 1, rng);
  p.conv_b = zero_param({cfg.det_channels});
  const int flat = cfg.det_channels * cfg.roi_size * cfg.roi_size;
  p.fc_w = normal_param({6, flat}, 0.01, rng);
  p.fc_b = zero_param({6});
  return p;
}

void DetNetParams::collect(const std::string& prefix, Group group, ParamList& out) const {
  out.push_back({prefix + ".conv_w", conv_w, group});
  out.push_back({prefix + ".conv_b", conv_b, group});
  out.push_back({prefix + ".fc_w", fc_w, group});
  out.push_back({prefix + ".fc_b", fc_b, group});
}

std::vector<double> DetOutput::person_prob() const {
  const Tensor& l = logits.value();
  std::vector<double> out(l.dim(0));
  for (int i = 0; i < l.dim(0); ++i) out[i] = 1.0 / (1.0 + std::exp(l.at(i, 0) - l.at(i, 1)));
  return out;
}

std::vector<Deltas> DetOutput::delta_values() const {
  const Tensor& d = deltas.value();
  std::vector<Deltas> out(d.dim(0));
  for (int i = 0; i < d.dim(0); ++i)
    for (int j = 0; j < 4; ++j) out[i][j] = d.at(i, j);
  return out;
}

DetOutput det_forward(const Var& pooled, const DetNetParams& p) {
  require(pooled.value().rank() == 4, "det_forward: expected [N,C,P,P]");
  const int n = pooled.shape()[0];
  Var h = ad::relu(ad::conv2d(pooled, p.conv_w, p.conv_b, 1, 0));
  h = ad::reshape(h, {n, static_cast<int>(h.size()) / std::max(n, 1)});
  Var out = linear(h, p.fc_w, p.fc_b);
  return {ad::gather_cols(out, {0, 1}), ad::gather_cols(out, {2, 3, 4, 5})};
}

std::vector<BBox> refine_boxes(const std::vector<BBox>& proposals, const std::vector<Deltas>& deltas,
                               int image_w, int image_h) {
  auto out = decode_boxes(proposals, deltas);
  for (auto& b : out) b = clip(b, image_w, image_h);
  return out;
}

namespace {

void normalize(double* v, int d) {
  double s = 0;
  for (int j = 0; j < d; ++j) s += v[j] * v[j];
  s = std::sqrt(s);
  if (s > 0)
    for (int j = 0; j < d; ++j) v[j] /= s;
}

}  // namespace

OimState OimState::init(int identities, int dim, const OimConfig& cfg, Rng& rng) {
  require(identities > 0 && dim > 0 && cfg.queue >= 0, "oim: invalid sizes");
  OimState s;
  s.lut = Tensor({identities, dim});
  for (double& v : s.lut.values()) v = rng.normal();
  for (int i = 0; i < identities; ++i) normalize(s.lut.data() + i * dim, dim);
  s.queue = Tensor({cfg.queue, dim});
  s.momentum = cfg.momentum;
  s.temperature = cfg.temperature;
  return s;
}

std::vector<int> OimState::queue_order() const {
  std::vector<int> out;
  const int cap = capacity();
  for (int i = 0; i < queue_count; ++i) out.push_back((queue_head - queue_count + i + cap) % cap);
  return out;
}

void OimState::push(const double* row) {
  const int cap = capacity();
  if (cap == 0) return;
  const int d = queue.dim(1);
  std::copy_n(row, d, queue.data() + static_cast<std::size_t>(queue_head) * d);
  normalize(queue.data() + static_cast<std::size_t>(queue_head) * d, d);
  queue_head = (queue_head + 1) % cap;
  queue_count = std::min(queue_count + 1, cap);
}

OimResult oim_loss(const Var& embeddings, const std::vector<int>& labels, const OimState& state) {
  require(embeddings.value().rank() == 2 && embeddings.shape()[0] == static_cast<int>(labels.size()),
          "oim_loss: one label per embedding required");
  const int d = embeddings.shape()[1], l = state.identities();
  require(d == state.lut.dim(1), "oim_loss: embedding dimension mismatch");
  std::vector<int> labelled_rows, targets;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] == kUnlabeled || (labels[i] >= 0 && labels[i] < l),
            "oim_loss: label " + std::to_string(labels[i]) + " outside [0," + std::to_string(l) + ")");
    if (labels[i] != kUnlabeled) {
      labelled_rows.push_back(static_cast<int>(i));
      targets.push_back(labels[i]);
    }
  }
  OimResult out{ad::constant(Tensor::scalar(0.0)), state};
  if (!labelled_rows.empty()) {
    const auto filled = state.queue_order();
    Tensor bank({l + static_cast<int>(filled.size()), d});
    std::copy(state.lut.values().begin(), state.lut.values().end(), bank.data());
    for (std::size_t q = 0; q < filled.size(); ++q)
      std::copy_n(state.queue.data() + static_cast<std::size_t>(filled[q]) * d, d,
                  bank.data() + (l + q) * static_cast<std::size_t>(d));
    Var x = ad::gather_rows(embeddings, labelled_rows);
    Var logits = ad::scale(ad::matmul_bt(x, ad::constant(std::move(bank))), 1.0 / state.temperature);
    out.loss = cross_entropy(logits, targets);
  }
  const Tensor& e = embeddings.value();
  const double m = state.momentum;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = e.data() + i * d;
    if (labels[i] == kUnlabeled) {
      out.state.push(row);
    } else {
      double* proto = out.state.lut.data() + static_cast<std::size_t>(labels[i]) * d;
      for (int j = 0; j < d; ++j) proto[j] = m * proto[j] + (1 - m) * row[j];
      normalize(proto, d);
    }
  }
  return out;
}

}  // namespace tbps
