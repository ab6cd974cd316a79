#include "tbps/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>

#include "tbps/backbone.hpp"
#include "tbps/cross_modal.hpp"
#include "tbps/heads.hpp"
#include "tbps/proposal.hpp"
#include "tbps/text_encoder.hpp"

namespace tbps {

using ad::Var;

namespace {

Tensor randn(std::vector<int> shape, Rng& rng, double std = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = std * rng.normal();
  return t;
}

Tensor rand_uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

Var leaf(Tensor t) { return Var(std::move(t), true); }

std::vector<Var> leaves_of(const ParamList& params) {
  std::vector<Var> out;
  for (const auto& p : params) out.push_back(p.var);
  return out;
}

// Moves parameters off their structured init (zero biases, unit gains).
void jitter(const std::vector<Var>& leaves, Rng& rng, double std = 0.1) {
  for (Var v : leaves)
    for (double& x : v.mutable_value().values()) x += std * rng.normal();
}

// Random fixed projections that turn tensor outputs into one scalar. The
// weights are drawn on first use and reused on every later evaluation.
class Weigher {
 public:
  explicit Weigher(std::uint64_t seed) : seed_(seed), weights_(std::make_shared<std::map<int, Tensor>>()) {}

  Var operator()(int slot, const Var& x) const {
    auto it = weights_->find(slot);
    if (it == weights_->end()) {
      Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(slot)));
      it = weights_->emplace(slot, randn(x.shape(), rng)).first;
    }
    return ad::sum(ad::mul(x, ad::constant(it->second)));
  }

 private:
  std::uint64_t seed_;
  std::shared_ptr<std::map<int, Tensor>> weights_;
};

std::vector<int> random_ids(int n, int classes, Rng& rng) {
  std::vector<int> ids(n);
  for (int& v : ids) v = rng.range(0, classes - 1);
  return ids;
}

std::vector<BBox> boxes_of(const Tensor& t) {
  std::vector<BBox> out;
  for (int r = 0; r < t.dim(0); ++r) out.push_back({t.at(r, 0), t.at(r, 1), t.at(r, 2), t.at(r, 3)});
  return out;
}

Tensor random_boxes(int n, double w, double h, Rng& rng) {
  Tensor t({n, 4});
  for (int r = 0; r < n; ++r) {
    const double bw = rng.uniform(0.3, 0.8) * w, bh = rng.uniform(0.3, 0.8) * h;
    const double x = rng.uniform(-0.1 * w, w - 0.8 * bw), y = rng.uniform(-0.1 * h, h - 0.8 * bh);
    t.at(r, 0) = x;
    t.at(r, 1) = y;
    t.at(r, 2) = x + bw;
    t.at(r, 3) = y + bh;
  }
  return t;
}

ModelConfig small_model(Rng& rng) {
  ModelConfig m;
  m.dim = rng.range(4, 6);
  m.stem1_channels = 3;
  m.stem2_channels = 4;
  m.base_channels = 2 * rng.range(2, 3);
  m.reduction = 2;
  m.rpn_channels = 4;
  m.id_channels = 4;
  m.det_channels = 3;
  m.roi_size = 6;
  m.sampling_ratio = 2;
  m.text_layers = 2;
  m.text_ffn = 8;
  m.max_len = 24;
  return m;
}

using Builder = GradCheckInstance (*)(Rng&);

GradCheckInstance make_cmpm(Rng& rng) {
  const int b = rng.range(3, 6), d = rng.range(3, 6);
  Var image = leaf(randn({b, d}, rng)), text = leaf(randn({b, d}, rng));
  const auto ids = random_ids(b, 3, rng);
  const LabelMatrix labels = LabelMatrix::from_identities(ids, ids);
  return {{image, text}, [=] { return cmpm_loss(image, text, labels, 1e-8); }};
}

GradCheckInstance make_cmpc(Rng& rng) {
  const int b = rng.range(3, 6), d = rng.range(3, 6), l = rng.range(3, 5);
  Var image = leaf(randn({b, d}, rng)), text = leaf(randn({b, d}, rng)), w = leaf(randn({l, d}, rng));
  const auto ids = random_ids(b, l, rng);
  return {{image, text, w}, [=] { return cmpc_loss(image, text, ids, w); }};
}

GradCheckInstance make_csal(Rng& rng, const std::string& norm) {
  const int b = rng.range(3, 6);
  Var s = leaf(rand_uniform({b, b}, rng, -0.9, 0.9)), sp = leaf(rand_uniform({b, b}, rng, -0.9, 0.9));
  const auto ids = random_ids(b, 3, rng);
  const LabelMatrix labels = LabelMatrix::from_identities(ids, ids);
  const double scale = rng.uniform() < 0.5 ? 1.0 : 5.0;
  return {{s, sp}, [=] { return csal_loss(s, sp, labels, 1e-8, norm, scale); }};
}

GradCheckInstance make_csal_softmax(Rng& rng) { return make_csal(rng, "softmax"); }
GradCheckInstance make_csal_sum(Rng& rng) { return make_csal(rng, "sum"); }

GradCheckInstance make_oim(Rng& rng) {
  const int n = rng.range(3, 6), d = rng.range(3, 6), l = rng.range(3, 5);
  OimConfig cfg;
  cfg.queue = 4;
  OimState state = OimState::init(l, d, cfg, rng);
  for (int i = rng.range(0, 6); i > 0; --i) {
    Tensor row = randn({d}, rng);
    double norm = 0;
    for (double v : row.values()) norm += v * v;
    for (double& v : row.values()) v /= std::sqrt(norm);
    state.push(row.data());
  }
  std::vector<int> labels = random_ids(n, l + 1, rng);
  for (int& y : labels)
    if (y == l) y = kUnlabeled;
  labels[0] = 0;
  Var emb = leaf(randn({n, d}, rng));
  return {{emb}, [=] { return oim_loss(ad::l2_normalize_rows(emb), labels, state).loss; }};
}

GradCheckInstance make_pair_similarity(Rng& rng) {
  const int d = rng.range(3, 6);
  CrossAttentionParams p = CrossAttentionParams::init(d, rng);
  ParamList params;
  p.collect("cross", Group::kProjection, params);
  std::vector<Var> leaves = leaves_of(params);
  jitter(leaves, rng);
  Var visual = leaf(randn({rng.range(2, 6), d}, rng)), text = leaf(randn({rng.range(2, 7), d}, rng));
  leaves.push_back(visual);
  leaves.push_back(text);
  const double a = rng.normal(), b = rng.normal();
  return {leaves, [=] {
            PairScores s = pair_similarity(visual, text, p);
            return ad::add(ad::scale(s.s, a), ad::scale(s.s_prime, b));
          }};
}

GradCheckInstance make_excite(Rng& rng) {
  ModelConfig m = small_model(rng);
  ExcitationParams p = ExcitationParams::init(m, rng);
  ParamList params;
  p.collect("excitation", Group::kProjection, params);
  std::vector<Var> leaves = leaves_of(params);
  jitter(leaves, rng);
  Var z = leaf(randn({1, m.dim}, rng));
  Var fm = leaf(randn({m.base_channels, 3, 3}, rng));
  leaves.push_back(z);
  leaves.push_back(fm);
  Weigher weigh(rng.next());
  return {leaves, [=] { return ad::add(weigh(0, excite(z, p)), weigh(1, reweight(fm, excite(z, p)))); }};
}

GradCheckInstance make_backbone(Rng& rng) {
  ModelConfig m = small_model(rng);
  BaseNetParams base = BaseNetParams::init(m, rng);
  IdNetParams id = IdNetParams::init(m, rng);
  ParamList params;
  base.collect("base", Group::kDetection, params);
  id.collect("id", Group::kIdentification, params);
  std::vector<Var> leaves = leaves_of(params);
  jitter(leaves, rng);
  const int size = 32;
  Var image = leaf(rand_uniform({3, size, size}, rng, 0.0, 1.0));
  Var boxes = leaf(random_boxes(rng.range(1, 3), size, size, rng));
  leaves.push_back(image);
  leaves.push_back(boxes);
  Weigher weigh(rng.next());
  const std::uint64_t perm_seed = rng.next();
  return {leaves, [=] {
            Var fm = base_forward(image, base);
            Var pooled = roi_align(fm, boxes_of(boxes.value()), m.roi_size, 1.0 / kBackboneStride, m.sampling_ratio,
                                   boxes);
            Rng perm(perm_seed);
            MultiScaleVisualFeatures f = extract_multiscale(pooled, id, m.region_stripes, m.local_stripes, &perm);
            return ad::add(weigh(0, f.mixed()), weigh(1, id_forward(pooled, id)));
          }};
}

GradCheckInstance make_roi_align(Rng& rng) {
  const int c = rng.range(1, 3), h = rng.range(3, 6), w = rng.range(3, 6);
  const double scale = 0.5;
  Var fm = leaf(randn({c, h, w}, rng));
  Var boxes = leaf(random_boxes(rng.range(1, 4), w / scale, h / scale, rng));
  const int pooled = rng.range(1, 3), g = rng.range(1, 2);
  Weigher weigh(rng.next());
  return {{fm, boxes}, [=] { return weigh(0, roi_align(fm, boxes_of(boxes.value()), pooled, scale, g, boxes)); }};
}

GradCheckInstance make_text_encoder(Rng& rng) {
  ModelConfig m = small_model(rng);
  const std::vector<std::string> words{"a", "red", "blue", "shirt", "bag", "with", "slim"};
  const Vocabulary vocab(words);
  std::string caption;
  for (int seg = rng.range(1, 3); seg > 0; --seg) {
    for (int k = rng.range(1, 3); k > 0; --k) caption += words[rng.below(words.size())] + " ";
    if (seg > 1) caption += ", ";
  }
  const TokenSequence seq = tokenize(caption, vocab);
  TextEncoderParams p = TextEncoderParams::init(vocab.size(), m, rng);
  ParamList params;
  p.collect("text", Group::kProjection, params);
  std::vector<Var> leaves = leaves_of(params);
  jitter(leaves, rng);
  Weigher weigh(rng.next());
  return {leaves, [=] { return weigh(0, encode_text(seq, p).mixed); }};
}

GradCheckInstance make_rpn_head(Rng& rng) {
  ModelConfig m = small_model(rng);
  const int a = rng.range(1, 3);
  RpnHeadParams p = RpnHeadParams::init(m, a, rng);
  ParamList params;
  p.collect("rpn", Group::kDetection, params);
  std::vector<Var> leaves = leaves_of(params);
  jitter(leaves, rng);
  Var fm = leaf(randn({m.base_channels, rng.range(2, 4), rng.range(2, 4)}, rng));
  leaves.push_back(fm);
  Weigher weigh(rng.next());
  return {leaves, [=] {
            RpnOutput o = rpn_head(fm, p);
            return ad::add(weigh(0, o.logits), weigh(1, o.deltas));
          }};
}

GradCheckInstance make_det_head(Rng& rng) {
  ModelConfig m = small_model(rng);
  m.roi_size = rng.range(2, 3);
  DetNetParams p = DetNetParams::init(m, rng);
  ParamList params;
  p.collect("det", Group::kDetection, params);
  std::vector<Var> leaves = leaves_of(params);
  jitter(leaves, rng);
  Var pooled = leaf(randn({rng.range(1, 4), m.base_channels, m.roi_size, m.roi_size}, rng));
  leaves.push_back(pooled);
  Weigher weigh(rng.next());
  return {leaves, [=] {
            DetOutput o = det_forward(pooled, p);
            return ad::add(weigh(0, o.logits), weigh(1, o.deltas));
          }};
}

GradCheckInstance make_detection_losses(Rng& rng) {
  const int n = rng.range(2, 6);
  Var logits = leaf(randn({n}, rng, 2.0)), cls = leaf(randn({n, 2}, rng, 2.0)), deltas = leaf(randn({n, 4}, rng));
  Tensor targets({n});
  for (double& v : targets.values()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  const auto labels = random_ids(n, 2, rng);
  const Tensor goal = randn({n, 4}, rng);
  return {{logits, cls, deltas}, [=] {
            Var reg = ad::sum(ad::smooth_l1(ad::sub(deltas, ad::constant(goal)), 1.0 / 9.0));
            return ad::add(ad::add(ad::mean(ad::bce_with_logits(logits, targets)), cross_entropy(cls, labels)), reg);
          }};
}

struct RowSpec {
  const char* name;
  Builder build;
};

const std::vector<RowSpec>& rows() {
  static const std::vector<RowSpec> r{
      {"cmpm_loss", make_cmpm},
      {"cmpc_loss", make_cmpc},
      {"csal_loss", make_csal_softmax},
      {"csal_loss_sum", make_csal_sum},
      {"oim_loss", make_oim},
      {"pair_similarity", make_pair_similarity},
      {"excite", make_excite},
      {"backbone", make_backbone},
      {"roi_align", make_roi_align},
      {"text_encoder", make_text_encoder},
      {"rpn_head", make_rpn_head},
      {"det_head", make_det_head},
      {"detection_losses", make_detection_losses},
  };
  return r;
}

// Identity in the forward pass; scales the incoming gradient.
Var broken_identity(const Var& x) {
  return ad::make_op(x.value(), {x}, [](ad::Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 1.05 * self.grad[i];
  });
}

}  // namespace

GradCheckResult check_instance(const GradCheckInstance& inst, double step, int max_coords, Rng& rng, bool corrupt) {
  for (Var v : inst.leaves) v.zero_grad();
  Var out = inst.f();
  require(out.size() == 1, "gradcheck: function must return a scalar");
  ad::backward(corrupt ? broken_identity(out) : out);
  const double f0 = out.item();

  std::vector<double> analytic, numeric;
  std::vector<double> one_sided_gap;
  double grad_norm = 0;
  for (const Var& v : inst.leaves)
    for (double g : v.grad().values()) grad_norm += g * g;
  grad_norm = std::sqrt(grad_norm);

  ad::NoGradGuard guard;
  for (Var v : inst.leaves) {
    const int n = static_cast<int>(v.size());
    std::vector<int> coords(n);
    for (int i = 0; i < n; ++i) coords[i] = i;
    if (n > max_coords) {
      rng.shuffle(coords);
      coords.resize(max_coords);
    }
    const Tensor grad = v.grad().empty() ? Tensor(v.shape()) : v.grad();
    for (int i : coords) {
      double& x = v.mutable_value()[i];
      const double saved = x;
      x = saved + step;
      const double fp = inst.f().item();
      x = saved - step;
      const double fm = inst.f().item();
      x = saved;
      analytic.push_back(grad[i]);
      numeric.push_back((fp - fm) / (2 * step));
      one_sided_gap.push_back(std::abs((fp - f0) - (f0 - fm)) / step);
    }
  }

  GradCheckResult res;
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nn));
  res.rel_error = denom > 1e-12 ? std::sqrt(diff) / denom : std::sqrt(diff);
  // A kink between x-h and x+h shows as disagreeing one-sided slopes; smooth
  // curvature only contributes about step * f''.
  const double kink_floor = 2e-5 * std::max(grad_norm, 1e-6);
  for (double gap : one_sided_gap)
    if (gap > kink_floor) res.kink = true;
  return res;
}

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> names;
  for (const auto& r : rows()) names.push_back(r.name);
  return names;
}

std::vector<GradCheckRow> run_gradcheck(const GradCheckOptions& opts) {
  require(opts.instances > 0, "gradcheck: instances must be positive");
  const auto names = gradcheck_names();
  for (const auto& n : opts.only)
    require(std::find(names.begin(), names.end(), n) != names.end(), "gradcheck: unknown row '" + n + "'");
  if (!opts.fault.empty())
    require(std::find(names.begin(), names.end(), opts.fault) != names.end(),
            "gradcheck: unknown fault row '" + opts.fault + "'");
  std::vector<GradCheckRow> out;
  for (std::size_t r = 0; r < rows().size(); ++r) {
    const RowSpec& spec = rows()[r];
    if (!opts.only.empty() && std::find(opts.only.begin(), opts.only.end(), spec.name) == opts.only.end()) continue;
    GradCheckRow row;
    row.name = spec.name;
    Rng rng(derive_seed(opts.seed, 0x6c00 + r));
    const bool corrupt = opts.fault == spec.name;
    const int max_redraws = 10 * opts.instances;
    while (row.instances < opts.instances && row.redraws <= max_redraws) {
      const GradCheckInstance inst = spec.build(rng);
      const GradCheckResult res = check_instance(inst, opts.step, opts.max_coords, rng, corrupt);
      // A corrupted gradient must not be hidden by rejection.
      if (res.kink && !corrupt) {
        ++row.redraws;
        continue;
      }
      row.max_rel_error = std::max(row.max_rel_error, res.rel_error);
      ++row.instances;
    }
    row.pass = row.instances == opts.instances && row.max_rel_error < opts.tolerance;
    out.push_back(row);
  }
  return out;
}

}  // namespace tbps
