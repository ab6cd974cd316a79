#include "tbps/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "tbps/image.hpp"

namespace tbps {

using ad::Var;

std::vector<IdRoi> sample_id_rois(const ProposalSet& proposals, const std::vector<LabeledBox>& gt,
                                  int per_identity, double iou_threshold) {
  std::vector<IdRoi> out;
  const std::vector<int> order = argsort_desc(proposals.scores);
  for (std::size_t g = 0; g < gt.size(); ++g) {
    int taken = 0;
    for (int i : order) {
      if (taken >= per_identity) break;
      if (iou(proposals.boxes[i], gt[g].box) >= iou_threshold) {
        out.push_back({proposals.boxes[i], gt[g].identity, static_cast<int>(g), proposals.scores[i]});
        ++taken;
      }
    }
  }
  return out;
}

const std::array<const char*, kLossTerms>& loss_names() {
  static const std::array<const char*, kLossTerms> names{"rpn_cls", "rpn_reg", "cls",  "reg",
                                                          "oim",     "cmpm",    "cmpc", "csal"};
  return names;
}

std::array<double, kLossTerms> LossBundle::default_lambdas(const LossConfig& c) {
  return {c.rpn_cls, c.rpn_reg, c.cls, c.reg, c.oim, c.cmpm, c.cmpc, c.csal};
}

LossBundle LossBundle::zeros(const LossConfig& cfg) {
  LossBundle b;
  for (auto& t : b.terms) t = ad::constant(Tensor::scalar(0.0));
  b.lambdas = default_lambdas(cfg);
  return b;
}

Var total_loss(const LossBundle& b) {
  Var total = ad::constant(Tensor::scalar(0.0));
  for (int i = 0; i < kLossTerms; ++i) {
    require(b.terms[i].defined(), std::string("loss component '") + loss_names()[i] + "' is missing");
    const double v = b.terms[i].item();
    if (!std::isfinite(v))
      throw Error(std::string("non-finite loss component '") + loss_names()[i] + "' (" + std::to_string(v) + ")");
    if (b.lambdas[i] != 0.0) total = ad::add(total, ad::scale(b.terms[i], b.lambdas[i]));
  }
  return total;
}

// ---- optimizers ----

void Sgd::step(const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    Var v = p.var;
    if (v.grad().empty()) continue;
    Tensor& vel = velocity_.try_emplace(p.name, Tensor(v.shape())).first->second;
    Tensor& w = v.mutable_value();
    const Tensor& g = v.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      vel[i] = momentum_ * vel[i] + g[i];
      w[i] -= lr_ * vel[i];
    }
  }
}

void Sgd::save(const std::string& prefix, TensorMap& out) const {
  for (const auto& [k, t] : velocity_) out[prefix + k + ".velocity"] = t;
}

void Sgd::load(const std::string& prefix, const TensorMap& in) {
  velocity_.clear();
  const std::string suffix = ".velocity";
  for (const auto& [k, t] : in)
    if (k.rfind(prefix, 0) == 0 && k.size() > prefix.size() + suffix.size() &&
        k.compare(k.size() - suffix.size(), suffix.size(), suffix) == 0)
      velocity_[k.substr(prefix.size(), k.size() - prefix.size() - suffix.size())] = t;
}

void Adam::step(const std::vector<NamedParam>& params) {
  ++t_;
  const double c1 = 1 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1 - std::pow(b2_, static_cast<double>(t_));
  for (const auto& p : params) {
    Var v = p.var;
    if (v.grad().empty()) continue;
    Tensor& m = m_.try_emplace(p.name, Tensor(v.shape())).first->second;
    Tensor& s = v_.try_emplace(p.name, Tensor(v.shape())).first->second;
    Tensor& w = v.mutable_value();
    const Tensor& g = v.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1_ * m[i] + (1 - b1_) * g[i];
      s[i] = b2_ * s[i] + (1 - b2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(s[i] / c2) + eps_);
    }
  }
}

void Adam::save(const std::string& prefix, TensorMap& out) const {
  for (const auto& [k, t] : m_) out[prefix + k + ".m"] = t;
  for (const auto& [k, t] : v_) out[prefix + k + ".v"] = t;
  out[prefix + "t"] = Tensor({1}, {static_cast<double>(t_)});
}

void Adam::load(const std::string& prefix, const TensorMap& in) {
  m_.clear();
  v_.clear();
  t_ = 0;
  for (const auto& [k, t] : in) {
    if (k.rfind(prefix, 0) != 0) continue;
    const std::string rest = k.substr(prefix.size());
    if (rest == "t") {
      t_ = static_cast<long>(t[0]);
    } else if (rest.size() > 2 && rest.compare(rest.size() - 2, 2, ".m") == 0) {
      m_[rest.substr(0, rest.size() - 2)] = t;
    } else if (rest.size() > 2 && rest.compare(rest.size() - 2, 2, ".v") == 0) {
      v_[rest.substr(0, rest.size() - 2)] = t;
    }
  }
}

Optimizers::Optimizers(const TrainConfig& c)
    : detection(c.lr_det, c.momentum), identification(c.lr_id, c.beta1, c.beta2), projection(c.lr_proj, c.beta1, c.beta2) {}

void Optimizers::step(const ParamList& params) {
  std::vector<NamedParam> det, id, proj;
  for (const auto& p : params) (p.group == Group::kDetection ? det : p.group == Group::kIdentification ? id : proj).push_back(p);
  detection.step(det);
  identification.step(id);
  projection.step(proj);
}

TensorMap Optimizers::state() const {
  TensorMap out;
  detection.save("opt.detection.", out);
  identification.save("opt.identification.", out);
  projection.save("opt.projection.", out);
  return out;
}

void Optimizers::load(const TensorMap& in) {
  detection.load("opt.detection.", in);
  identification.load("opt.identification.", in);
  projection.load("opt.projection.", in);
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (double g : p.var.grad().values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& p : params) {
      Var v = p.var;
      if (v.grad().empty()) continue;
      for (double& g : v.mutable_grad().values()) g *= f;
    }
  }
  return norm;
}

// ---- batch losses ----

SceneSample flip_scene(const SceneSample& s) {
  SceneSample out = s;
  out.image = hflip(s.image);
  for (auto& p : out.persons) p.box = hflip(p.box, s.image.width);
  return out;
}

namespace {

struct TextCache {
  const Model& model;
  std::map<std::string, SemanticFeatures> features;

  const SemanticFeatures& get(const std::string& caption) {
    auto it = features.find(caption);
    if (it == features.end())
      it = features.emplace(caption, encode_text(tokenize(caption, model.vocab), model.text)).first;
    return it->second;
  }
};

// Faster R-CNN style classification + regression over sampled anchors.
void rpn_losses(const RpnOutput& out, const std::vector<BBox>& anchors, const std::vector<int>& sampled,
                const std::vector<int>& matched, const std::vector<BBox>& gt, bool with_reg, Var& cls, Var& reg) {
  std::vector<int> idx, pos_idx;
  std::vector<double> targets;
  std::vector<double> reg_targets;
  std::vector<int> delta_idx;
  for (std::size_t k = 0; k < sampled.size(); ++k) {
    if (sampled[k] < 0) continue;
    idx.push_back(out.logit_index(static_cast<int>(k)));
    targets.push_back(sampled[k]);
    if (sampled[k] == 1 && with_reg) {
      const Deltas t = encode_box(anchors[k], gt[matched[k]]);
      for (int j = 0; j < 4; ++j) {
        delta_idx.push_back(out.delta_index(static_cast<int>(k), j));
        reg_targets.push_back(t[j]);
      }
    }
  }
  if (idx.empty()) {
    cls = ad::constant(Tensor::scalar(0.0));
    reg = ad::constant(Tensor::scalar(0.0));
    return;
  }
  const int n = static_cast<int>(idx.size());
  cls = ad::mean(ad::bce_with_logits(ad::gather_flat(out.logits, idx), Tensor({n}, targets)));
  if (delta_idx.empty()) {
    reg = ad::constant(Tensor::scalar(0.0));
  } else {
    const int m = static_cast<int>(delta_idx.size());
    Var diff = ad::sub(ad::gather_flat(out.deltas, delta_idx), ad::constant(Tensor({m}, reg_targets)));
    reg = ad::scale(ad::sum(ad::smooth_l1(diff, 1.0 / 9.0)), 1.0 / n);
  }
}

double max_iou(const BBox& b, const std::vector<BBox>& gt, int* which = nullptr) {
  double best = 0;
  for (std::size_t g = 0; g < gt.size(); ++g) {
    const double v = iou(b, gt[g]);
    if (v > best) {
      best = v;
      if (which) *which = static_cast<int>(g);
    }
  }
  return best;
}

}  // namespace

BatchResult compute_losses(const Model& model, const std::vector<const SceneSample*>& scenes,
                           const std::vector<bool>& flips, Rng& rng) {
  const Config& cfg = model.config;
  require(!scenes.empty() && flips.size() == scenes.size(), "compute_losses: one flip flag per scene");
  BatchResult result{LossBundle::zeros(cfg.loss), model.oim, 0};
  const auto lambdas = LossBundle::default_lambdas(cfg.loss);
  TextCache texts{model, {}};
  const double scale = 1.0 / kBackboneStride;
  const int pooled = cfg.model.roi_size;

  std::vector<Var> rpn_cls, rpn_reg, det_cls, det_reg;
  std::vector<Var> id_pooled;
  std::vector<int> id_labels;
  std::vector<std::string> id_captions;
  std::vector<Var> bg_pooled;

  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const SceneSample scene = flips[i] ? flip_scene(*scenes[i]) : *scenes[i];
    const int w = scene.image.width, h = scene.image.height;
    std::vector<BBox> gt;
    std::vector<LabeledBox> labelled;
    for (const auto& p : scene.persons) {
      gt.push_back(p.box);
      labelled.push_back({p.box, p.identity.id});
    }
    Var fm = base_forward(ad::constant(image_to_tensor(scene.image)), model.base);

    const int cond = static_cast<int>(rng.below(scene.persons.size()));
    const auto& cond_caps = scene.persons[cond].captions;
    const std::string& cond_caption = cond_caps[rng.below(cond_caps.size())];
    std::optional<Var> z;
    if (cfg.model.sdrpn) z = texts.get(cond_caption).sentence;

    ProposalOutputs po = propose(fm, z, model.proposal, cfg, Phase::kTrain, w, h);
    const auto anchors = make_anchors(po.rpn.height(), po.rpn.width(), kBackboneStride, cfg.model.anchor_scales,
                                      cfg.model.anchor_ratios, cfg.model.anchor_unit);

    AnchorLabels all = assign_anchor_labels(anchors, gt, LabelMode::kAllPersons, cfg.rpn.pos_iou, cfg.rpn.neg_iou);
    Var c, r;
    rpn_losses(po.rpn, anchors, sample_anchor_labels(all.labels, cfg.rpn.batch_anchors, cfg.rpn.pos_fraction, rng),
               all.matched, gt, true, c, r);
    if (po.sdrpn) {
      AnchorLabels rel = assign_anchor_labels(anchors, {gt[cond]}, LabelMode::kTextRelevant, cfg.rpn.pos_iou,
                                              cfg.rpn.neg_iou);
      Var sc, sr;
      rpn_losses(*po.sdrpn, anchors,
                 sample_anchor_labels(rel.labels, cfg.rpn.batch_anchors, cfg.rpn.pos_fraction, rng), rel.matched,
                 {gt[cond]}, cfg.model.sdrpn_deltas, sc, sr);
      c = ad::add(c, sc);
      if (cfg.model.sdrpn_deltas) r = ad::add(r, sr);
    }
    rpn_cls.push_back(c);
    rpn_reg.push_back(r);

    // Detection branch.
    const ProposalSet& props = po.proposals;
    std::vector<BBox> det_rois(props.boxes.begin(),
                               props.boxes.begin() + std::min<std::size_t>(props.size(), cfg.det.rois));
    if (cfg.det.add_gt) det_rois.insert(det_rois.end(), gt.begin(), gt.end());
    if (!det_rois.empty()) {
      std::vector<int> labels(det_rois.size());
      std::vector<int> fg_rows;
      std::vector<double> targets;
      for (std::size_t k = 0; k < det_rois.size(); ++k) {
        int g = -1;
        labels[k] = max_iou(det_rois[k], gt, &g) >= cfg.det.fg_iou ? 1 : 0;
        if (labels[k]) {
          fg_rows.push_back(static_cast<int>(k));
          const Deltas t = encode_box(det_rois[k], gt[g]);
          targets.insert(targets.end(), t.begin(), t.end());
        }
      }
      DetOutput det = det_forward(roi_align(fm, det_rois, pooled, scale, cfg.model.sampling_ratio), model.det);
      det_cls.push_back(cross_entropy(det.logits, labels));
      if (fg_rows.empty()) {
        det_reg.push_back(ad::constant(Tensor::scalar(0.0)));
      } else {
        Var diff = ad::sub(ad::gather_rows(det.deltas, fg_rows),
                           ad::constant(Tensor({static_cast<int>(fg_rows.size()), 4}, targets)));
        det_reg.push_back(ad::scale(ad::sum(ad::smooth_l1(diff, 1.0)), 1.0 / det_rois.size()));
      }
    }

    // Identification rois: proposals plus the gt boxes themselves.
    ProposalSet id_source = props;
    if (cfg.det.add_gt)
      for (const auto& b : gt) {
        id_source.boxes.push_back(b);
        id_source.scores.push_back(std::numeric_limits<double>::infinity());
      }
    const auto id_rois = sample_id_rois(id_source, labelled, cfg.id.per_identity, cfg.id.iou);
    if (!id_rois.empty()) {
      std::vector<BBox> boxes;
      for (const auto& roi : id_rois) {
        boxes.push_back(roi.box);
        id_labels.push_back(roi.identity);
        const auto& caps = scene.persons[roi.gt_index].captions;
        id_captions.push_back(caps[rng.below(caps.size())]);
      }
      id_pooled.push_back(roi_align(fm, boxes, pooled, scale, cfg.model.sampling_ratio));
    }
    if (cfg.oim.queue_background && cfg.oim.background_rois > 0) {
      std::vector<BBox> bg;
      for (std::size_t k = 0; k < props.size() && static_cast<int>(bg.size()) < cfg.oim.background_rois; ++k)
        if (max_iou(props.boxes[k], gt) < cfg.rpn.neg_iou) bg.push_back(props.boxes[k]);
      if (!bg.empty()) {
        ad::NoGradGuard guard;
        bg_pooled.push_back(roi_align(fm, bg, pooled, scale, cfg.model.sampling_ratio));
      }
    }
  }

  auto mean_of = [](const std::vector<Var>& v) {
    if (v.empty()) return ad::constant(Tensor::scalar(0.0));
    Var s = v[0];
    for (std::size_t i = 1; i < v.size(); ++i) s = ad::add(s, v[i]);
    return ad::scale(s, 1.0 / v.size());
  };
  LossBundle& b = result.bundle;
  b.terms[0] = mean_of(rpn_cls);
  b.terms[1] = mean_of(rpn_reg);
  b.terms[2] = mean_of(det_cls);
  b.terms[3] = mean_of(det_reg);

  if (id_labels.empty()) return result;
  result.id_rois = static_cast<int>(id_labels.size());
  Var pooled_all = id_pooled.size() == 1 ? id_pooled[0] : ad::concat_rows(id_pooled);
  MultiScaleVisualFeatures ms = extract_multiscale(pooled_all, model.id, cfg.model.region_stripes,
                                                   cfg.model.local_stripes, &rng);

  // OIM over labelled embeddings; background rois only feed the queue.
  Var emb = ad::l2_normalize_rows(ms.global);
  std::vector<int> oim_labels = id_labels;
  if (!bg_pooled.empty()) {
    Tensor bg_emb;
    {
      ad::NoGradGuard guard;
      bg_emb = id_forward(bg_pooled.size() == 1 ? bg_pooled[0] : ad::concat_rows(bg_pooled), model.id).value();
    }
    oim_labels.insert(oim_labels.end(), bg_emb.dim(0), kUnlabeled);
    emb = ad::concat_rows({emb, ad::constant(std::move(bg_emb))});
  }
  OimResult oim = oim_loss(emb, oim_labels, model.oim);
  b.terms[4] = oim.loss;
  result.next_oim = std::move(oim.state);

  // Cross-modal batch: every sampled roi paired with a caption of its person.
  std::vector<std::string> unique;
  std::vector<int> cap_index;
  for (const auto& c : id_captions) {
    auto it = std::find(unique.begin(), unique.end(), c);
    cap_index.push_back(static_cast<int>(it - unique.begin()));
    if (it == unique.end()) unique.push_back(c);
  }
  const LabelMatrix labels = LabelMatrix::from_identities(id_labels, id_labels);
  if (lambdas[5] != 0 || lambdas[6] != 0) {
    std::vector<Var> sentences;
    for (const auto& c : unique) sentences.push_back(texts.get(c).sentence);
    Var text_global = ad::gather_rows(ad::concat_rows(sentences), cap_index);
    if (lambdas[5] != 0) b.terms[5] = cmpm_loss(ms.global, text_global, labels, cfg.loss.eps);
    if (lambdas[6] != 0) b.terms[6] = cmpc_loss(ms.global, text_global, id_labels, model.cmpc_w);
  }
  if (lambdas[7] != 0) {
    const int n = result.id_rois, m = ms.parts(), u = static_cast<int>(unique.size());
    ProjectedParts vis_all = project_visual(ms.mixed(), model.cross);
    std::vector<ProjectedParts> txt;
    for (const auto& c : unique) txt.push_back(project_text(texts.get(c).mixed, model.cross));
    std::vector<Var> s, sp;
    for (int r = 0; r < n; ++r) {
      ProjectedParts vis{ad::slice_rows(vis_all.q, r * m, (r + 1) * m), ad::slice_rows(vis_all.k, r * m, (r + 1) * m),
                         ad::slice_rows(vis_all.v, r * m, (r + 1) * m)};
      for (int j = 0; j < u; ++j) {
        PairScores ps = similarity(vis, txt[j]);
        s.push_back(ps.s);
        sp.push_back(ps.s_prime);
      }
    }
    Var s_mat = ad::gather_cols(ad::stack_scalars(s, {n, u}), cap_index);
    Var sp_mat = ad::gather_cols(ad::stack_scalars(sp, {n, u}), cap_index);
    b.terms[7] = csal_loss(s_mat, sp_mat, labels, cfg.loss.eps, cfg.loss.csal_norm, cfg.loss.csal_scale);
  }
  return result;
}

// ---- training loop ----

std::string loss_csv_header() {
  std::string h = "step,epoch";
  for (const char* n : loss_names()) h += std::string(",") + n;
  return h + ",total";
}

std::string loss_csv_row(const StepRecord& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.step << ',' << r.epoch;
  for (double v : r.terms) os << ',' << v;
  os << ',' << r.total;
  return os.str();
}

namespace {

std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

int identity_count(const DatasetSplit& data) {
  int l = 0;
  for (const auto* scenes : {&data.train, &data.gallery})
    for (const auto& s : *scenes)
      for (const auto& p : s.persons) l = std::max(l, p.identity.id + 1);
  return l;
}

void write_manifest(const std::filesystem::path& dir, const Model& m, std::uint64_t seed, int epoch, long step,
                    int identities) {
  nlohmann::json j;
  j["config"] = to_json(m.config);
  j["config_hash"] = hash_hex(config_hash(m.config));
  j["epoch"] = epoch;
  j["step"] = step;
  j["seed"] = seed;
  j["identities"] = identities;
  j["ablation"] = {{"sdrpn", !m.config.model.sdrpn}, {"csal", m.config.loss.csal == 0.0}};
  j["vocab"] = m.vocab.tokens();
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    require(out.good(), "cannot write " + tmp.string());
    out << j.dump(1) << '\n';
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(in.good(), "missing checkpoint manifest in " + dir.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt manifest in " + dir.string() + ": " + e.what());
  }
}

Model load_checkpoint(const std::filesystem::path& dir) {
  const auto j = read_manifest(dir);
  require(std::filesystem::exists(dir / "checkpoint.bin"), "missing checkpoint.bin in " + dir.string());
  const Config cfg = config_from_json(j.at("config"));
  Model m = Model::init(cfg, Vocabulary(std::vector<std::string>(j.at("vocab").begin() + 3, j.at("vocab").end())),
                        j.at("identities").get<int>(), j.at("seed").get<std::uint64_t>());
  assign_model_tensors(m, load_tensors(dir / "checkpoint.bin"));
  return m;
}

TrainResult train(const Config& cfg, const DatasetSplit& data, std::uint64_t seed, const TrainOptions& opts) {
  require(!data.train.empty(), "train: dataset has no training scenes");
  const int identities = identity_count(data);
  TrainResult result{Model::init(cfg, caption_vocabulary(data), identities, seed), {}, 0};
  Model& model = result.model;
  Optimizers optim(cfg.train);
  const ParamList params = model.parameters();
  long step = 0;
  int start_epoch = 0;
  const bool files = !opts.out_dir.empty();
  const auto csv_path = opts.out_dir / "losses.csv";

  if (files) std::filesystem::create_directories(opts.out_dir);
  if (files && opts.resume && std::filesystem::exists(opts.out_dir / "manifest.json")) {
    const auto j = read_manifest(opts.out_dir);
    // The epoch budget may grow on resume; everything else must match.
    Config same = cfg;
    same.train.epochs = j.at("config").at("train.epochs").get<int>();
    require(j.at("config_hash").get<std::string>() == hash_hex(config_hash(same)),
            "resume: configuration differs from the checkpoint in " + opts.out_dir.string());
    require(j.at("seed").get<std::uint64_t>() == seed, "resume: seed differs from the checkpoint");
    const TensorMap t = load_tensors(opts.out_dir / "checkpoint.bin");
    assign_model_tensors(model, t);
    optim.load(t);
    start_epoch = j.at("epoch").get<int>();
    step = j.at("step").get<long>();
    // Drop rows logged after the checkpoint.
    auto lines = read_lines(csv_path);
    std::ofstream out(csv_path, std::ios::trunc);
    out << loss_csv_header() << '\n';
    for (std::size_t i = 1; i < lines.size() && static_cast<long>(i) <= step; ++i) out << lines[i] << '\n';
  } else if (files) {
    std::ofstream out(csv_path, std::ios::trunc);
    out << loss_csv_header() << '\n';
  }
  result.epochs_completed = start_epoch;

  std::ofstream csv;
  if (files) csv.open(csv_path, std::ios::app);
  const int n = static_cast<int>(data.train.size());
  const int batch = std::max(1, cfg.train.batch);
  for (int epoch = start_epoch; epoch < cfg.train.epochs; ++epoch) {
    Rng order_rng(derive_seed(seed, 0x100 + static_cast<std::uint64_t>(epoch)));
    const std::vector<int> order = order_rng.permutation(n);
    for (int first = 0; first < n; first += batch) {
      if (opts.max_steps >= 0 && step >= opts.max_steps) return result;
      Rng rng(derive_seed(seed, 0x10000000 + static_cast<std::uint64_t>(step)));
      std::vector<const SceneSample*> scenes;
      std::vector<bool> flips;
      for (int k = first; k < std::min(n, first + batch); ++k) {
        scenes.push_back(&data.train[order[k]]);
        flips.push_back(cfg.train.flip && rng.below(2) == 1);
      }
      BatchResult br = compute_losses(model, scenes, flips, rng);
      Var total;
      try {
        total = total_loss(br.bundle);
      } catch (const Error& e) {
        throw Error("training diverged at step " + std::to_string(step) + ": " + e.what() +
                    (files ? "; last good checkpoint kept in " + opts.out_dir.string() : std::string()));
      }
      for (const auto& p : params) {
        Var v = p.var;
        v.zero_grad();
      }
      ad::backward(total);
      clip_grad_norm(params, cfg.train.clip_norm);
      optim.step(params);
      model.oim = std::move(br.next_oim);

      StepRecord rec{step, epoch, {}, total.item()};
      for (int i = 0; i < kLossTerms; ++i) rec.terms[i] = br.bundle.value(i);
      result.log.push_back(rec);
      if (files) csv << loss_csv_row(rec) << '\n' << std::flush;
      if (opts.on_step) opts.on_step(rec);
      ++step;
    }
    result.epochs_completed = epoch + 1;
    if (files) {
      TensorMap t = model_tensors(model);
      for (auto& [k, v] : optim.state()) t[k] = v;
      save_tensors(t, opts.out_dir / "checkpoint.bin");
      write_manifest(opts.out_dir, model, seed, epoch + 1, step, identities);
    }
  }
  return result;
}

}  // namespace tbps
