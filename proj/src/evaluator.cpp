#include "tbps/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tbps/image.hpp"

namespace tbps {

using ad::Var;

RankedResult rank(int query, const std::vector<Detection>& detections, const std::vector<double>& scores) {
  require(detections.size() == scores.size(), "rank: one score per detection required");
  std::vector<int> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    if (detections[a].scene != detections[b].scene) return detections[a].scene < detections[b].scene;
    return detections[a].index < detections[b].index;
  });
  RankedResult r{query, {}};
  for (int i : order) r.entries.push_back({detections[i].scene, detections[i].index, detections[i].box, scores[i]});
  return r;
}

QueryOutcome evaluate_query(const RankedResult& result, const std::vector<GtBox>& gt, double iou_threshold) {
  require(!gt.empty(), "evaluate: query " + std::to_string(result.query) + " has no ground truth");
  QueryOutcome out;
  std::vector<bool> used(gt.size(), false);
  int hits = 0;
  for (std::size_t r = 0; r < result.entries.size(); ++r) {
    const RankedEntry& e = result.entries[r];
    bool correct = false;
    for (std::size_t g = 0; g < gt.size() && !correct; ++g)
      if (!used[g] && gt[g].scene == e.scene && iou(e.box, gt[g].box) > iou_threshold) {
        used[g] = true;
        correct = true;
      }
    out.correct.push_back(correct);
    if (correct) out.ap += static_cast<double>(++hits) / (r + 1);
  }
  out.ap /= gt.size();
  return out;
}

MetricReport evaluate(const std::vector<RankedResult>& results, const std::vector<std::vector<GtBox>>& gt,
                      double iou_threshold, const std::vector<int>& ks) {
  require(results.size() == gt.size(), "evaluate: one gt list per query required");
  MetricReport rep;
  rep.queries = static_cast<int>(results.size());
  for (int k : ks) rep.cmc[k] = 0;
  for (std::size_t q = 0; q < results.size(); ++q) {
    const QueryOutcome o = evaluate_query(results[q], gt[q], iou_threshold);
    rep.map += o.ap;
    for (int k : ks) {
      const auto end = o.correct.begin() + std::min<std::size_t>(o.correct.size(), k);
      if (std::find(o.correct.begin(), end, true) != end) rep.cmc[k] += 1;
    }
  }
  if (!results.empty()) {
    rep.map /= results.size();
    for (auto& [k, v] : rep.cmc) v /= results.size();
  }
  return rep;
}

double random_ap(int relevant, int candidates) {
  require(relevant >= 1 && relevant <= candidates, "random_ap: need 1 <= relevant <= candidates");
  const double n = candidates, r = relevant;
  double harmonic = 0;
  for (int k = 1; k <= candidates; ++k) harmonic += 1.0 / k;
  const double tail = candidates > 1 ? (r - 1) / (n - 1) * (n - harmonic) : 0.0;
  return (harmonic + tail) / n;
}

double random_cmc(int relevant, int candidates, int k) {
  require(relevant >= 1 && relevant <= candidates, "random_cmc: need 1 <= relevant <= candidates");
  // 1 - C(N-R, K) / C(N, K)
  double miss = 1.0;
  for (int i = 0; i < std::min(k, candidates); ++i) miss *= static_cast<double>(candidates - relevant - i) / (candidates - i);
  return 1.0 - std::max(miss, 0.0);
}

std::vector<int> sample_gallery(int gt_scene, int total_scenes, int size, std::uint64_t seed, int query) {
  require(size >= 1 && size <= total_scenes, "gallery size " + std::to_string(size) + " outside [1," +
                                                  std::to_string(total_scenes) + "]");
  require(gt_scene >= 0 && gt_scene < total_scenes, "sample_gallery: gt scene out of range");
  Rng rng(derive_seed(seed, 0x5000 + static_cast<std::uint64_t>(query)));
  std::vector<int> others;
  for (int s = 0; s < total_scenes; ++s)
    if (s != gt_scene) others.push_back(s);
  rng.shuffle(others);
  others.resize(size - 1);
  others.push_back(gt_scene);
  std::sort(others.begin(), others.end());
  return others;
}

// ---- search engine ----

SearchEngine::SearchEngine(const Model& model, const std::vector<SceneSample>& scenes)
    : model_(model), scenes_(scenes), caches_(scenes.size()) {}

SearchEngine::QueryFeatures SearchEngine::encode_query(const std::string& caption) const {
  ad::NoGradGuard guard;
  SemanticFeatures f = encode_text(tokenize(caption, model_.vocab), model_.text);
  QueryFeatures q;
  q.caption = caption;
  q.sentence = f.sentence.value();
  q.global = ad::l2_normalize_rows(f.sentence).value().reshaped({model_.config.model.dim});
  q.text = project_text(f.mixed, model_.cross);
  return q;
}

SearchEngine::SceneCache& SearchEngine::cache(int scene) {
  require(scene >= 0 && scene < static_cast<int>(scenes_.size()), "search: scene index out of range");
  SceneCache& c = caches_[scene];
  if (c.ready) return c;
  ad::NoGradGuard guard;
  c.fm = base_forward(ad::constant(image_to_tensor(scenes_[scene].image)), model_.base);
  c.rpn = rpn_head(c.fm, model_.proposal.rpn);
  c.rpn_logits = c.rpn.logit_values();
  c.deltas = c.rpn.delta_values();
  const auto& m = model_.config.model;
  c.anchors = make_anchors(c.rpn.height(), c.rpn.width(), kBackboneStride, m.anchor_scales, m.anchor_ratios,
                           m.anchor_unit);
  c.ready = true;
  return c;
}

void SearchEngine::ensure_features(int scene, const std::vector<int>& anchors) {
  SceneCache& c = cache(scene);
  std::vector<int> missing;
  std::vector<BBox> boxes;
  for (int a : anchors)
    if (!c.features.count(a)) {
      missing.push_back(a);
      boxes.push_back(c.dets.at(a).box);
    }
  if (missing.empty()) return;
  ad::NoGradGuard guard;
  const auto& m = model_.config.model;
  Var pooled = roi_align(c.fm, boxes, m.roi_size, 1.0 / kBackboneStride, m.sampling_ratio);
  MultiScaleVisualFeatures ms = extract_multiscale(pooled, model_.id, m.region_stripes, m.local_stripes, nullptr);
  const Tensor unit = ad::l2_normalize_rows(ms.global).value();
  const ProjectedParts vis = project_visual(ms.mixed(), model_.cross);
  const int parts = ms.parts(), d = m.dim;
  for (std::size_t i = 0; i < missing.size(); ++i) {
    const int r = static_cast<int>(i);
    Features f;
    f.global = Tensor({d}, std::vector<double>(unit.data() + r * d, unit.data() + (r + 1) * d));
    f.visual = {ad::constant(ad::slice_rows(vis.q, r * parts, (r + 1) * parts).value()),
                ad::constant(ad::slice_rows(vis.k, r * parts, (r + 1) * parts).value()),
                ad::constant(ad::slice_rows(vis.v, r * parts, (r + 1) * parts).value())};
    c.features.emplace(missing[i], std::move(f));
  }
}

const std::vector<Detection>& SearchEngine::detect(int scene, const QueryFeatures& q) {
  const auto key = std::make_pair(model_.config.model.sdrpn ? q.caption : std::string(), scene);
  if (auto it = detections_.find(key); it != detections_.end()) return it->second;
  SceneCache& c = cache(scene);
  const Config& cfg = model_.config;
  const int w = scenes_[scene].image.width, h = scenes_[scene].image.height;
  std::vector<double> sd;
  {
    ad::NoGradGuard guard;
    if (cfg.model.sdrpn) {
      Var s = excite(ad::constant(q.sentence), model_.proposal.excitation);
      sd = rpn_head(reweight(c.fm, s), model_.proposal.sdrpn).logit_values();
    }
  }
  const ProposalSet props = select_proposals(c.anchors, c.rpn_logits, sd, c.deltas, w, h, infer_budget(cfg.rpn),
                                             cfg.model.score_fusion);
  // Det-Net outputs depend only on the anchor, so they are cached per scene.
  std::vector<int> missing;
  std::vector<BBox> boxes;
  for (std::size_t i = 0; i < props.size(); ++i)
    if (!c.dets.count(props.anchors[i])) {
      missing.push_back(props.anchors[i]);
      boxes.push_back(props.boxes[i]);
    }
  if (!missing.empty()) {
    ad::NoGradGuard guard;
    DetOutput det = det_forward(
        roi_align(c.fm, boxes, cfg.model.roi_size, 1.0 / kBackboneStride, cfg.model.sampling_ratio), model_.det);
    const auto prob = det.person_prob();
    const auto refined = refine_boxes(boxes, det.delta_values(), w, h);
    for (std::size_t i = 0; i < missing.size(); ++i) c.dets[missing[i]] = {prob[i], refined[i]};
  }
  std::vector<BBox> kept_boxes;
  std::vector<double> kept_prob;
  std::vector<int> kept_anchor;
  for (int a : props.anchors) {
    const AnchorDet& d = c.dets.at(a);
    if (d.prob >= cfg.det.score_threshold && d.box.valid()) {
      kept_boxes.push_back(d.box);
      kept_prob.push_back(d.prob);
      kept_anchor.push_back(a);
    }
  }
  std::vector<Detection> out;
  const auto keep = nms(kept_boxes, kept_prob, cfg.det.nms, cfg.rpn.post_nms_infer);
  std::vector<int> anchors;
  for (int i : keep) anchors.push_back(kept_anchor[i]);
  ensure_features(scene, anchors);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    Detection d;
    d.scene = scene;
    d.index = static_cast<int>(i);
    d.box = kept_boxes[keep[i]];
    d.prob = kept_prob[keep[i]];
    d.anchor = anchors[i];
    d.embedding = c.features.at(d.anchor).global;
    out.push_back(std::move(d));
  }
  return detections_.emplace(key, std::move(out)).first->second;
}

double SearchEngine::score(const QueryFeatures& q, const Detection& d) {
  if (model_.config.eval.rank_mode == "global") {
    double s = 0;
    for (std::size_t j = 0; j < q.global.size(); ++j) s += q.global[j] * d.embedding[j];
    return s;
  }
  ensure_features(d.scene, {d.anchor});
  ad::NoGradGuard guard;
  return similarity(caches_[d.scene].features.at(d.anchor).visual, q.text).s.item();
}

RankedResult SearchEngine::search(int query_id, const QueryFeatures& q, const std::vector<int>& scenes) {
  std::vector<Detection> all;
  std::vector<double> scores;
  for (int s : scenes)
    for (const Detection& d : detect(s, q)) {
      all.push_back(d);
      scores.push_back(score(q, d));
    }
  return rank(query_id, all, scores);
}

SweepOutput gallery_sweep(SearchEngine& engine, const DatasetSplit& data, const std::vector<int>& sizes,
                          std::uint64_t seed, double iou_threshold) {
  const int total = static_cast<int>(data.gallery.size());
  for (int size : sizes)
    require(size >= 1 && size <= total, "gallery size " + std::to_string(size) + " exceeds the " +
                                            std::to_string(total) + " available scenes");
  std::vector<SearchEngine::QueryFeatures> encoded;
  for (const auto& q : data.queries) encoded.push_back(engine.encode_query(q.caption));
  SweepOutput out;
  for (int size : sizes) {
    std::vector<RankedResult> results;
    std::vector<std::vector<GtBox>> gts;
    double rmap = 0;
    std::map<int, double> rcmc{{1, 0}, {5, 0}, {10, 0}};
    for (std::size_t qi = 0; qi < data.queries.size(); ++qi) {
      const Query& q = data.queries[qi];
      const auto scenes = sample_gallery(q.scene, total, size, seed, static_cast<int>(qi));
      std::vector<GtBox> gt;
      int persons = 0;
      for (int s : scenes)
        for (const auto& p : data.gallery[s].persons) {
          ++persons;
          if (p.identity.id == q.identity) gt.push_back({s, p.box});
        }
      results.push_back(engine.search(static_cast<int>(qi), encoded[qi], scenes));
      rmap += random_ap(static_cast<int>(gt.size()), persons);
      for (auto& [k, v] : rcmc) v += random_cmc(static_cast<int>(gt.size()), persons, k);
      gts.push_back(std::move(gt));
    }
    MetricReport rep = evaluate(results, gts, iou_threshold);
    rep.gallery_size = size;
    if (!data.queries.empty()) {
      rep.random_map = rmap / data.queries.size();
      for (auto& [k, v] : rcmc) rep.random_cmc[k] = v / data.queries.size();
    }
    out.reports.push_back(rep);
    out.results.push_back(std::move(results));
    out.gt.push_back(std::move(gts));
  }
  return out;
}

}  // namespace tbps
