#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tbps/dataset.hpp"
#include "tbps/model.hpp"

namespace tbps {

struct Detection {
  int scene = 0;
  int index = 0;  // position within the scene's detection list
  BBox box;
  double prob = 0;
  int anchor = -1;   // source anchor in the scene's grid
  Tensor embedding;  // [D], unit norm
};

struct RankedEntry {
  int scene = 0;
  int detection = 0;
  BBox box;
  double score = 0;
};

struct RankedResult {
  int query = 0;
  std::vector<RankedEntry> entries;  // scores non-increasing
};

struct GtBox {
  int scene = 0;
  BBox box;
};

struct MetricReport {
  int gallery_size = 0;
  int queries = 0;
  double map = 0;
  std::map<int, double> cmc;  // K -> fraction
  double random_map = 0;
  std::map<int, double> random_cmc;
};

// Stable descending sort; equal scores keep scene then detection order.
RankedResult rank(int query, const std::vector<Detection>& detections, const std::vector<double>& scores);

struct QueryOutcome {
  double ap = 0;
  std::vector<bool> correct;  // per ranked entry
};

// An entry is correct when it lies in a gt scene and its IoU with a not yet
// matched gt box there is strictly above iou_threshold. AP averages the
// precision at each correct rank over the gt count.
QueryOutcome evaluate_query(const RankedResult& result, const std::vector<GtBox>& gt, double iou_threshold = 0.5);

// Throws when a query has no gt box.
MetricReport evaluate(const std::vector<RankedResult>& results, const std::vector<std::vector<GtBox>>& gt,
                      double iou_threshold = 0.5, const std::vector<int>& ks = {1, 5, 10});

// Expected AP of a uniformly random ranking of `candidates` items of which
// `relevant` are correct, and the matching probability of a hit in the top k.
double random_ap(int relevant, int candidates);
double random_cmc(int relevant, int candidates, int k);

// Per-query gallery: the gt scene plus size-1 other scenes, sorted.
std::vector<int> sample_gallery(int gt_scene, int total_scenes, int size, std::uint64_t seed, int query);

class SearchEngine {
 public:
  SearchEngine(const Model& model, const std::vector<SceneSample>& scenes);

  struct QueryFeatures {
    std::string caption;
    Tensor sentence;  // [1,D]
    Tensor global;    // [D], normalised sentence
    ProjectedParts text;
  };

  QueryFeatures encode_query(const std::string& caption) const;
  // Detections of one scene for one query, ordered by person probability.
  const std::vector<Detection>& detect(int scene, const QueryFeatures& q);
  double score(const QueryFeatures& q, const Detection& d);
  RankedResult search(int query_id, const QueryFeatures& q, const std::vector<int>& scenes);

  const Model& model() const { return model_; }

 private:
  struct AnchorDet {
    double prob = 0;
    BBox box;
  };
  struct Features {
    Tensor global;  // unit
    ProjectedParts visual;
  };
  struct SceneCache {
    bool ready = false;
    ad::Var fm;
    RpnOutput rpn;
    std::vector<double> rpn_logits;
    std::vector<Deltas> deltas;
    std::vector<BBox> anchors;
    std::map<int, AnchorDet> dets;
    std::map<int, Features> features;
  };

  SceneCache& cache(int scene);
  void ensure_features(int scene, const std::vector<int>& anchors);

  const Model& model_;
  const std::vector<SceneSample>& scenes_;
  std::vector<SceneCache> caches_;
  std::map<std::pair<std::string, int>, std::vector<Detection>> detections_;
};

struct SweepOutput {
  std::vector<MetricReport> reports;
  std::vector<std::vector<RankedResult>> results;         // per size, per query
  std::vector<std::vector<std::vector<GtBox>>> gt;         // per size, per query
};

// One report per gallery size. Throws when a size exceeds the gallery.
SweepOutput gallery_sweep(SearchEngine& engine, const DatasetSplit& data, const std::vector<int>& sizes,
                          std::uint64_t seed, double iou_threshold = 0.5);

}  // namespace tbps
