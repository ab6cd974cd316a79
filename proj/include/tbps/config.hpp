#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace tbps {

struct DataConfig {
  int image_w = 128;
  int image_h = 128;
  int identities = 40;
  int train_scenes = 300;
  int gallery_scenes = 100;
  int query_persons = 30;
  int query_captions = 2;  // captions per query box
  int persons_min = 2;
  int persons_max = 4;
  int clauses = 3;
  int distractors = 8;        // gallery identities that are never queried
  int max_overlap_pct = 30;   // pairwise IoU bound at placement, in percent
  std::vector<std::string> shirt_colors{"red", "blue", "green", "yellow", "white", "black", "orange", "purple"};
  std::vector<std::string> pants_colors{"red", "blue", "green", "yellow", "white", "black", "orange", "purple"};
  std::vector<std::string> accessory_kinds{"bag", "hat", "backpack"};
  std::vector<std::string> accessory_colors{"red", "blue", "green", "yellow", "white", "black"};
  std::vector<std::string> builds{"slim", "broad"};
};

struct ModelConfig {
  int dim = 128;             // D, every embedding vector
  int base_channels = 128;   // C1, Base-Net output channels
  int stem1_channels = 16;
  int stem2_channels = 32;
  int reduction = 16;        // r of the excitation bottleneck
  int rpn_channels = 32;
  int id_channels = 64;
  int det_channels = 16;
  int roi_size = 6;          // P
  int sampling_ratio = 2;
  std::vector<double> anchor_scales{8, 16, 32};
  std::vector<double> anchor_ratios{1, 2};  // height / width
  double anchor_unit = 1.5;                 // pixels per anchor scale unit
  int text_layers = 2;
  int text_ffn = 256;
  int max_len = 32;
  int region_stripes = 2;
  int local_stripes = 3;
  bool sdrpn = true;
  std::string score_fusion = "prob";  // prob | logit
  bool sdrpn_deltas = false;          // average both heads' deltas when decoding
};

struct RpnConfig {
  int pre_nms_train = 12000;
  int post_nms_train = 2000;
  int pre_nms_infer = 6000;
  int post_nms_infer = 300;
  double nms = 0.7;
  double pos_iou = 0.7;
  double neg_iou = 0.3;
  int batch_anchors = 256;
  double pos_fraction = 0.5;
  double min_size = 1.0;
};

struct DetConfig {
  int rois = 256;
  double fg_iou = 0.5;
  double score_threshold = 0.5;
  double nms = 0.4;
  bool add_gt = true;
};

struct IdConfig {
  int per_identity = 4;
  double iou = 0.5;
};

struct OimConfig {
  double momentum = 0.5;
  double temperature = 0.1;
  int queue = 32;
  bool queue_background = true;
  int background_rois = 4;
};

struct LossConfig {
  double rpn_cls = 1.0;
  double rpn_reg = 1.0;
  double cls = 1.0;
  double reg = 1.0;
  double oim = 1.0;
  double cmpm = 1.0;
  double cmpc = 1.0;
  double csal = 0.1;
  double eps = 1e-8;
  std::string csal_norm = "softmax";  // softmax | sum
  double csal_scale = 1.0;
};

struct TrainConfig {
  int epochs = 15;
  int batch = 4;
  bool flip = true;
  double lr_det = 1e-4;
  double lr_id = 1e-3;
  double lr_proj = 1e-4;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip_norm = 10.0;
};

struct EvalConfig {
  int gallery_size = 50;
  std::string rank_mode = "mixed";  // mixed | global
  double iou = 0.5;
};

struct Config {
  std::string profile = "desk";
  DataConfig data;
  ModelConfig model;
  RpnConfig rpn;
  DetConfig det;
  IdConfig id;
  OimConfig oim;
  LossConfig loss;
  TrainConfig train;
  EvalConfig eval;
};

// "desk" (default) or "paper". Throws on unknown names.
Config make_profile(const std::string& name);

// Applies one flat override such as "model.dim=64". Throws an Error naming the
// key when it is unknown or the value does not parse.
void apply_override(Config& cfg, const std::string& key, const std::string& value);
void apply_override(Config& cfg, const std::string& assignment);

std::vector<std::string> config_keys();

nlohmann::json to_json(const Config& cfg);
Config config_from_json(const nlohmann::json& j);

// FNV-1a of the canonical JSON text.
std::uint64_t config_hash(const Config& cfg);

}  // namespace tbps
