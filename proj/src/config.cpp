#include "tbps/config.hpp"

#include <functional>
#include <sstream>

#include "tbps/tensor.hpp"

namespace tbps {
namespace {

using nlohmann::json;

struct Field {
  std::string key;
  std::function<void(Config&, const std::string&)> set;
  std::function<json(const Config&)> get;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int parse_value(const std::string& s, int*) {
  std::size_t pos = 0;
  const int v = std::stoi(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
  return v;
}

double parse_value(const std::string& s, double*) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
  return v;
}

bool parse_value(const std::string& s, bool*) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument(s);
}

std::string parse_value(const std::string& s, std::string*) { return s; }

std::vector<std::string> parse_value(const std::string& s, std::vector<std::string>*) {
  auto v = split_list(s);
  if (v.empty()) throw std::invalid_argument(s);
  return v;
}

std::vector<double> parse_value(const std::string& s, std::vector<double>*) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(parse_value(item, static_cast<double*>(nullptr)));
  if (out.empty()) throw std::invalid_argument(s);
  return out;
}

template <class S, class T>
Field field(std::string key, S Config::*section, T S::*member) {
  return Field{key,
               [section, member](Config& c, const std::string& v) {
                 (c.*section).*member = parse_value(v, static_cast<T*>(nullptr));
               },
               [section, member](const Config& c) { return json((c.*section).*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    using C = Config;
    f.push_back(field("data.image_w", &C::data, &DataConfig::image_w));
    f.push_back(field("data.image_h", &C::data, &DataConfig::image_h));
    f.push_back(field("data.identities", &C::data, &DataConfig::identities));
    f.push_back(field("data.train_scenes", &C::data, &DataConfig::train_scenes));
    f.push_back(field("data.gallery_scenes", &C::data, &DataConfig::gallery_scenes));
    f.push_back(field("data.query_persons", &C::data, &DataConfig::query_persons));
    f.push_back(field("data.query_captions", &C::data, &DataConfig::query_captions));
    f.push_back(field("data.persons_min", &C::data, &DataConfig::persons_min));
    f.push_back(field("data.persons_max", &C::data, &DataConfig::persons_max));
    f.push_back(field("data.clauses", &C::data, &DataConfig::clauses));
    f.push_back(field("data.distractors", &C::data, &DataConfig::distractors));
    f.push_back(field("data.max_overlap_pct", &C::data, &DataConfig::max_overlap_pct));
    f.push_back(field("data.shirt_colors", &C::data, &DataConfig::shirt_colors));
    f.push_back(field("data.pants_colors", &C::data, &DataConfig::pants_colors));
    f.push_back(field("data.accessory_kinds", &C::data, &DataConfig::accessory_kinds));
    f.push_back(field("data.accessory_colors", &C::data, &DataConfig::accessory_colors));
    f.push_back(field("data.builds", &C::data, &DataConfig::builds));

    f.push_back(field("model.dim", &C::model, &ModelConfig::dim));
    f.push_back(field("model.base_channels", &C::model, &ModelConfig::base_channels));
    f.push_back(field("model.stem1_channels", &C::model, &ModelConfig::stem1_channels));
    f.push_back(field("model.stem2_channels", &C::model, &ModelConfig::stem2_channels));
    f.push_back(field("model.reduction", &C::model, &ModelConfig::reduction));
    f.push_back(field("model.rpn_channels", &C::model, &ModelConfig::rpn_channels));
    f.push_back(field("model.id_channels", &C::model, &ModelConfig::id_channels));
    f.push_back(field("model.det_channels", &C::model, &ModelConfig::det_channels));
    f.push_back(field("model.roi_size", &C::model, &ModelConfig::roi_size));
    f.push_back(field("model.sampling_ratio", &C::model, &ModelConfig::sampling_ratio));
    f.push_back(field("model.anchor_scales", &C::model, &ModelConfig::anchor_scales));
    f.push_back(field("model.anchor_ratios", &C::model, &ModelConfig::anchor_ratios));
    f.push_back(field("model.anchor_unit", &C::model, &ModelConfig::anchor_unit));
    f.push_back(field("model.text_layers", &C::model, &ModelConfig::text_layers));
    f.push_back(field("model.text_ffn", &C::model, &ModelConfig::text_ffn));
    f.push_back(field("model.max_len", &C::model, &ModelConfig::max_len));
    f.push_back(field("model.region_stripes", &C::model, &ModelConfig::region_stripes));
    f.push_back(field("model.local_stripes", &C::model, &ModelConfig::local_stripes));
    f.push_back(field("model.sdrpn", &C::model, &ModelConfig::sdrpn));
    f.push_back(field("model.score_fusion", &C::model, &ModelConfig::score_fusion));
    f.push_back(field("model.sdrpn_deltas", &C::model, &ModelConfig::sdrpn_deltas));

    f.push_back(field("rpn.pre_nms_train", &C::rpn, &RpnConfig::pre_nms_train));
    f.push_back(field("rpn.post_nms_train", &C::rpn, &RpnConfig::post_nms_train));
    f.push_back(field("rpn.pre_nms_infer", &C::rpn, &RpnConfig::pre_nms_infer));
    f.push_back(field("rpn.post_nms_infer", &C::rpn, &RpnConfig::post_nms_infer));
    f.push_back(field("rpn.nms", &C::rpn, &RpnConfig::nms));
    f.push_back(field("rpn.pos_iou", &C::rpn, &RpnConfig::pos_iou));
    f.push_back(field("rpn.neg_iou", &C::rpn, &RpnConfig::neg_iou));
    f.push_back(field("rpn.batch_anchors", &C::rpn, &RpnConfig::batch_anchors));
    f.push_back(field("rpn.pos_fraction", &C::rpn, &RpnConfig::pos_fraction));
    f.push_back(field("rpn.min_size", &C::rpn, &RpnConfig::min_size));

    f.push_back(field("det.rois", &C::det, &DetConfig::rois));
    f.push_back(field("det.fg_iou", &C::det, &DetConfig::fg_iou));
    f.push_back(field("det.score_threshold", &C::det, &DetConfig::score_threshold));
    f.push_back(field("det.nms", &C::det, &DetConfig::nms));
    f.push_back(field("det.add_gt", &C::det, &DetConfig::add_gt));

    f.push_back(field("id.per_identity", &C::id, &IdConfig::per_identity));
    f.push_back(field("id.iou", &C::id, &IdConfig::iou));

    f.push_back(field("oim.momentum", &C::oim, &OimConfig::momentum));
    f.push_back(field("oim.temperature", &C::oim, &OimConfig::temperature));
    f.push_back(field("oim.queue", &C::oim, &OimConfig::queue));
    f.push_back(field("oim.queue_background", &C::oim, &OimConfig::queue_background));
    f.push_back(field("oim.background_rois", &C::oim, &OimConfig::background_rois));

    f.push_back(field("loss.rpn_cls", &C::loss, &LossConfig::rpn_cls));
    f.push_back(field("loss.rpn_reg", &C::loss, &LossConfig::rpn_reg));
    f.push_back(field("loss.cls", &C::loss, &LossConfig::cls));
    f.push_back(field("loss.reg", &C::loss, &LossConfig::reg));
    f.push_back(field("loss.oim", &C::loss, &LossConfig::oim));
    f.push_back(field("loss.cmpm", &C::loss, &LossConfig::cmpm));
    f.push_back(field("loss.cmpc", &C::loss, &LossConfig::cmpc));
    f.push_back(field("loss.csal", &C::loss, &LossConfig::csal));
    f.push_back(field("loss.eps", &C::loss, &LossConfig::eps));
    f.push_back(field("loss.csal_norm", &C::loss, &LossConfig::csal_norm));
    f.push_back(field("loss.csal_scale", &C::loss, &LossConfig::csal_scale));

    f.push_back(field("train.epochs", &C::train, &TrainConfig::epochs));
    f.push_back(field("train.batch", &C::train, &TrainConfig::batch));
    f.push_back(field("train.flip", &C::train, &TrainConfig::flip));
    f.push_back(field("train.lr_det", &C::train, &TrainConfig::lr_det));
    f.push_back(field("train.lr_id", &C::train, &TrainConfig::lr_id));
    f.push_back(field("train.lr_proj", &C::train, &TrainConfig::lr_proj));
    f.push_back(field("train.momentum", &C::train, &TrainConfig::momentum));
    f.push_back(field("train.beta1", &C::train, &TrainConfig::beta1));
    f.push_back(field("train.beta2", &C::train, &TrainConfig::beta2));
    f.push_back(field("train.clip_norm", &C::train, &TrainConfig::clip_norm));

    f.push_back(field("eval.gallery_size", &C::eval, &EvalConfig::gallery_size));
    f.push_back(field("eval.rank_mode", &C::eval, &EvalConfig::rank_mode));
    f.push_back(field("eval.iou", &C::eval, &EvalConfig::iou));
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

std::string json_to_override(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + json_to_override(v[i]);
    return s;
  }
  return v.dump();
}

void validate(const Config& c) {
  require(c.model.score_fusion == "prob" || c.model.score_fusion == "logit",
          "model.score_fusion must be prob or logit");
  require(c.loss.csal_norm == "softmax" || c.loss.csal_norm == "sum",
          "loss.csal_norm must be softmax or sum");
  require(c.eval.rank_mode == "mixed" || c.eval.rank_mode == "global",
          "eval.rank_mode must be mixed or global");
}

}  // namespace

Config make_profile(const std::string& name) {
  Config c;
  c.profile = name;
  if (name == "desk") {
    // Trained from scratch, so the detection group needs a far larger step
    // than the pretrained-backbone recipe.
    c.train.lr_det = 2e-2;
    c.train.lr_proj = 1e-3;
    // Narrow enough for 15 epochs in a few minutes on one core.
    c.model.base_channels = 64;
    c.model.id_channels = 32;
    c.loss.csal_scale = 10.0;
    return c;
  }
  if (name == "paper") {
    c.data.image_w = 800;
    c.data.image_h = 600;
    c.model.dim = 768;
    c.model.base_channels = 1024;
    c.model.anchor_unit = 16.0;
    c.train.epochs = 12;
    c.eval.gallery_size = 100;
    return c;
  }
  throw Error("unknown profile '" + name + "' (expected desk or paper)");
}

void apply_override(Config& cfg, const std::string& key, const std::string& value) {
  if (key == "profile") throw Error("profile cannot be overridden; pass --profile");
  const Field* f = find_field(key);
  if (!f) throw Error("unknown config key '" + key + "'");
  try {
    f->set(cfg, value);
  } catch (const std::exception&) {
    throw Error("bad value '" + value + "' for config key '" + key + "'");
  }
  validate(cfg);
}

void apply_override(Config& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error("override '" + assignment + "' is not key=value");
  apply_override(cfg, assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

nlohmann::json to_json(const Config& cfg) {
  json j = json::object();
  j["profile"] = cfg.profile;
  for (const auto& f : fields()) j[f.key] = f.get(cfg);
  return j;
}

Config config_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.contains("profile"), "config document lacks a profile");
  Config c = make_profile(j.at("profile").get<std::string>());
  for (const auto& [key, value] : j.items()) {
    if (key == "profile") continue;
    apply_override(c, key, json_to_override(value));
  }
  return c;
}

std::uint64_t config_hash(const Config& cfg) {
  const std::string text = to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace tbps
