#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tbps/dataset.hpp"
#include "tbps/model.hpp"

namespace tbps {

struct LabeledBox {
  BBox box;
  int identity = 0;
};

struct IdRoi {
  BBox box;
  int identity = 0;
  int gt_index = 0;
  double score = 0;
};

// Per gt box, the highest-scoring proposals (at most per_identity) whose IoU
// with it is at least iou_threshold; proposals are taken in the given order
// when scores tie.
std::vector<IdRoi> sample_id_rois(const ProposalSet& proposals, const std::vector<LabeledBox>& gt,
                                  int per_identity, double iou_threshold);

constexpr int kLossTerms = 8;
const std::array<const char*, kLossTerms>& loss_names();  // rpn_cls ... csal

struct LossBundle {
  std::array<ad::Var, kLossTerms> terms;
  std::array<double, kLossTerms> lambdas{};

  static LossBundle zeros(const LossConfig& cfg);
  static std::array<double, kLossTerms> default_lambdas(const LossConfig& cfg);
  double value(int i) const { return terms[i].item(); }
};

// Weighted sum. Throws an Error naming the first non-finite component.
ad::Var total_loss(const LossBundle& bundle);

class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  void step(const std::vector<NamedParam>& params);
  void save(const std::string& prefix, TensorMap& out) const;
  void load(const std::string& prefix, const TensorMap& in);

 private:
  double lr_, momentum_;
  std::map<std::string, Tensor> velocity_;
};

class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps = 1e-8) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(const std::vector<NamedParam>& params);
  void save(const std::string& prefix, TensorMap& out) const;
  void load(const std::string& prefix, const TensorMap& in);

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

struct Optimizers {
  Sgd detection;
  Adam identification;
  Adam projection;

  explicit Optimizers(const TrainConfig& c);
  void step(const ParamList& params);
  TensorMap state() const;
  void load(const TensorMap& in);
};

// Scales all gradients so their joint L2 norm is at most max_norm; returns
// the norm before clipping.
double clip_grad_norm(const ParamList& params, double max_norm);

struct BatchResult {
  LossBundle bundle;
  OimState next_oim;
  int id_rois = 0;
};

// Forward pass of one training batch. flips[i] mirrors scene i.
BatchResult compute_losses(const Model& model, const std::vector<const SceneSample*>& scenes,
                           const std::vector<bool>& flips, Rng& rng);

// Mirrors a scene horizontally (image and boxes).
SceneSample flip_scene(const SceneSample& s);

struct StepRecord {
  long step = 0;
  int epoch = 0;
  std::array<double, kLossTerms> terms{};
  double total = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  bool resume = false;
  long max_steps = -1;            // stop early (tests)
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  Model model;
  std::vector<StepRecord> log;
  int epochs_completed = 0;
};

TrainResult train(const Config& cfg, const DatasetSplit& data, std::uint64_t seed, const TrainOptions& opts);

std::string loss_csv_header();
std::string loss_csv_row(const StepRecord& r);

// Reads checkpoint.bin and manifest.json from a run directory.
Model load_checkpoint(const std::filesystem::path& dir);
nlohmann::json read_manifest(const std::filesystem::path& dir);

}  // namespace tbps
