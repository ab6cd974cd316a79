#pragma once

#include <string>
#include <vector>

#include "tbps/autodiff.hpp"
#include "tbps/config.hpp"
#include "tbps/geometry.hpp"
#include "tbps/nn.hpp"

namespace tbps {

struct DetNetParams {
  ad::Var conv_w, conv_b;  // 1x1, C1 -> det_channels
  ad::Var fc_w, fc_b;      // [6, det_channels*P*P]: 2 class logits + 4 deltas

  static DetNetParams init(const ModelConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, Group group, ParamList& out) const;
};

struct DetOutput {
  ad::Var logits;  // [N,2], column 1 = person
  ad::Var deltas;  // [N,4]

  std::vector<double> person_prob() const;
  std::vector<Deltas> delta_values() const;
};

DetOutput det_forward(const ad::Var& pooled, const DetNetParams& p);

// Refines proposals with per-roi deltas and clips to the image.
std::vector<BBox> refine_boxes(const std::vector<BBox>& proposals, const std::vector<Deltas>& deltas,
                               int image_w, int image_h);

constexpr int kUnlabeled = -1;

struct OimState {
  Tensor lut;    // [L,D], unit rows
  Tensor queue;  // [Q,D], unit rows where filled
  int queue_head = 0;   // next slot to overwrite
  int queue_count = 0;  // filled slots
  double momentum = 0.5;
  double temperature = 0.1;

  static OimState init(int identities, int dim, const OimConfig& cfg, Rng& rng);
  int identities() const { return lut.dim(0); }
  int capacity() const { return queue.dim(0); }
  // Filled queue rows, oldest first.
  std::vector<int> queue_order() const;
  void push(const double* row);
};

struct OimResult {
  ad::Var loss;
  OimState state;
};

// Mean cross entropy of labelled rows over [lut; filled queue] similarities
// divided by temperature. The returned state has lut rows moved toward their
// embeddings and unlabelled rows appended to the queue. Embeddings are
// expected to be unit norm; lut and queue act as constants.
OimResult oim_loss(const ad::Var& embeddings, const std::vector<int>& labels, const OimState& state);

}  // namespace tbps
