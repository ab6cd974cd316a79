#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "tbps/backbone.hpp"
#include "tbps/config.hpp"
#include "tbps/cross_modal.hpp"
#include "tbps/heads.hpp"
#include "tbps/proposal.hpp"
#include "tbps/text_encoder.hpp"
#include "tbps/vocab.hpp"

namespace tbps {

struct Model {
  Config config;
  Vocabulary vocab;
  BaseNetParams base;
  ProposalParams proposal;
  DetNetParams det;
  IdNetParams id;
  TextEncoderParams text;
  CrossAttentionParams cross;
  ad::Var cmpc_w;  // [identities, D]
  OimState oim;

  static Model init(const Config& cfg, const Vocabulary& vocab, int identities, std::uint64_t seed);

  // Every trainable parameter exactly once with its optimizer group.
  ParamList parameters() const;
  int anchors_per_location() const;
};

// Named tensors in one binary file. Unknown or missing names are errors on load.
using TensorMap = std::map<std::string, Tensor>;
void save_tensors(const TensorMap& tensors, const std::filesystem::path& path);
TensorMap load_tensors(const std::filesystem::path& path);

// Parameters and OIM state under their names.
TensorMap model_tensors(const Model& m);
void assign_model_tensors(Model& m, const TensorMap& tensors);

}  // namespace tbps
