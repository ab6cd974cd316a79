#pragma once

#include <string>
#include <vector>

#include "tbps/autodiff.hpp"
#include "tbps/config.hpp"
#include "tbps/nn.hpp"
#include "tbps/vocab.hpp"

namespace tbps {

// Layout: [cls] ([cls] word...)+ with one global cls at position 0 and one
// segment cls in front of every comma-delimited sub-sentence.
struct TokenSequence {
  std::vector<int> tokens;
  std::vector<int> cls_positions;   // global first, then one per segment
  std::vector<int> word_positions;  // every non-reserved position, in order
  std::vector<int> segment_of_word;

  int segments() const { return static_cast<int>(cls_positions.size()) - 1; }
  int length() const { return static_cast<int>(tokens.size()); }
};

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab);

struct TextBlockParams {
  ad::Var ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct TextEncoderParams {
  int dim = 0;
  int max_len = 0;
  ad::Var embed;     // [V,D]
  ad::Var position;  // [max_len,D]
  std::vector<TextBlockParams> blocks;
  ad::Var ln_g, ln_b;

  static TextEncoderParams init(int vocab_size, const ModelConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, Group group, ParamList& out) const;
};

struct SemanticFeatures {
  ad::Var hidden;        // [L,D], final states of the whole sequence
  ad::Var sentence;      // [1,D], houses the excitation driver z
  ad::Var subsentences;  // [S,D]
  ad::Var words;         // [K,D]
  ad::Var mixed;         // [1+S+K,D]: sentence, sub-sentences, words
};

// Pre-LN single-head transformer. Throws when seq is longer than max_len.
SemanticFeatures encode_text(const TokenSequence& seq, const TextEncoderParams& params);

}  // namespace tbps
