#include "tbps/text_encoder.hpp"

#include <cmath>

namespace tbps {

using ad::Var;

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab) {
  const auto segments = split_caption(text);
  require(!segments.empty(), "tokenize: empty caption");
  TokenSequence seq;
  seq.tokens.push_back(Vocabulary::kCls);
  seq.cls_positions.push_back(0);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    seq.cls_positions.push_back(seq.length());
    seq.tokens.push_back(Vocabulary::kCls);
    for (const auto& w : segments[s]) {
      seq.word_positions.push_back(seq.length());
      seq.segment_of_word.push_back(static_cast<int>(s));
      seq.tokens.push_back(vocab.id(w));
    }
  }
  return seq;
}

TextEncoderParams TextEncoderParams::init(int vocab_size, const ModelConfig& cfg, Rng& rng) {
  TextEncoderParams p;
  const int d = cfg.dim, f = cfg.text_ffn;
  p.dim = d;
  p.max_len = cfg.max_len;
  p.embed = normal_param({vocab_size, d}, 0.5, rng);
  p.position = normal_param({cfg.max_len, d}, 0.1, rng);
  for (int l = 0; l < cfg.text_layers; ++l) {
    TextBlockParams b;
    b.ln1_g = const_param({d}, 1.0);
    b.ln1_b = zero_param({d});
    b.wq = linear_param(d, d, rng);
    b.wk = linear_param(d, d, rng);
    b.wv = linear_param(d, d, rng);
    b.wo = linear_param(d, d, rng);
    b.ln2_g = const_param({d}, 1.0);
    b.ln2_b = zero_param({d});
    b.w1 = linear_param(f, d, rng);
    b.b1 = zero_param({f});
    b.w2 = linear_param(d, f, rng);
    b.b2 = zero_param({d});
    p.blocks.push_back(std::move(b));
  }
  p.ln_g = const_param({d}, 1.0);
  p.ln_b = zero_param({d});
  return p;
}

void TextEncoderParams::collect(const std::string& prefix, Group group, ParamList& out) const {
  out.push_back({prefix + ".embed", embed, group});
  out.push_back({prefix + ".position", position, group});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = prefix + ".block" + std::to_string(l) + ".";
    const std::pair<const char*, const Var*> named[] = {
        {"ln1_g", &b.ln1_g}, {"ln1_b", &b.ln1_b}, {"wq", &b.wq}, {"wk", &b.wk},
        {"wv", &b.wv},       {"wo", &b.wo},       {"ln2_g", &b.ln2_g}, {"ln2_b", &b.ln2_b},
        {"w1", &b.w1},       {"b1", &b.b1},       {"w2", &b.w2},       {"b2", &b.b2}};
    for (const auto& [n, v] : named) out.push_back({p + n, *v, group});
  }
  out.push_back({prefix + ".ln_g", ln_g, group});
  out.push_back({prefix + ".ln_b", ln_b, group});
}

SemanticFeatures encode_text(const TokenSequence& seq, const TextEncoderParams& p) {
  const int len = seq.length();
  require(len > 1 && !seq.cls_positions.empty(), "encode_text: empty sequence");
  require(len <= p.max_len, "encode_text: sequence of " + std::to_string(len) +
                                " tokens exceeds max_len " + std::to_string(p.max_len));
  std::vector<int> pos(len);
  for (int i = 0; i < len; ++i) pos[i] = i;
  Var x = ad::add(ad::gather_rows(p.embed, seq.tokens), ad::gather_rows(p.position, pos));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.dim));
  for (const auto& b : p.blocks) {
    Var h = ad::layer_norm_rows(x, b.ln1_g, b.ln1_b);
    Var q = ad::matmul_bt(h, b.wq);
    Var k = ad::matmul_bt(h, b.wk);
    Var v = ad::matmul_bt(h, b.wv);
    Var att = ad::softmax_rows(ad::scale(ad::matmul_bt(q, k), inv_sqrt_d));
    x = ad::add(x, ad::matmul_bt(ad::matmul(att, v), b.wo));
    h = ad::layer_norm_rows(x, b.ln2_g, b.ln2_b);
    h = linear(ad::relu(linear(h, b.w1, b.b1)), b.w2, b.b2);
    x = ad::add(x, h);
  }
  SemanticFeatures f;
  f.hidden = ad::layer_norm_rows(x, p.ln_g, p.ln_b);
  f.sentence = ad::gather_rows(f.hidden, {0});
  std::vector<int> seg(seq.cls_positions.begin() + 1, seq.cls_positions.end());
  f.subsentences = ad::gather_rows(f.hidden, seg);
  std::vector<int> mixed{0};
  mixed.insert(mixed.end(), seg.begin(), seg.end());
  if (!seq.word_positions.empty()) {
    f.words = ad::gather_rows(f.hidden, seq.word_positions);
    mixed.insert(mixed.end(), seq.word_positions.begin(), seq.word_positions.end());
  } else {
    f.words = ad::constant(Tensor({0, p.dim}));
  }
  f.mixed = ad::gather_rows(f.hidden, mixed);
  return f;
}

}  // namespace tbps
