#pragma once

#include <string>
#include <vector>

#include "tbps/autodiff.hpp"
#include "tbps/config.hpp"
#include "tbps/nn.hpp"

namespace tbps {

struct CrossAttentionParams {
  // Visual Q, K, V and semantic Q, K, V maps, each D x D with bias.
  ad::Var vq_w, vq_b, vk_w, vk_b, vv_w, vv_b;
  ad::Var tq_w, tq_b, tk_w, tk_b, tv_w, tv_b;

  static CrossAttentionParams init(int dim, Rng& rng);
  void collect(const std::string& prefix, Group group, ParamList& out) const;
};

struct ProjectedParts {
  ad::Var q, k, v;  // [parts,D]
};

ProjectedParts project_visual(const ad::Var& mixed, const CrossAttentionParams& p);
ProjectedParts project_text(const ad::Var& mixed, const CrossAttentionParams& p);

struct PairScores {
  ad::Var s;        // text-to-image: visual queries attend over semantic keys
  ad::Var s_prime;  // image-to-text: semantic queries attend over visual keys
};

// S = mean_i cos(V_i, A_i), A = softmax(Q K_t^T / sqrt(D)) V_t; S' swaps the
// modalities. A zero-norm part contributes cosine 0.
PairScores similarity(const ProjectedParts& visual, const ProjectedParts& text);
PairScores pair_similarity(const ad::Var& visual_mixed, const ad::Var& text_mixed, const CrossAttentionParams& p);

struct LabelMatrix {
  Tensor y;      // [B,B], 1 where identities match
  Tensor y_bar;  // row-normalised y (zero rows stay zero)

  static LabelMatrix from_identities(const std::vector<int>& rows, const std::vector<int>& cols);
  LabelMatrix transposed() const;
  std::vector<int> nonzero_rows() const;
};

// L_I + L_T. s and s_prime are [B,B] indexed [image, text]; L_I normalises
// each image row of s, L_T each text row of s_prime^T. `norm` is "softmax"
// or "sum" (shifted by +1 so that similarities are positive); `scale`
// multiplies similarities before normalisation.
ad::Var csal_loss(const ad::Var& s, const ad::Var& s_prime, const LabelMatrix& labels, double eps,
                  const std::string& norm = "softmax", double scale = 1.0);

// Row-wise KL of the normalised rows of `scores` against labels.y_bar,
// summed over rows with a nonzero label.
ad::Var csal_direction(const ad::Var& scores, const LabelMatrix& labels, double eps, const std::string& norm,
                       double scale);

struct CmpmParts {
  ad::Var i2t, t2i;
  ad::Var total() const { return ad::add(i2t, t2i); }
};

// labels indexed [image, text]. i2t: for each text j, softmax over images i
// of I_i . normalize(T_j); t2i is symmetric. Each is a mean over rows.
CmpmParts cmpm_parts(const ad::Var& image, const ad::Var& text, const LabelMatrix& labels, double eps);
ad::Var cmpm_loss(const ad::Var& image, const ad::Var& text, const LabelMatrix& labels, double eps);

struct CmpcParts {
  ad::Var ipt, tpi;
  ad::Var total() const { return ad::add(ipt, tpi); }
};

// Norm-softmax classification of projected features; w is [L,D] with one
// row per identity, normalised before use.
CmpcParts cmpc_parts(const ad::Var& image, const ad::Var& text, const std::vector<int>& ids, const ad::Var& w);
ad::Var cmpc_loss(const ad::Var& image, const ad::Var& text, const std::vector<int>& ids, const ad::Var& w);

}  // namespace tbps
