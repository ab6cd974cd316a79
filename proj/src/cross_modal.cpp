#include "tbps/cross_modal.hpp"

#include <cmath>

namespace tbps {

using ad::Var;

CrossAttentionParams CrossAttentionParams::init(int d, Rng& rng) {
  CrossAttentionParams p;
  for (Var* w : {&p.vq_w, &p.vk_w, &p.vv_w, &p.tq_w, &p.tk_w, &p.tv_w}) *w = linear_param(d, d, rng);
  for (Var* b : {&p.vq_b, &p.vk_b, &p.vv_b, &p.tq_b, &p.tk_b, &p.tv_b}) *b = zero_param({d});
  return p;
}

void CrossAttentionParams::collect(const std::string& prefix, Group group, ParamList& out) const {
  const std::pair<const char*, const Var*> named[] = {
      {"vq_w", &vq_w}, {"vq_b", &vq_b}, {"vk_w", &vk_w}, {"vk_b", &vk_b}, {"vv_w", &vv_w}, {"vv_b", &vv_b},
      {"tq_w", &tq_w}, {"tq_b", &tq_b}, {"tk_w", &tk_w}, {"tk_b", &tk_b}, {"tv_w", &tv_w}, {"tv_b", &tv_b}};
  for (const auto& [n, v] : named) out.push_back({prefix + "." + n, *v, group});
}

ProjectedParts project_visual(const Var& x, const CrossAttentionParams& p) {
  return {linear(x, p.vq_w, p.vq_b), linear(x, p.vk_w, p.vk_b), linear(x, p.vv_w, p.vv_b)};
}

ProjectedParts project_text(const Var& x, const CrossAttentionParams& p) {
  return {linear(x, p.tq_w, p.tq_b), linear(x, p.tk_w, p.tk_b), linear(x, p.tv_w, p.tv_b)};
}

namespace {

Var attend(const ProjectedParts& from, const ProjectedParts& to) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(from.q.shape()[1]));
  Var att = ad::softmax_rows(ad::scale(ad::matmul_bt(from.q, to.k), inv));
  return ad::mean(ad::cosine_rows(from.v, ad::matmul(att, to.v)));
}

}  // namespace

PairScores similarity(const ProjectedParts& visual, const ProjectedParts& text) {
  return {attend(visual, text), attend(text, visual)};
}

PairScores pair_similarity(const Var& visual_mixed, const Var& text_mixed, const CrossAttentionParams& p) {
  require(visual_mixed.shape()[1] == text_mixed.shape()[1], "pair_similarity: dimension mismatch");
  return similarity(project_visual(visual_mixed, p), project_text(text_mixed, p));
}

LabelMatrix LabelMatrix::from_identities(const std::vector<int>& rows, const std::vector<int>& cols) {
  const int r = static_cast<int>(rows.size()), c = static_cast<int>(cols.size());
  LabelMatrix m{Tensor({r, c}), Tensor({r, c})};
  for (int i = 0; i < r; ++i) {
    int count = 0;
    for (int j = 0; j < c; ++j) count += (m.y.at(i, j) = rows[i] == cols[j] ? 1.0 : 0.0) > 0;
    for (int j = 0; j < c; ++j) m.y_bar.at(i, j) = count ? m.y.at(i, j) / count : 0.0;
  }
  return m;
}

LabelMatrix LabelMatrix::transposed() const {
  const int r = y.dim(0), c = y.dim(1);
  LabelMatrix m{Tensor({c, r}), Tensor({c, r})};
  for (int j = 0; j < c; ++j) {
    double count = 0;
    for (int i = 0; i < r; ++i) count += (m.y.at(j, i) = y.at(i, j));
    for (int i = 0; i < r; ++i) m.y_bar.at(j, i) = count > 0 ? m.y.at(j, i) / count : 0.0;
  }
  return m;
}

std::vector<int> LabelMatrix::nonzero_rows() const {
  std::vector<int> out;
  for (int i = 0; i < y.dim(0); ++i) {
    bool any = false;
    for (int j = 0; j < y.dim(1); ++j) any = any || y.at(i, j) != 0.0;
    if (any) out.push_back(i);
  }
  return out;
}

Var csal_direction(const Var& scores, const LabelMatrix& labels, double eps, const std::string& norm,
                   double scale) {
  require(scores.value().same_shape(labels.y), "csal: score and label shapes differ");
  const auto rows = labels.nonzero_rows();
  if (norm == "softmax") return kl_rows(ad::scale(scores, scale), labels.y_bar, eps, rows);
  require(norm == "sum", "csal: unknown normalisation '" + norm + "'");
  if (rows.empty()) return ad::constant(Tensor::scalar(0.0));
  Var x = ad::gather_rows(scores, rows);
  const int m = x.shape()[0], n = x.shape()[1];
  Var shifted = ad::add_scalar(ad::scale(x, scale), scale + 1e-6);
  Var log_total = ad::reshape(ad::log(ad::sum_rows(shifted)), {m, 1});
  Var log_p = ad::sub(ad::log(shifted), ad::matmul(log_total, ad::constant(Tensor({1, n}, 1.0))));
  Tensor log_q({m, n});
  for (int r = 0; r < m; ++r)
    for (int j = 0; j < n; ++j) log_q.at(r, j) = std::log(labels.y_bar.at(rows[r], j) + eps);
  return ad::sum(ad::mul(ad::exp(log_p), ad::sub(log_p, ad::constant(std::move(log_q)))));
}

Var csal_loss(const Var& s, const Var& s_prime, const LabelMatrix& labels, double eps, const std::string& norm,
              double scale) {
  return ad::add(csal_direction(s, labels, eps, norm, scale),
                 csal_direction(ad::transpose(s_prime), labels.transposed(), eps, norm, scale));
}

namespace {

Var mean_kl(const Var& logits, const LabelMatrix& labels, double eps) {
  const auto rows = labels.nonzero_rows();
  Var total = kl_rows(logits, labels.y_bar, eps, rows);
  return rows.empty() ? total : ad::scale(total, 1.0 / rows.size());
}

}  // namespace

CmpmParts cmpm_parts(const Var& image, const Var& text, const LabelMatrix& labels, double eps) {
  require(image.value().same_shape(text.value()), "cmpm: image and text batches differ in shape");
  require(labels.y.dim(0) == image.shape()[0] && labels.y.dim(1) == text.shape()[0], "cmpm: label shape");
  // logits[i][j] = I_i . Tbar_j; rows of the transpose are texts.
  Var it = ad::matmul_bt(image, ad::l2_normalize_rows(text));
  Var ti = ad::matmul_bt(text, ad::l2_normalize_rows(image));
  return {mean_kl(ad::transpose(it), labels.transposed(), eps), mean_kl(ad::transpose(ti), labels, eps)};
}

Var cmpm_loss(const Var& image, const Var& text, const LabelMatrix& labels, double eps) {
  return cmpm_parts(image, text, labels, eps).total();
}

namespace {

Var project_onto(const Var& x, const Var& onto) {
  Var unit = ad::l2_normalize_rows(onto);
  return ad::mul_col_vector(unit, ad::sum_rows(ad::mul(x, unit)));
}

}  // namespace

CmpcParts cmpc_parts(const Var& image, const Var& text, const std::vector<int>& ids, const Var& w) {
  require(image.value().same_shape(text.value()), "cmpc: image and text batches differ in shape");
  require(w.value().rank() == 2 && w.shape()[1] == image.shape()[1], "cmpc: classifier must be [L,D]");
  Var wn = ad::l2_normalize_rows(w);
  return {cross_entropy(ad::matmul_bt(project_onto(image, text), wn), ids),
          cross_entropy(ad::matmul_bt(project_onto(text, image), wn), ids)};
}

Var cmpc_loss(const Var& image, const Var& text, const std::vector<int>& ids, const Var& w) {
  return cmpc_parts(image, text, ids, w).total();
}

}  // namespace tbps
