#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tbps/cross_modal.hpp"
#include "tbps/gradcheck.hpp"

using namespace tbps;
using ad::Var;

namespace {

using Mat = std::vector<std::vector<double>>;

Tensor randn(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal();
  return t;
}

Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (int i = 0; i < t.dim(0); ++i)
    for (int j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

Mat affine(const Mat& x, const Var& w, const Var& b) {
  Mat out(x.size(), std::vector<double>(w.shape()[0]));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (int o = 0; o < w.shape()[0]; ++o) {
      double s = b.value()[o];
      for (int k = 0; k < w.shape()[1]; ++k) s += w.value().at(o, k) * x[i][k];
      out[i][o] = s;
    }
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// mean over query parts of cos(v_i, sum_j softmax_j(q_i.k_j / sqrt(D)) v'_j)
double attend_oracle(const Mat& q, const Mat& v, const Mat& k2, const Mat& v2) {
  const double d = static_cast<double>(q[0].size());
  double total = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> w(k2.size());
    double z = 0;
    for (std::size_t j = 0; j < k2.size(); ++j) z += w[j] = std::exp(dot(q[i], k2[j]) / std::sqrt(d));
    std::vector<double> a(v2[0].size(), 0.0);
    for (std::size_t j = 0; j < k2.size(); ++j)
      for (std::size_t c = 0; c < a.size(); ++c) a[c] += w[j] / z * v2[j][c];
    total += dot(v[i], a) / std::sqrt(dot(v[i], v[i]) * dot(a, a));
  }
  return total / q.size();
}

double softmax_kl(const std::vector<double>& logits, const std::vector<double>& q, double eps) {
  double mx = -1e300, z = 0;
  for (double v : logits) mx = std::max(mx, v);
  for (double v : logits) z += std::exp(v - mx);
  double kl = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double p = std::exp(logits[j] - mx) / z;
    kl += p * (std::log(p) - std::log(q[j] + eps));
  }
  return kl;
}

std::vector<double> ybar_row(const std::vector<int>& ids, int anchor) {
  std::vector<double> r(ids.size());
  double n = 0;
  for (std::size_t j = 0; j < ids.size(); ++j) n += r[j] = ids[j] == anchor;
  for (double& v : r) v /= n;
  return r;
}

double csal_oracle(const Mat& s, const Mat& sp, const std::vector<int>& ids, double eps, double scale) {
  const std::size_t b = ids.size();
  double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> row(b), col(b);
    for (std::size_t j = 0; j < b; ++j) {
      row[j] = scale * s[i][j];   // image i over texts
      col[j] = scale * sp[j][i];  // text i over images
    }
    total += softmax_kl(row, ybar_row(ids, ids[i]), eps) + softmax_kl(col, ybar_row(ids, ids[i]), eps);
  }
  return total;
}

double cmpm_oracle(const Mat& img, const Mat& txt, const std::vector<int>& ids, double eps) {
  const std::size_t b = ids.size();
  double i2t = 0, t2i = 0;
  for (std::size_t j = 0; j < b; ++j) {
    std::vector<double> a(b), c(b);
    const double nt = std::sqrt(dot(txt[j], txt[j])), ni = std::sqrt(dot(img[j], img[j]));
    for (std::size_t i = 0; i < b; ++i) {
      a[i] = dot(img[i], txt[j]) / nt;  // images scored against text j
      c[i] = dot(txt[i], img[j]) / ni;  // texts scored against image j
    }
    i2t += softmax_kl(a, ybar_row(ids, ids[j]), eps);
    t2i += softmax_kl(c, ybar_row(ids, ids[j]), eps);
  }
  return (i2t + t2i) / b;
}

double cmpc_oracle(const Mat& img, const Mat& txt, const std::vector<int>& ids, const Mat& w) {
  double total = 0;
  for (int dir = 0; dir < 2; ++dir)
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto& x = dir == 0 ? img[i] : txt[i];
      const auto& y = dir == 0 ? txt[i] : img[i];
      const double c = dot(x, y) / dot(y, y);
      std::vector<double> logits(w.size());
      for (std::size_t l = 0; l < w.size(); ++l) logits[l] = c * dot(y, w[l]) / std::sqrt(dot(w[l], w[l]));
      double mx = -1e300, z = 0;
      for (double v : logits) mx = std::max(mx, v);
      for (double v : logits) z += std::exp(v - mx);
      total += -(logits[ids[i]] - mx - std::log(z)) / ids.size();
    }
  return total;
}

}  // namespace

TEST_CASE("pair similarity matches a scalar attention oracle") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = rng.range(1, 4), n = rng.range(1, 4), d = 4;
    const CrossAttentionParams p = CrossAttentionParams::init(d, rng);
    const Tensor vis = randn({m, d}, rng), txt = randn({n, d}, rng);
    const PairScores s = pair_similarity(ad::constant(vis), ad::constant(txt), p);
    const Mat vm = to_mat(vis), tm = to_mat(txt);
    const Mat vq = affine(vm, p.vq_w, p.vq_b), vk = affine(vm, p.vk_w, p.vk_b), vv = affine(vm, p.vv_w, p.vv_b);
    const Mat tq = affine(tm, p.tq_w, p.tq_b), tk = affine(tm, p.tk_w, p.tk_b), tv = affine(tm, p.tv_w, p.tv_b);
    CHECK(s.s.value()[0] == doctest::Approx(attend_oracle(vq, vv, tk, tv)).epsilon(1e-12));
    CHECK(s.s_prime.value()[0] == doctest::Approx(attend_oracle(tq, tv, vk, vv)).epsilon(1e-12));
  }
}

TEST_CASE("pair similarity: self match and value scale invariance") {
  Rng rng(2);
  CrossAttentionParams p = CrossAttentionParams::init(5, rng);
  p.tq_w = p.vq_w;
  p.tk_w = p.vk_w;
  p.tv_w = p.vv_w;
  const Tensor x = randn({1, 5}, rng);
  const PairScores self = pair_similarity(ad::constant(x), ad::constant(x), p);
  CHECK(self.s.value()[0] == doctest::Approx(1.0));
  CHECK(self.s_prime.value()[0] == doctest::Approx(1.0));

  const CrossAttentionParams q = CrossAttentionParams::init(5, rng);
  const Tensor vis = randn({3, 5}, rng), txt = randn({4, 5}, rng);
  const PairScores a = pair_similarity(ad::constant(vis), ad::constant(txt), q);
  CrossAttentionParams scaled = q;
  scaled.vv_w = ad::constant(ad::scale(q.vv_w, 3.0).value());
  scaled.tv_w = ad::constant(ad::scale(q.tv_w, 0.25).value());
  const PairScores b = pair_similarity(ad::constant(vis), ad::constant(txt), scaled);
  CHECK(a.s.value()[0] == doctest::Approx(b.s.value()[0]).epsilon(1e-12));
  CHECK(a.s_prime.value()[0] == doctest::Approx(b.s_prime.value()[0]).epsilon(1e-12));
  CHECK(std::abs(a.s.value()[0]) <= 1.0);
  CHECK_THROWS_AS(pair_similarity(ad::constant(vis), ad::constant(Tensor({2, 4})), q), Error);
}

TEST_CASE("label matrices") {
  const LabelMatrix m = LabelMatrix::from_identities({1, 2, 1}, {1, 1, 3});
  CHECK(m.y.at(0, 0) == 1.0);
  CHECK(m.y.at(0, 2) == 0.0);
  CHECK(m.y_bar.at(0, 1) == 0.5);
  CHECK(m.nonzero_rows() == std::vector<int>{0, 2});
  const LabelMatrix t = m.transposed();
  CHECK(t.y_bar.at(0, 0) == 0.5);
  CHECK(t.y_bar.at(2, 1) == 0.0);
  CHECK(t.nonzero_rows() == std::vector<int>{0, 1});
}

TEST_CASE("csal loss") {
  const double eps = 1e-8;
  // One pair: both distributions are the point mass.
  const LabelMatrix one = LabelMatrix::from_identities({3}, {3});
  const double single = csal_loss(ad::constant(Tensor({1, 1}, 0.4)), ad::constant(Tensor({1, 1}, -0.2)), one, eps)
                            .value()[0];
  CHECK(std::abs(single) < 1e-7);

  // Two identities with diagonal score a and off-diagonal b: every row gives
  // KL(softmax(a, b) || (1, 0)).
  const LabelMatrix two = LabelMatrix::from_identities({0, 1}, {0, 1});
  Tensor s({2, 2}, 0.1);
  s.at(0, 0) = s.at(1, 1) = 0.9;
  const double p = std::exp(0.9) / (std::exp(0.9) + std::exp(0.1));
  const double kl = p * (std::log(p) - std::log(1 + eps)) + (1 - p) * (std::log(1 - p) - std::log(eps));
  CHECK(csal_loss(ad::constant(s), ad::constant(s), two, eps).value()[0] == doctest::Approx(4 * kl).epsilon(1e-10));

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int b = rng.range(1, 6);
    std::vector<int> ids(b);
    for (int& v : ids) v = rng.range(0, 2);
    const Tensor s1 = randn({b, b}, rng), s2 = randn({b, b}, rng);
    const double scale = rng.uniform(0.5, 10);
    const double got =
        csal_loss(ad::constant(s1), ad::constant(s2), LabelMatrix::from_identities(ids, ids), eps, "softmax", scale)
            .value()[0];
    CHECK(got == doctest::Approx(csal_oracle(to_mat(s1), to_mat(s2), ids, eps, scale)).epsilon(1e-10));
    CHECK(got >= -1e-6 * b);

    // Relabelling the batch by a permutation leaves the loss unchanged.
    const auto perm = rng.permutation(b);
    Tensor p1({b, b}), p2({b, b});
    std::vector<int> pid(b);
    for (int i = 0; i < b; ++i) {
      pid[i] = ids[perm[i]];
      for (int j = 0; j < b; ++j) {
        p1.at(i, j) = s1.at(perm[i], perm[j]);
        p2.at(i, j) = s2.at(perm[i], perm[j]);
      }
    }
    const double permuted =
        csal_loss(ad::constant(p1), ad::constant(p2), LabelMatrix::from_identities(pid, pid), eps, "softmax", scale)
            .value()[0];
    CHECK(permuted == doctest::Approx(got).epsilon(1e-10));
  }
  CHECK_THROWS_AS(csal_loss(ad::constant(s), ad::constant(s), two, eps, "max"), Error);
  CHECK_THROWS_AS(csal_loss(ad::constant(Tensor({3, 3})), ad::constant(Tensor({3, 3})), two, eps), Error);
}

TEST_CASE("csal sum normalisation puts mass proportional to shifted scores") {
  const LabelMatrix two = LabelMatrix::from_identities({0, 1}, {0, 1});
  Tensor s({2, 2}, 0.0);
  s.at(0, 0) = s.at(1, 1) = 1.0;
  // Shifted by +1: rows become (2, 1) so p = (2/3, 1/3).
  const double eps = 1e-8, p = 2.0 / 3;
  const double kl = p * (std::log(p) - std::log(1 + eps)) + (1 - p) * (std::log(1 - p) - std::log(eps));
  CHECK(csal_loss(ad::constant(s), ad::constant(s), two, eps, "sum").value()[0] ==
        doctest::Approx(4 * kl).epsilon(1e-5));
}

TEST_CASE("cmpm loss") {
  const double eps = 1e-8;
  Rng rng(4);
  const LabelMatrix one = LabelMatrix::from_identities({0}, {0});
  CHECK(std::abs(cmpm_loss(ad::constant(randn({1, 4}, rng)), ad::constant(randn({1, 4}, rng)), one, eps)
                     .value()[0]) < 1e-7);

  // Identical rows give uniform matching distributions.
  const int b = 4;
  const LabelMatrix distinct = LabelMatrix::from_identities({0, 1, 2, 3}, {0, 1, 2, 3});
  const Tensor same(std::vector<int>{b, 3}, 0.7);
  const double uniform = std::log(1.0 / b) - (std::log(1 + eps) + (b - 1) * std::log(eps)) / b;
  CHECK(cmpm_loss(ad::constant(same), ad::constant(same), distinct, eps).value()[0] ==
        doctest::Approx(2 * uniform).epsilon(1e-10));

  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.range(1, 6), d = rng.range(2, 5);
    std::vector<int> ids(n);
    for (int& v : ids) v = rng.range(0, 2);
    const Tensor img = randn({n, d}, rng), txt = randn({n, d}, rng);
    const double got = cmpm_loss(ad::constant(img), ad::constant(txt), LabelMatrix::from_identities(ids, ids), eps)
                           .value()[0];
    CHECK(got == doctest::Approx(cmpm_oracle(to_mat(img), to_mat(txt), ids, eps)).epsilon(1e-10));
    CHECK(got >= -1e-6);
  }
}

TEST_CASE("cmpc loss") {
  Rng rng(5);
  // One class: cross entropy over a single logit is zero.
  CHECK(cmpc_loss(ad::constant(randn({3, 4}, rng)), ad::constant(randn({3, 4}, rng)), {0, 0, 0},
                  ad::constant(randn({1, 4}, rng)))
            .value()[0] == doctest::Approx(0.0));
  // Orthogonal modalities project to zero: uniform logits in both directions.
  Tensor img({2, 4}), txt({2, 4});
  img.at(0, 0) = img.at(1, 1) = 1.0;
  txt.at(0, 2) = txt.at(1, 3) = 2.0;
  const int l = 5;
  CHECK(cmpc_loss(ad::constant(img), ad::constant(txt), {1, 4}, ad::constant(randn({l, 4}, rng))).value()[0] ==
        doctest::Approx(2 * std::log(l)).epsilon(1e-12));

  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.range(1, 5), d = rng.range(2, 5), classes = rng.range(1, 6);
    std::vector<int> ids(n);
    for (int& v : ids) v = rng.range(0, classes - 1);
    const Tensor a = randn({n, d}, rng), b = randn({n, d}, rng), w = randn({classes, d}, rng);
    const double got = cmpc_loss(ad::constant(a), ad::constant(b), ids, ad::constant(w)).value()[0];
    CHECK(got == doctest::Approx(cmpc_oracle(to_mat(a), to_mat(b), ids, to_mat(w))).epsilon(1e-10));
    CHECK(got >= 0.0);
  }
  CHECK_THROWS_AS(cmpc_loss(ad::constant(img), ad::constant(txt), {0, 0}, ad::constant(Tensor({2, 3}))), Error);
}

TEST_CASE("cross-modal gradients pass the finite-difference suite") {
  GradCheckOptions o;
  o.only = {"cmpm_loss", "cmpc_loss", "csal_loss", "csal_loss_sum", "pair_similarity"};
  for (const auto& row : run_gradcheck(o)) {
    INFO(row.name);
    CHECK(row.pass);
  }
}
