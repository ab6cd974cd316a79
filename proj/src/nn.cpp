#include "tbps/nn.hpp"

#include <cmath>

namespace tbps {

using ad::Var;

const char* group_name(Group g) {
  switch (g) {
    case Group::kDetection: return "detection";
    case Group::kIdentification: return "identification";
    case Group::kProjection: return "projection";
  }
  return "?";
}

Var normal_param(std::vector<int> shape, double std, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = std * rng.normal();
  return Var(std::move(t), true);
}

Var zero_param(std::vector<int> shape) { return Var(Tensor(std::move(shape)), true); }

Var const_param(std::vector<int> shape, double value) { return Var(Tensor(std::move(shape), value), true); }

Var conv_param(int out, int in, int k, Rng& rng) {
  return normal_param({out, in, k, k}, std::sqrt(2.0 / (in * k * k)), rng);
}

Var linear_param(int out, int in, Rng& rng) {
  return normal_param({out, in}, std::sqrt(2.0 / (in + out)), rng);
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Var y = ad::matmul_bt(x, w);
  return b.defined() ? ad::add_row_vector(y, b) : y;
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  require(logits.value().rank() == 2 && logits.shape()[0] == static_cast<int>(labels.size()),
          "cross_entropy: one label per row required");
  const int n = logits.shape()[1];
  std::vector<int> flat(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < n, "cross_entropy: label " + std::to_string(labels[i]) +
                                                 " outside [0," + std::to_string(n) + ")");
    flat[i] = static_cast<int>(i) * n + labels[i];
  }
  return ad::scale(ad::mean(ad::gather_flat(ad::log_softmax_rows(logits), flat)), -1.0);
}

Var kl_rows(const Var& logits, const Tensor& targets, double eps, const std::vector<int>& rows) {
  require(logits.value().same_shape(targets), "kl_rows: shape mismatch");
  if (rows.empty()) return ad::constant(Tensor::scalar(0.0));
  Var z = ad::gather_rows(logits, rows);
  const int n = targets.dim(1);
  Tensor log_q({static_cast<int>(rows.size()), n});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (int j = 0; j < n; ++j) log_q.at(static_cast<int>(r), j) = std::log(targets.at(rows[r], j) + eps);
  Var p = ad::softmax_rows(z);
  Var diff = ad::sub(ad::log_softmax_rows(z), ad::constant(std::move(log_q)));
  return ad::sum(ad::mul(p, diff));
}

}  // namespace tbps
