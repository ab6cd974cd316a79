#pragma once

// Tape-free reverse-mode differentiation over Tensor values. Every op returns
// a Var whose node remembers its inputs and a closure that pushes the
// incoming gradient back to them. backward() walks the graph once in reverse
// topological order.

#include <functional>
#include <memory>
#include <vector>

#include "tbps/tensor.hpp"

namespace tbps::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Zero-initialised on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::vector<int>& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

// Disables graph construction on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an op result. `fn` receives the result node; its `grad` holds the
// upstream gradient and `parents` the inputs in the order given.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn);

// Seeds d(root)/d(root) = 1 (root must hold a single element).
void backward(const Var& root);

Var constant(Tensor t);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var smooth_l1(const Var& a, double beta);
// max(x,0) - x*t + log(1 + exp(-|x|)), elementwise; targets is constant.
Var bce_with_logits(const Var& logits, const Tensor& targets);

// ---- reductions and reshapes ----
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);  // [M,N] -> [M]
Var reshape(const Var& a, std::vector<int> shape);
Var transpose(const Var& a);  // 2-D only
Var slice_rows(const Var& a, int begin, int end);  // leading axis
Var concat_rows(const std::vector<Var>& parts);    // leading axis
Var gather_rows(const Var& a, const std::vector<int>& rows);
Var gather_cols(const Var& a, const std::vector<int>& cols);  // 2-D only
Var gather_flat(const Var& a, const std::vector<int>& indices);
Var stack_scalars(const std::vector<Var>& scalars, std::vector<int> shape);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);     // [M,K]x[K,N]
Var matmul_bt(const Var& a, const Var& b);  // [M,K]x[N,K]^T
Var add_row_vector(const Var& a, const Var& v);  // [M,N] + [N]
Var mul_row_vector(const Var& a, const Var& v);  // [M,N] * [N]
Var mul_col_vector(const Var& a, const Var& v);  // [M,N] * [M], row i scaled by v[i]

// ---- row-wise normalisations ----
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);
// Cosine of matching rows; a zero-norm row yields 0 with zero gradient.
Var cosine_rows(const Var& a, const Var& b);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// ---- spatial ----
// x: [C,H,W] or [N,C,H,W]; w: [O,C,k,k]; bias: [O] or undefined.
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad);
// x: [C,H,W]; s: [C]
Var channel_scale(const Var& x, const Var& s);
// x: [N,C,H,W] -> [N,C], mean over rows [r0,r1) and all columns.
Var mean_rows_range(const Var& x, int r0, int r1);
// x: [N,C,P,P]; out stripe j of roi n is input stripe perms[n][j].
Var permute_stripes(const Var& x, const std::vector<std::vector<int>>& perms);

}  // namespace tbps::ad
