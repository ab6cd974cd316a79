#include "tbps/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include <malloc.h>

namespace tbps::ad {
namespace {

// Gradient buffers of several MB are allocated and freed every step; serving
// them from the heap instead of fresh mmaps avoids repeated page faults.
const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

thread_local bool g_grad_enabled = true;

MatMap mat(Tensor& t, int rows, int cols) { return MatMap(t.data(), rows, cols); }
ConstMatMap mat(const Tensor& t, int rows, int cols) { return ConstMatMap(t.data(), rows, cols); }

// Gradient buffer of parent i, or nullptr if it does not need one.
Tensor* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

const Tensor& pval(const Node& self, std::size_t i) { return self.parents[i]->value; }

void check_2d(const Tensor& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

void check_same(const Var& a, const Var& b, const char* op) {
  require(a.value().same_shape(b.value()), std::string(op) + ": shape mismatch " +
                                               shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class F>
Var unary(const Var& a, F f, std::function<void(Node&)> bw) {
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return make_op(std::move(out), {a}, std::move(bw));
}

// im2col for one image [C,H,W] -> [C*k*k, Ho*Wo]
void im2col(const double* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* col) {
  const int hw = ho * wo;
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = col + static_cast<std::size_t>((ch * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(dst + oy * wo, dst + (oy + 1) * wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* x) {
  const int hw = ho * wo;
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src = col + static_cast<std::size_t>((ch * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = x + (static_cast<std::size_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape());
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Var& v : inputs) any = any || v.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const Var& v : inputs) node->parents.push_back(v.node());
      node->backward = std::move(fn);
    }
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  require(root.defined() && root.size() == 1, "backward() needs a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior gradients are only needed during the sweep.
  for (Node* n : order)
    if (n->backward) n->grad = Tensor();
}

Var constant(Tensor t) { return Var(std::move(t), false); }

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = pgrad(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  check_same(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = pgrad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  check_same(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = pval(self, 0);
    const Tensor& bv = pval(self, 1);
    if (Tensor* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (Tensor* g = pgrad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Var scale(const Var& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c * self.grad[i];
  });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](Node& self) {
    if (Tensor* g = pgrad(self, 0)) {
      const Tensor& x = pval(self, 0);
      for (std::size_t i = 0; i < g->size(); ++i)
        if (x[i] > 0.0) (*g)[i] += self.grad[i];
    }
  });
}

Var sigmoid(const Var& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double y = self.value[i];
        (*g)[i] += self.grad[i] * y * (1.0 - y);
      }
  });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * self.value[i];
  });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](Node& self) {
    if (Tensor* g = pgrad(self, 0)) {
      const Tensor& x = pval(self, 0);
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] / x[i];
    }
  });
}

Var smooth_l1(const Var& a, double beta) {
  return unary(
      a,
      [beta](double x) {
        const double ax = std::abs(x);
        return ax < beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
      },
      [beta](Node& self) {
        if (Tensor* g = pgrad(self, 0)) {
          const Tensor& x = pval(self, 0);
          for (std::size_t i = 0; i < g->size(); ++i) {
            const double d = std::abs(x[i]) < beta ? x[i] / beta : (x[i] > 0 ? 1.0 : -1.0);
            (*g)[i] += self.grad[i] * d;
          }
        }
      });
}

Var bce_with_logits(const Var& logits, const Tensor& targets) {
  require(logits.size() == targets.size(), "bce_with_logits: size mismatch");
  Tensor out(logits.shape());
  const Tensor& x = logits.value();
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = std::max(x[i], 0.0) - x[i] * targets[i] + std::log1p(std::exp(-std::abs(x[i])));
  return make_op(std::move(out), {logits}, [targets](Node& self) {
    if (Tensor* g = pgrad(self, 0)) {
      const Tensor& x = pval(self, 0);
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-x[i]));
        (*g)[i] += self.grad[i] * (p - targets[i]);
      }
    }
  });
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  return make_op(Tensor::scalar(s), {a}, [](Node& self) {
    if (Tensor* g = pgrad(self, 0)) {
      const double up = self.grad[0];
      for (double& x : g->values()) x += up;
    }
  });
}

Var mean(const Var& a) {
  require(a.size() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var sum_rows(const Var& a) {
  check_2d(a.value(), "sum_rows");
  const int m = a.shape()[0], n = a.shape()[1];
  Tensor out({m});
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += a.value().at(i, j);
    out[i] = s;
  }
  return make_op(std::move(out), {a}, [m, n](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) g->at(i, j) += self.grad[i];
  });
}

Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Var transpose(const Var& a) {
  check_2d(a.value(), "transpose");
  const int m = a.shape()[0], n = a.shape()[1];
  Tensor out({n, m});
  mat(out, n, m) = mat(a.value(), m, n).transpose();
  return make_op(std::move(out), {a}, [m, n](Node& self) {
    if (Tensor* g = pgrad(self, 0)) mat(*g, m, n) += mat(self.grad, n, m).transpose();
  });
}

Var slice_rows(const Var& a, int begin, int end) {
  const auto& s = a.shape();
  require(!s.empty() && begin >= 0 && begin <= end && end <= s[0], "slice_rows: bad range");
  std::vector<int> shape = s;
  shape[0] = end - begin;
  const std::size_t stride = a.size() / static_cast<std::size_t>(s[0]);
  Tensor out(shape);
  std::copy_n(a.value().data() + begin * stride, out.size(), out.data());
  return make_op(std::move(out), {a}, [begin, stride](Node& self) {
    if (Tensor* g = pgrad(self, 0)) {
      double* dst = g->data() + begin * stride;
      for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  std::vector<int> shape = parts[0].shape();
  require(!shape.empty(), "concat_rows: scalar input");
  int rows = 0;
  for (const Var& p : parts) {
    std::vector<int> s = p.shape();
    require(s.size() == shape.size() && std::equal(s.begin() + 1, s.end(), shape.begin() + 1),
            "concat_rows: trailing shape mismatch");
    rows += s[0];
  }
  shape[0] = rows;
  Tensor out(shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    std::copy_n(p.value().data(), p.size(), out.data() + off);
    off += p.size();
  }
  return make_op(std::move(out), parts, [offsets](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k)
      if (Tensor* g = pgrad(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[k] + i];
  });
}

Var gather_rows(const Var& a, const std::vector<int>& rows) {
  const auto& s = a.shape();
  require(!s.empty(), "gather_rows: scalar input");
  const std::size_t stride = a.size() / static_cast<std::size_t>(s[0]);
  std::vector<int> shape = s;
  shape[0] = static_cast<int>(rows.size());
  Tensor out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] >= 0 && rows[r] < s[0], "gather_rows: index out of range");
    std::copy_n(a.value().data() + rows[r] * stride, stride, out.data() + r * stride);
  }
  return make_op(std::move(out), {a}, [rows, stride](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (std::size_t r = 0; r < rows.size(); ++r) {
        double* dst = g->data() + rows[r] * stride;
        const double* src = self.grad.data() + r * stride;
        for (std::size_t i = 0; i < stride; ++i) dst[i] += src[i];
      }
  });
}

Var gather_cols(const Var& a, const std::vector<int>& cols) {
  check_2d(a.value(), "gather_cols");
  const int m = a.shape()[0], n = a.shape()[1];
  const int k = static_cast<int>(cols.size());
  Tensor out({m, k});
  for (int j = 0; j < k; ++j) require(cols[j] >= 0 && cols[j] < n, "gather_cols: index out of range");
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) out.at(i, j) = a.value().at(i, cols[j]);
  return make_op(std::move(out), {a}, [cols, m, k](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) g->at(i, cols[j]) += self.grad.at(i, j);
  });
}

Var gather_flat(const Var& a, const std::vector<int>& indices) {
  Tensor out({static_cast<int>(indices.size())});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && static_cast<std::size_t>(indices[i]) < a.size(),
            "gather_flat: index out of range");
    out[i] = a.value()[indices[i]];
  }
  return make_op(std::move(out), {a}, [indices](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (std::size_t i = 0; i < indices.size(); ++i) (*g)[indices[i]] += self.grad[i];
  });
}

Var stack_scalars(const std::vector<Var>& scalars, std::vector<int> shape) {
  require(shape_size(shape) == scalars.size(), "stack_scalars: count does not match shape");
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < scalars.size(); ++i) out[i] = scalars[i].item();
  return make_op(std::move(out), scalars, [](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k)
      if (Tensor* g = pgrad(self, k)) (*g)[0] += self.grad[k];
  });
}

// ---------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
  check_2d(a.value(), "matmul");
  check_2d(b.value(), "matmul");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, "matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                                 shape_str(b.shape()));
  Tensor out({m, n});
  mat(out, m, n).noalias() = mat(a.value(), m, k) * mat(b.value(), k, n);
  return make_op(std::move(out), {a, b}, [m, k, n](Node& self) {
    auto up = mat(self.grad, m, n);
    if (Tensor* g = pgrad(self, 0)) mat(*g, m, k).noalias() += up * mat(pval(self, 1), k, n).transpose();
    if (Tensor* g = pgrad(self, 1)) mat(*g, k, n).noalias() += mat(pval(self, 0), m, k).transpose() * up;
  });
}

Var matmul_bt(const Var& a, const Var& b) {
  check_2d(a.value(), "matmul_bt");
  check_2d(b.value(), "matmul_bt");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  require(b.shape()[1] == k, "matmul_bt: inner dimension mismatch " + shape_str(a.shape()) +
                                 " x " + shape_str(b.shape()) + "^T");
  Tensor out({m, n});
  mat(out, m, n).noalias() = mat(a.value(), m, k) * mat(b.value(), n, k).transpose();
  return make_op(std::move(out), {a, b}, [m, k, n](Node& self) {
    auto up = mat(self.grad, m, n);
    if (Tensor* g = pgrad(self, 0)) mat(*g, m, k).noalias() += up * mat(pval(self, 1), n, k);
    if (Tensor* g = pgrad(self, 1)) mat(*g, n, k).noalias() += up.transpose() * mat(pval(self, 0), m, k);
  });
}

Var add_row_vector(const Var& a, const Var& v) {
  check_2d(a.value(), "add_row_vector");
  const int m = a.shape()[0], n = a.shape()[1];
  require(v.size() == static_cast<std::size_t>(n), "add_row_vector: length mismatch");
  Tensor out = a.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) += v.value()[j];
  return make_op(std::move(out), {a, v}, [m, n](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = pgrad(self, 1))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) (*g)[j] += self.grad.at(i, j);
  });
}

Var mul_row_vector(const Var& a, const Var& v) {
  check_2d(a.value(), "mul_row_vector");
  const int m = a.shape()[0], n = a.shape()[1];
  require(v.size() == static_cast<std::size_t>(n), "mul_row_vector: length mismatch");
  Tensor out = a.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) *= v.value()[j];
  return make_op(std::move(out), {a, v}, [m, n](Node& self) {
    const Tensor& av = pval(self, 0);
    const Tensor& vv = pval(self, 1);
    if (Tensor* g = pgrad(self, 0))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) g->at(i, j) += self.grad.at(i, j) * vv[j];
    if (Tensor* g = pgrad(self, 1))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) (*g)[j] += self.grad.at(i, j) * av.at(i, j);
  });
}

// ---------------------------------------------------------------- row normalisations

Var mul_col_vector(const Var& a, const Var& v) {
  check_2d(a.value(), "mul_col_vector");
  const int m = a.shape()[0], n = a.shape()[1];
  require(v.size() == static_cast<std::size_t>(m), "mul_col_vector: length mismatch");
  Tensor out = a.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) *= v.value()[i];
  return make_op(std::move(out), {a, v}, [m, n](Node& self) {
    const Tensor& av = pval(self, 0);
    const Tensor& vv = pval(self, 1);
    if (Tensor* g = pgrad(self, 0))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) g->at(i, j) += self.grad.at(i, j) * vv[i];
    if (Tensor* g = pgrad(self, 1))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) (*g)[i] += self.grad.at(i, j) * av.at(i, j);
  });
}

Var softmax_rows(const Var& a) {
  check_2d(a.value(), "softmax_rows");
  const int m = a.shape()[0], n = a.shape()[1];
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = -INFINITY;
    for (int j = 0; j < n; ++j) mx = std::max(mx, a.value().at(i, j));
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += (out.at(i, j) = std::exp(a.value().at(i, j) - mx));
    for (int j = 0; j < n; ++j) out.at(i, j) /= z;
  }
  return make_op(std::move(out), {a}, [m, n](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int i = 0; i < m; ++i) {
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
        for (int j = 0; j < n; ++j) g->at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
      }
  });
}

Var log_softmax_rows(const Var& a) {
  check_2d(a.value(), "log_softmax_rows");
  const int m = a.shape()[0], n = a.shape()[1];
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = -INFINITY;
    for (int j = 0; j < n; ++j) mx = std::max(mx, a.value().at(i, j));
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(a.value().at(i, j) - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < n; ++j) out.at(i, j) = a.value().at(i, j) - lse;
  }
  return make_op(std::move(out), {a}, [m, n](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int i = 0; i < m; ++i) {
        double gs = 0.0;
        for (int j = 0; j < n; ++j) gs += self.grad.at(i, j);
        for (int j = 0; j < n; ++j)
          g->at(i, j) += self.grad.at(i, j) - std::exp(self.value.at(i, j)) * gs;
      }
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  check_2d(a.value(), "l2_normalize_rows");
  const int m = a.shape()[0], n = a.shape()[1];
  Tensor out({m, n});
  std::vector<double> norms(m);
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += a.value().at(i, j) * a.value().at(i, j);
    norms[i] = std::max(std::sqrt(s), eps);
    for (int j = 0; j < n; ++j) out.at(i, j) = a.value().at(i, j) / norms[i];
  }
  return make_op(std::move(out), {a}, [m, n, norms](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int i = 0; i < m; ++i) {
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
        for (int j = 0; j < n; ++j)
          g->at(i, j) += (self.grad.at(i, j) - self.value.at(i, j) * dot) / norms[i];
      }
  });
}

Var cosine_rows(const Var& a, const Var& b) {
  check_same(a, b, "cosine_rows");
  check_2d(a.value(), "cosine_rows");
  const int m = a.shape()[0], n = a.shape()[1];
  Tensor out({m});
  std::vector<double> na(m), nb(m);
  for (int i = 0; i < m; ++i) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (int j = 0; j < n; ++j) {
      const double x = a.value().at(i, j), y = b.value().at(i, j);
      ab += x * y;
      aa += x * x;
      bb += y * y;
    }
    na[i] = std::sqrt(aa);
    nb[i] = std::sqrt(bb);
    out[i] = (na[i] > 0.0 && nb[i] > 0.0) ? ab / (na[i] * nb[i]) : 0.0;
  }
  return make_op(std::move(out), {a, b}, [m, n, na, nb](Node& self) {
    const Tensor& av = pval(self, 0);
    const Tensor& bv = pval(self, 1);
    Tensor* ga = pgrad(self, 0);
    Tensor* gb = pgrad(self, 1);
    for (int i = 0; i < m; ++i) {
      if (na[i] == 0.0 || nb[i] == 0.0) continue;
      const double c = self.value[i], up = self.grad[i];
      const double inv = 1.0 / (na[i] * nb[i]);
      for (int j = 0; j < n; ++j) {
        const double x = av.at(i, j), y = bv.at(i, j);
        if (ga) ga->at(i, j) += up * (y * inv - c * x / (na[i] * na[i]));
        if (gb) gb->at(i, j) += up * (x * inv - c * y / (nb[i] * nb[i]));
      }
    }
  });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  check_2d(x.value(), "layer_norm_rows");
  const int m = x.shape()[0], n = x.shape()[1];
  require(gain.size() == static_cast<std::size_t>(n) && bias.size() == static_cast<std::size_t>(n),
          "layer_norm_rows: parameter length mismatch");
  Tensor out({m, n});
  Tensor xhat({m, n});
  std::vector<double> inv_std(m);
  for (int i = 0; i < m; ++i) {
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += x.value().at(i, j);
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = x.value().at(i, j) - mu;
      var += d * d;
    }
    var /= n;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) {
      xhat.at(i, j) = (x.value().at(i, j) - mu) * inv_std[i];
      out.at(i, j) = xhat.at(i, j) * gain.value()[j] + bias.value()[j];
    }
  }
  return make_op(std::move(out), {x, gain, bias}, [m, n, xhat, inv_std](Node& self) {
    const Tensor& gv = pval(self, 1);
    if (Tensor* g = pgrad(self, 0))
      for (int i = 0; i < m; ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (int j = 0; j < n; ++j) {
          const double d = self.grad.at(i, j) * gv[j];
          s1 += d;
          s2 += d * xhat.at(i, j);
        }
        for (int j = 0; j < n; ++j) {
          const double d = self.grad.at(i, j) * gv[j];
          g->at(i, j) += inv_std[i] * (d - s1 / n - xhat.at(i, j) * s2 / n);
        }
      }
    if (Tensor* g = pgrad(self, 1))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) (*g)[j] += self.grad.at(i, j) * xhat.at(i, j);
    if (Tensor* g = pgrad(self, 2))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) (*g)[j] += self.grad.at(i, j);
  });
}

// ---------------------------------------------------------------- spatial

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
  const auto& xs = x.shape();
  require(xs.size() == 3 || xs.size() == 4, "conv2d: input must be [C,H,W] or [N,C,H,W]");
  require(w.value().rank() == 4, "conv2d: weight must be [O,C,k,k]");
  const bool batched = xs.size() == 4;
  const int n = batched ? xs[0] : 1;
  const int c = xs[batched ? 1 : 0], h = xs[batched ? 2 : 1], wd = xs[batched ? 3 : 2];
  const int o = w.shape()[0], k = w.shape()[2];
  require(w.shape()[1] == c && w.shape()[3] == k,
          "conv2d: weight " + shape_str(w.shape()) + " does not match input " + shape_str(xs));
  require(!bias.defined() || bias.size() == static_cast<std::size_t>(o), "conv2d: bias length");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  require(ho > 0 && wo > 0, "conv2d: empty output");
  const int ckk = c * k * k, hw = ho * wo;
  const bool pointwise = k == 1 && stride == 1 && pad == 0;

  std::vector<int> oshape = batched ? std::vector<int>{n, o, ho, wo} : std::vector<int>{o, ho, wo};
  Tensor out(oshape);
  auto cols = std::make_shared<std::vector<Tensor>>();
  const std::size_t in_stride = static_cast<std::size_t>(c) * h * wd;
  const std::size_t out_stride = static_cast<std::size_t>(o) * hw;
  auto wm = mat(w.value(), o, ckk);
  for (int b = 0; b < n; ++b) {
    const double* xin = x.value().data() + b * in_stride;
    MatMap y(out.data() + b * out_stride, o, hw);
    if (pointwise) {
      y.noalias() = wm * ConstMatMap(xin, c, hw);
    } else {
      Tensor col({ckk, hw});
      im2col(xin, c, h, wd, k, stride, pad, ho, wo, col.data());
      y.noalias() = wm * mat(col, ckk, hw);
      cols->push_back(std::move(col));
    }
    if (bias.defined())
      for (int oc = 0; oc < o; ++oc) y.row(oc).array() += bias.value()[oc];
  }

  std::vector<Var> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_op(std::move(out), inputs,
                 [=](Node& self) {
                   Tensor* gx = pgrad(self, 0);
                   Tensor* gw = pgrad(self, 1);
                   Tensor* gb = self.parents.size() > 2 ? pgrad(self, 2) : nullptr;
                   const Tensor& xv = pval(self, 0);
                   const Tensor& wv = pval(self, 1);
                   Tensor dcol;
                   if (gx && !pointwise) dcol = Tensor({ckk, hw});
                   for (int b = 0; b < n; ++b) {
                     ConstMatMap dy(self.grad.data() + b * out_stride, o, hw);
                     if (gw) {
                       if (pointwise)
                         mat(*gw, o, ckk).noalias() +=
                             dy * ConstMatMap(xv.data() + b * in_stride, c, hw).transpose();
                       else
                         mat(*gw, o, ckk).noalias() += dy * mat((*cols)[b], ckk, hw).transpose();
                     }
                     if (gb) VecMap(gb->data(), o) += dy.rowwise().sum();
                     if (gx) {
                       if (pointwise) {
                         MatMap(gx->data() + b * in_stride, c, hw).noalias() +=
                             mat(wv, o, ckk).transpose() * dy;
                       } else {
                         mat(dcol, ckk, hw).noalias() = mat(wv, o, ckk).transpose() * dy;
                         col2im(dcol.data(), c, h, wd, k, stride, pad, ho, wo,
                                gx->data() + b * in_stride);
                       }
                     }
                   }
                 });
}

Var channel_scale(const Var& x, const Var& s) {
  require(x.value().rank() == 3, "channel_scale: input must be [C,H,W]");
  const int c = x.shape()[0];
  require(s.size() == static_cast<std::size_t>(c), "channel_scale: channel count mismatch");
  const std::size_t plane = x.size() / c;
  Tensor out = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] *= s.value()[ch];
  return make_op(std::move(out), {x, s}, [c, plane](Node& self) {
    const Tensor& xv = pval(self, 0);
    const Tensor& sv = pval(self, 1);
    Tensor* gx = pgrad(self, 0);
    Tensor* gs = pgrad(self, 1);
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = ch * plane + i;
        if (gx) (*gx)[idx] += self.grad[idx] * sv[ch];
        if (gs) (*gs)[ch] += self.grad[idx] * xv[idx];
      }
  });
}

Var mean_rows_range(const Var& x, int r0, int r1) {
  require(x.value().rank() == 4, "mean_rows_range: input must be [N,C,H,W]");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  require(0 <= r0 && r0 < r1 && r1 <= h, "mean_rows_range: bad row range");
  const double inv = 1.0 / ((r1 - r0) * w);
  Tensor out({n, c});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const double* p = x.value().data() + ((static_cast<std::size_t>(b) * c + ch) * h) * w;
      double s = 0.0;
      for (int i = r0 * w; i < r1 * w; ++i) s += p[i];
      out.at(b, ch) = s * inv;
    }
  return make_op(std::move(out), {x}, [=](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
          double* p = g->data() + ((static_cast<std::size_t>(b) * c + ch) * h) * w;
          const double up = self.grad.at(b, ch) * inv;
          for (int i = r0 * w; i < r1 * w; ++i) p[i] += up;
        }
  });
}

Var permute_stripes(const Var& x, const std::vector<std::vector<int>>& perms) {
  require(x.value().rank() == 4, "permute_stripes: input must be [N,C,P,P]");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  require(static_cast<int>(perms.size()) == n, "permute_stripes: one permutation per roi");
  const int k = perms.empty() ? 1 : static_cast<int>(perms[0].size());
  require(k > 0 && h % k == 0, "permute_stripes: stripe count must divide height");
  const int sh = h / k;
  const std::size_t stripe = static_cast<std::size_t>(sh) * w;
  Tensor out(x.shape());
  for (int b = 0; b < n; ++b) {
    require(static_cast<int>(perms[b].size()) == k, "permute_stripes: ragged permutations");
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * h * w;
      for (int j = 0; j < k; ++j)
        std::copy_n(x.value().data() + base + perms[b][j] * stripe, stripe,
                    out.data() + base + j * stripe);
    }
  }
  return make_op(std::move(out), {x}, [=](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * h * w;
          for (int j = 0; j < k; ++j) {
            double* dst = g->data() + base + perms[b][j] * stripe;
            const double* src = self.grad.data() + base + j * stripe;
            for (std::size_t i = 0; i < stripe; ++i) dst[i] += src[i];
          }
        }
  });
}

}  // namespace tbps::ad
