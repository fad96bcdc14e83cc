#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dbn/error.hpp"
#include "dbn/rng.hpp"

namespace dbn {

using Shape = std::vector<int>;

inline long numel(const Shape& s) {
  long n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// C (m x n) = or += A (m x k) * B (k x n), all row-major contiguous.
inline void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n,
                    bool accumulate) {
  CMapMat A(a, m, k), B(b, k, n);
  MapMat C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C (m x n) = or += A (m x k) * B^T, B is (n x k).
inline void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n,
                    bool accumulate) {
  CMapMat A(a, m, k), B(b, n, k);
  MapMat C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

// C (m x n) = or += A^T * B, A is (k x m), B is (k x n).
inline void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n,
                    bool accumulate) {
  CMapMat A(a, k, m), B(b, k, n);
  MapMat C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

}  // namespace detail

/// Node of the define-by-run tape. Holds the forward value and, once
/// backward() has run, the gradient of the loss with respect to it.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand, same length as value
  bool requires_grad = false;
  bool backward_ran = false;  // set on the node backward() was invoked on
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;  // pulls from grad into parents

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

namespace detail {
inline int& nograd_depth() {
  thread_local int depth = 0;
  return depth;
}
}  // namespace detail

/// While alive, forward ops do not record the tape and results carry no grad.
struct NoGradGuard {
  NoGradGuard() { ++detail::nograd_depth(); }
  ~NoGradGuard() { --detail::nograd_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::nograd_depth() == 0; }

/// Value-semantics handle to a tape node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from(std::move(shape), {});
  }

  static Tensor full(Shape shape, double v) {
    auto n = std::make_shared<TensorNode>();
    n->value.assign(numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    long count = numel(shape);
    if (data.empty()) data.assign(count, 0.0);
    if (static_cast<long>(data.size()) != count)
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  /// Trainable leaf.
  static Tensor param(Shape shape, std::vector<double> data = {}) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  /// Trainable leaf with uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) init.
  static Tensor param_uniform(Shape shape, int fan_in, Rng& rng) {
    double bound = std::sqrt(1.0 / std::max(1, fan_in));
    std::vector<double> data(numel(shape));
    for (double& v : data) v = rng.uniform(-bound, bound);
    return param(std::move(shape), std::move(data));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  long size() const { return static_cast<long>(node_->value.size()); }
  int dim(int i) const { return node_->shape[i]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  double item() const {
    if (size() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw UsageError("gradient not populated; run backward() first");
    return node_->grad;
  }
  void zero_grad() {
    node_->grad.assign(node_->value.size(), 0.0);
    node_->backward_ran = false;
  }

  std::shared_ptr<TensorNode> node() const { return node_; }
  TensorNode* raw() const { return node_.get(); }

  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backprop) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool track = grad_enabled();
  if (track) {
    bool any = false;
    for (const Tensor& p : parents) any = any || p.requires_grad();
    track = any;
  }
  if (track) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (Tensor& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return Tensor(std::move(n));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes differ: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape plumbing
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    }
  });
}

/// Sum of k same-shape tensors in one node.
inline Tensor add_n(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw UsageError("add_n: empty operand list");
  for (const Tensor& x : xs) detail::require_same_shape(xs[0], x, "add_n");
  std::vector<double> out(xs[0].size(), 0.0);
  for (const Tensor& x : xs)
    for (size_t i = 0; i < out.size(); ++i) out[i] += x.data()[i];
  return detail::make_result(xs[0].shape(), std::move(out), xs, [](TensorNode& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (long i = 0; i < a.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (long i = 0; i < a.size(); ++i) out[i] = a.data()[i] * c;
  return detail::make_result(a.shape(), std::move(out), {a}, [c](TensorNode& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * c;
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

/// Elementwise addition of a constant buffer (no gradient to the constant).
inline Tensor add_const(const Tensor& a, const std::vector<double>& c) {
  if (static_cast<long>(c.size()) != a.size())
    throw DimensionError("add_const: buffer length " + std::to_string(c.size()) +
                         " vs tensor " + shape_str(a.shape()));
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  return detail::make_result(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (long i = 0; i < a.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return detail::make_result(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (p->value[i] > 0.0) p->grad[i] += n.grad[i];
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (long i = 0; i < a.size(); ++i) {
    double x = a.data()[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  std::vector<double> y = out;
  return detail::make_result(a.shape(), std::move(out), {a}, [y](TensorNode& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * y[i] * (1.0 - y[i]);
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                         " changes element count");
  std::vector<double> out(a.data());
  return detail::make_result(std::move(shape), std::move(out), {a}, [](TensorNode& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
  });
}

inline Tensor flatten(const Tensor& a) { return reshape(a, {static_cast<int>(a.size())}); }

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({1}, {s}, {a}, [](TensorNode& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += n.grad[0];
  });
}

inline Tensor mean_of(const std::vector<Tensor>& scalars) {
  return scale(add_n(scalars), 1.0 / static_cast<double>(scalars.size()));
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();  // dA += dY * B^T
      detail::gemm_nt(nd.grad.data(), pb->value.data(), pa->grad.data(), m, n, k, true);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();  // dB += A^T * dY
      detail::gemm_tn(pa->value.data(), nd.grad.data(), pb->grad.data(), k, m, n, true);
    }
  });
}

/// a (m x k) times b^T where b is (n x k).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(static_cast<size_t>(m) * n);
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();  // dA += dY * B
      detail::gemm_nn(nd.grad.data(), pb->value.data(), pa->grad.data(), m, n, k, true);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();  // dB += dY^T * A
      detail::gemm_tn(nd.grad.data(), pa->value.data(), pb->grad.data(), n, m, k, true);
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("transpose: expected matrix, got " + shape_str(a.shape()));
  int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
  return detail::make_result({n, m}, std::move(out), {a}, [m, n](TensorNode& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        p->grad[static_cast<size_t>(i) * n + j] += nd.grad[static_cast<size_t>(j) * m + i];
  });
}

// ---------------------------------------------------------------------------
// Rows, columns, stacking
// ---------------------------------------------------------------------------

inline Tensor slice_cols(const Tensor& a, int c0, int len) {
  if (a.ndim() != 2 || c0 < 0 || len < 1 || c0 + len > a.dim(1))
    throw DimensionError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c0 + len) +
                         ") out of " + shape_str(a.shape()));
  int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * len);
  for (int i = 0; i < m; ++i)
    std::copy_n(a.data().begin() + static_cast<size_t>(i) * n + c0, len,
                out.begin() + static_cast<size_t>(i) * len);
  return detail::make_result({m, len}, std::move(out), {a}, [c0, len, m, n](TensorNode& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < len; ++j)
        p->grad[static_cast<size_t>(i) * n + c0 + j] += nd.grad[static_cast<size_t>(i) * len + j];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: empty operand list");
  int m = parts[0].dim(0);
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != m)
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    total += p.dim(1);
  }
  std::vector<double> out(static_cast<size_t>(m) * total);
  std::vector<int> widths;
  int off = 0;
  for (const Tensor& p : parts) {
    int w = p.dim(1);
    widths.push_back(w);
    for (int i = 0; i < m; ++i)
      std::copy_n(p.data().begin() + static_cast<size_t>(i) * w, w,
                  out.begin() + static_cast<size_t>(i) * total + off);
    off += w;
  }
  return detail::make_result({m, total}, std::move(out), parts, [widths, m, total](TensorNode& nd) {
    int o = 0;
    for (size_t pi = 0; pi < nd.parents.size(); ++pi) {
      auto& p = nd.parents[pi];
      int w = widths[pi];
      if (p->requires_grad) {
        p->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j)
            p->grad[static_cast<size_t>(i) * w + j] += nd.grad[static_cast<size_t>(i) * total + o + j];
      }
      o += w;
    }
  });
}

/// Stack 1-D tensors of equal length into a matrix, one per row.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw UsageError("stack_rows: empty operand list");
  long n = rows[0].size();
  std::vector<double> out;
  out.reserve(rows.size() * n);
  for (const Tensor& r : rows) {
    if (r.size() != n)
      throw DimensionError("stack_rows: length mismatch " + shape_str(rows[0].shape()) + " vs " +
                           shape_str(r.shape()));
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  int m = static_cast<int>(rows.size());
  return detail::make_result({m, static_cast<int>(n)}, std::move(out), rows, [n](TensorNode& nd) {
    for (size_t pi = 0; pi < nd.parents.size(); ++pi) {
      auto& p = nd.parents[pi];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (long j = 0; j < n; ++j) p->grad[j] += nd.grad[pi * n + j];
    }
  });
}

inline Tensor slice_row(const Tensor& a, int r) {
  if (a.ndim() != 2 || r < 0 || r >= a.dim(0))
    throw DimensionError("slice_row: row " + std::to_string(r) + " out of " + shape_str(a.shape()));
  int n = a.dim(1);
  std::vector<double> out(a.data().begin() + static_cast<size_t>(r) * n,
                          a.data().begin() + static_cast<size_t>(r + 1) * n);
  return detail::make_result({n}, std::move(out), {a}, [r, n](TensorNode& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int j = 0; j < n; ++j) p->grad[static_cast<size_t>(r) * n + j] += nd.grad[j];
  });
}

// ---------------------------------------------------------------------------
// Softmax, layernorm, losses
// ---------------------------------------------------------------------------

/// Softmax over the last axis; every row of the result sums to 1.
inline Tensor softmax_rows(const Tensor& a) {
  if (a.ndim() < 1) throw DimensionError("softmax_rows: scalar input");
  int n = a.dim(a.ndim() - 1);
  if (n < 1) throw DimensionError("softmax_rows: empty last axis in " + shape_str(a.shape()));
  long rows = a.size() / n;
  std::vector<double> out(a.size());
  for (long r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * n;
    double* y = out.data() + r * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (int j = 0; j < n; ++j) y[j] /= s;
  }
  std::vector<double> cache = out;
  return detail::make_result(a.shape(), std::move(out), {a}, [cache, n, rows](TensorNode& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (long r = 0; r < rows; ++r) {
      const double* y = cache.data() + r * n;
      const double* dy = nd.grad.data() + r * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += dy[j] * y[j];
      double* dx = p->grad.data() + r * n;
      for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
}

/// Layer normalization over the last axis with learned gain and bias.
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                        double eps = 1e-5) {
  int n = x.dim(x.ndim() - 1);
  if (gain.size() != n || bias.size() != n)
    throw DimensionError("layernorm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs last axis of " + shape_str(x.shape()));
  long rows = x.size() / n;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_sigma(rows);
  for (long r = 0; r < rows; ++r) {
    const double* v = x.data().data() + r * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += v[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (v[j] - mu) * (v[j] - mu);
    var /= n;
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (int j = 0; j < n; ++j) {
      double h = (v[j] - mu) * is;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [xhat, inv_sigma, n, rows](TensorNode& nd) {
        auto& px = nd.parents[0];
        auto& pg = nd.parents[1];
        auto& pb = nd.parents[2];
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (long r = 0; r < rows; ++r)
            for (int j = 0; j < n; ++j) pg->grad[j] += nd.grad[r * n + j] * xhat[r * n + j];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (long r = 0; r < rows; ++r)
            for (int j = 0; j < n; ++j) pb->grad[j] += nd.grad[r * n + j];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          const auto& g = pg->value;
          for (long r = 0; r < rows; ++r) {
            const double* dy = nd.grad.data() + r * n;
            const double* h = xhat.data() + r * n;
            double sum_dyg = 0.0, sum_dygh = 0.0;
            for (int j = 0; j < n; ++j) {
              sum_dyg += dy[j] * g[j];
              sum_dygh += dy[j] * g[j] * h[j];
            }
            double* dx = px->grad.data() + r * n;
            for (int j = 0; j < n; ++j)
              dx[j] += inv_sigma[r] * (dy[j] * g[j] - sum_dyg / n - h[j] * sum_dygh / n);
          }
        }
      });
}

/// -sum_k target_k * log softmax(logits)_k for a 1-D logits vector.
inline Tensor cross_entropy_soft(const Tensor& logits, const std::vector<double>& target) {
  if (logits.ndim() != 1)
    throw DimensionError("cross_entropy_soft: logits must be 1-D, got " + shape_str(logits.shape()));
  int n = logits.dim(0);
  if (static_cast<int>(target.size()) != n)
    throw DimensionError("cross_entropy_soft: target length " + std::to_string(target.size()) +
                         " vs logits " + shape_str(logits.shape()));
  double tsum = 0.0;
  for (double t : target) {
    if (t < -1e-12) throw ValidationError("cross_entropy_soft: negative target entry");
    tsum += t;
  }
  if (std::abs(tsum - 1.0) > 1e-9)
    throw ValidationError("cross_entropy_soft: target sums to " + std::to_string(tsum) +
                          ", expected 1");
  const double* x = logits.data().data();
  double mx = x[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (int j = 0; j < n; ++j) z += std::exp(x[j] - mx);
  double logz = std::log(z) + mx;
  double loss = 0.0;
  std::vector<double> p(n);
  for (int j = 0; j < n; ++j) {
    p[j] = std::exp(x[j] - logz);
    loss -= target[j] * (x[j] - logz);
  }
  return detail::make_result({1}, {loss}, {logits}, [p, target, n](TensorNode& nd) {
    auto& pl = nd.parents[0];
    if (!pl->requires_grad) return;
    pl->ensure_grad();
    for (int j = 0; j < n; ++j) pl->grad[j] += nd.grad[0] * (p[j] - target[j]);
  });
}

// ---------------------------------------------------------------------------
// Embedding and linear layers
// ---------------------------------------------------------------------------

/// Row lookup into a (K x d) table; gradient accumulates only on used rows.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2)
    throw DimensionError("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
  int k = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= k)
      throw ValidationError("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                            std::to_string(k) + " rows");
  std::vector<double> out;
  out.reserve(ids.size() * d);
  for (int id : ids)
    out.insert(out.end(), table.data().begin() + static_cast<size_t>(id) * d,
               table.data().begin() + static_cast<size_t>(id + 1) * d);
  return detail::make_result({static_cast<int>(ids.size()), d}, std::move(out), {table},
                             [ids, d](TensorNode& nd) {
                               auto& p = nd.parents[0];
                               if (!p->requires_grad) return;
                               p->ensure_grad();
                               for (size_t r = 0; r < ids.size(); ++r)
                                 for (int j = 0; j < d; ++j)
                                   p->grad[static_cast<size_t>(ids[r]) * d + j] += nd.grad[r * d + j];
                             });
}

/// Broadcast-add a bias vector to every row of a matrix.
inline Tensor add_row_bias(const Tensor& x, const Tensor& b) {
  if (x.ndim() != 2 || b.size() != x.dim(1))
    throw DimensionError("add_row_bias: " + shape_str(x.shape()) + " vs bias " +
                         shape_str(b.shape()));
  int m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.data());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += b.data()[j];
  return detail::make_result(x.shape(), std::move(out), {x, b}, [m, n](TensorNode& nd) {
    auto& px = nd.parents[0];
    auto& pb = nd.parents[1];
    if (px->requires_grad) {
      px->ensure_grad();
      for (size_t i = 0; i < nd.grad.size(); ++i) px->grad[i] += nd.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) pb->grad[j] += nd.grad[static_cast<size_t>(i) * n + j];
    }
  });
}

/// x (m x d_in) * W (d_in x d_out) + b. A 1-D x is treated as a single row.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor x2 = x.ndim() == 1 ? reshape(x, {1, x.dim(0)}) : x;
  Tensor y = add_row_bias(matmul(x2, w), b);
  return x.ndim() == 1 ? reshape(y, {y.dim(1)}) : y;
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const std::vector<double>& x, int cin, int h, int w, int kh, int kw, int ph,
                   int pw, int oh, int ow, std::vector<double>& cols) {
  cols.assign(static_cast<size_t>(cin) * kh * kw * oh * ow, 0.0);
  const long area = static_cast<long>(oh) * ow;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        double* dst = cols.data() + ((static_cast<long>(c) * kh + ky) * kw + kx) * area;
        for (int oy = 0; oy < oh; ++oy) {
          int sy = oy + ky - ph;
          if (sy < 0 || sy >= h) continue;
          const double* src = x.data() + (static_cast<long>(c) * h + sy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int sx = ox + kx - pw;
            if (sx >= 0 && sx < w) dst[static_cast<long>(oy) * ow + ox] = src[sx];
          }
        }
      }
}

inline void col2im_accumulate(const std::vector<double>& cols, int cin, int h, int w, int kh,
                              int kw, int ph, int pw, int oh, int ow, std::vector<double>& dx) {
  const long area = static_cast<long>(oh) * ow;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const double* src = cols.data() + ((static_cast<long>(c) * kh + ky) * kw + kx) * area;
        for (int oy = 0; oy < oh; ++oy) {
          int sy = oy + ky - ph;
          if (sy < 0 || sy >= h) continue;
          double* dst = dx.data() + (static_cast<long>(c) * h + sy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int sx = ox + kx - pw;
            if (sx >= 0 && sx < w) dst[sx] += src[static_cast<long>(oy) * ow + ox];
          }
        }
      }
}

}  // namespace detail

/// Zero-padded cross-correlation. x is (C_in x H x W), kernels are
/// (C_out x C_in x kh x kw); the result is (C_out x H' x W') with
/// H' = H + 2*ph - kh + 1.
inline Tensor conv2d(const Tensor& x, const Tensor& kernels, int ph, int pw) {
  if (x.ndim() != 3 || kernels.ndim() != 4 || kernels.dim(1) != x.dim(0))
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs kernels " +
                         shape_str(kernels.shape()));
  int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  int cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  int oh = h + 2 * ph - kh + 1, ow = w + 2 * pw - kw + 1;
  if (oh < 1 || ow < 1)
    throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  auto cols = std::make_shared<std::vector<double>>();
  detail::im2col(x.data(), cin, h, w, kh, kw, ph, pw, oh, ow, *cols);
  int krows = cin * kh * kw;
  long area = static_cast<long>(oh) * ow;
  std::vector<double> out(static_cast<size_t>(cout) * area);
  detail::gemm_nn(kernels.data().data(), cols->data(), out.data(), cout, krows,
                  static_cast<int>(area), false);
  return detail::make_result(
      {cout, oh, ow}, std::move(out), {x, kernels},
      [cols, cin, h, w, kh, kw, ph, pw, oh, ow, cout, krows, area](TensorNode& nd) {
        auto& px = nd.parents[0];
        auto& pk = nd.parents[1];
        if (pk->requires_grad) {
          pk->ensure_grad();  // dK += dY * cols^T
          detail::gemm_nt(nd.grad.data(), cols->data(), pk->grad.data(), cout,
                          static_cast<int>(area), krows, true);
        }
        if (px->requires_grad) {
          px->ensure_grad();  // dcols = K^T * dY, then scatter back to the image
          std::vector<double> dcols(static_cast<size_t>(krows) * area);
          detail::gemm_tn(pk->value.data(), nd.grad.data(), dcols.data(), krows, cout,
                          static_cast<int>(area), false);
          detail::col2im_accumulate(dcols, cin, h, w, kh, kw, ph, pw, oh, ow, px->grad);
        }
      });
}

/// Per-channel bias on a (C x H x W) map.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  if (x.ndim() != 3 || b.size() != x.dim(0))
    throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " vs bias " +
                         shape_str(b.shape()));
  int c = x.dim(0);
  long area = static_cast<long>(x.dim(1)) * x.dim(2);
  std::vector<double> out(x.data());
  for (int i = 0; i < c; ++i)
    for (long j = 0; j < area; ++j) out[i * area + j] += b.data()[i];
  return detail::make_result(x.shape(), std::move(out), {x, b}, [c, area](TensorNode& nd) {
    auto& px = nd.parents[0];
    auto& pb = nd.parents[1];
    if (px->requires_grad) {
      px->ensure_grad();
      for (size_t i = 0; i < nd.grad.size(); ++i) px->grad[i] += nd.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int i = 0; i < c; ++i)
        for (long j = 0; j < area; ++j) pb->grad[i] += nd.grad[i * area + j];
    }
  });
}

/// 2x2 max pooling with stride 2; gradient routes to the first maximal cell
/// in row-major window order.
inline Tensor maxpool2x2(const Tensor& x) {
  if (x.ndim() != 3 || x.dim(1) < 2 || x.dim(2) < 2)
    throw DimensionError("maxpool2x2: spatial extents of " + shape_str(x.shape()) +
                         " must be at least 2x2");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  int oh = h / 2, ow = w / 2;
  std::vector<double> out(static_cast<size_t>(c) * oh * ow);
  std::vector<int> argmax(out.size());
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        int best = -1;
        double bv = -std::numeric_limits<double>::infinity();
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            int idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (x.data()[idx] > bv) {
              bv = x.data()[idx];
              best = idx;
            }
          }
        size_t o = (static_cast<size_t>(ch) * oh + oy) * ow + ox;
        out[o] = bv;
        argmax[o] = best;
      }
  return detail::make_result({c, oh, ow}, std::move(out), {x}, [argmax](TensorNode& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i) p->grad[argmax[i]] += nd.grad[i];
  });
}

/// Channel-wise concatenation of (C1 x H x W) and (C2 x H x W), a first.
/// A zero-channel operand passes the other through.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    if (b.ndim() == 3 && b.dim(0) == 0) return a;
    if (a.ndim() == 3 && a.dim(0) == 0) return b;
    throw DimensionError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  if (b.dim(0) == 0) return a;
  if (a.dim(0) == 0) return b;
  int c1 = a.dim(0), c2 = b.dim(0), h = a.dim(1), w = a.dim(2);
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  long an = a.size();
  return detail::make_result({c1 + c2, h, w}, std::move(out), {a, b}, [an](TensorNode& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (long i = 0; i < an; ++i) pa->grad[i] += nd.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = an; i < nd.grad.size(); ++i) pb->grad[i - an] += nd.grad[i];
    }
  });
}

/// Inverse of concat_channels at a given split point.
inline std::pair<Tensor, Tensor> split_channels(const Tensor& x, int c1) {
  if (x.ndim() != 3 || c1 < 0 || c1 > x.dim(0))
    throw DimensionError("split_channels: split " + std::to_string(c1) + " out of " +
                         shape_str(x.shape()));
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  long area = static_cast<long>(h) * w;
  std::vector<double> a(x.data().begin(), x.data().begin() + c1 * area);
  std::vector<double> b(x.data().begin() + c1 * area, x.data().end());
  Tensor ta = detail::make_result({c1, h, w}, std::move(a), {x}, [area](TensorNode& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i) p->grad[i] += nd.grad[i];
  });
  Tensor tb = detail::make_result({c - c1, h, w}, std::move(b), {x}, [c1, area](TensorNode& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    size_t off = static_cast<size_t>(c1) * area;
    for (size_t i = 0; i < nd.grad.size(); ++i) p->grad[off + i] += nd.grad[i];
  });
  return {ta, tb};
}

// ---------------------------------------------------------------------------
// Reductions over feature maps (channel/spatial pooling for gating blocks)
// ---------------------------------------------------------------------------

inline Tensor spatial_mean(const Tensor& x) {
  if (x.ndim() != 3) throw DimensionError("spatial_mean: expected C x H x W, got " + shape_str(x.shape()));
  int c = x.dim(0);
  long area = static_cast<long>(x.dim(1)) * x.dim(2);
  std::vector<double> out(c, 0.0);
  for (int i = 0; i < c; ++i) {
    for (long j = 0; j < area; ++j) out[i] += x.data()[i * area + j];
    out[i] /= static_cast<double>(area);
  }
  return detail::make_result({c}, std::move(out), {x}, [c, area](TensorNode& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < c; ++i)
      for (long j = 0; j < area; ++j) p->grad[i * area + j] += nd.grad[i] / static_cast<double>(area);
  });
}

inline Tensor spatial_max(const Tensor& x) {
  if (x.ndim() != 3) throw DimensionError("spatial_max: expected C x H x W, got " + shape_str(x.shape()));
  int c = x.dim(0);
  long area = static_cast<long>(x.dim(1)) * x.dim(2);
  std::vector<double> out(c);
  std::vector<long> arg(c);
  for (int i = 0; i < c; ++i) {
    long best = i * area;
    for (long j = 1; j < area; ++j)
      if (x.data()[i * area + j] > x.data()[best]) best = i * area + j;
    out[i] = x.data()[best];
    arg[i] = best;
  }
  return detail::make_result({c}, std::move(out), {x}, [arg](TensorNode& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < arg.size(); ++i) p->grad[arg[i]] += nd.grad[i];
  });
}

inline Tensor channel_mean(const Tensor& x) {
  if (x.ndim() != 3) throw DimensionError("channel_mean: expected C x H x W, got " + shape_str(x.shape()));
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  long area = static_cast<long>(h) * w;
  std::vector<double> out(area, 0.0);
  for (int i = 0; i < c; ++i)
    for (long j = 0; j < area; ++j) out[j] += x.data()[i * area + j];
  for (long j = 0; j < area; ++j) out[j] /= c;
  return detail::make_result({1, h, w}, std::move(out), {x}, [c, area](TensorNode& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < c; ++i)
      for (long j = 0; j < area; ++j) p->grad[i * area + j] += nd.grad[j] / c;
  });
}

inline Tensor channel_max(const Tensor& x) {
  if (x.ndim() != 3) throw DimensionError("channel_max: expected C x H x W, got " + shape_str(x.shape()));
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  long area = static_cast<long>(h) * w;
  std::vector<double> out(area);
  std::vector<int> arg(area);
  for (long j = 0; j < area; ++j) {
    int best = 0;
    for (int i = 1; i < c; ++i)
      if (x.data()[i * area + j] > x.data()[static_cast<long>(best) * area + j]) best = i;
    out[j] = x.data()[static_cast<long>(best) * area + j];
    arg[j] = best;
  }
  return detail::make_result({1, h, w}, std::move(out), {x}, [arg, area](TensorNode& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (long j = 0; j < area; ++j) p->grad[static_cast<long>(arg[j]) * area + j] += nd.grad[j];
  });
}

/// Multiply every (H x W) plane of x by its channel's gate value.
inline Tensor scale_channels(const Tensor& x, const Tensor& gates) {
  if (x.ndim() != 3 || gates.size() != x.dim(0))
    throw DimensionError("scale_channels: " + shape_str(x.shape()) + " vs gates " +
                         shape_str(gates.shape()));
  int c = x.dim(0);
  long area = static_cast<long>(x.dim(1)) * x.dim(2);
  std::vector<double> out(x.size());
  for (int i = 0; i < c; ++i)
    for (long j = 0; j < area; ++j) out[i * area + j] = x.data()[i * area + j] * gates.data()[i];
  return detail::make_result(x.shape(), std::move(out), {x, gates}, [c, area](TensorNode& nd) {
    auto& px = nd.parents[0];
    auto& pg = nd.parents[1];
    if (px->requires_grad) {
      px->ensure_grad();
      for (int i = 0; i < c; ++i)
        for (long j = 0; j < area; ++j) px->grad[i * area + j] += nd.grad[i * area + j] * pg->value[i];
    }
    if (pg->requires_grad) {
      pg->ensure_grad();
      for (int i = 0; i < c; ++i)
        for (long j = 0; j < area; ++j) pg->grad[i] += nd.grad[i * area + j] * px->value[i * area + j];
    }
  });
}

/// Multiply every channel of x elementwise by a (1 x H x W) gate map.
inline Tensor scale_spatial(const Tensor& x, const Tensor& gate) {
  if (x.ndim() != 3 || gate.ndim() != 3 || gate.dim(0) != 1 || gate.dim(1) != x.dim(1) ||
      gate.dim(2) != x.dim(2))
    throw DimensionError("scale_spatial: " + shape_str(x.shape()) + " vs gate " +
                         shape_str(gate.shape()));
  int c = x.dim(0);
  long area = static_cast<long>(x.dim(1)) * x.dim(2);
  std::vector<double> out(x.size());
  for (int i = 0; i < c; ++i)
    for (long j = 0; j < area; ++j) out[i * area + j] = x.data()[i * area + j] * gate.data()[j];
  return detail::make_result(x.shape(), std::move(out), {x, gate}, [c, area](TensorNode& nd) {
    auto& px = nd.parents[0];
    auto& pg = nd.parents[1];
    if (px->requires_grad) {
      px->ensure_grad();
      for (int i = 0; i < c; ++i)
        for (long j = 0; j < area; ++j) px->grad[i * area + j] += nd.grad[i * area + j] * pg->value[j];
    }
    if (pg->requires_grad) {
      pg->ensure_grad();
      for (int i = 0; i < c; ++i)
        for (long j = 0; j < area; ++j) pg->grad[j] += nd.grad[i * area + j] * px->value[i * area + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Visits the recorded graph in
/// reverse topological order exactly once and accumulates gradients into
/// every reachable node that requires them. A second call on the same loss
/// without rebuilding the graph is an accumulation error.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw UsageError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  TensorNode* root = loss.raw();
  if (root->backward_ran)
    throw UsageError("backward: already invoked on this loss; rebuild the graph first");
  root->backward_ran = true;
  if (!root->requires_grad) return;

  // Iterative DFS post-order; reversed finish order is a topological order
  // with consumers ahead of producers.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

}  // namespace dbn
