#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "dvc/rng.hpp"

namespace dvc {

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

class Tensor;

struct TensorNode {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // allocated on first use, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// RAII guard disabling graph construction (inference / oracle evaluation).
struct NoGrad {
  bool prev;
  NoGrad() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGrad() { detail::grad_mode() = prev; }
};

class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data.assign(std::size_t(n->numel()), 0.0f);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }
  static Tensor full(std::vector<int> shape, float v,
                     bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }
  static Tensor from(std::vector<int> shape, std::vector<float> values,
                     bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    check(std::int64_t(values.size()) == n->numel(),
          "tensor data length does not match shape");
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }
  static Tensor scalar(float v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }
  static Tensor randn(std::vector<int> shape, RngStream& rng, float stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (float& x : t.data()) x = stddev * rng.normal();
    return t;
  }

  TensorNode* node() const { return n_.get(); }
  const std::shared_ptr<TensorNode>& ptr() const { return n_; }
  bool defined() const { return n_ != nullptr; }

  const std::vector<int>& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[std::size_t(i)]; }
  int rank() const { return int(n_->shape.size()); }
  std::int64_t numel() const { return n_->numel(); }
  std::vector<float>& data() { return n_->data; }
  const std::vector<float>& data() const { return n_->data; }
  std::vector<float>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }
  float item() const {
    check(numel() == 1, "item() requires a single-element tensor");
    return n_->data[0];
  }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0f);
  }

  // rank-2 helpers
  int rows() const { return n_->shape.at(0); }
  int cols() const { return n_->shape.at(1); }
  float& at(int r, int c) { return n_->data[std::size_t(r) * cols() + c]; }
  float at(int r, int c) const {
    return n_->data[std::size_t(r) * cols() + c];
  }

private:
  std::shared_ptr<TensorNode> n_;
};

namespace detail {

using EMat =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

inline CMapM as_mat(const TensorNode& n, int r, int c) {
  return CMapM(n.data.data(), r, c);
}
inline MapM grad_mat(TensorNode& n, int r, int c) {
  n.ensure_grad();
  return MapM(n.grad.data(), r, c);
}

inline Tensor make_op(std::vector<int> shape, std::vector<float> values,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  check(std::int64_t(n->data.size()) == n->numel(),
        "op produced wrong number of elements");
  bool need = false;
  if (grad_mode()) {
    for (const Tensor& p : parents) need = need || p.requires_grad();
  }
  n->requires_grad = need;
  if (need) {
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.ptr());
    n->backward_fn = std::move(backward);
  }
  return Tensor(n);
}

inline void same_shape(const Tensor& a, const Tensor& b, const char* what) {
  check(a.shape() == b.shape(), std::string(what) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "add");
  std::vector<float> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  auto an = a.ptr();
  auto bn = b.ptr();
  return detail::make_op(a.shape(), std::move(out), {a, b},
                         [an, bn](TensorNode& o) {
                           if (an->requires_grad) {
                             an->ensure_grad();
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                               an->grad[i] += o.grad[i];
                           }
                           if (bn->requires_grad) {
                             bn->ensure_grad();
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                               bn->grad[i] += o.grad[i];
                           }
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "sub");
  std::vector<float> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  auto an = a.ptr();
  auto bn = b.ptr();
  return detail::make_op(a.shape(), std::move(out), {a, b},
                         [an, bn](TensorNode& o) {
                           if (an->requires_grad) {
                             an->ensure_grad();
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                               an->grad[i] += o.grad[i];
                           }
                           if (bn->requires_grad) {
                             bn->ensure_grad();
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                               bn->grad[i] -= o.grad[i];
                           }
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "mul");
  std::vector<float> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  auto an = a.ptr();
  auto bn = b.ptr();
  return detail::make_op(a.shape(), std::move(out), {a, b},
                         [an, bn](TensorNode& o) {
                           if (an->requires_grad) {
                             an->ensure_grad();
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                               an->grad[i] += o.grad[i] * bn->data[i];
                           }
                           if (bn->requires_grad) {
                             bn->ensure_grad();
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                               bn->grad[i] += o.grad[i] * an->data[i];
                           }
                         });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "div");
  std::vector<float> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.data()[i];
  auto an = a.ptr();
  auto bn = b.ptr();
  return detail::make_op(
      a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& o) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < o.grad.size(); ++i)
            an->grad[i] += o.grad[i] / bn->data[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < o.grad.size(); ++i)
            bn->grad[i] -= o.grad[i] * an->data[i] / (bn->data[i] * bn->data[i]);
        }
      });
}

inline Tensor mul_scalar(const Tensor& a, float s) {
  std::vector<float> out(a.data());
  for (float& x : out) x *= s;
  auto an = a.ptr();
  return detail::make_op(a.shape(), std::move(out), {a},
                         [an, s](TensorNode& o) {
                           if (!an->requires_grad) return;
                           an->ensure_grad();
                           for (std::size_t i = 0; i < o.grad.size(); ++i)
                             an->grad[i] += s * o.grad[i];
                         });
}

inline Tensor add_scalar(const Tensor& a, float s) {
  std::vector<float> out(a.data());
  for (float& x : out) x += s;
  auto an = a.ptr();
  return detail::make_op(a.shape(), std::move(out), {a},
                         [an](TensorNode& o) {
                           if (!an->requires_grad) return;
                           an->ensure_grad();
                           for (std::size_t i = 0; i < o.grad.size(); ++i)
                             an->grad[i] += o.grad[i];
                         });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0f); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, float s) { return mul_scalar(a, s); }
inline Tensor operator*(float s, const Tensor& a) { return mul_scalar(a, s); }

namespace detail {
template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF df) {
  std::vector<float> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
  auto an = a.ptr();
  return make_op(a.shape(), std::move(out), {a}, [an, df](TensorNode& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      an->grad[i] += o.grad[i] * df(an->data[i], o.data[i]);
  });
}
}  // namespace detail

// unary math; the derivative callback receives (input, output)
inline Tensor exp_(const Tensor& a) {
  return detail::unary(a, [](float x) { return std::exp(x); },
                       [](float, float y) { return y; });
}
inline Tensor log_(const Tensor& a) {
  return detail::unary(a, [](float x) { return std::log(x); },
                       [](float x, float) { return 1.0f / x; });
}
inline Tensor sqrt_(const Tensor& a) {
  return detail::unary(a, [](float x) { return std::sqrt(x); },
                       [](float, float y) { return 0.5f / y; });
}
inline Tensor sin_(const Tensor& a) {
  return detail::unary(a, [](float x) { return std::sin(x); },
                       [](float x, float) { return std::cos(x); });
}
inline Tensor cos_(const Tensor& a) {
  return detail::unary(a, [](float x) { return std::cos(x); },
                       [](float x, float) { return -std::sin(x); });
}
inline Tensor tanh_(const Tensor& a) {
  return detail::unary(a, [](float x) { return std::tanh(x); },
                       [](float, float y) { return 1.0f - y * y; });
}
inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](float x) { return x > 0.0f ? x : 0.0f; },
                       [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}
inline Tensor gelu(const Tensor& a) {
  constexpr float inv_sqrt2 = 0.7071067811865476f;
  constexpr float inv_sqrt2pi = 0.3989422804014327f;
  return detail::unary(
      a,
      [](float x) { return 0.5f * x * (1.0f + std::erf(x * inv_sqrt2)); },
      [](float x, float) {
        float cdf = 0.5f * (1.0f + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(-0.5f * x * x);
      });
}
inline Tensor silu(const Tensor& a) {
  return detail::unary(a,
                       [](float x) { return x / (1.0f + std::exp(-x)); },
                       [](float x, float) {
                         float s = 1.0f / (1.0f + std::exp(-x));
                         return s * (1.0f + x * (1.0f - s));
                       });
}

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
  check(a.cols() == b.rows(), "matmul: inner dimensions do not match");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<float> out(std::size_t(m) * n);
  {
    detail::CMapM A(a.data().data(), m, k), B(b.data().data(), k, n);
    detail::MapM C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto an = a.ptr();
  auto bn = b.ptr();
  return detail::make_op(
      {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& o) {
        detail::CMapM G(o.grad.data(), m, n);
        if (an->requires_grad) {
          detail::CMapM B(bn->data.data(), k, n);
          detail::grad_mat(*an, m, k).noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
          detail::CMapM A(an->data.data(), m, k);
          detail::grad_mat(*bn, k, n).noalias() += A.transpose() * G;
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  check(a.rank() == 2, "transpose: rank-2 tensor required");
  const int r = a.rows(), c = a.cols();
  std::vector<float> out(std::size_t(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[std::size_t(j) * r + i] = a.data()[std::size_t(i) * c + j];
  auto an = a.ptr();
  return detail::make_op({c, r}, std::move(out), {a}, [an, r, c](TensorNode& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        an->grad[std::size_t(i) * c + j] += o.grad[std::size_t(j) * r + i];
  });
}

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  check(n == a.numel(), "reshape: element count mismatch");
  auto an = a.ptr();
  return detail::make_op(std::move(shape), a.data(), {a}, [an](TensorNode& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
  });
}

// broadcast a length-C vector across the rows of a [T x C] matrix
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  check(x.rank() == 2, "add_rowvec: matrix required");
  check(v.numel() == x.cols(), "add_rowvec: vector length mismatch");
  const int r = x.rows(), c = x.cols();
  std::vector<float> out(x.data());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[std::size_t(i) * c + j] += v.data()[j];
  auto xn = x.ptr();
  auto vn = v.ptr();
  return detail::make_op(
      x.shape(), std::move(out), {x, v}, [xn, vn, r, c](TensorNode& o) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t i = 0; i < o.grad.size(); ++i)
            xn->grad[i] += o.grad[i];
        }
        if (vn->requires_grad) {
          vn->ensure_grad();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
              vn->grad[j] += o.grad[std::size_t(i) * c + j];
        }
      });
}

inline Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  check(x.rank() == 2, "mul_rowvec: matrix required");
  check(v.numel() == x.cols(), "mul_rowvec: vector length mismatch");
  const int r = x.rows(), c = x.cols();
  std::vector<float> out(x.data());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[std::size_t(i) * c + j] *= v.data()[j];
  auto xn = x.ptr();
  auto vn = v.ptr();
  return detail::make_op(
      x.shape(), std::move(out), {x, v}, [xn, vn, r, c](TensorNode& o) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
              xn->grad[std::size_t(i) * c + j] +=
                  o.grad[std::size_t(i) * c + j] * vn->data[j];
        }
        if (vn->requires_grad) {
          vn->ensure_grad();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
              vn->grad[j] += o.grad[std::size_t(i) * c + j] *
                             xn->data[std::size_t(i) * c + j];
        }
      });
}

// ---------------------------------------------------------------------------
// gather / segment / layout

inline Tensor gather_rows(const Tensor& x, std::vector<int> ids) {
  check(x.rank() == 2, "gather_rows: matrix required");
  const int c = x.cols();
  for (int id : ids)
    check(id >= 0 && id < x.rows(), "gather_rows: row index out of range");
  const int n = int(ids.size());
  std::vector<float> out(ids.size() * std::size_t(c));
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(x.data().data() + std::size_t(ids[i]) * c, c,
                out.data() + i * c);
  auto xn = x.ptr();
  return detail::make_op(
      {n, c}, std::move(out), {x},
      [xn, ids = std::move(ids), c](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i)
          for (int j = 0; j < c; ++j)
            xn->grad[std::size_t(ids[i]) * c + j] +=
                o.grad[i * std::size_t(c) + j];
      });
}

// mean-pool row spans given by durations (inverse length regulation)
inline Tensor segment_mean(const Tensor& x, const std::vector<int>& durations) {
  check(x.rank() == 2, "segment_mean: matrix required");
  std::int64_t total = 0;
  for (int d : durations) {
    check(d >= 1, "segment_mean: durations must be >= 1");
    total += d;
  }
  check(total == x.rows(), "segment_mean: durations do not sum to row count");
  const int c = x.cols(), n = int(durations.size());
  std::vector<float> out(std::size_t(n) * c, 0.0f);
  int row = 0;
  for (int s = 0; s < n; ++s) {
    for (int k = 0; k < durations[std::size_t(s)]; ++k, ++row)
      for (int j = 0; j < c; ++j)
        out[std::size_t(s) * c + j] += x.data()[std::size_t(row) * c + j];
    for (int j = 0; j < c; ++j)
      out[std::size_t(s) * c + j] /= float(durations[std::size_t(s)]);
  }
  auto xn = x.ptr();
  return detail::make_op(
      {n, c}, std::move(out), {x}, [xn, durations, c](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        int row = 0;
        for (std::size_t s = 0; s < durations.size(); ++s) {
          float inv = 1.0f / float(durations[s]);
          for (int k = 0; k < durations[s]; ++k, ++row)
            for (int j = 0; j < c; ++j)
              xn->grad[std::size_t(row) * c + j] += inv * o.grad[s * c + j];
        }
      });
}

// repeat row i durations[i] times (length regulation)
inline std::vector<int> expand_indices(const std::vector<int>& durations) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < durations.size(); ++i) {
    check(durations[i] >= 1, "length_regulate: durations must be >= 1");
    for (int k = 0; k < durations[i]; ++k) ids.push_back(int(i));
  }
  return ids;
}

inline Tensor repeat_rows(const Tensor& x, const std::vector<int>& durations) {
  check(std::size_t(x.rows()) == durations.size(),
        "repeat_rows: one duration per row required");
  return gather_rows(x, expand_indices(durations));
}

inline Tensor slice_rows(const Tensor& x, int start, int count) {
  check(x.rank() == 2, "slice_rows: matrix required");
  check(start >= 0 && count >= 0 && start + count <= x.rows(),
        "slice_rows: range out of bounds");
  const int c = x.cols();
  std::vector<float> out(std::size_t(count) * c);
  std::copy_n(x.data().data() + std::size_t(start) * c,
              std::size_t(count) * c, out.data());
  auto xn = x.ptr();
  return detail::make_op({count, c}, std::move(out), {x},
                         [xn, start, count, c](TensorNode& o) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           for (std::size_t i = 0;
                                i < std::size_t(count) * c; ++i)
                             xn->grad[std::size_t(start) * c + i] += o.grad[i];
                         });
}

inline Tensor slice_cols(const Tensor& x, int start, int count) {
  check(x.rank() == 2, "slice_cols: matrix required");
  check(start >= 0 && count >= 0 && start + count <= x.cols(),
        "slice_cols: range out of bounds");
  const int r = x.rows(), c = x.cols();
  std::vector<float> out(std::size_t(r) * count);
  for (int i = 0; i < r; ++i)
    std::copy_n(x.data().data() + std::size_t(i) * c + start, count,
                out.data() + std::size_t(i) * count);
  auto xn = x.ptr();
  return detail::make_op(
      {r, count}, std::move(out), {x}, [xn, start, count, r, c](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < count; ++j)
            xn->grad[std::size_t(i) * c + start + j] +=
                o.grad[std::size_t(i) * count + j];
      });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: empty input");
  const int r = parts[0].rows();
  int c = 0;
  for (const Tensor& p : parts) {
    check(p.rank() == 2 && p.rows() == r, "concat_cols: row count mismatch");
    c += p.cols();
  }
  std::vector<float> out(std::size_t(r) * c);
  int off = 0;
  for (const Tensor& p : parts) {
    for (int i = 0; i < r; ++i)
      std::copy_n(p.data().data() + std::size_t(i) * p.cols(), p.cols(),
                  out.data() + std::size_t(i) * c + off);
    off += p.cols();
  }
  std::vector<std::shared_ptr<TensorNode>> nodes;
  std::vector<int> widths;
  for (const Tensor& p : parts) {
    nodes.push_back(p.ptr());
    widths.push_back(p.cols());
  }
  return detail::make_op(
      {r, c}, std::move(out), parts, [nodes, widths, r, c](TensorNode& o) {
        int off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          auto& p = *nodes[k];
          if (p.requires_grad) {
            p.ensure_grad();
            for (int i = 0; i < r; ++i)
              for (int j = 0; j < widths[k]; ++j)
                p.grad[std::size_t(i) * widths[k] + j] +=
                    o.grad[std::size_t(i) * c + off + j];
          }
          off += widths[k];
        }
      });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_rows: empty input");
  const int c = parts[0].cols();
  int r = 0;
  for (const Tensor& p : parts) {
    check(p.rank() == 2 && p.cols() == c, "concat_rows: column count mismatch");
    r += p.rows();
  }
  std::vector<float> out;
  out.reserve(std::size_t(r) * c);
  for (const Tensor& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<TensorNode>> nodes;
  std::vector<int> heights;
  for (const Tensor& p : parts) {
    nodes.push_back(p.ptr());
    heights.push_back(p.rows());
  }
  return detail::make_op(
      {r, c}, std::move(out), parts, [nodes, heights, c](TensorNode& o) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          auto& p = *nodes[k];
          std::size_t len = std::size_t(heights[k]) * c;
          if (p.requires_grad) {
            p.ensure_grad();
            for (std::size_t i = 0; i < len; ++i) p.grad[i] += o.grad[off + i];
          }
          off += len;
        }
      });
}

// ---------------------------------------------------------------------------
// convolution (via explicit patch extraction)

// [T x C] -> [T x K*C] with zero padding of (K-1)/2 on each side
inline Tensor im2col(const Tensor& x, int kernel) {
  check(x.rank() == 2, "im2col: matrix required");
  check(kernel % 2 == 1, "conv1d: kernel size must be odd");
  const int t = x.rows(), c = x.cols(), pad = (kernel - 1) / 2;
  std::vector<float> out(std::size_t(t) * kernel * c, 0.0f);
  for (int i = 0; i < t; ++i)
    for (int k = 0; k < kernel; ++k) {
      int src = i + k - pad;
      if (src < 0 || src >= t) continue;
      std::copy_n(x.data().data() + std::size_t(src) * c, c,
                  out.data() + (std::size_t(i) * kernel + k) * c);
    }
  auto xn = x.ptr();
  return detail::make_op(
      {t, kernel * c}, std::move(out), {x}, [xn, t, c, kernel, pad](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < t; ++i)
          for (int k = 0; k < kernel; ++k) {
            int src = i + k - pad;
            if (src < 0 || src >= t) continue;
            const float* g = o.grad.data() + (std::size_t(i) * kernel + k) * c;
            float* dst = xn->grad.data() + std::size_t(src) * c;
            for (int j = 0; j < c; ++j) dst[j] += g[j];
          }
      });
}

// x: [T x C_in], w: [K x C_in x C_out], same padding
inline Tensor conv1d(const Tensor& x, const Tensor& w) {
  check(w.rank() == 3, "conv1d: weight must be [K x C_in x C_out]");
  const int k = w.dim(0), cin = w.dim(1), cout = w.dim(2);
  check(k % 2 == 1, "conv1d: kernel size must be odd");
  check(x.cols() == cin, "conv1d: input channel mismatch");
  Tensor cols = im2col(x, k);
  Tensor wm = reshape(w, {k * cin, cout});
  return matmul(cols, wm);
}

// ---------------------------------------------------------------------------
// normalization / attention pieces

inline Tensor softmax_rows(const Tensor& x) {
  check(x.rank() == 2, "softmax_rows: matrix required");
  const int r = x.rows(), c = x.cols();
  std::vector<float> out(std::size_t(r) * c);
  for (int i = 0; i < r; ++i) {
    const float* xi = x.data().data() + std::size_t(i) * c;
    float* yi = out.data() + std::size_t(i) * c;
    float mx = xi[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    float sum = 0.0f;
    for (int j = 0; j < c; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    float inv = 1.0f / sum;
    for (int j = 0; j < c; ++j) yi[j] *= inv;
  }
  auto xn = x.ptr();
  return detail::make_op(
      {r, c}, std::move(out), {x}, [xn, r, c](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < r; ++i) {
          const float* y = o.data.data() + std::size_t(i) * c;
          const float* g = o.grad.data() + std::size_t(i) * c;
          float dot = 0.0f;
          for (int j = 0; j < c; ++j) dot += y[j] * g[j];
          float* dx = xn->grad.data() + std::size_t(i) * c;
          for (int j = 0; j < c; ++j) dx[j] += y[j] * (g[j] - dot);
        }
      });
}

// per-row standardization, no affine terms
inline Tensor layer_norm_rows(const Tensor& x, float eps = 1e-5f) {
  check(x.rank() == 2, "layer_norm_rows: matrix required");
  const int r = x.rows(), c = x.cols();
  std::vector<float> out(std::size_t(r) * c);
  std::vector<float> inv_std(std::size_t(r), 0.0f);
  for (int i = 0; i < r; ++i) {
    const float* xi = x.data().data() + std::size_t(i) * c;
    float mean = 0.0f;
    for (int j = 0; j < c; ++j) mean += xi[j];
    mean /= float(c);
    float var = 0.0f;
    for (int j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= float(c);
    float is = 1.0f / std::sqrt(var + eps);
    inv_std[std::size_t(i)] = is;
    float* yi = out.data() + std::size_t(i) * c;
    for (int j = 0; j < c; ++j) yi[j] = (xi[j] - mean) * is;
  }
  auto xn = x.ptr();
  return detail::make_op(
      {r, c}, std::move(out), {x},
      [xn, r, c, inv_std = std::move(inv_std)](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < r; ++i) {
          const float* y = o.data.data() + std::size_t(i) * c;
          const float* g = o.grad.data() + std::size_t(i) * c;
          float gm = 0.0f, gym = 0.0f;
          for (int j = 0; j < c; ++j) {
            gm += g[j];
            gym += g[j] * y[j];
          }
          gm /= float(c);
          gym /= float(c);
          float is = inv_std[std::size_t(i)];
          float* dx = xn->grad.data() + std::size_t(i) * c;
          for (int j = 0; j < c; ++j)
            dx[j] += is * (g[j] - gm - y[j] * gym);
        }
      });
}

// Rotary embedding over the last dimension: feature pairs (2i, 2i+1) rotated
// by angle pos * 10000^(-2i/D). Accepts [T x D] or [T x H x D].
inline Tensor rope_apply(const Tensor& x, const std::vector<int>& positions) {
  check(x.rank() == 2 || x.rank() == 3, "rope_apply: rank 2 or 3 required");
  const int t = x.dim(0);
  const int h = x.rank() == 3 ? x.dim(1) : 1;
  const int d = x.rank() == 3 ? x.dim(2) : x.dim(1);
  check(d % 2 == 0, "rope_apply: feature dimension must be even");
  check(int(positions.size()) == t, "rope_apply: one position per row required");
  std::vector<float> angles(std::size_t(t) * (d / 2));
  for (int i = 0; i < t; ++i)
    for (int p = 0; p < d / 2; ++p)
      angles[std::size_t(i) * (d / 2) + p] =
          float(positions[std::size_t(i)] *
                std::pow(10000.0, -2.0 * p / double(d)));
  std::vector<float> out(x.data().size());
  for (int i = 0; i < t; ++i)
    for (int hh = 0; hh < h; ++hh) {
      const float* xi = x.data().data() + (std::size_t(i) * h + hh) * d;
      float* yi = out.data() + (std::size_t(i) * h + hh) * d;
      for (int p = 0; p < d / 2; ++p) {
        float a = angles[std::size_t(i) * (d / 2) + p];
        float ca = std::cos(a), sa = std::sin(a);
        float x0 = xi[2 * p], x1 = xi[2 * p + 1];
        yi[2 * p] = x0 * ca - x1 * sa;
        yi[2 * p + 1] = x0 * sa + x1 * ca;
      }
    }
  auto xn = x.ptr();
  return detail::make_op(
      x.shape(), std::move(out), {x},
      [xn, t, h, d, angles = std::move(angles)](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < t; ++i)
          for (int hh = 0; hh < h; ++hh) {
            const float* g = o.grad.data() + (std::size_t(i) * h + hh) * d;
            float* dx = xn->grad.data() + (std::size_t(i) * h + hh) * d;
            for (int p = 0; p < d / 2; ++p) {
              float a = angles[std::size_t(i) * (d / 2) + p];
              float ca = std::cos(a), sa = std::sin(a);
              dx[2 * p] += g[2 * p] * ca + g[2 * p + 1] * sa;
              dx[2 * p + 1] += -g[2 * p] * sa + g[2 * p + 1] * ca;
            }
          }
      });
}

// ---------------------------------------------------------------------------
// reductions and losses

inline Tensor sum(const Tensor& a) {
  float s = 0.0f;
  for (float x : a.data()) s += x;
  auto an = a.ptr();
  return detail::make_op({1}, {s}, {a}, [an](TensorNode& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (float& g : an->grad) g += o.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  return mul_scalar(sum(a), 1.0f / float(a.numel()));
}

// mean over masked rows and all columns of ||pred - target||^2 per element;
// row_mask[i] != 0 selects row i. Zero masked rows -> loss 0.
inline Tensor mse_masked_rows(const Tensor& pred, const Tensor& target,
                              const std::vector<float>& row_mask) {
  detail::same_shape(pred, target, "mse_masked_rows");
  check(pred.rank() == 2, "mse_masked_rows: matrix required");
  check(int(row_mask.size()) == pred.rows(),
        "mse_masked_rows: one mask entry per row required");
  const int r = pred.rows(), c = pred.cols();
  std::int64_t count = 0;
  for (float m : row_mask)
    if (m != 0.0f) ++count;
  float loss = 0.0f;
  if (count > 0) {
    for (int i = 0; i < r; ++i) {
      if (row_mask[std::size_t(i)] == 0.0f) continue;
      const float* p = pred.data().data() + std::size_t(i) * c;
      const float* q = target.data().data() + std::size_t(i) * c;
      for (int j = 0; j < c; ++j) {
        float d = p[j] - q[j];
        loss += d * d;
      }
    }
    loss /= float(count) * float(c);
  }
  auto pn = pred.ptr();
  auto tn = target.ptr();
  return detail::make_op(
      {1}, {loss}, {pred, target},
      [pn, tn, row_mask, r, c, count](TensorNode& o) {
        if (count == 0) return;
        float scale = 2.0f * o.grad[0] / (float(count) * float(c));
        for (int i = 0; i < r; ++i) {
          if (row_mask[std::size_t(i)] == 0.0f) continue;
          for (int j = 0; j < c; ++j) {
            std::size_t idx = std::size_t(i) * c + j;
            float d = pn->data[idx] - tn->data[idx];
            if (pn->requires_grad) {
              pn->ensure_grad();
              pn->grad[idx] += scale * d;
            }
            if (tn->requires_grad) {
              tn->ensure_grad();
              tn->grad[idx] -= scale * d;
            }
          }
        }
      });
}

// smooth-L1 (beta = 1) between pred and target on masked entries, mean over
// the masked count; pred is [T] or [T x 1].
inline Tensor smooth_l1_masked(const Tensor& pred,
                               const std::vector<float>& target,
                               const std::vector<float>& mask) {
  check(pred.numel() == std::int64_t(target.size()) &&
            target.size() == mask.size(),
        "smooth_l1_masked: length mismatch");
  std::int64_t count = 0;
  for (float m : mask)
    if (m != 0.0f) ++count;
  float loss = 0.0f;
  if (count > 0) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (mask[i] == 0.0f) continue;
      float d = pred.data()[i] - target[i];
      float a = std::fabs(d);
      loss += a < 1.0f ? 0.5f * d * d : a - 0.5f;
    }
    loss /= float(count);
  }
  auto pn = pred.ptr();
  return detail::make_op(
      {1}, {loss}, {pred}, [pn, target, mask, count](TensorNode& o) {
        if (!pn->requires_grad || count == 0) return;
        pn->ensure_grad();
        float scale = o.grad[0] / float(count);
        for (std::size_t i = 0; i < target.size(); ++i) {
          if (mask[i] == 0.0f) continue;
          float d = pn->data[i] - target[i];
          pn->grad[i] += scale * std::clamp(d, -1.0f, 1.0f);
        }
      });
}

// cross entropy over masked positions only, mean over the masked count
inline Tensor cross_entropy_masked(const Tensor& logits,
                                   const std::vector<int>& targets,
                                   const std::vector<char>& mask) {
  check(logits.rank() == 2, "cross_entropy_masked: matrix required");
  check(int(targets.size()) == logits.rows() && targets.size() == mask.size(),
        "cross_entropy_masked: length mismatch");
  const int r = logits.rows(), c = logits.cols();
  std::int64_t count = 0;
  for (char m : mask)
    if (m) ++count;
  float loss = 0.0f;
  if (count > 0) {
    for (int i = 0; i < r; ++i) {
      if (!mask[std::size_t(i)]) continue;
      check(targets[std::size_t(i)] >= 0 && targets[std::size_t(i)] < c,
            "cross_entropy_masked: target id out of range");
      const float* l = logits.data().data() + std::size_t(i) * c;
      float mx = l[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, l[j]);
      float lse = 0.0f;
      for (int j = 0; j < c; ++j) lse += std::exp(l[j] - mx);
      loss += std::log(lse) + mx - l[targets[std::size_t(i)]];
    }
    loss /= float(count);
  }
  auto ln = logits.ptr();
  return detail::make_op(
      {1}, {loss}, {logits}, [ln, targets, mask, r, c, count](TensorNode& o) {
        if (!ln->requires_grad || count == 0) return;
        ln->ensure_grad();
        float scale = o.grad[0] / float(count);
        for (int i = 0; i < r; ++i) {
          if (!mask[std::size_t(i)]) continue;
          const float* l = ln->data.data() + std::size_t(i) * c;
          float mx = l[0];
          for (int j = 1; j < c; ++j) mx = std::max(mx, l[j]);
          float lse = 0.0f;
          for (int j = 0; j < c; ++j) lse += std::exp(l[j] - mx);
          float inv = 1.0f / lse;
          float* g = ln->grad.data() + std::size_t(i) * c;
          for (int j = 0; j < c; ++j) {
            float p = std::exp(l[j] - mx) * inv;
            g[j] += scale * (p - (j == targets[std::size_t(i)] ? 1.0f : 0.0f));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// graph control

inline Tensor detach(const Tensor& a) {
  auto n = std::make_shared<TensorNode>();
  n->shape = a.shape();
  n->data = a.data();
  n->requires_grad = false;
  return Tensor(n);
}

// straight-through: forward value of q, gradient of z
inline Tensor straight_through(const Tensor& z, const Tensor& q) {
  return add(z, detach(sub(q, z)));
}

inline Tensor dropout(const Tensor& x, float p, RngStream rng,
                      bool training) {
  if (!training || p <= 0.0f) return x;
  check(p < 1.0f, "dropout: rate must be < 1");
  std::vector<float> keep(x.data().size());
  float scale = 1.0f / (1.0f - p);
  for (float& k : keep) k = rng.uniform() < p ? 0.0f : scale;
  std::vector<float> out(x.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= keep[i];
  auto xn = x.ptr();
  return detail::make_op(x.shape(), std::move(out), {x},
                         [xn, keep = std::move(keep)](TensorNode& o) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           for (std::size_t i = 0; i < o.grad.size(); ++i)
                             xn->grad[i] += o.grad[i] * keep[i];
                         });
}

// Reverse-mode sweep from a scalar loss. Gradients of leaf tensors
// accumulate across calls; intermediate node gradients are reset per call.
inline void backward(const Tensor& loss) {
  check(loss.numel() == 1, "backward: loss must be a scalar");
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* next = node->parents[idx].get();
      ++idx;
      if (next->requires_grad && seen.insert(next).second)
        stack.emplace_back(next, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  // topo is post-order: parents before children; walk it backwards
  for (TensorNode* n : topo)
    if (!n->is_leaf()) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), 0.0f);
    }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0f;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace dvc
