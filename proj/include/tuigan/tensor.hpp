#pragma once

// Eager reverse-mode autodiff over dense row-major tensors (rank <= 3).
// Every backward rule is itself written in terms of these ops, so grad() can
// be called with create_graph=true and differentiated again; the WGAN-GP
// penalty needs that double-backward path. GEMM is delegated to Eigen.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tuigan/common.hpp"

namespace tuigan {

struct Shape {
  int nd = 0;
  std::array<std::int64_t, 3> d{{0, 0, 0}};

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int i = 0; i < nd; ++i) n *= d[i];
    return nd == 0 ? 0 : n;
  }
  bool operator==(const Shape& o) const {
    if (nd != o.nd) return false;
    for (int i = 0; i < nd; ++i)
      if (d[i] != o.d[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }
  std::string str() const {
    std::string s = "[";
    for (int i = 0; i < nd; ++i) s += (i ? "," : "") + std::to_string(d[i]);
    return s + "]";
  }
};

inline Shape sh1(std::int64_t a) { return Shape{1, {{a, 0, 0}}}; }
inline Shape sh2(std::int64_t a, std::int64_t b) { return Shape{2, {{a, b, 0}}}; }
inline Shape sh3(std::int64_t a, std::int64_t b, std::int64_t c) {
  return Shape{3, {{a, b, c}}};
}

namespace detail {
inline thread_local bool grad_mode = true;
}

inline bool grad_enabled() { return detail::grad_mode; }

struct GradModeGuard {
  bool prev;
  explicit GradModeGuard(bool on) : prev(detail::grad_mode) { detail::grad_mode = on; }
  ~GradModeGuard() { detail::grad_mode = prev; }
};

struct NoGradGuard : GradModeGuard {
  NoGradGuard() : GradModeGuard(false) {}
};

template <class T>
class Tensor;

template <class T>
struct Node {
  Shape shape;
  std::vector<T> val;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<Tensor<T>> parents;
  // Given dL/d(this), returns dL/d(parent) for each parent, aligned by index;
  // entries for parents that do not require grad may be left undefined.
  std::function<std::vector<Tensor<T>>(const Tensor<T>&)> backward;
  // Optional per-parent form; when set, grad() calls it only for the parents
  // it actually needs, skipping sibling work (matmul saves a whole GEMM).
  std::function<Tensor<T>(const Tensor<T>&, std::size_t)> backward_partial;
};

template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  Tensor() = default;

  static Tensor from_vec(Shape s, std::vector<T> v, bool requires_grad = false) {
    if (static_cast<std::int64_t>(v.size()) != s.numel())
      throw ShapeError("tensor data size " + std::to_string(v.size()) +
                       " does not match shape " + s.str());
    Tensor t;
    t.n_ = std::make_shared<Node<T>>();
    t.n_->shape = s;
    t.n_->val = std::move(v);
    t.n_->requires_grad = requires_grad;
    return t;
  }
  static Tensor full(Shape s, T v) {
    return from_vec(s, std::vector<T>(static_cast<std::size_t>(s.numel()), v));
  }
  static Tensor zeros(Shape s) { return full(s, T(0)); }
  static Tensor scalar(T v) { return from_vec(sh1(1), {v}); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::int64_t numel() const { return n_->shape.numel(); }
  const T* data() const { return n_->val.data(); }
  const std::vector<T>& values() const { return n_->val; }

  // In-place mutation is reserved for optimizer updates on leaves.
  T* mutable_data() {
    if (!n_->leaf) throw ContractError("mutable_data on non-leaf tensor");
    return n_->val.data();
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
    return n_->val[0];
  }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    if (!n_->leaf) throw ContractError("set_requires_grad on non-leaf tensor");
    n_->requires_grad = rg;
    return *this;
  }

  Tensor detach() const { return from_vec(n_->shape, n_->val); }

  Node<T>* node() const { return n_.get(); }

 private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <class T>
Tensor<T> make_op(const char* op, Shape s, std::vector<T> val,
                  std::vector<Tensor<T>> parents,
                  std::function<std::vector<Tensor<T>>(const Tensor<T>&)> bw,
                  std::function<Tensor<T>(const Tensor<T>&, std::size_t)> bw_partial = {}) {
  auto t = Tensor<T>::from_vec(s, std::move(val));
  if (grad_mode) {
    bool rg = false;
    for (const auto& p : parents)
      if (p.defined() && p.requires_grad()) rg = true;
    if (rg) {
      Node<T>* n = t.node();
      n->requires_grad = true;
      n->leaf = false;
      n->op = op;
      n->parents = std::move(parents);
      n->backward = std::move(bw);
      n->backward_partial = std::move(bw_partial);
    }
  }
  return t;
}

template <class T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
}

}  // namespace detail

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> neg(const Tensor<T>& a);
template <class T> Tensor<T> sqrt_t(const Tensor<T>& a);
template <class T> Tensor<T> tanh_t(const Tensor<T>& a);
template <class T> Tensor<T> sigmoid_t(const Tensor<T>& a);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <class T> Tensor<T> mul_scalar(const Tensor<T>& a, T c);
template <class T> Tensor<T> sum_all(const Tensor<T>& a);
template <class T> Tensor<T> broadcast_all(const Tensor<T>& s, Shape shape);
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b,
                                    bool trans_a = false, bool trans_b = false);
template <class T> Tensor<T> im2col3(const Tensor<T>& x);
template <class T> Tensor<T> col2im3(const Tensor<T>& cols, std::int64_t c,
                                     std::int64_t h, std::int64_t w);
template <class T> Tensor<T> crop3(const Tensor<T>& x, std::int64_t c0, std::int64_t cn,
                                   std::int64_t y0, std::int64_t yn,
                                   std::int64_t x0, std::int64_t xn);
template <class T> Tensor<T> pad3(const Tensor<T>& x, std::int64_t c, std::int64_t h,
                                  std::int64_t w, std::int64_t c0, std::int64_t y0,
                                  std::int64_t x0);
template <class T> Tensor<T> chan_bcast(const Tensor<T>& v, std::int64_t h, std::int64_t w);
template <class T> Tensor<T> chan_sum(const Tensor<T>& x);
template <class T> Tensor<T> mul_mask(const Tensor<T>& a,
                                      std::shared_ptr<const std::vector<T>> mask);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  std::vector<T> v(a.values());
  const T* pb = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += pb[i];
  return detail::make_op<T>("add", a.shape(), std::move(v), {a, b},
                            [](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{g, g};
                            });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<T> v(a.values());
  const T* pb = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= pb[i];
  return detail::make_op<T>(
      "sub", a.shape(), std::move(v), {a, b},
      [](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{g, neg(g)};
      },
      [](const Tensor<T>& g, std::size_t k) { return k == 0 ? g : neg(g); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<T> v(a.values());
  const T* pb = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= pb[i];
  return detail::make_op<T>(
      "mul", a.shape(), std::move(v), {a, b},
      [a, b](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{mul(g, b), mul(g, a)};
      },
      [a, b](const Tensor<T>& g, std::size_t k) {
        return k == 0 ? mul(g, b) : mul(g, a);
      });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("div", a, b);
  std::vector<T> v(a.values());
  const T* pb = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] /= pb[i];
  return detail::make_op<T>(
      "div", a.shape(), std::move(v), {a, b},
      [a, b](const Tensor<T>& g) {
        auto ga = div(g, b);
        auto gb = neg(div(mul(g, a), mul(b, b)));
        return std::vector<Tensor<T>>{ga, gb};
      },
      [a, b](const Tensor<T>& g, std::size_t k) {
        return k == 0 ? div(g, b) : neg(div(mul(g, a), mul(b, b)));
      });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  std::vector<T> v(a.values());
  for (auto& x : v) x = -x;
  return detail::make_op<T>("neg", a.shape(), std::move(v), {a},
                            [](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{neg(g)};
                            });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> v(a.values());
  for (auto& x : v) x += c;
  return detail::make_op<T>("add_scalar", a.shape(), std::move(v), {a},
                            [](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{g};
                            });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  std::vector<T> v(a.values());
  for (auto& x : v) x *= c;
  return detail::make_op<T>("mul_scalar", a.shape(), std::move(v), {a},
                            [c](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{mul_scalar(g, c)};
                            });
}

template <class T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
  std::vector<T> v(a.values());
  for (auto& x : v) x = std::sqrt(x);
  return detail::make_op<T>("sqrt", a.shape(), std::move(v), {a},
                            [a](const Tensor<T>& g) {
                              auto ga = div(mul_scalar(g, T(0.5)), sqrt_t(a));
                              return std::vector<Tensor<T>>{ga};
                            });
}

template <class T>
Tensor<T> tanh_t(const Tensor<T>& a) {
  std::vector<T> v(a.values());
  for (auto& x : v) x = std::tanh(x);
  return detail::make_op<T>("tanh", a.shape(), std::move(v), {a},
                            [a](const Tensor<T>& g) {
                              auto y = tanh_t(a);
                              auto d = add_scalar(neg(mul(y, y)), T(1));
                              return std::vector<Tensor<T>>{mul(g, d)};
                            });
}

template <class T>
Tensor<T> sigmoid_t(const Tensor<T>& a) {
  std::vector<T> v(a.values());
  for (auto& x : v) x = T(1) / (T(1) + std::exp(-x));
  return detail::make_op<T>("sigmoid", a.shape(), std::move(v), {a},
                            [a](const Tensor<T>& g) {
                              auto y = sigmoid_t(a);
                              auto d = mul(y, add_scalar(neg(y), T(1)));
                              return std::vector<Tensor<T>>{mul(g, d)};
                            });
}

template <class T>
Tensor<T> mul_mask(const Tensor<T>& a, std::shared_ptr<const std::vector<T>> mask) {
  if (a.values().size() != mask->size())
    throw ShapeError("mul_mask: mask size mismatch");
  std::vector<T> v(a.values());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= (*mask)[i];
  return detail::make_op<T>("mul_mask", a.shape(), std::move(v), {a},
                            [mask](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{mul_mask(g, mask)};
                            });
}

// Piecewise-linear activations record a constant slope mask, so their second
// derivative is zero almost everywhere and double-backward stays exact.
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  auto mask = std::make_shared<std::vector<T>>(a.values().size());
  std::vector<T> v(a.values());
  for (std::size_t i = 0; i < v.size(); ++i) {
    (*mask)[i] = v[i] >= T(0) ? T(1) : slope;
    v[i] *= (*mask)[i];
  }
  std::shared_ptr<const std::vector<T>> cmask = mask;
  return detail::make_op<T>("leaky_relu", a.shape(), std::move(v), {a},
                            [cmask](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{mul_mask(g, cmask)};
                            });
}

template <class T>
Tensor<T> abs_t(const Tensor<T>& a) {
  auto mask = std::make_shared<std::vector<T>>(a.values().size());
  std::vector<T> v(a.values());
  for (std::size_t i = 0; i < v.size(); ++i) {
    (*mask)[i] = v[i] > T(0) ? T(1) : (v[i] < T(0) ? T(-1) : T(0));
    v[i] = std::abs(v[i]);
  }
  std::shared_ptr<const std::vector<T>> cmask = mask;
  return detail::make_op<T>("abs", a.shape(), std::move(v), {a},
                            [cmask](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{mul_mask(g, cmask)};
                            });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  // Serial accumulation: result must not depend on buffer alignment.
  T s = T(0);
  const T* p = a.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) s += p[i];
  return detail::make_op<T>("sum_all", sh1(1), {s}, {a},
                            [shape = a.shape()](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{broadcast_all(g, shape)};
                            });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Tensor<T> broadcast_all(const Tensor<T>& s, Shape shape) {
  if (s.numel() != 1) throw ShapeError("broadcast_all: source must be scalar");
  std::vector<T> v(static_cast<std::size_t>(shape.numel()), s.data()[0]);
  return detail::make_op<T>("broadcast_all", shape, std::move(v), {s},
                            [](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{sum_all(g)};
                            });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
  if (s.numel() != a.numel())
    throw ShapeError("reshape: numel mismatch " + a.shape().str() + " -> " + s.str());
  std::vector<T> v(a.values());
  return detail::make_op<T>("reshape", s, std::move(v), {a},
                            [orig = a.shape()](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{reshape(g, orig)};
                            });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  if (a.shape().nd != 2 || b.shape().nd != 2)
    throw ShapeError("matmul: rank-2 tensors required");
  const std::int64_t m = trans_a ? a.shape().d[1] : a.shape().d[0];
  const std::int64_t k = trans_a ? a.shape().d[0] : a.shape().d[1];
  const std::int64_t k2 = trans_b ? b.shape().d[1] : b.shape().d[0];
  const std::int64_t n = trans_b ? b.shape().d[0] : b.shape().d[1];
  if (k != k2)
    throw ShapeError("matmul: inner dim mismatch " + a.shape().str() + " x " +
                     b.shape().str());
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  std::vector<T> v(static_cast<std::size_t>(m * n));
  {
    Eigen::Map<const Mat> ma(a.data(), a.shape().d[0], a.shape().d[1]);
    Eigen::Map<const Mat> mb(b.data(), b.shape().d[0], b.shape().d[1]);
    Eigen::Map<Mat> mo(v.data(), m, n);
    if (!trans_a && !trans_b)
      mo.noalias() = ma * mb;
    else if (trans_a && !trans_b)
      mo.noalias() = ma.transpose() * mb;
    else if (!trans_a && trans_b)
      mo.noalias() = ma * mb.transpose();
    else
      mo.noalias() = ma.transpose() * mb.transpose();
  }
  return detail::make_op<T>(
      "matmul", sh2(m, n), std::move(v), {a, b},
      [a, b, trans_a, trans_b](const Tensor<T>& g) {
        Tensor<T> ga = trans_a ? matmul(b, g, trans_b, true)
                               : matmul(g, b, false, !trans_b);
        Tensor<T> gb = trans_b ? matmul(g, a, true, trans_a)
                               : matmul(a, g, !trans_a, false);
        return std::vector<Tensor<T>>{ga, gb};
      },
      [a, b, trans_a, trans_b](const Tensor<T>& g, std::size_t k) {
        if (k == 0)
          return trans_a ? matmul(b, g, trans_b, true) : matmul(g, b, false, !trans_b);
        return trans_b ? matmul(g, a, true, trans_a) : matmul(a, g, !trans_a, false);
      });
}

// 3x3 patch extraction with zero padding 1, stride 1: [C,H,W] -> [C*9, H*W].
// col2im3 is its exact adjoint, which is all the backward pass needs.
template <class T>
Tensor<T> im2col3(const Tensor<T>& x) {
  if (x.shape().nd != 3) throw ShapeError("im2col3: rank-3 tensor required");
  const std::int64_t c = x.shape().d[0], h = x.shape().d[1], w = x.shape().d[2];
  std::vector<T> v(static_cast<std::size_t>(c * 9 * h * w), T(0));
  const T* px = x.data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t ky = 0; ky < 3; ++ky)
      for (std::int64_t kx = 0; kx < 3; ++kx) {
        T* row = v.data() + ((ch * 9 + ky * 3 + kx) * h * w);
        const std::int64_t x0 = std::max<std::int64_t>(0, 1 - kx);
        const std::int64_t x1 = std::min<std::int64_t>(w, w + 1 - kx);
        if (x1 <= x0) continue;
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const T* src = px + (ch * h + sy) * w + (x0 + kx - 1);
          std::copy(src, src + (x1 - x0), row + y * w + x0);
        }
      }
  return detail::make_op<T>("im2col3", sh2(c * 9, h * w), std::move(v), {x},
                            [c, h, w](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{col2im3(g, c, h, w)};
                            });
}

template <class T>
Tensor<T> col2im3(const Tensor<T>& cols, std::int64_t c, std::int64_t h, std::int64_t w) {
  if (cols.shape().nd != 2 || cols.shape().d[0] != c * 9 || cols.shape().d[1] != h * w)
    throw ShapeError("col2im3: expected [" + std::to_string(c * 9) + "," +
                     std::to_string(h * w) + "], got " + cols.shape().str());
  std::vector<T> v(static_cast<std::size_t>(c * h * w), T(0));
  const T* pc = cols.data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t ky = 0; ky < 3; ++ky)
      for (std::int64_t kx = 0; kx < 3; ++kx) {
        const T* row = pc + ((ch * 9 + ky * 3 + kx) * h * w);
        const std::int64_t v0 = std::max<std::int64_t>(0, kx - 1);
        const std::int64_t v1 = std::min<std::int64_t>(w, w + kx - 1);
        if (v1 <= v0) continue;
        for (std::int64_t u = 0; u < h; ++u) {
          const std::int64_t y = u - ky + 1;
          if (y < 0 || y >= h) continue;
          T* dst = v.data() + (ch * h + u) * w;
          const T* src = row + y * w - kx + 1;
          for (std::int64_t vv = v0; vv < v1; ++vv) dst[vv] += src[vv];
        }
      }
  return detail::make_op<T>("col2im3", sh3(c, h, w), std::move(v), {cols},
                            [](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{im2col3(g)};
                            });
}

template <class T>
Tensor<T> crop3(const Tensor<T>& x, std::int64_t c0, std::int64_t cn, std::int64_t y0,
                std::int64_t yn, std::int64_t x0, std::int64_t xn) {
  if (x.shape().nd != 3) throw ShapeError("crop3: rank-3 tensor required");
  const std::int64_t c = x.shape().d[0], h = x.shape().d[1], w = x.shape().d[2];
  if (c0 < 0 || cn <= 0 || c0 + cn > c || y0 < 0 || yn <= 0 || y0 + yn > h ||
      x0 < 0 || xn <= 0 || x0 + xn > w)
    throw ShapeError("crop3: window out of bounds for " + x.shape().str());
  std::vector<T> v(static_cast<std::size_t>(cn * yn * xn));
  const T* px = x.data();
  for (std::int64_t ch = 0; ch < cn; ++ch)
    for (std::int64_t y = 0; y < yn; ++y) {
      const T* src = px + ((c0 + ch) * h + (y0 + y)) * w + x0;
      std::copy(src, src + xn, v.data() + (ch * yn + y) * xn);
    }
  return detail::make_op<T>("crop3", sh3(cn, yn, xn), std::move(v), {x},
                            [c, h, w, c0, y0, x0](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{pad3(g, c, h, w, c0, y0, x0)};
                            });
}

template <class T>
Tensor<T> pad3(const Tensor<T>& x, std::int64_t c, std::int64_t h, std::int64_t w,
               std::int64_t c0, std::int64_t y0, std::int64_t x0) {
  if (x.shape().nd != 3) throw ShapeError("pad3: rank-3 tensor required");
  const std::int64_t cn = x.shape().d[0], yn = x.shape().d[1], xn = x.shape().d[2];
  if (c0 < 0 || c0 + cn > c || y0 < 0 || y0 + yn > h || x0 < 0 || x0 + xn > w)
    throw ShapeError("pad3: embed window out of bounds");
  std::vector<T> v(static_cast<std::size_t>(c * h * w), T(0));
  const T* px = x.data();
  for (std::int64_t ch = 0; ch < cn; ++ch)
    for (std::int64_t y = 0; y < yn; ++y) {
      const T* src = px + (ch * yn + y) * xn;
      std::copy(src, src + xn, v.data() + ((c0 + ch) * h + (y0 + y)) * w + x0);
    }
  return detail::make_op<T>("pad3", sh3(c, h, w), std::move(v), {x},
                            [cn, yn, xn, c0, y0, x0](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{
                                  crop3(g, c0, cn, y0, yn, x0, xn)};
                            });
}

// Channel concatenation of same-sized [Ci,H,W] maps.
template <class T>
Tensor<T> concat_c(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_c: no inputs");
  const std::int64_t h = parts[0].shape().d[1], w = parts[0].shape().d[2];
  std::int64_t ctot = 0;
  for (const auto& p : parts) {
    if (p.shape().nd != 3 || p.shape().d[1] != h || p.shape().d[2] != w)
      throw ShapeError("concat_c: incompatible part shape " + p.shape().str());
    ctot += p.shape().d[0];
  }
  std::vector<T> v;
  v.reserve(static_cast<std::size_t>(ctot * h * w));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    off += p.shape().d[0];
    v.insert(v.end(), p.values().begin(), p.values().end());
  }
  std::vector<std::int64_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.shape().d[0]);
  return detail::make_op<T>(
      "concat_c", sh3(ctot, h, w), std::move(v), parts,
      [offsets, sizes, h, w](const Tensor<T>& g) {
        std::vector<Tensor<T>> out;
        for (std::size_t i = 0; i < sizes.size(); ++i)
          out.push_back(crop3(g, offsets[i], sizes[i], 0, h, 0, w));
        return out;
      },
      [offsets, sizes, h, w](const Tensor<T>& g, std::size_t k) {
        return crop3(g, offsets[k], sizes[k], 0, h, 0, w);
      });
}

template <class T>
Tensor<T> chan_bcast(const Tensor<T>& v, std::int64_t h, std::int64_t w) {
  if (v.shape().nd != 1) throw ShapeError("chan_bcast: rank-1 tensor required");
  const std::int64_t c = v.shape().d[0];
  std::vector<T> out(static_cast<std::size_t>(c * h * w));
  const T* pv = v.data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    std::fill(out.begin() + ch * h * w, out.begin() + (ch + 1) * h * w, pv[ch]);
  return detail::make_op<T>("chan_bcast", sh3(c, h, w), std::move(out), {v},
                            [](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{chan_sum(g)};
                            });
}

template <class T>
Tensor<T> chan_sum(const Tensor<T>& x) {
  if (x.shape().nd != 3) throw ShapeError("chan_sum: rank-3 tensor required");
  const std::int64_t c = x.shape().d[0], h = x.shape().d[1], w = x.shape().d[2];
  std::vector<T> out(static_cast<std::size_t>(c), T(0));
  const T* px = x.data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    // Serial accumulation: result must not depend on buffer alignment.
    const T* p = px + ch * h * w;
    T s = T(0);
    for (std::int64_t i = 0; i < h * w; ++i) s += p[i];
    out[static_cast<std::size_t>(ch)] = s;
  }
  return detail::make_op<T>("chan_sum", sh1(c), std::move(out), {x},
                            [h, w](const Tensor<T>& g) {
                              return std::vector<Tensor<T>>{chan_bcast(g, h, w)};
                            });
}

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

// dL/d(wrt_i) for a scalar output. With create_graph the returned gradients
// carry their own graphs and can be differentiated again. Backward work is
// pruned to the subgraph lying between output and wrt; branches that cannot
// reach any wrt tensor are never evaluated.
template <class T>
std::vector<Tensor<T>> grad(const Tensor<T>& output, const std::vector<Tensor<T>>& wrt,
                            bool create_graph = false) {
  if (!output.defined() || output.numel() != 1)
    throw ContractError("grad: output must be a defined scalar");

  std::vector<Node<T>*> order;
  if (output.requires_grad()) {
    std::unordered_set<Node<T>*> visited;
    struct Frame {
      Node<T>* n;
      std::size_t i;
    };
    std::vector<Frame> stack;
    visited.insert(output.node());
    stack.push_back({output.node(), 0});
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.i < f.n->parents.size()) {
        const Tensor<T>& p = f.n->parents[f.i++];
        Node<T>* pn = p.defined() ? p.node() : nullptr;
        if (pn && pn->requires_grad && !visited.count(pn)) {
          visited.insert(pn);
          stack.push_back({pn, 0});
        }
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<Node<T>*> targets;
  for (const auto& t : wrt)
    if (t.defined()) targets.insert(t.node());

  // order is topological (parents precede consumers), so one forward pass
  // marks every node from which some wrt tensor is reachable.
  std::unordered_set<Node<T>*> needed;
  for (Node<T>* n : order) {
    bool want = targets.count(n) != 0;
    if (!want) {
      for (const Tensor<T>& p : n->parents) {
        if (p.defined() && needed.count(p.node())) {
          want = true;
          break;
        }
      }
    }
    if (want) needed.insert(n);
  }

  std::unordered_map<Node<T>*, Tensor<T>> acc;
  if (!order.empty() && needed.count(output.node()))
    acc.emplace(output.node(), Tensor<T>::full(output.shape(), T(1)));

  auto accumulate = [&](const Tensor<T>& p, const Tensor<T>& pg) {
    if (!pg.defined()) return;
    auto pit = acc.find(p.node());
    if (pit == acc.end()) {
      acc.emplace(p.node(), pg);
    } else {
      GradModeGuard gm(create_graph);
      pit->second = add(pit->second, pg);
    }
  };

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!needed.count(n)) continue;
    auto git = acc.find(n);
    if (git == acc.end() || !n->backward) continue;
    Tensor<T> g = git->second;

    bool any_wanted = false;
    std::vector<char> wanted(n->parents.size(), 0);
    for (std::size_t k = 0; k < n->parents.size(); ++k) {
      const Tensor<T>& p = n->parents[k];
      if (p.defined() && p.requires_grad() && needed.count(p.node())) {
        wanted[k] = 1;
        any_wanted = true;
      }
    }
    if (!any_wanted) continue;

    if (n->backward_partial) {
      for (std::size_t k = 0; k < n->parents.size(); ++k) {
        if (!wanted[k]) continue;
        Tensor<T> pg;
        {
          GradModeGuard gm(create_graph);
          pg = n->backward_partial(g, k);
        }
        accumulate(n->parents[k], pg);
      }
    } else {
      std::vector<Tensor<T>> pgrads;
      {
        GradModeGuard gm(create_graph);
        pgrads = n->backward(g);
      }
      if (pgrads.size() != n->parents.size())
        throw ContractError(std::string("grad: backward arity mismatch in op ") + n->op);
      for (std::size_t k = 0; k < pgrads.size(); ++k) {
        if (!wanted[k]) continue;
        accumulate(n->parents[k], pgrads[k]);
      }
    }
  }

  std::vector<Tensor<T>> out;
  out.reserve(wrt.size());
  for (const auto& t : wrt) {
    auto it = acc.find(t.node());
    out.push_back(it != acc.end() ? it->second : Tensor<T>::zeros(t.shape()));
  }
  return out;
}

}  // namespace tuigan
