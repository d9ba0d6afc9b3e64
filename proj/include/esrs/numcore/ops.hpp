#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "esrs/numcore/tensor.hpp"
#include "esrs/random.hpp"

namespace esrs {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

// Row-major C[rows x n] (+)= A[rows x k] * B[k x n].
template <Scalar T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t rows, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < rows; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// dA[rows x k] += dC[rows x n] * B^T
template <Scalar T>
void gemm_nt_acc(const T* dc, const T* b, T* da, std::size_t rows, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* dci = dc + i * n;
    T* dai = da + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* bp = b + p * n;
      T s = T(0);
      for (std::size_t j = 0; j < n; ++j) s += dci[j] * bp[j];
      dai[p] += s;
    }
  }
}

// dB[k x n] += A^T * dC
template <Scalar T>
void gemm_tn_acc(const T* a, const T* dc, T* db, std::size_t rows, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* ai = a + i * k;
    const T* dci = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      T* dbp = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbp[j] += av * dci[j];
    }
  }
}

template <Scalar T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

/// a[..., k] x b[k, n] -> [..., n]. Leading axes of `a` are treated as rows.
template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() != 2 || a.rank() < 1 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t k = b.dim(0), n = b.dim(1), rows = a.size() / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(rows * n, T(0));
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), rows, k, n);
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {&a, &b}, "matmul",
      [rows, k, n](detail::Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        if (na.requires_grad)
          detail::gemm_nt_acc(self.grad.data(), nb.value.data(), na.grad.data(), rows, k, n);
        if (nb.requires_grad)
          detail::gemm_tn_acc(na.value.data(), self.grad.data(), nb.grad.data(), rows, k, n);
      });
}

/// Batched product a[B x m x k] x b[B x k x n] -> [B x m x n].
template <Scalar T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<T> out(batch * m * n, T(0));
  for (std::size_t s = 0; s < batch; ++s) {
    detail::gemm_nn(a.values().data() + s * m * k, b.values().data() + s * k * n,
                    out.data() + s * m * n, m, k, n);
  }
  return Tensor<T>::make_result(
      {batch, m, n}, std::move(out), {&a, &b}, "bmm", [batch, m, k, n](detail::Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        for (std::size_t s = 0; s < batch; ++s) {
          const T* dc = self.grad.data() + s * m * n;
          if (na.requires_grad)
            detail::gemm_nt_acc(dc, nb.value.data() + s * k * n, na.grad.data() + s * m * k, m,
                                k, n);
          if (nb.requires_grad)
            detail::gemm_tn_acc(na.value.data() + s * m * k, dc, nb.grad.data() + s * k * n, m,
                                k, n);
        }
      });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <Scalar T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2 && a.rank() != 3) {
    throw DimensionError("transpose: expected rank 2 or 3, got " + shape_str(a.shape()));
  }
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<T> out(a.size());
  const T* src = a.values().data();
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[s * r * c + j * r + i] = src[s * r * c + i * c + j];
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {&a}, "transpose",
                                [batch, r, c](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad;
                                  for (std::size_t s = 0; s < batch; ++s)
                                    for (std::size_t i = 0; i < r; ++i)
                                      for (std::size_t j = 0; j < c; ++j)
                                        g[s * r * c + i * c + j] += self.grad[s * r * c + j * r + i];
                                });
}

enum class ElementwiseOp { Add, Sub, Mul, Relu, Tanh, Sigmoid, Abs };

namespace detail {

template <Scalar T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& a, const char* name, F f, DF df) {
  std::vector<T> out(a.size());
  const auto in = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor<T>::make_result(a.shape(), std::move(out), {&a}, name, [df](Node<T>& self) {
    auto& x = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      x.grad[i] += self.grad[i] * df(x.value[i], self.value[i]);
  });
}

}  // namespace detail

template <Scalar T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, "add",
                                [](detail::Node<T>& self) {
                                  for (auto* in : {self.inputs[0].get(), self.inputs[1].get()})
                                    if (in->requires_grad)
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                        in->grad[i] += self.grad[i];
                                });
}

template <Scalar T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, "sub",
                                [](detail::Node<T>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& y = *self.inputs[1];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    if (x.requires_grad) x.grad[i] += self.grad[i];
                                    if (y.requires_grad) y.grad[i] -= self.grad[i];
                                  }
                                });
}

template <Scalar T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, "mul",
                                [](detail::Node<T>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& y = *self.inputs[1];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    if (x.requires_grad) x.grad[i] += self.grad[i] * y.value[i];
                                    if (y.requires_grad) y.grad[i] += self.grad[i] * x.value[i];
                                  }
                                });
}

template <Scalar T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <Scalar T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(
      a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <Scalar T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid", [](T x) { return detail::sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

/// Subgradient 0 at the origin.
template <Scalar T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary(
      a, "abs", [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <Scalar T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return detail::unary(
      a, "scale", [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <Scalar T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>* b = nullptr) {
  auto need_b = [&]() -> const Tensor<T>& {
    if (!b) throw ContractError("binary elementwise op requires two operands");
    return *b;
  };
  switch (op) {
    case ElementwiseOp::Add: return add(a, need_b());
    case ElementwiseOp::Sub: return sub(a, need_b());
    case ElementwiseOp::Mul: return mul(a, need_b());
    case ElementwiseOp::Relu: return relu(a);
    case ElementwiseOp::Tanh: return tanh(a);
    case ElementwiseOp::Sigmoid: return sigmoid(a);
    case ElementwiseOp::Abs: return abs(a);
  }
  throw ContractError("unknown elementwise op");
}

/// x[..., n] + bias[n], broadcast over leading axes.
template <Scalar T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(bias.shape()));
  }
  const std::size_t n = bias.dim(0), rows = x.size() / n;
  std::vector<T> out(x.vec());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bias[j];
  return Tensor<T>::make_result(x.shape(), std::move(out), {&x, &bias}, "add_bias",
                                [rows, n](detail::Node<T>& self) {
                                  auto& nx = *self.inputs[0];
                                  auto& nb = *self.inputs[1];
                                  if (nx.requires_grad)
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      nx.grad[i] += self.grad[i];
                                  if (nb.requires_grad)
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t j = 0; j < n; ++j)
                                        nb.grad[j] += self.grad[r * n + j];
                                });
}

/// Concatenates along the last axis; leading axes must agree.
template <Scalar T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (ref.empty()) throw DimensionError("concat: scalars cannot be concatenated");
  const Shape lead(ref.begin(), ref.end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape l(p.shape().begin(), p.shape().end() - (p.rank() ? 1 : 0));
    if (p.rank() != ref.size() || l != lead) {
      throw DimensionError("concat: shape mismatch " + shape_str(ref) + " vs " +
                           shape_str(p.shape()));
    }
    widths.push_back(p.shape().back());
    total += widths.back();
  }
  const std::size_t rows = numel(lead);
  std::vector<T> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].values().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  std::vector<const Tensor<T>*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), inputs, "concat",
      [rows, total, widths](detail::Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          auto& in = *self.inputs[k];
          if (in.requires_grad)
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < widths[k]; ++j)
                in.grad[r * widths[k] + j] += self.grad[r * total + off + j];
          off += widths[k];
        }
      });
}

/// x[..., begin : begin + len] along the last axis.
template <Scalar T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t len) {
  if (x.rank() < 1 || begin + len > x.shape().back()) {
    throw DimensionError("slice_last: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + len) + ") outside " + shape_str(x.shape()));
  }
  const std::size_t w = x.shape().back(), rows = x.size() / w;
  Shape out_shape = x.shape();
  out_shape.back() = len;
  std::vector<T> out(rows * len);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.values().data() + r * w + begin, len, out.data() + r * len);
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {&x}, "slice",
                                [rows, w, begin, len](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad;
                                  for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t j = 0; j < len; ++j)
                                      g[r * w + begin + j] += self.grad[r * len + j];
                                });
}

template <Scalar T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  return Tensor<T>::make_result(std::move(shape), x.vec(), {&x}, "reshape",
                                [](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad;
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

/// Repeats a [1 x ...] tensor `count` times along the leading axis.
template <Scalar T>
Tensor<T> repeat_leading(const Tensor<T>& x, std::size_t count) {
  if (x.rank() < 1 || x.dim(0) != 1) {
    throw DimensionError("repeat_leading: expected leading extent 1, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.size();
  std::vector<T> out(n * count);
  for (std::size_t r = 0; r < count; ++r) std::copy_n(x.values().data(), n, out.data() + r * n);
  Shape out_shape = x.shape();
  out_shape[0] = count;
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {&x}, "repeat",
                                [n, count](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad;
                                  for (std::size_t r = 0; r < count; ++r)
                                    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[r * n + i];
                                });
}

template <Scalar T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  return Tensor<T>::make_result({}, {s}, {&x}, "sum", [](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad;
    for (auto& v : g) v += self.grad[0];
  });
}

template <Scalar T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// Softmax along `axis` where positions with mask 0 receive exactly zero
/// weight. The mask has the same shape as the scores.
template <Scalar T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const Tensor<T>& mask, std::size_t axis) {
  detail::require_same_shape(scores.shape(), mask.shape(), "masked_softmax");
  if (axis >= scores.rank()) {
    throw DimensionError("masked_softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(scores.shape()));
  }
  const Shape& s = scores.shape();
  const std::size_t n = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

  std::vector<T> out(scores.size());
  const auto x = scores.values();
  const auto m = mask.values();
  std::vector<T> shifted(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      bool any = false;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = base + j * inner;
        const bool on = m[idx] != T(0);
        any = any || on;
        shifted[j] = on ? x[idx] : x[idx] + mask_penalty<T>();
        mx = std::max(mx, shifted[j]);
      }
      if (!any) {
        throw DegenerateMaskError("masked_softmax: slice " + std::to_string(o * inner + in) +
                                  " of " + shape_str(s) + " has no unmasked position");
      }
      T denom = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        shifted[j] = std::exp(shifted[j] - mx);
        denom += shifted[j];
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] = shifted[j] / denom;
    }
  }
  return Tensor<T>::make_result(
      s, std::move(out), {&scores}, "masked_softmax", [outer, inner, n](detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j)
              dot += self.value[base + j * inner] * self.grad[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t idx = base + j * inner;
              g[idx] += self.value[idx] * (self.grad[idx] - dot);
            }
          }
        }
      });
}

template <Scalar T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  return masked_softmax(x, Tensor<T>::full(x.shape(), T(1)), x.rank() - 1);
}

enum class PoolKind { Max, Mean };

/// Pools h[T x d] over rows with mask[T], or h[B x T x d] with mask[B x T].
template <Scalar T>
Tensor<T> masked_pool(const Tensor<T>& h, const Tensor<T>& mask, PoolKind kind) {
  const bool batched = h.rank() == 3;
  if ((h.rank() != 2 && h.rank() != 3) || mask.rank() != h.rank() - 1 ||
      !std::equal(mask.shape().begin(), mask.shape().end(), h.shape().begin())) {
    throw DimensionError("masked_pool: incompatible shapes " + shape_str(h.shape()) + " and " +
                         shape_str(mask.shape()));
  }
  const std::size_t batch = batched ? h.dim(0) : 1;
  const std::size_t steps = h.dim(h.rank() - 2), d = h.dim(h.rank() - 1);
  std::vector<T> out(batch * d);
  // For max pooling, the row chosen per output cell; for mean, the count.
  std::vector<std::size_t> arg(kind == PoolKind::Max ? batch * d : batch);
  const auto hv = h.values();
  const auto mv = mask.values();
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < steps; ++t) count += mv[b * steps + t] != T(0);
    if (count == 0) {
      throw DegenerateMaskError("masked_pool: sequence " + std::to_string(b) +
                                " has no unmasked position");
    }
    T* o = out.data() + b * d;
    if (kind == PoolKind::Max) {
      bool first = true;
      for (std::size_t t = 0; t < steps; ++t) {
        if (mv[b * steps + t] == T(0)) continue;
        const T* row = hv.data() + (b * steps + t) * d;
        for (std::size_t j = 0; j < d; ++j) {
          if (first || row[j] > o[j]) {
            o[j] = row[j];
            arg[b * d + j] = t;
          }
        }
        first = false;
      }
    } else {
      std::fill(o, o + d, T(0));
      for (std::size_t t = 0; t < steps; ++t) {
        if (mv[b * steps + t] == T(0)) continue;
        const T* row = hv.data() + (b * steps + t) * d;
        for (std::size_t j = 0; j < d; ++j) o[j] += row[j];
      }
      for (std::size_t j = 0; j < d; ++j) o[j] /= static_cast<T>(count);
      arg[b] = count;
    }
  }
  Shape out_shape = batched ? Shape{batch, d} : Shape{d};
  std::vector<T> mask_copy(mv.begin(), mv.end());
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {&h}, kind == PoolKind::Max ? "max_pool" : "mean_pool",
      [batch, steps, d, kind, arg = std::move(arg), m = std::move(mask_copy)](detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad;
        for (std::size_t b = 0; b < batch; ++b) {
          if (kind == PoolKind::Max) {
            for (std::size_t j = 0; j < d; ++j)
              g[(b * steps + arg[b * d + j]) * d + j] += self.grad[b * d + j];
          } else {
            const T inv = T(1) / static_cast<T>(arg[b]);
            for (std::size_t t = 0; t < steps; ++t) {
              if (m[b * steps + t] == T(0)) continue;
              for (std::size_t j = 0; j < d; ++j)
                g[(b * steps + t) * d + j] += self.grad[b * d + j] * inv;
            }
          }
        }
      });
}

/// Row lookup: out[i, :] = table[ids[i], :], shaped lead_shape + [d].
/// Rows whose id equals `frozen_id` receive no gradient.
template <Scalar T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids, Shape lead_shape,
                      int frozen_id = -1) {
  if (table.rank() != 2) {
    throw DimensionError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
  }
  if (numel(lead_shape) != ids.size()) {
    throw DimensionError("gather_rows: " + std::to_string(ids.size()) + " ids for lead shape " +
                         shape_str(lead_shape));
  }
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(rows) + " rows");
    }
    std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data() + i * d);
  }
  lead_shape.push_back(d);
  std::vector<int> id_copy(ids.begin(), ids.end());
  return Tensor<T>::make_result(std::move(lead_shape), std::move(out), {&table}, "gather",
                                [d, frozen_id, id_copy = std::move(id_copy)](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad;
                                  for (std::size_t i = 0; i < id_copy.size(); ++i) {
                                    if (id_copy[i] == frozen_id) continue;
                                    T* dst = g.data() + static_cast<std::size_t>(id_copy[i]) * d;
                                    for (std::size_t j = 0; j < d; ++j)
                                      dst[j] += self.grad[i * d + j];
                                  }
                                });
}

/// Inverted dropout; identity when rate is 0.
template <Scalar T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be below 1");
  const T keep_scale = T(1) / static_cast<T>(1.0 - rate);
  std::vector<T> keep(x.size());
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    keep[i] = rng.bernoulli(rate) ? T(0) : keep_scale;
    out[i] = x[i] * keep[i];
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {&x}, "dropout",
                                [keep = std::move(keep)](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad;
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[i] * keep[i];
                                });
}

/// Mean negative log-likelihood of `labels` under softmax(logits[B x C]),
/// computed in log space. Per-row log-probabilities are floored at
/// log(prob_floor); a floored row contributes no gradient.
template <Scalar T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                                double prob_floor = 1e-12) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  const T log_floor = static_cast<T>(std::log(prob_floor));
  std::vector<T> probs(batch * classes);
  std::vector<char> floored(batch, 0);
  T total = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    }
    const T* z = logits.values().data() + b * classes;
    const T mx = *std::max_element(z, z + classes);
    T denom = T(0);
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(z[c] - mx);
    const T log_denom = std::log(denom);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(z[c] - mx - log_denom);
    T logp = z[y] - mx - log_denom;
    if (logp < log_floor) {
      logp = log_floor;
      floored[b] = 1;
    }
    total -= logp;
  }
  const T inv_batch = T(1) / static_cast<T>(batch);
  std::vector<int> label_copy(labels.begin(), labels.end());
  return Tensor<T>::make_result(
      {}, {total * inv_batch}, {&logits}, "cross_entropy",
      [batch, classes, inv_batch, probs = std::move(probs), floored = std::move(floored),
       label_copy = std::move(label_copy)](detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad;
        const T up = self.grad[0] * inv_batch;
        for (std::size_t b = 0; b < batch; ++b) {
          if (floored[b]) continue;
          for (std::size_t c = 0; c < classes; ++c) {
            const T target = static_cast<int>(c) == label_copy[b] ? T(1) : T(0);
            g[b * classes + c] += up * (probs[b * classes + c] - target);
          }
        }
      });
}

}  // namespace esrs
