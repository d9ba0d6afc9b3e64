#pragma once

#include <cmath>
#include <vector>

#include "esrs/numcore/ops.hpp"
#include "esrs/numcore/tensor.hpp"
#include "esrs/random.hpp"

namespace esrs {

/// U(-a, a) with a = sqrt(6 / (fan_in + fan_out)), shape [fan_in x fan_out].
template <Scalar T>
Tensor<T> glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng,
                         bool requires_grad = true) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> v(fan_in * fan_out);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
  return Tensor<T>::from({fan_in, fan_out}, std::move(v), requires_grad);
}

template <Scalar T>
Tensor<T> zeros_param(std::size_t n, bool requires_grad = true) {
  return Tensor<T>::zeros({n}, requires_grad);
}

/// Dense affine layer x[..., in] * W[in x out] + b[out].
template <Scalar T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  static Linear init(std::size_t in, std::size_t out, Rng& rng, bool requires_grad = true) {
    return {glorot_uniform<T>(in, out, rng, requires_grad), zeros_param<T>(out, requires_grad)};
  }

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_bias(matmul(x, weight), bias); }
};

}  // namespace esrs
