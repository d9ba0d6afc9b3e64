#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "esrs/numcore/init.hpp"
#include "esrs/numcore/ops.hpp"
#include "esrs/numcore/tensor.hpp"

namespace esrs {

/// Gate blocks are laid out [input | forget | candidate | output] along the
/// 4h axis. Weights are stored input-major so that x[1 x d] * W[d x 4h].
template <Scalar T>
struct LstmCellParams {
  Tensor<T> input_weights;   // [d x 4h]
  Tensor<T> hidden_weights;  // [h x 4h]
  Tensor<T> bias;            // [4h]
  std::size_t hidden = 0;

  std::size_t input_dim() const { return input_weights.dim(0); }

  void validate() const {
    const std::size_t g = 4 * hidden;
    if (hidden == 0 || input_weights.rank() != 2 || input_weights.dim(1) != g ||
        hidden_weights.rank() != 2 || hidden_weights.dim(0) != hidden ||
        hidden_weights.dim(1) != g || bias.rank() != 1 || bias.dim(0) != g) {
      throw DimensionError("lstm params inconsistent with hidden size " + std::to_string(hidden) +
                           ": W_in " + shape_str(input_weights.shape()) + ", W_h " +
                           shape_str(hidden_weights.shape()) + ", b " + shape_str(bias.shape()));
    }
  }

  /// Glorot-uniform weights, zero biases except forget gate = 1.
  static LstmCellParams init(std::size_t input_dim, std::size_t hidden, Rng& rng,
                             bool requires_grad = true) {
    LstmCellParams p;
    p.hidden = hidden;
    p.input_weights = glorot_uniform<T>(input_dim, 4 * hidden, rng, requires_grad);
    p.hidden_weights = glorot_uniform<T>(hidden, 4 * hidden, rng, requires_grad);
    std::vector<T> b(4 * hidden, T(0));
    std::fill(b.begin() + static_cast<std::ptrdiff_t>(hidden),
              b.begin() + static_cast<std::ptrdiff_t>(2 * hidden), T(1));
    p.bias = Tensor<T>::from({4 * hidden}, std::move(b), requires_grad);
    return p;
  }
};

/// One LSTM step built from primitive ops. x is [d] or [B x d]; states are
/// [h] or [B x h]. Returns (h, c).
template <Scalar T>
std::pair<Tensor<T>, Tensor<T>> lstm_cell(const LstmCellParams<T>& p, const Tensor<T>& x,
                                          const Tensor<T>& h_prev, const Tensor<T>& c_prev) {
  p.validate();
  const std::size_t h = p.hidden;
  if (x.rank() < 1 || x.shape().back() != p.input_dim() || h_prev.shape() != c_prev.shape() ||
      h_prev.shape().back() != h ||
      !std::equal(x.shape().begin(), x.shape().end() - 1, h_prev.shape().begin(),
                  h_prev.shape().end() - 1)) {
    throw DimensionError("lstm_cell: x " + shape_str(x.shape()) + ", h " +
                         shape_str(h_prev.shape()) + ", c " + shape_str(c_prev.shape()) +
                         " inconsistent with params (d=" + std::to_string(p.input_dim()) +
                         ", h=" + std::to_string(h) + ")");
  }
  const auto z =
      add_bias(add(matmul(x, p.input_weights), matmul(h_prev, p.hidden_weights)), p.bias);
  const auto i = sigmoid(slice_last(z, 0, h));
  const auto f = sigmoid(slice_last(z, h, h));
  const auto g = tanh(slice_last(z, 2 * h, h));
  const auto o = sigmoid(slice_last(z, 3 * h, h));
  auto c = add(mul(f, c_prev), mul(i, g));
  auto hn = mul(o, tanh(c));
  return {std::move(hn), std::move(c)};
}

namespace detail {

// Lengths from a left-aligned {0,1} mask [B x T].
template <Scalar T>
std::vector<std::size_t> mask_lengths(const Tensor<T>& mask, std::size_t batch, std::size_t steps) {
  std::vector<std::size_t> len(batch, 0);
  const auto m = mask.values();
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t n = 0;
    while (n < steps && m[b * steps + n] != T(0)) ++n;
    for (std::size_t t = n; t < steps; ++t) {
      if (m[b * steps + t] != T(0)) {
        throw ContractError("sequence mask row " + std::to_string(b) + " is not left-aligned");
      }
    }
    len[b] = n;
  }
  return len;
}

}  // namespace detail

/// Runs one LSTM direction over x[B x T x d] under a left-aligned mask
/// [B x T], returning [B x T x h]. The reverse direction starts at each
/// row's last unmasked position. Masked positions output zeros and carry
/// no state. Backward is hand-written BPTT (one tape node per sequence).
template <Scalar T>
Tensor<T> lstm_sequence(const LstmCellParams<T>& p, const Tensor<T>& x, const Tensor<T>& mask,
                        bool reverse) {
  p.validate();
  if (x.rank() != 3 || x.dim(2) != p.input_dim() || mask.rank() != 2 ||
      mask.dim(0) != x.dim(0) || mask.dim(1) != x.dim(1)) {
    throw DimensionError("lstm_sequence: x " + shape_str(x.shape()) + ", mask " +
                         shape_str(mask.shape()) + ", input dim " + std::to_string(p.input_dim()));
  }
  const std::size_t batch = x.dim(0), steps = x.dim(1), d = x.dim(2), h = p.hidden, g4 = 4 * h;
  const auto lengths = detail::mask_lengths(mask, batch, steps);

  // Input contribution for every position at once.
  std::vector<T> gates(batch * steps * g4, T(0));
  detail::gemm_nn(x.values().data(), p.input_weights.values().data(), gates.data(),
                  batch * steps, d, g4);
  std::vector<T> cells(batch * steps * h, T(0));
  std::vector<T> out(batch * steps * h, T(0));
  const T* wh = p.hidden_weights.values().data();
  const T* bias = p.bias.values().data();
  std::vector<T> h_prev(h), c_prev(h);

  for (std::size_t b = 0; b < batch; ++b) {
    std::fill(h_prev.begin(), h_prev.end(), T(0));
    std::fill(c_prev.begin(), c_prev.end(), T(0));
    const std::size_t n = lengths[b];
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t t = reverse ? n - 1 - s : s;
      const std::size_t pos = b * steps + t;
      T* z = gates.data() + pos * g4;
      for (std::size_t j = 0; j < g4; ++j) z[j] += bias[j];
      detail::gemm_nn(h_prev.data(), wh, z, 1, h, g4);
      T* c = cells.data() + pos * h;
      T* ho = out.data() + pos * h;
      for (std::size_t j = 0; j < h; ++j) {
        const T ig = detail::sigmoid(z[j]);
        const T fg = detail::sigmoid(z[h + j]);
        const T gg = std::tanh(z[2 * h + j]);
        const T og = detail::sigmoid(z[3 * h + j]);
        // Activated gates overwrite the pre-activations for backward.
        z[j] = ig;
        z[h + j] = fg;
        z[2 * h + j] = gg;
        z[3 * h + j] = og;
        c[j] = fg * c_prev[j] + ig * gg;
        ho[j] = og * std::tanh(c[j]);
      }
      std::copy_n(c, h, c_prev.begin());
      std::copy_n(ho, h, h_prev.begin());
    }
  }

  const Tensor<T>& wi_t = p.input_weights;
  const Tensor<T>& wh_t = p.hidden_weights;
  const Tensor<T>& b_t = p.bias;
  return Tensor<T>::make_result(
      {batch, steps, h}, std::move(out), {&x, &wi_t, &wh_t, &b_t}, "lstm_sequence",
      [batch, steps, d, h, g4, reverse, lengths, gates = std::move(gates),
       cells = std::move(cells)](detail::Node<T>& self) {
        auto& nx = *self.inputs[0];
        auto& nwi = *self.inputs[1];
        auto& nwh = *self.inputs[2];
        auto& nb = *self.inputs[3];
        std::vector<T> dz(batch * steps * g4, T(0));
        std::vector<T> dh_next(h), dc_next(h), zero(h, T(0));
        const T* wh = nwh.value.data();
        for (std::size_t b = 0; b < batch; ++b) {
          std::fill(dh_next.begin(), dh_next.end(), T(0));
          std::fill(dc_next.begin(), dc_next.end(), T(0));
          const std::size_t n = lengths[b];
          for (std::size_t s = n; s-- > 0;) {
            const std::size_t t = reverse ? n - 1 - s : s;
            const std::size_t pos = b * steps + t;
            const bool has_prev = s > 0;
            const std::size_t prev_pos = has_prev ? b * steps + (reverse ? t + 1 : t - 1) : 0;
            const T* c_prev = has_prev ? cells.data() + prev_pos * h : zero.data();
            const T* h_prev = has_prev ? self.value.data() + prev_pos * h : zero.data();
            const T* act = gates.data() + pos * g4;
            const T* c = cells.data() + pos * h;
            T* dzp = dz.data() + pos * g4;
            for (std::size_t j = 0; j < h; ++j) {
              const T ig = act[j], fg = act[h + j], gg = act[2 * h + j], og = act[3 * h + j];
              const T tc = std::tanh(c[j]);
              const T dh = self.grad[pos * h + j] + dh_next[j];
              const T dc = dh * og * (T(1) - tc * tc) + dc_next[j];
              dzp[j] = dc * gg * ig * (T(1) - ig);
              dzp[h + j] = dc * c_prev[j] * fg * (T(1) - fg);
              dzp[2 * h + j] = dc * ig * (T(1) - gg * gg);
              dzp[3 * h + j] = dh * tc * og * (T(1) - og);
              dc_next[j] = dc * fg;
            }
            std::fill(dh_next.begin(), dh_next.end(), T(0));
            detail::gemm_nt_acc(dzp, wh, dh_next.data(), 1, h, g4);
            if (nwh.requires_grad && has_prev)
              detail::gemm_tn_acc(h_prev, dzp, nwh.grad.data(), 1, h, g4);
          }
        }
        if (nb.requires_grad)
          for (std::size_t r = 0; r < batch * steps; ++r)
            for (std::size_t j = 0; j < g4; ++j) nb.grad[j] += dz[r * g4 + j];
        if (nx.requires_grad)
          detail::gemm_nt_acc(dz.data(), nwi.value.data(), nx.grad.data(), batch * steps, d, g4);
        if (nwi.requires_grad)
          detail::gemm_tn_acc(nx.value.data(), dz.data(), nwi.grad.data(), batch * steps, d, g4);
      });
}

/// Bidirectional encoder: [forward ; backward] states per position,
/// x[B x T x d] -> [B x T x 2h], or x[T x d] with mask[T] -> [T x 2h].
template <Scalar T>
Tensor<T> bilstm(const LstmCellParams<T>& fwd, const LstmCellParams<T>& bwd, const Tensor<T>& x,
                 const Tensor<T>& mask) {
  if (x.rank() == 2) {
    if (x.dim(0) == 0) throw ContractError("bilstm: empty sequence");
    const auto x3 = reshape(x, {1, x.dim(0), x.dim(1)});
    const auto m2 = reshape(mask, {1, mask.size()});
    const auto out = bilstm(fwd, bwd, x3, m2);
    return reshape(out, {x.dim(0), out.dim(2)});
  }
  if (x.rank() != 3 || x.dim(1) == 0) {
    throw ContractError("bilstm: expected a non-empty [B x T x d] input, got " + shape_str(x.shape()));
  }
  return concat<T>({lstm_sequence(fwd, x, mask, false), lstm_sequence(bwd, x, mask, true)});
}

}  // namespace esrs
