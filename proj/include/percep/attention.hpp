// SPDX-License-Identifier: Apache-2.0
//
// Multi-head scaled dot-product attention in two roles: a perceiving (cross)
// form where a small latent array queries a chunk of frames, and a latent
// (self) form where the latents attend to themselves. A block chains one
// perceiving sublayer with n_lat self sublayers, all pre-norm residual.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "percep/errors.hpp"
#include "percep/mac_counter.hpp"
#include "percep/tensor.hpp"

namespace percep {

constexpr float kLayerNormEps = 1e-5f;

template <typename S>
struct LayerNormParamsT {
  TensorT<S> gamma;  // [F]
  TensorT<S> beta;   // [F]
};

template <typename S>
struct MhaParamsT {
  TensorT<S> w_q, b_q;  // [F,F], [F]
  TensorT<S> w_k, b_k;
  TensorT<S> w_v, b_v;
  TensorT<S> w_o, b_o;
  int heads = 1;
};

// Optional position-wise feed-forward; absent when w1 is undefined (d_ff = 0).
template <typename S>
struct FfnParamsT {
  LayerNormParamsT<S> ln;
  TensorT<S> w1, b1;  // [F,d_ff], [d_ff]
  TensorT<S> w2, b2;  // [d_ff,F], [F]
  bool present() const { return w1.defined(); }
};

// One residual attention sublayer: pre-norms for the query and key/value
// streams, the attention itself, and an optional trailing feed-forward.
template <typename S>
struct AttnSublayerT {
  LayerNormParamsT<S> ln_q;
  LayerNormParamsT<S> ln_kv;
  MhaParamsT<S> mha;
  FfnParamsT<S> ffn;
};

template <typename S>
struct PerceparatorBlockParamsT {
  std::vector<AttnSublayerT<S>> perceiving;  // n_perc sublayers; latents query the chunk
  std::vector<AttnSublayerT<S>> latents;     // n_lat self sublayers
};

using LayerNormParams = LayerNormParamsT<float>;
using MhaParams = MhaParamsT<float>;
using FfnParams = FfnParamsT<float>;
using AttnSublayer = AttnSublayerT<float>;
using PerceparatorBlockParams = PerceparatorBlockParamsT<float>;

// Which tally bucket the score/mix MACs land in. The arithmetic is identical
// either way; only the accounting differs.
enum class AttnKind { cross, self };

template <typename S>
TensorT<S> multi_head_attention(TensorT<S> q_in, TensorT<S> kv_in, const MhaParamsT<S>& p,
                                MacCounter* counter, AttnKind kind) {
  if (q_in.rank() != 2 || kv_in.rank() != 2) {
    throw ShapeMismatch("attention: operands must be rank 2, got " + shape_str(q_in.shape()) +
                        " and " + shape_str(kv_in.shape()));
  }
  const int64_t f = p.w_q.dim(0);
  if (q_in.dim(1) != f || kv_in.dim(1) != f) {
    throw ShapeMismatch("attention: feature width mismatch, inputs " + shape_str(q_in.shape()) +
                        " / " + shape_str(kv_in.shape()) + " vs parameters of width " +
                        std::to_string(f));
  }
  const int64_t h = p.heads;
  if (h < 1 || f % h != 0) {
    throw HeadsDoNotDivideF("attention: " + std::to_string(h) + " heads do not divide feature width " +
                            std::to_string(f));
  }
  const int64_t d_h = f / h;
  const int64_t n_q = q_in.dim(0);
  const int64_t m = kv_in.dim(0);

  TensorT<S> q = linear(q_in, p.w_q, p.b_q);
  TensorT<S> k = linear(kv_in, p.w_k, p.b_k);
  TensorT<S> v = linear(kv_in, p.w_v, p.b_v);

  // [rows,F] -> [H,rows,d_h]
  TensorT<S> qh = permute(reshape(q, {n_q, h, d_h}), {1, 0, 2});
  TensorT<S> kh = permute(reshape(k, {m, h, d_h}), {1, 0, 2});
  TensorT<S> vh = permute(reshape(v, {m, h, d_h}), {1, 0, 2});

  TensorT<S> scores = scale(matmul(qh, permute(kh, {0, 2, 1})),
                            static_cast<S>(1.0 / std::sqrt(static_cast<double>(d_h))));
  TensorT<S> weights = softmax(scores, 2);     // [H,N_q,M]
  TensorT<S> mixed = matmul(weights, vh);      // [H,N_q,d_h]
  TensorT<S> merged = reshape(permute(mixed, {1, 0, 2}), {n_q, f});
  TensorT<S> out = linear(merged, p.w_o, p.b_o);

  if (counter) {
    const uint64_t ff = static_cast<uint64_t>(f) * static_cast<uint64_t>(f);
    counter->projection += (static_cast<uint64_t>(n_q) + 2 * static_cast<uint64_t>(m)) * ff +
                           static_cast<uint64_t>(n_q) * ff;
    const uint64_t sm = static_cast<uint64_t>(n_q) * static_cast<uint64_t>(m) * static_cast<uint64_t>(f);
    if (kind == AttnKind::cross) {
      counter->cross_score += sm;
      counter->cross_mix += sm;
    } else {
      counter->self_score += sm;
      counter->self_mix += sm;
    }
  }
  return out;
}

namespace detail {

template <typename S>
TensorT<S> ln_apply(TensorT<S> x, const LayerNormParamsT<S>& p) {
  return layer_norm(x, p.gamma, p.beta, static_cast<S>(kLayerNormEps));
}

template <typename S>
TensorT<S> ffn_residual(TensorT<S> x, const FfnParamsT<S>& p, MacCounter* counter) {
  TensorT<S> h = linear(relu(linear(ln_apply(x, p.ln), p.w1, p.b1)), p.w2, p.b2);
  if (counter) {
    counter->ffn += 2ull * static_cast<uint64_t>(x.dim(0)) * static_cast<uint64_t>(p.w1.dim(0)) *
                    static_cast<uint64_t>(p.w1.dim(1));
  }
  return add(x, h);
}

}  // namespace detail

// latent <- latent + MHA(LN(latent), LN(h_chunk)), then n_lat rounds of
// latent <- latent + MHA(LN(latent), LN(latent)); optional FFN residual
// after each attention sublayer.
template <typename S>
TensorT<S> perceparator_block(TensorT<S> h_chunk, TensorT<S> latent,
                              const PerceparatorBlockParamsT<S>& p, MacCounter* counter) {
  if (p.perceiving.empty() || p.latents.empty()) {
    throw InvalidConfig("block needs at least one perceiving and one latent sublayer");
  }
  TensorT<S> lat = latent;
  for (const AttnSublayerT<S>& pc : p.perceiving) {
    lat = add(lat, multi_head_attention(detail::ln_apply(lat, pc.ln_q),
                                        detail::ln_apply(h_chunk, pc.ln_kv), pc.mha, counter,
                                        AttnKind::cross));
    if (pc.ffn.present()) lat = detail::ffn_residual(lat, pc.ffn, counter);
  }
  for (const AttnSublayerT<S>& sl : p.latents) {
    lat = add(lat, multi_head_attention(detail::ln_apply(lat, sl.ln_q),
                                        detail::ln_apply(lat, sl.ln_kv), sl.mha, counter,
                                        AttnKind::self));
    if (sl.ffn.present()) lat = detail::ffn_residual(lat, sl.ffn, counter);
  }
  return lat;
}

// ---------------------------------------------------------------------------
// Complexity probe: runs the block at several chunk lengths C (everything
// else fixed) plus a reference full self-attention over the C frames, and
// fits MACs ~ C^b per category by least squares in log-log space.

struct ProbeConfig {
  int64_t c = 0, l = 0, f = 0, h = 0;
};

struct ProbePoint {
  ProbeConfig cfg;
  MacCounter block;         // tallies from one perceparator block forward
  MacCounter reference;     // tallies from full self-attention over C frames
  uint64_t kv_projection;   // C-dependent share of the block's projections
};

struct ProbeResult {
  std::vector<ProbePoint> points;
  double cross_score_exp = 0.0;
  double cross_mix_exp = 0.0;
  double kv_projection_exp = 0.0;
  double ref_score_exp = 0.0;

  std::string table() const;
  std::string csv() const;
};

// Least-squares slope of log(y) against log(x).
double fit_loglog_exponent(const std::vector<double>& xs, const std::vector<double>& ys);

ProbeResult complexity_probe(const std::vector<ProbeConfig>& configs, uint64_t seed = 1);

}  // namespace percep
