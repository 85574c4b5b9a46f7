// SPDX-License-Identifier: Apache-2.0
//
// End-to-end separation pipeline: conv encoder -> masking network (normalize,
// chunk, positional encoding, latent-bottleneck block stack, restore, expand,
// merge, mask head) -> mask application -> transposed-conv decoder.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "percep/attention.hpp"
#include "percep/errors.hpp"
#include "percep/mac_counter.hpp"
#include "percep/rng.hpp"
#include "percep/tensor.hpp"

namespace percep {

enum class Overlap { none, half };

struct ModelConfig {
  int64_t f = 256;       // encoder channels / feature width
  int64_t k = 3;         // encoder kernel size
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t c = 250;       // chunk size
  Overlap overlap = Overlap::none;
  int64_t l = 32;        // latent rows
  int64_t n = 15;        // block repeats
  int64_t h = 16;        // attention heads
  int64_t n_lat = 1;     // latent (self) sublayers per block
  int64_t n_perc = 1;    // perceiving (cross) sublayers per block
  int64_t n_s = 2;       // speakers
  int64_t d_ff = 0;      // feed-forward width, 0 = no FFN sublayers
  int64_t mask_ffw_width = 0;  // hidden width of the mask head, 0 = use f
  bool share_block_weights = false;

  int64_t resolved_mask_width() const { return mask_ffw_width > 0 ? mask_ffw_width : f; }

  void validate() const {
    if (f < 1 || k < 1 || c < 1 || l < 1 || n < 1 || h < 1 || n_lat < 1 || n_perc < 1) {
      throw InvalidConfig("model dimensions must be positive");
    }
    if (stride < 1 || padding < 0 || d_ff < 0 || mask_ffw_width < 0) {
      throw InvalidConfig("stride must be >= 1; padding, d_ff, mask_ffw_width must be >= 0");
    }
    if (n_s < 2) throw InvalidConfig("separation needs at least 2 speakers");
    if (f % h != 0) {
      throw HeadsDoNotDivideF(std::to_string(h) + " heads do not divide feature width " +
                              std::to_string(f));
    }
    if (overlap == Overlap::half && c % 2 != 0) {
      throw InvalidConfig("half overlap needs an even chunk size, got " + std::to_string(c));
    }
  }
};

struct ChunkLayout {
  int64_t c = 0;
  int64_t hop = 0;      // c (no overlap) or c/2 (half)
  int64_t n_c = 0;      // number of chunks
  int64_t pad_len = 0;  // zeros appended on the right before chunking
  int64_t t_prime = 0;  // pre-padding sequence length
};

template <typename S>
struct ModelParamsT {
  TensorT<S> enc_w, enc_b;    // [F,1,K], [F]
  LayerNormParamsT<S> pre_norm;
  TensorT<S> pre_w, pre_b;    // [F,F], [F]
  TensorT<S> latent;          // l_a [L,F], learned
  TensorT<S> pos_table;       // [C,F], fixed sinusoid, not learned
  std::vector<PerceparatorBlockParamsT<S>> blocks;  // N, or 1 when shared
  TensorT<S> restore_seq_w, restore_seq_b;    // [L,C], [C]
  TensorT<S> restore_feat_w, restore_feat_b;  // [F,F], [F]
  TensorT<S> prelu_a;         // [F]
  TensorT<S> expand_w, expand_b;  // [F, F*N_S], [F*N_S]
  TensorT<S> mask_w1, mask_b1;    // [F,W], [W]
  TensorT<S> mask_w2, mask_b2;    // [W,F], [F]
  TensorT<S> dec_w, dec_b;    // [F,1,K], [1]

  // Visits every learnable tensor in a fixed order under a stable name.
  // The positional table is excluded: it is derived from the config.
  template <typename Fn>
  void for_each_param(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each_param(Fn&& fn) const {
    visit(*this, fn);
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    fn("enc.w", self.enc_w);
    fn("enc.b", self.enc_b);
    fn("pre_ln.g", self.pre_norm.gamma);
    fn("pre_ln.b", self.pre_norm.beta);
    fn("pre.w", self.pre_w);
    fn("pre.b", self.pre_b);
    fn("latent", self.latent);
    for (size_t i = 0; i < self.blocks.size(); ++i) {
      auto& blk = self.blocks[i];
      for (size_t j = 0; j < blk.perceiving.size(); ++j) {
        visit_sublayer("blk" + std::to_string(i) + ".perc" + std::to_string(j) + ".",
                       blk.perceiving[j], fn);
      }
      for (size_t j = 0; j < blk.latents.size(); ++j) {
        visit_sublayer("blk" + std::to_string(i) + ".lat" + std::to_string(j) + ".",
                       blk.latents[j], fn);
      }
    }
    fn("restore_seq.w", self.restore_seq_w);
    fn("restore_seq.b", self.restore_seq_b);
    fn("restore_feat.w", self.restore_feat_w);
    fn("restore_feat.b", self.restore_feat_b);
    fn("prelu.a", self.prelu_a);
    fn("expand.w", self.expand_w);
    fn("expand.b", self.expand_b);
    fn("mask.w1", self.mask_w1);
    fn("mask.b1", self.mask_b1);
    fn("mask.w2", self.mask_w2);
    fn("mask.b2", self.mask_b2);
    fn("dec.w", self.dec_w);
    fn("dec.b", self.dec_b);
  }

  template <typename Sub, typename Fn>
  static void visit_sublayer(const std::string& prefix, Sub& s, Fn& fn) {
    fn((prefix + "ln_q.g").c_str(), s.ln_q.gamma);
    fn((prefix + "ln_q.b").c_str(), s.ln_q.beta);
    fn((prefix + "ln_kv.g").c_str(), s.ln_kv.gamma);
    fn((prefix + "ln_kv.b").c_str(), s.ln_kv.beta);
    fn((prefix + "wq").c_str(), s.mha.w_q);
    fn((prefix + "bq").c_str(), s.mha.b_q);
    fn((prefix + "wk").c_str(), s.mha.w_k);
    fn((prefix + "bk").c_str(), s.mha.b_k);
    fn((prefix + "wv").c_str(), s.mha.w_v);
    fn((prefix + "bv").c_str(), s.mha.b_v);
    fn((prefix + "wo").c_str(), s.mha.w_o);
    fn((prefix + "bo").c_str(), s.mha.b_o);
    if (s.ffn.present()) {
      fn((prefix + "ffn.ln.g").c_str(), s.ffn.ln.gamma);
      fn((prefix + "ffn.ln.b").c_str(), s.ffn.ln.beta);
      fn((prefix + "ffn.w1").c_str(), s.ffn.w1);
      fn((prefix + "ffn.b1").c_str(), s.ffn.b1);
      fn((prefix + "ffn.w2").c_str(), s.ffn.w2);
      fn((prefix + "ffn.b2").c_str(), s.ffn.b2);
    }
  }
};

using ModelParams = ModelParamsT<float>;

// ---------------------------------------------------------------------------
// Initialization

// Intra-chunk sinusoidal positions: even feature columns sine, odd cosine.
template <typename S>
TensorT<S> make_positional_table(int64_t c, int64_t f) {
  TensorT<S> t = TensorT<S>::zeros({c, f});
  S* p = t.data();
  for (int64_t pos = 0; pos < c; ++pos) {
    for (int64_t j = 0; j < f; ++j) {
      const double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(f);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      p[pos * f + j] = static_cast<S>((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  }
  return t;
}

namespace detail {

template <typename S>
TensorT<S> uniform_fan_in(Rng& rng, Shape shape, int64_t fan_in) {
  TensorT<S> t = TensorT<S>::zeros(std::move(shape));
  const double r = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<S>(rng.uniform(-r, r));
  t.set_requires_grad(true);
  return t;
}

template <typename S>
TensorT<S> const_param(Shape shape, S value) {
  TensorT<S> t = TensorT<S>::full(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

template <typename S>
AttnSublayerT<S> init_sublayer(Rng& rng, const ModelConfig& cfg) {
  const int64_t f = cfg.f;
  AttnSublayerT<S> s;
  s.ln_q = {const_param<S>({f}, S(1)), const_param<S>({f}, S(0))};
  s.ln_kv = {const_param<S>({f}, S(1)), const_param<S>({f}, S(0))};
  s.mha.w_q = uniform_fan_in<S>(rng, {f, f}, f);
  s.mha.b_q = const_param<S>({f}, S(0));
  s.mha.w_k = uniform_fan_in<S>(rng, {f, f}, f);
  s.mha.b_k = const_param<S>({f}, S(0));
  s.mha.w_v = uniform_fan_in<S>(rng, {f, f}, f);
  s.mha.b_v = const_param<S>({f}, S(0));
  s.mha.w_o = uniform_fan_in<S>(rng, {f, f}, f);
  s.mha.b_o = const_param<S>({f}, S(0));
  s.mha.heads = static_cast<int>(cfg.h);
  if (cfg.d_ff > 0) {
    s.ffn.ln = {const_param<S>({f}, S(1)), const_param<S>({f}, S(0))};
    s.ffn.w1 = uniform_fan_in<S>(rng, {f, cfg.d_ff}, f);
    s.ffn.b1 = const_param<S>({cfg.d_ff}, S(0));
    s.ffn.w2 = uniform_fan_in<S>(rng, {cfg.d_ff, f}, cfg.d_ff);
    s.ffn.b2 = const_param<S>({f}, S(0));
  }
  return s;
}

}  // namespace detail

template <typename S>
ModelParamsT<S> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int64_t f = cfg.f, w = cfg.resolved_mask_width();
  ModelParamsT<S> p;
  p.enc_w = detail::uniform_fan_in<S>(rng, {f, 1, cfg.k}, cfg.k);
  p.enc_b = detail::const_param<S>({f}, S(0));
  p.pre_norm = {detail::const_param<S>({f}, S(1)), detail::const_param<S>({f}, S(0))};
  p.pre_w = detail::uniform_fan_in<S>(rng, {f, f}, f);
  p.pre_b = detail::const_param<S>({f}, S(0));
  p.latent = TensorT<S>::zeros({cfg.l, f});
  for (auto& v : p.latent.values()) {
    double draw;
    do {
      draw = rng.normal(0.0, 0.02);
    } while (draw < -2.0 || draw > 2.0);
    v = static_cast<S>(draw);
  }
  p.latent.set_requires_grad(true);
  p.pos_table = make_positional_table<S>(cfg.c, f);
  const int64_t stored_blocks = cfg.share_block_weights ? 1 : cfg.n;
  for (int64_t b = 0; b < stored_blocks; ++b) {
    PerceparatorBlockParamsT<S> blk;
    for (int64_t j = 0; j < cfg.n_perc; ++j) blk.perceiving.push_back(detail::init_sublayer<S>(rng, cfg));
    for (int64_t j = 0; j < cfg.n_lat; ++j) blk.latents.push_back(detail::init_sublayer<S>(rng, cfg));
    p.blocks.push_back(std::move(blk));
  }
  p.restore_seq_w = detail::uniform_fan_in<S>(rng, {cfg.l, cfg.c}, cfg.l);
  p.restore_seq_b = detail::const_param<S>({cfg.c}, S(0));
  p.restore_feat_w = detail::uniform_fan_in<S>(rng, {f, f}, f);
  p.restore_feat_b = detail::const_param<S>({f}, S(0));
  p.prelu_a = detail::const_param<S>({f}, S(0.25));
  p.expand_w = detail::uniform_fan_in<S>(rng, {f, f * cfg.n_s}, f);
  p.expand_b = detail::const_param<S>({f * cfg.n_s}, S(0));
  p.mask_w1 = detail::uniform_fan_in<S>(rng, {f, w}, f);
  p.mask_b1 = detail::const_param<S>({w}, S(0));
  p.mask_w2 = detail::uniform_fan_in<S>(rng, {w, f}, w);
  p.mask_b2 = detail::const_param<S>({f}, S(0));
  p.dec_w = detail::uniform_fan_in<S>(rng, {f, 1, cfg.k}, f * cfg.k);
  p.dec_b = detail::const_param<S>({1}, S(0));
  return p;
}

template <typename S>
int64_t count_params(const ModelParamsT<S>& params) {
  int64_t n = 0;
  params.for_each_param([&n](const char*, const TensorT<S>& t) { n += t.numel(); });
  return n;
}

// ---------------------------------------------------------------------------
// Pipeline stages

template <typename S>
TensorT<S> encode(TensorT<S> x, const ModelParamsT<S>& params, const ModelConfig& cfg) {
  if (x.rank() != 2 || x.dim(0) != 1) {
    throw ShapeMismatch("encode: input must be [1,T], got " + shape_str(x.shape()));
  }
  if (x.dim(1) + 2 * cfg.padding < cfg.k) {
    throw InputTooShort("encode: input length " + std::to_string(x.dim(1)) +
                        " shorter than kernel " + std::to_string(cfg.k));
  }
  return relu(conv1d(x, params.enc_w, params.enc_b, cfg.stride, cfg.padding));
}

// [F,T'] -> chunks [N_C,C,F] on a right-zero-padded grid.
template <typename S>
std::pair<TensorT<S>, ChunkLayout> chunk(TensorT<S> y, int64_t c, Overlap overlap) {
  if (c < 1) throw InvalidConfig("chunk size must be >= 1");
  if (overlap == Overlap::half && c % 2 != 0) {
    throw InvalidConfig("half overlap needs an even chunk size, got " + std::to_string(c));
  }
  if (y.rank() != 2) throw ShapeMismatch("chunk: expected [F,T'], got " + shape_str(y.shape()));
  ChunkLayout lay;
  lay.c = c;
  lay.hop = (overlap == Overlap::half) ? c / 2 : c;
  lay.t_prime = y.dim(1);
  const int64_t span = std::max(lay.t_prime, c) - c;
  lay.n_c = (span + lay.hop - 1) / lay.hop + 1;
  lay.pad_len = lay.hop * (lay.n_c - 1) + c - lay.t_prime;

  const int64_t f = y.dim(0), t = lay.t_prime;
  TensorT<S> out = TensorT<S>::zeros({lay.n_c, c, f});
  {
    const S* py = y.data();
    S* po = out.data();
    for (int64_t n = 0; n < lay.n_c; ++n) {
      for (int64_t tt = 0; tt < c; ++tt) {
        const int64_t pos = n * lay.hop + tt;
        if (pos >= t) continue;
        S* orow = po + (n * c + tt) * f;
        for (int64_t ff = 0; ff < f; ++ff) orow[ff] = py[ff * t + pos];
      }
    }
  }
  maybe_record<S>({&y}, out, [y, out, lay, f, t]() mutable {
    if (!out.has_grad()) return;
    const S* go = out.grad().data();
    S* gy = y.grad_buffer().data();
    for (int64_t n = 0; n < lay.n_c; ++n) {
      for (int64_t tt = 0; tt < lay.c; ++tt) {
        const int64_t pos = n * lay.hop + tt;
        if (pos >= t) continue;
        const S* grow = go + (n * lay.c + tt) * f;
        for (int64_t ff = 0; ff < f; ++ff) gy[ff * t + pos] += grow[ff];
      }
    }
    ensure_grad_finite(y, "chunk");
  });
  return {out, lay};
}

template <typename S>
TensorT<S> add_positional(TensorT<S> h, TensorT<S> pos_table) {
  if (h.rank() != 3 || pos_table.rank() != 2 || h.dim(1) != pos_table.dim(0) ||
      h.dim(2) != pos_table.dim(1)) {
    throw ShapeMismatch("add_positional: chunks " + shape_str(h.shape()) + " vs table " +
                        shape_str(pos_table.shape()));
  }
  return add(h, pos_table);
}

// [N_C,C,D] -> [D,T']: sum chunks at their hop offsets, normalize by per-frame
// coverage, drop the padding tail. Exact inverse of chunk on chunk's output.
template <typename S>
TensorT<S> overlap_add(TensorT<S> chunks, const ChunkLayout& lay) {
  if (chunks.rank() != 3 || chunks.dim(0) != lay.n_c || chunks.dim(1) != lay.c) {
    throw LayoutMismatch("overlap_add: chunks " + shape_str(chunks.shape()) +
                         " do not match layout (N_C=" + std::to_string(lay.n_c) +
                         ", C=" + std::to_string(lay.c) + ")");
  }
  if (lay.hop < 1 || lay.t_prime < 1 || lay.hop * (lay.n_c - 1) + lay.c != lay.t_prime + lay.pad_len) {
    throw LayoutMismatch("overlap_add: inconsistent layout");
  }
  const int64_t d = chunks.dim(2), t = lay.t_prime;
  std::vector<S> coverage(static_cast<size_t>(t), S(0));
  for (int64_t n = 0; n < lay.n_c; ++n) {
    for (int64_t tt = 0; tt < lay.c; ++tt) {
      const int64_t pos = n * lay.hop + tt;
      if (pos < t) coverage[static_cast<size_t>(pos)] += S(1);
    }
  }
  TensorT<S> out = TensorT<S>::zeros({d, t});
  {
    const S* pc = chunks.data();
    S* po = out.data();
    for (int64_t n = 0; n < lay.n_c; ++n) {
      for (int64_t tt = 0; tt < lay.c; ++tt) {
        const int64_t pos = n * lay.hop + tt;
        if (pos >= t) continue;
        const S* crow = pc + (n * lay.c + tt) * d;
        for (int64_t dd = 0; dd < d; ++dd) po[dd * t + pos] += crow[dd];
      }
    }
    for (int64_t pos = 0; pos < t; ++pos) {
      const S inv = S(1) / coverage[static_cast<size_t>(pos)];
      for (int64_t dd = 0; dd < d; ++dd) po[dd * t + pos] *= inv;
    }
  }
  ensure_all_finite<S>(out.values(), "overlap_add");
  maybe_record<S>({&chunks}, out, [chunks, out, lay, d, t, coverage]() mutable {
    if (!out.has_grad()) return;
    const S* go = out.grad().data();
    S* gc = chunks.grad_buffer().data();
    for (int64_t n = 0; n < lay.n_c; ++n) {
      for (int64_t tt = 0; tt < lay.c; ++tt) {
        const int64_t pos = n * lay.hop + tt;
        if (pos >= t) continue;
        const S inv = S(1) / coverage[static_cast<size_t>(pos)];
        S* crow = gc + (n * lay.c + tt) * d;
        for (int64_t dd = 0; dd < d; ++dd) crow[dd] += go[dd * t + pos] * inv;
      }
    }
    ensure_grad_finite(chunks, "overlap_add");
  });
  return out;
}

// e [F,T'] -> N_S masks, each [F,T'], all entries >= 0.
template <typename S>
std::vector<TensorT<S>> masking_forward(TensorT<S> e, const ModelParamsT<S>& params,
                                        const ModelConfig& cfg, MacCounter* counter = nullptr) {
  if (e.rank() != 2 || e.dim(0) != cfg.f) {
    throw ShapeMismatch("masking_forward: features " + shape_str(e.shape()) + " vs config F=" +
                        std::to_string(cfg.f));
  }
  if (!cfg.share_block_weights && static_cast<int64_t>(params.blocks.size()) != cfg.n) {
    throw InvalidConfig("masking_forward: " + std::to_string(params.blocks.size()) +
                        " stored blocks for N=" + std::to_string(cfg.n));
  }

  TensorT<S> rows = permute(e, {1, 0});  // [T',F]
  rows = linear(layer_norm(rows, params.pre_norm.gamma, params.pre_norm.beta,
                           static_cast<S>(kLayerNormEps)),
                params.pre_w, params.pre_b);
  auto [h, lay] = chunk(permute(rows, {1, 0}), cfg.c, cfg.overlap);
  h = add_positional(h, params.pos_table);

  // Each chunk independently queries the same latent array through the
  // N-block stack; gradients fan back into the shared parameters.
  std::vector<TensorT<S>> per_chunk;
  per_chunk.reserve(static_cast<size_t>(lay.n_c));
  for (int64_t nchunk = 0; nchunk < lay.n_c; ++nchunk) {
    TensorT<S> hc = reshape(slice0(h, nchunk, 1), {lay.c, cfg.f});
    TensorT<S> lat = params.latent;
    for (int64_t b = 0; b < cfg.n; ++b) {
      const auto& blk = params.blocks[cfg.share_block_weights ? 0 : static_cast<size_t>(b)];
      lat = perceparator_block(hc, lat, blk, counter);
    }
    per_chunk.push_back(lat);
  }
  TensorT<S> h2 = stack0(per_chunk);  // [N_C,L,F]

  // Restore: latent axis back to chunk length, then features.
  TensorT<S> r = add(matmul(permute(h2, {0, 2, 1}), params.restore_seq_w), params.restore_seq_b);
  r = permute(r, {0, 2, 1});  // [N_C,C,F]
  r = linear(r, params.restore_feat_w, params.restore_feat_b);
  r = prelu(r, params.prelu_a);
  r = linear(r, params.expand_w, params.expand_b);  // [N_C,C,F*N_S]

  TensorT<S> h5 = overlap_add(r, lay);  // [F*N_S,T']

  std::vector<TensorT<S>> masks;
  masks.reserve(static_cast<size_t>(cfg.n_s));
  for (int64_t k = 0; k < cfg.n_s; ++k) {
    TensorT<S> cols = permute(slice0(h5, k * cfg.f, cfg.f), {1, 0});  // [T',F]
    TensorT<S> m = relu(linear(relu(linear(cols, params.mask_w1, params.mask_b1)), params.mask_w2,
                               params.mask_b2));
    masks.push_back(permute(m, {1, 0}));
  }
  return masks;
}

template <typename S>
std::vector<TensorT<S>> decode(const std::vector<TensorT<S>>& masks, TensorT<S> e,
                               const ModelParamsT<S>& params, const ModelConfig& cfg) {
  std::vector<TensorT<S>> outs;
  outs.reserve(masks.size());
  for (const TensorT<S>& m : masks) {
    if (m.shape() != e.shape()) {
      throw ShapeMismatch("decode: mask " + shape_str(m.shape()) + " vs features " +
                          shape_str(e.shape()));
    }
    TensorT<S> s = conv1d_transpose(mul(m, e), params.dec_w, params.dec_b, cfg.stride);
    if (cfg.padding > 0) {
      const int64_t t = s.dim(1) - 2 * cfg.padding;
      s = permute(slice0(permute(s, {1, 0}), cfg.padding, t), {1, 0});
    }
    outs.push_back(s);
  }
  return outs;
}

template <typename S>
std::vector<TensorT<S>> forward(TensorT<S> x, const ModelParamsT<S>& params, const ModelConfig& cfg,
                                MacCounter* counter = nullptr) {
  TensorT<S> e = encode(x, params, cfg);
  std::vector<TensorT<S>> masks = masking_forward(e, params, cfg, counter);
  return decode(masks, e, params, cfg);
}

}  // namespace percep
