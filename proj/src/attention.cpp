// SPDX-License-Identifier: Apache-2.0

#include "percep/attention.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "percep/rng.hpp"

namespace percep {

double fit_loglog_exponent(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw InvalidConfig("exponent fit needs at least 2 points");
  }
  bool distinct = false;
  for (const double x : xs) distinct = distinct || x != xs.front();
  if (!distinct) throw InvalidConfig("exponent fit needs distinct x values");
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const double lx = std::log(xs[i]);
    const double ly = std::log(ys[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double denom = n * sxx - sx * sx;
  if (denom == 0.0) throw InvalidConfig("exponent fit needs distinct x values");
  return (n * sxy - sx * sy) / denom;
}

namespace {

Tensor rand_mat(Rng& rng, Shape shape, float half_range) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-half_range, half_range));
  return t;
}

AttnSublayer make_sublayer(Rng& rng, int64_t f, int heads) {
  AttnSublayer s;
  const float r = 1.0f / std::sqrt(static_cast<float>(f));
  s.ln_q = {Tensor::full({f}, 1.0f), Tensor::zeros({f})};
  s.ln_kv = {Tensor::full({f}, 1.0f), Tensor::zeros({f})};
  s.mha = {rand_mat(rng, {f, f}, r), Tensor::zeros({f}), rand_mat(rng, {f, f}, r),
           Tensor::zeros({f}), rand_mat(rng, {f, f}, r), Tensor::zeros({f}),
           rand_mat(rng, {f, f}, r), Tensor::zeros({f}), heads};
  return s;
}

}  // namespace

ProbeResult complexity_probe(const std::vector<ProbeConfig>& configs, uint64_t seed) {
  if (configs.size() < 3) {
    throw InvalidConfig("complexity probe needs at least 3 chunk lengths, got " +
                        std::to_string(configs.size()));
  }
  for (const ProbeConfig& c : configs) {
    if (c.c < 1 || c.l < 1 || c.f < 1 || c.h < 1) throw InvalidConfig("probe shapes must be positive");
    if (c.l != configs[0].l || c.f != configs[0].f || c.h != configs[0].h) {
      throw InvalidConfig("probe varies C only; L, F, H must stay fixed");
    }
    for (const ProbeConfig& o : configs) {
      if (&o != &c && o.c == c.c) throw InvalidConfig("probe chunk lengths must be distinct");
    }
  }

  Rng rng(seed);
  const int64_t l = configs[0].l, f = configs[0].f;
  const int heads = static_cast<int>(configs[0].h);

  PerceparatorBlockParams block;
  block.perceiving.push_back(make_sublayer(rng, f, heads));
  block.latents.push_back(make_sublayer(rng, f, heads));
  MhaParams ref_mha = make_sublayer(rng, f, heads).mha;
  Tensor latent = rand_mat(rng, {l, f}, 0.5f);

  ProbeResult res;
  for (const ProbeConfig& cfg : configs) {
    ProbePoint pt;
    pt.cfg = cfg;
    Tensor chunk = rand_mat(rng, {cfg.c, f}, 0.5f);
    perceparator_block(chunk, latent, block, &pt.block);
    multi_head_attention(chunk, chunk, ref_mha, &pt.reference, AttnKind::self);
    // Of the block's projection MACs, only K/V over the chunk scale with C.
    pt.kv_projection = 2ull * static_cast<uint64_t>(cfg.c) * static_cast<uint64_t>(f) *
                       static_cast<uint64_t>(f);
    res.points.push_back(pt);
  }

  std::vector<double> cs, v1, v2, v3, v4;
  for (const ProbePoint& pt : res.points) {
    cs.push_back(static_cast<double>(pt.cfg.c));
    v1.push_back(static_cast<double>(pt.block.cross_score));
    v2.push_back(static_cast<double>(pt.block.cross_mix));
    v3.push_back(static_cast<double>(pt.kv_projection));
    v4.push_back(static_cast<double>(pt.reference.self_score));
  }
  res.cross_score_exp = fit_loglog_exponent(cs, v1);
  res.cross_mix_exp = fit_loglog_exponent(cs, v2);
  res.kv_projection_exp = fit_loglog_exponent(cs, v3);
  res.ref_score_exp = fit_loglog_exponent(cs, v4);
  return res;
}

std::string ProbeResult::table() const {
  std::ostringstream os;
  char line[160];
  os << "  C     L    F   H  category            MACs\n";
  for (const ProbePoint& p : points) {
    const auto row = [&](const char* cat, uint64_t macs) {
      std::snprintf(line, sizeof(line), "  %-5lld %-4lld %-4lld %-2lld %-18s %llu\n",
                    static_cast<long long>(p.cfg.c), static_cast<long long>(p.cfg.l),
                    static_cast<long long>(p.cfg.f), static_cast<long long>(p.cfg.h), cat,
                    static_cast<unsigned long long>(macs));
      os << line;
    };
    row("cross_score", p.block.cross_score);
    row("cross_mix", p.block.cross_mix);
    row("kv_projection", p.kv_projection);
    row("self_score", p.block.self_score);
    row("self_mix", p.block.self_mix);
    row("projection", p.block.projection);
    row("ref_self_score", p.reference.self_score);
  }
  std::snprintf(line, sizeof(line),
                "fit vs C: cross_score %.3f, cross_mix %.3f, kv_projection %.3f, "
                "reference self_score %.3f\n",
                cross_score_exp, cross_mix_exp, kv_projection_exp, ref_score_exp);
  os << line;
  return os.str();
}

std::string ProbeResult::csv() const {
  std::ostringstream os;
  os << "C,L,F,H,category,macs\n";
  for (const ProbePoint& p : points) {
    const auto row = [&](const char* cat, uint64_t macs) {
      os << p.cfg.c << "," << p.cfg.l << "," << p.cfg.f << "," << p.cfg.h << "," << cat << ","
         << macs << "\n";
    };
    row("cross_score", p.block.cross_score);
    row("cross_mix", p.block.cross_mix);
    row("kv_projection", p.kv_projection);
    row("self_score", p.block.self_score);
    row("self_mix", p.block.self_mix);
    row("projection", p.block.projection);
    row("ffn", p.block.ffn);
    row("ref_self_score", p.reference.self_score);
  }
  return os.str();
}

}  // namespace percep
