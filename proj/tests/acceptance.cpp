// SPDX-License-Identifier: Apache-2.0
//
// Release gate: exercises every advertised guarantee end to end and prints
// one PASS/FAIL line per criterion. Exit code 0 only when everything passes.
// Progress chatter goes to stderr so stdout stays one line per criterion.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "percep/attention.hpp"
#include "percep/config.hpp"
#include "percep/data.hpp"
#include "percep/gradcheck.hpp"
#include "percep/model.hpp"
#include "percep/objectives.hpp"
#include "percep/rng.hpp"
#include "percep/tensor.hpp"
#include "percep/training.hpp"

using namespace percep;
namespace fs = std::filesystem;

namespace {

double now_s() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

Tensor64 rand64(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor64::from_values(shape, std::move(v));
}

// Keep every value at least `margin` away from the listed kinks so central
// differences never straddle a non-differentiable point.
Tensor64 away_from(Tensor64 t, const std::vector<double>& kinks, double margin = 0.1) {
  for (double& x : t.values()) {
    for (double k : kinks) {
      if (std::abs(x - k) < margin) x = k + (x >= k ? margin : -margin);
    }
  }
  return t;
}

Tensor randwave(Rng& rng, int64_t t, float amp = 1.0f) {
  Tensor w = Tensor::zeros({1, t});
  for (float& v : w.values()) v = static_cast<float>(rng.uniform(-amp, amp));
  return w;
}

Tensor64 project(Tensor64 y, uint64_t salt = 9) {
  Rng rng(salt);
  Tensor64 w = rand64(rng, y.shape());
  w.set_requires_grad(false);
  return sum(mul(y, w));
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.f = 8;
  cfg.c = 10;
  cfg.l = 4;
  cfg.n = 1;
  cfg.h = 2;
  return cfg;
}

std::vector<float> snapshot(const ModelParams& p) {
  std::vector<float> all;
  p.for_each_param([&](const std::string&, const Tensor& t) {
    all.insert(all.end(), t.values().begin(), t.values().end());
  });
  return all;
}

Tensor to_tensor(const std::vector<float>& v) {
  return Tensor::from_values({1, static_cast<int64_t>(v.size())},
                             {v.begin(), v.end()});
}

struct CmdResult {
  int exit_code = -1;
  std::string out;
};

CmdResult run_cmd(const std::string& cmd) {
  CmdResult r;
  FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
  if (!pipe) return r;
  char buf[1024];
  while (fgets(buf, sizeof(buf), pipe)) r.out += buf;
  const int st = pclose(pipe);
  r.exit_code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

// Textbook Adam with decoupled weight decay, same precision layout as the
// production step: double intermediates, float storage.
struct AdamWOracle {
  double b1, b2, eps, wd;
  std::vector<float> m, v;
  int64_t t = 0;

  void step(std::vector<float>& w, const std::vector<float>& g, double lr) {
    if (m.empty()) {
      m.assign(w.size(), 0.f);
      v.assign(w.size(), 0.f);
    }
    t += 1;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g[i]);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      const float p = static_cast<float>(mhat / (std::sqrt(vhat) + eps));
      w[i] -= static_cast<float>(lr * (p + wd * w[i]));
    }
  }
};

// Exhaustive assignment search by explicit recursion; lexicographic order,
// first maximum kept. Mirrors the production contract with none of its code.
void enumerate(const std::vector<std::vector<float>>& m, std::vector<int>& phi,
               std::vector<bool>& used, std::vector<int>& best_phi, double& best_score,
               bool& first) {
  const size_t n = m.size();
  if (phi.size() == n) {
    float acc = 0.0f;
    for (size_t i = 0; i < n; ++i) acc += m[i][static_cast<size_t>(phi[i])];
    const float score = acc / static_cast<float>(n);
    if (first || static_cast<double>(score) > best_score) {
      best_phi = phi;
      best_score = static_cast<double>(score);
      first = false;
    }
    return;
  }
  for (size_t j = 0; j < n; ++j) {
    if (used[j]) continue;
    used[j] = true;
    phi.push_back(static_cast<int>(j));
    enumerate(m, phi, used, best_phi, best_score, first);
    phi.pop_back();
    used[j] = false;
  }
}

std::vector<int> oracle_phi(const std::vector<std::vector<float>>& m) {
  std::vector<int> phi, best_phi;
  std::vector<bool> used(m.size(), false);
  double best_score = 0.0;
  bool first = true;
  enumerate(m, phi, used, best_phi, best_score, first);
  return best_phi;
}

// --------------------------------------------------------------------------
// 1. Gradient suite: every differentiable primitive in 64-bit against central
//    finite differences (< 1e-5), plus the tiny end-to-end model (< 1e-3).

std::pair<bool, std::string> criterion_gradients() {
  const double t0 = now_s();
  double worst = 0.0;
  std::string worst_name = "none";
  using Fn = std::function<Tensor64(std::vector<Tensor64>&)>;
  auto run = [&](const std::string& name, const Fn& f, std::vector<Tensor64> inputs) {
    GradCheckReport rep = grad_check(f, std::move(inputs));
    const double err = rep.checked > 0 ? rep.max_rel_err : 1.0;
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
  };
  Rng rng(71);

  const std::vector<std::pair<Shape, Shape>> bshapes = {{{2, 3}, {2, 3}}, {{2, 2, 3}, {3}}};
  for (const auto& [sa, sb] : bshapes) {
    run("add", [](auto& v) { return project(add(v[0], v[1])); }, {rand64(rng, sa), rand64(rng, sb)});
    run("sub", [](auto& v) { return project(sub(v[0], v[1])); }, {rand64(rng, sa), rand64(rng, sb)});
    run("mul", [](auto& v) { return project(mul(v[0], v[1])); }, {rand64(rng, sa), rand64(rng, sb)});
    run("div", [](auto& v) { return project(div(v[0], v[1])); },
        {rand64(rng, sa), rand64(rng, sb, 0.5, 2.0)});
  }
  run("scale", [](auto& v) { return project(scale(v[0], 1.7)); }, {rand64(rng, {3, 4})});
  run("add_const", [](auto& v) { return project(add_const(v[0], 0.3)); }, {rand64(rng, {3, 4})});
  run("relu", [](auto& v) { return project(relu(v[0])); },
      {away_from(rand64(rng, {3, 4}), {0.0})});
  run("clamp", [](auto& v) { return project(clamp(v[0], -0.5, 0.5)); },
      {away_from(rand64(rng, {3, 4}), {-0.5, 0.5})});
  run("log", [](auto& v) { return project(log_op(v[0])); }, {rand64(rng, {3, 4}, 0.5, 2.0)});
  run("sum", [](auto& v) { return sum(v[0]); }, {rand64(rng, {3, 4})});
  run("mean", [](auto& v) { return mean(v[0]); }, {rand64(rng, {3, 4})});
  run("prelu", [](auto& v) { return project(prelu(v[0], v[1])); },
      {away_from(rand64(rng, {3, 5}), {0.0}), rand64(rng, {5}, 0.1, 0.9)});
  run("reshape", [](auto& v) { return project(reshape(v[0], {4, 3})); }, {rand64(rng, {3, 4})});
  run("permute", [](auto& v) { return project(permute(v[0], {1, 0})); }, {rand64(rng, {3, 4})});
  run("slice0", [](auto& v) { return project(slice0(v[0], 1, 3)); }, {rand64(rng, {4, 3})});
  run("stack0",
      [](auto& v) {
        return project(stack0(std::vector<Tensor64>{v[0], v[1]}));
      },
      {rand64(rng, {2, 3}), rand64(rng, {2, 3})});
  run("matmul 2d", [](auto& v) { return project(matmul(v[0], v[1])); },
      {rand64(rng, {3, 4}), rand64(rng, {4, 2})});
  run("matmul batched", [](auto& v) { return project(matmul(v[0], v[1])); },
      {rand64(rng, {2, 3, 4}), rand64(rng, {2, 4, 2})});
  run("matmul broadcast", [](auto& v) { return project(matmul(v[0], v[1])); },
      {rand64(rng, {2, 3, 4}), rand64(rng, {4, 2})});
  run("linear", [](auto& v) { return project(linear(v[0], v[1], v[2])); },
      {rand64(rng, {5, 3}), rand64(rng, {3, 4}), rand64(rng, {4})});
  for (const auto& [stride, pad] : std::vector<std::pair<int64_t, int64_t>>{{1, 0}, {2, 1}}) {
    const int64_t s = stride, p = pad;
    run("conv1d", [s, p](auto& v) { return project(conv1d(v[0], v[1], v[2], s, p)); },
        {rand64(rng, {2, 9}), rand64(rng, {3, 2, 3}), rand64(rng, {3})});
  }
  for (int64_t s : {int64_t{1}, int64_t{2}}) {
    run("conv1d_transpose",
        [s](auto& v) { return project(conv1d_transpose(v[0], v[1], v[2], s)); },
        {rand64(rng, {3, 7}), rand64(rng, {3, 2, 3}), rand64(rng, {2})});
  }
  run("layer_norm", [](auto& v) { return project(layer_norm(v[0], v[1], v[2], 1e-5)); },
      {rand64(rng, {4, 6}), rand64(rng, {6}, 0.5, 1.5), rand64(rng, {6})});
  run("softmax rows", [](auto& v) { return project(softmax(v[0], 1)); }, {rand64(rng, {3, 5})});
  run("softmax batched", [](auto& v) { return project(softmax(v[0], 2)); },
      {rand64(rng, {2, 3, 4})});
  run("chunk+overlap_add",
      [](auto& v) {
        auto [chunks, lay] = chunk(v[0], 8, Overlap::half);
        return project(overlap_add(chunks, lay));
      },
      {rand64(rng, {20, 3})});
  const bool prim_ok = worst < 1e-5;

  // End-to-end: tiny model, loss projected over all outputs, six wiggled
  // tensors covering the encoder, latent, attention, mask head and restore.
  ModelConfig cfg = tiny_config();
  ModelParamsT<double> p = init_params<double>(cfg, 9);
  Rng xr(41);
  Tensor64 x = rand64(xr, {1, 39}, -0.5, 0.5);
  std::vector<Tensor64> inputs = {x, p.latent, p.enc_w, p.mask_w2, p.restore_seq_w,
                                  p.blocks[0].perceiving[0].mha.w_q};
  auto f_loss = [&p, &cfg](std::vector<Tensor64>& v) {
    p.latent = v[1];
    p.enc_w = v[2];
    p.mask_w2 = v[3];
    p.restore_seq_w = v[4];
    p.blocks[0].perceiving[0].mha.w_q = v[5];
    std::vector<Tensor64> outs = forward(v[0], p, cfg);
    Tensor64 acc = sum(outs[0]);
    for (size_t k = 0; k < outs.size(); ++k) acc = add(acc, project(outs[k], 3 + k));
    return acc;
  };
  GradCheckReport e2e = grad_check(f_loss, inputs);
  const double elapsed = now_s() - t0;
  const bool ok = prim_ok && e2e.ok(1e-3) && elapsed < 300.0;
  return {ok, fmt("primitives max rel err %.2e (%s), end-to-end %.2e, %.1fs",
                  worst, worst_name.c_str(), e2e.max_rel_err, elapsed)};
}

// --------------------------------------------------------------------------
// 2. Permutation-invariant loss equals exhaustive enumeration bit-exactly.

std::pair<bool, std::string> criterion_upit_oracle() {
  const double t0 = now_s();
  Rng rng(55);
  int exact = 0, total = 0;
  for (size_t n_s : {size_t{2}, size_t{3}, size_t{4}}) {
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Tensor> ests, refs;
      for (size_t k = 0; k < n_s; ++k) {
        ests.push_back(randwave(rng, 40));
        refs.push_back(randwave(rng, 40));
      }
      auto [loss, assign] = upit_loss(ests, refs);
      std::vector<std::vector<float>> m(n_s, std::vector<float>(n_s));
      for (size_t i = 0; i < n_s; ++i)
        for (size_t j = 0; j < n_s; ++j) m[i][j] = si_snr(ests[i], refs[j]).value();
      const std::vector<int> phi = oracle_phi(m);
      float acc = m[0][static_cast<size_t>(phi[0])];
      for (size_t i = 1; i < n_s; ++i) acc = acc + m[i][static_cast<size_t>(phi[i])];
      const float expect = -(acc / static_cast<float>(n_s));
      total += 1;
      if (assign.phi == phi && loss.value() == expect) exact += 1;
    }
  }
  const double elapsed = now_s() - t0;
  return {exact == total && elapsed < 60.0,
          fmt("%d/%d instances bit-exact over 2..4 sources, %.1fs", exact, total, elapsed)};
}

// --------------------------------------------------------------------------
// 3. Score properties: scale invariance, +/-60 dB caps, hand-computed case.

std::pair<bool, std::string> criterion_si_snr() {
  Rng rng(51);
  Tensor ref = randwave(rng, 64, 0.8f);
  // realistic estimate: mostly the reference plus mild distortion, so both
  // energy terms stay far above the eps regularizer at every alpha
  Tensor est = add(ref, randwave(rng, 64, 0.2f));
  const float base = si_snr(est, ref).value();
  double scale_err = 0.0;
  for (float alpha : {0.1f, 1.0f, 7.3f}) {
    scale_err = std::max(scale_err,
                         static_cast<double>(std::abs(si_snr(scale(est, alpha), ref).value() - base)));
  }
  Tensor s = Tensor::from_values({1, 4}, {1.f, -1.f, 0.5f, -0.5f});
  const bool cap_hi = si_snr(s, s).value() == 60.0f;
  Tensor zm = Tensor::from_values({1, 4}, {1.f, -1.f, 0.f, 0.f});
  Tensor orth = Tensor::from_values({1, 4}, {0.f, 0.f, 1.f, -1.f});
  const bool cap_lo = si_snr(orth, zm).value() == -60.0f;
  // s=[1,-1,0,0], est=[1,0,0,0]: mean removal gives est=[.75,-.25,-.25,-.25];
  // projection [.5,-.5,0,0] (energy .5), error [.25,.25,-.25,-.25] (energy
  // .25), so the ratio is 2 and the score 10*log10(2) dB.
  Tensor e4 = Tensor::from_values({1, 4}, {1.f, 0.f, 0.f, 0.f});
  const double expect = 10.0 * std::log10(2.0);
  const double hand_err = std::abs(si_snr(e4, zm).value() - expect);
  const bool ok = scale_err < 1e-5 && cap_hi && cap_lo && hand_err < 1e-5;
  return {ok, fmt("scale drift %.1e, caps %s/%s, hand case off by %.1e",
                  scale_err, cap_hi ? "+60" : "BROKEN", cap_lo ? "-60" : "BROKEN", hand_err)};
}

// --------------------------------------------------------------------------
// 4. Shapes: forward length preservation, chunk round trips, encoder T->T-2.

std::pair<bool, std::string> criterion_shapes() {
  ModelConfig cfg = tiny_config();
  ModelParams p = init_params<float>(cfg, 5);
  Rng rng(31);
  bool fwd_ok = true;
  for (int64_t t : {int64_t{3}, int64_t{100}, int64_t{4000}, int64_t{16000}}) {
    std::vector<Tensor> outs = forward(randwave(rng, t, 0.5f), p, cfg);
    fwd_ok = fwd_ok && outs.size() == static_cast<size_t>(cfg.n_s);
    for (const Tensor& o : outs) fwd_ok = fwd_ok && o.rank() == 2 && o.dim(1) == t;
  }

  bool round_ok = true;
  double half_err = 0.0;
  for (int64_t t : {int64_t{37}, int64_t{40}}) {
    Tensor y = Tensor::zeros({t, 3});
    for (float& v : y.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    auto [c_none, lay_none] = chunk(y, 8, Overlap::none);
    Tensor back = overlap_add(c_none, lay_none);
    for (int64_t i = 0; i < y.numel(); ++i)
      round_ok = round_ok && back.values()[i] == y.values()[i];
    auto [c_half, lay_half] = chunk(y, 8, Overlap::half);
    Tensor back2 = overlap_add(c_half, lay_half);
    for (int64_t i = 0; i < y.numel(); ++i)
      half_err = std::max(half_err,
                          static_cast<double>(std::abs(back2.values()[i] - y.values()[i])));
  }

  Tensor e = encode(randwave(rng, 100, 0.5f), p, cfg);
  const bool enc_ok = e.dim(0) == cfg.f && e.dim(1) == 98;
  const bool ok = fwd_ok && round_ok && half_err <= 1e-6 && enc_ok;
  return {ok, fmt("lengths kept for T in {3,100,4000,16000}, exact/%.1e round trips, conv 100->98",
                  half_err)};
}

// --------------------------------------------------------------------------
// 5. Complexity scaling measured through the CLI benchmark.

std::pair<bool, std::string> criterion_complexity() {
  const double t0 = now_s();
  CmdResult r = run_cmd(std::string(PERCEP_BIN) + " bench --chunks 125,250,500,1000");
  double e1 = 0, e2 = 0, e3 = 0, e4 = 0;
  bool parsed = false;
  std::stringstream ss(r.out);
  std::string line;
  while (std::getline(ss, line)) {
    if (std::sscanf(line.c_str(),
                    "fit vs C: cross_score %lf, cross_mix %lf, kv_projection %lf, "
                    "reference self_score %lf",
                    &e1, &e2, &e3, &e4) == 4) {
      parsed = true;
    }
  }
  const double elapsed = now_s() - t0;
  const bool ok = r.exit_code == 0 && parsed && std::abs(e1 - 1.0) <= 0.05 &&
                  std::abs(e2 - 1.0) <= 0.05 && std::abs(e3 - 1.0) <= 0.05 &&
                  std::abs(e4 - 2.0) <= 0.05 && elapsed < 60.0;
  return {ok, fmt("attention exponents %.3f/%.3f/%.3f vs reference %.3f, %.1fs",
                  e1, e2, e3, e4, elapsed)};
}

// --------------------------------------------------------------------------
// 6. Parameter-count calibration and linearity in the block count.

std::pair<bool, std::string> criterion_param_count() {
  ModelConfig cfg;  // defaults: F=256, C=250, L=32, H=16
  std::vector<int64_t> counts;
  for (int64_t n = 1; n <= 3; ++n) {
    cfg.n = n;
    counts.push_back(count_params(init_params<float>(cfg, 1)));
  }
  const int64_t per_block = counts[1] - counts[0];
  const bool linear_ok = counts[2] - counts[1] == per_block;
  cfg.n = 15;
  const int64_t total = count_params(init_params<float>(cfg, 1));
  const bool block_ok = std::abs(static_cast<double>(per_block) - 547200.0) <= 0.10 * 547200.0;
  const bool total_ok = std::abs(static_cast<double>(total) - 9465000.0) <= 0.15 * 9465000.0;
  return {linear_ok && block_ok && total_ok,
          fmt("%lld per block (target 547200 +/-10%%), %lld total (target 9465000 +/-15%%)",
              static_cast<long long>(per_block), static_cast<long long>(total))};
}

// --------------------------------------------------------------------------
// 7. Toy separation: tiny model learns disjoint-band mixtures to >= 5 dB.

std::pair<bool, std::string> criterion_toy_separation() {
  const double t0 = now_s();
  ModelConfig cfg;
  cfg.f = 64;
  cfg.c = 100;
  cfg.l = 16;
  cfg.n = 2;
  cfg.h = 4;
  const std::vector<Utterance> train = synth_dataset(1, 200, 0.25);
  const std::vector<Utterance> held = synth_dataset(1000000, 20, 0.25);
  ModelParams p = init_params<float>(cfg, 1);
  AdamPState st;
  LrSchedule sched;
  sched.base_rate = 1e-3;
  TrainOptions opts;
  opts.batch_size = 4;
  const int64_t epochs = 15;
  std::vector<double> losses;
  for (int64_t e = 0; e < epochs; ++e) {
    EpochMetrics m = train_epoch(p, cfg, train, st, sched, e, 1, opts);
    losses.push_back(m.mean_loss);
    std::fprintf(stderr, "  toy epoch %lld/%lld: loss %.4f, train si_snri %.2f dB, %.0fs\n",
                 static_cast<long long>(e + 1), static_cast<long long>(epochs), m.mean_loss,
                 m.mean_si_snri, now_s() - t0);
  }
  double held_sum = 0.0;
  for (const Utterance& u : held) {
    Tensor mix = to_tensor(u.mix);
    std::vector<Tensor> ests = forward(mix, p, cfg);
    std::vector<Tensor> refs;
    for (const auto& r : u.refs) refs.push_back(to_tensor(r));
    held_sum += mean_si_snri(ests, refs, mix).first;
  }
  const double held_mean = held_sum / static_cast<double>(held.size());
  bool monotone = true;
  std::vector<double> windows;
  for (size_t w = 0; w + 5 <= losses.size(); w += 5) {
    double acc = 0.0;
    for (size_t i = w; i < w + 5; ++i) acc += losses[i];
    windows.push_back(acc / 5.0);
  }
  for (size_t i = 1; i < windows.size(); ++i) monotone = monotone && windows[i] < windows[i - 1];
  const double elapsed = now_s() - t0;
  const bool ok = held_mean >= 5.0 && monotone && elapsed <= 1800.0;
  return {ok, fmt("held-out si_snri %.2f dB (need >= 5) after %lld epochs, "
                  "5-epoch loss windows %s, %.0fs",
                  held_mean, static_cast<long long>(epochs),
                  monotone ? "monotone" : "NOT MONOTONE", elapsed)};
}

// --------------------------------------------------------------------------
// 8. Optimizer: delta=0 equals AdamW bit-exactly; projections are tangent;
//    the schedule starts at 1e-4 and halves per interval.

std::pair<bool, std::string> criterion_optimizer() {
  Rng rng(61);
  const size_t n = 32;
  AdamPHyper hp;
  hp.delta = 0.0;
  Tensor w = Tensor::zeros({static_cast<int64_t>(n)});
  for (float& x : w.values()) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  Tensor m = Tensor::zeros({static_cast<int64_t>(n)});
  Tensor v = Tensor::zeros({static_cast<int64_t>(n)});
  std::vector<float> w_ref(w.values().begin(), w.values().end());
  AdamWOracle oracle{hp.beta1, hp.beta2, hp.eps, hp.wd, {}, {}, 0};
  bool adamw_ok = true;
  for (int64_t t = 1; t <= 10; ++t) {
    std::vector<float> g(n);
    for (auto& x : g) x = static_cast<float>(rng.uniform(-2.0, 2.0));
    std::copy(g.begin(), g.end(), w.grad_buffer().begin());
    adamp_update_tensor(w, m, v, t, hp, 3e-3);
    oracle.step(w_ref, g, 3e-3);
    for (size_t i = 0; i < n; ++i) adamw_ok = adamw_ok && w.values()[i] == w_ref[i];
  }

  // gradient orthogonalized against the weights in double precision
  Rng rng2(62);
  const int64_t pn = 8;
  Tensor pw = Tensor::zeros({pn});
  for (float& x : pw.values()) x = static_cast<float>(rng2.uniform(-1.0, 1.0));
  std::vector<double> wd_(pw.values().begin(), pw.values().end());
  std::vector<double> raw(static_cast<size_t>(pn));
  for (auto& x : raw) x = rng2.uniform(-1.0, 1.0);
  double dot = 0, ww = 0;
  for (int64_t i = 0; i < pn; ++i) {
    dot += raw[static_cast<size_t>(i)] * wd_[static_cast<size_t>(i)];
    ww += wd_[static_cast<size_t>(i)] * wd_[static_cast<size_t>(i)];
  }
  std::span<float> gb = pw.grad_buffer();
  for (int64_t i = 0; i < pn; ++i) {
    const double val = raw[static_cast<size_t>(i)] - (dot / ww) * wd_[static_cast<size_t>(i)];
    gb[static_cast<size_t>(i)] = static_cast<float>(val);
  }
  std::vector<float> before(pw.values().begin(), pw.values().end());
  Tensor pm = Tensor::zeros({pn}), pv = Tensor::zeros({pn});
  AdamPHyper hp2;  // delta = 0.1
  const bool trig = adamp_update_tensor(pw, pm, pv, 1, hp2, 0.1);
  double dwd = 0, dww = 0, ddd = 0;
  for (int64_t i = 0; i < pn; ++i) {
    const double delta = static_cast<double>(pw.values()[static_cast<size_t>(i)]) -
                         before[static_cast<size_t>(i)];
    dwd += delta * before[static_cast<size_t>(i)];
    dww += static_cast<double>(before[static_cast<size_t>(i)]) * before[static_cast<size_t>(i)];
    ddd += delta * delta;
  }
  const double cosine = dwd / (std::sqrt(dww) * std::sqrt(ddd));
  const bool proj_ok = trig && std::abs(cosine) < 1e-6;

  LrSchedule s;
  const bool lr_ok = lr_at(s, 0) == 1e-4 && lr_at(s, 63) == 1e-4 && lr_at(s, 64) == 5e-5 &&
                     lr_at(s, 128) == 2.5e-5;
  return {adamw_ok && proj_ok && lr_ok,
          fmt("delta=0 matches AdamW over 10 steps: %s; |cos(w,dw)| = %.1e; schedule %s",
              adamw_ok ? "yes" : "NO", std::abs(cosine), lr_ok ? "halves" : "BROKEN")};
}

// --------------------------------------------------------------------------
// 9. Persistence: checkpoint round trip, bit-exact resume, WAV fidelity.

std::pair<bool, std::string> criterion_persistence() {
  const fs::path dir = fs::temp_directory_path() / "percep_acceptance";
  fs::create_directories(dir);
  ModelConfig cfg = tiny_config();
  RunConfig rc;
  rc.model = cfg;
  const std::string cfg_text = render_run_config(rc);
  const std::vector<Utterance> data = synth_dataset(99, 6, 0.02);
  LrSchedule sched;
  sched.base_rate = 1e-3;
  TrainOptions opts;
  opts.batch_size = 2;

  ModelParams full = init_params<float>(cfg, 4);
  AdamPState full_st;
  for (int64_t e = 0; e < 4; ++e) train_epoch(full, cfg, data, full_st, sched, e, 13, opts);

  ModelParams part = init_params<float>(cfg, 4);
  AdamPState part_st;
  for (int64_t e = 0; e < 2; ++e) train_epoch(part, cfg, data, part_st, sched, e, 13, opts);
  const std::string ck = (dir / "state.pcpr").string();
  save_checkpoint(ck, make_checkpoint(cfg_text, part, part_st, 2));

  ModelParams resumed = init_params<float>(cfg, 77);  // different seed on purpose
  AdamPState resumed_st;
  const int64_t epoch0 = restore_checkpoint(load_checkpoint(ck), resumed, resumed_st);
  const bool round_ok = epoch0 == 2 && snapshot(resumed) == snapshot(part) &&
                        resumed_st.t == part_st.t;
  for (int64_t e = epoch0; e < 4; ++e) train_epoch(resumed, cfg, data, resumed_st, sched, e, 13, opts);
  const bool resume_ok = snapshot(resumed) == snapshot(full) && resumed_st.t == full_st.t;

  Rng rng(17);
  std::vector<float> wave(801);
  for (auto& x : wave) x = static_cast<float>(rng.uniform(-0.9, 0.9));
  const std::string wav = (dir / "probe.wav").string();
  wav_write(wav, wave, 8000);
  auto [back, rate] = wav_read(wav);
  double wav_err = 0.0;
  for (size_t i = 0; i < wave.size(); ++i)
    wav_err = std::max(wav_err, static_cast<double>(std::abs(back[i] - wave[i])));
  const bool wav_ok = rate == 8000 && back.size() == wave.size() && wav_err <= 1.0 / 32768.0;
  fs::remove_all(dir);
  return {round_ok && resume_ok && wav_ok,
          fmt("round trip %s, %lld-step resumed run %s, wav error %.2e (cap 3.05e-05)",
              round_ok ? "bit-exact" : "BROKEN",
              static_cast<long long>(full_st.t - part_st.t),
              resume_ok ? "bit-exact" : "DIVERGED", wav_err)};
}

struct Criterion {
  const char* label;
  std::function<std::pair<bool, std::string>()> fn;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"gradient suite (primitives < 1e-5, end-to-end < 1e-3, under 5 min)", criterion_gradients},
      {"permutation loss equals exhaustive oracle (300 instances, under 1 min)",
       criterion_upit_oracle},
      {"scale-invariant score properties and hand-computed case", criterion_si_snr},
      {"shape and round-trip suite", criterion_shapes},
      {"attention cost scales linearly in chunk count (reference quadratic)",
       criterion_complexity},
      {"parameter-count calibration and block linearity", criterion_param_count},
      {"toy separation reaches 5 dB with monotone loss windows (under 30 min)",
       criterion_toy_separation},
      {"optimizer equivalence, projection geometry, schedule", criterion_optimizer},
      {"checkpoint round trip, bit-exact resume, wav fidelity", criterion_persistence},
  };
  bool all = true;
  for (size_t i = 0; i < criteria.size(); ++i) {
    bool ok = false;
    std::string detail;
    try {
      std::tie(ok, detail) = criteria[i].fn();
    } catch (const std::exception& e) {
      ok = false;
      detail = std::string("exception: ") + e.what();
    }
    std::printf("%s  %zu. %s — %s\n", ok ? "PASS" : "FAIL", i + 1, criteria[i].label,
                detail.c_str());
    std::fflush(stdout);
    all = all && ok;
  }
  return all ? 0 : 1;
}
