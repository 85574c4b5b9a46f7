// SPDX-License-Identifier: Apache-2.0

#include "percep/training.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "percep/objectives.hpp"
#include "percep/rng.hpp"

namespace percep {

double lr_at(const LrSchedule& s, int64_t epoch) {
  if (epoch < 0) throw InvalidConfig("lr_at: epoch must be >= 0");
  if (s.halving_interval < 1) throw InvalidConfig("lr_at: halving interval must be >= 1");
  return s.base_rate * std::pow(2.0, -static_cast<double>(epoch / s.halving_interval));
}

bool adamp_update_tensor(Tensor& w, Tensor& m, Tensor& v, int64_t t, const AdamPHyper& hp,
                         double lr) {
  if (!w.has_grad()) throw Error("optimizer step without a gradient");
  std::span<const float> g = w.grad();
  for (float x : g) {
    if (!std::isfinite(x)) throw NonFiniteGradient("optimizer step saw a non-finite gradient");
  }
  const int64_t n = w.numel();
  float* pw = w.data();
  float* pm = m.data();
  float* pv = v.data();

  double dot_wg = 0.0, ww = 0.0, gg = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    dot_wg += static_cast<double>(pw[i]) * g[static_cast<size_t>(i)];
    ww += static_cast<double>(pw[i]) * pw[i];
    gg += static_cast<double>(g[static_cast<size_t>(i)]) * g[static_cast<size_t>(i)];
  }

  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  std::vector<float> p(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const float gi = g[static_cast<size_t>(i)];
    pm[i] = static_cast<float>(hp.beta1 * pm[i] + (1.0 - hp.beta1) * gi);
    pv[i] = static_cast<float>(hp.beta2 * pv[i] + (1.0 - hp.beta2) * gi * gi);
    const double mhat = pm[i] / bc1;
    const double vhat = pv[i] / bc2;
    p[static_cast<size_t>(i)] = static_cast<float>(mhat / (std::sqrt(vhat) + hp.eps));
  }

  const double denom = std::sqrt(ww) * std::sqrt(gg);
  const double cosine = denom > 0.0 ? dot_wg / denom : 1.0;
  const bool trigger =
      hp.delta > 0.0 && std::abs(cosine) < hp.delta / std::sqrt(static_cast<double>(n));

  if (trigger && ww > 0.0) {
    // Remove the radial component so the applied update is tangent to w.
    double dot_wp = 0.0;
    for (int64_t i = 0; i < n; ++i) dot_wp += static_cast<double>(pw[i]) * p[static_cast<size_t>(i)];
    const double r = dot_wp / ww;
    for (int64_t i = 0; i < n; ++i) {
      p[static_cast<size_t>(i)] -= static_cast<float>(r * pw[i]);
    }
    for (int64_t i = 0; i < n; ++i) {
      pw[i] -= static_cast<float>(lr * p[static_cast<size_t>(i)]);
    }
  } else {
    // Decoupled weight decay rides along with the Adam step.
    for (int64_t i = 0; i < n; ++i) {
      pw[i] -= static_cast<float>(lr * (p[static_cast<size_t>(i)] + hp.wd * pw[i]));
    }
  }
  return trigger;
}

namespace {

void ensure_state(ModelParams& params, AdamPState& st) {
  if (!st.m.empty()) return;
  params.for_each_param([&st](const char*, Tensor& t) {
    st.m.push_back(Tensor::zeros(t.shape()));
    st.v.push_back(Tensor::zeros(t.shape()));
  });
}

}  // namespace

StepStats adamp_step(ModelParams& params, AdamPState& st, double lr) {
  if (lr < 0.0) throw InvalidConfig("adamp_step: learning rate must be >= 0");
  ensure_state(params, st);
  st.t += 1;
  StepStats stats;
  size_t idx = 0;
  params.for_each_param([&](const char*, Tensor& w) {
    if (idx >= st.m.size()) throw Error("optimizer state shorter than parameter list");
    if (st.m[idx].shape() != w.shape()) {
      throw ShapeMismatch("optimizer moment shape " + shape_str(st.m[idx].shape()) +
                          " vs parameter " + shape_str(w.shape()));
    }
    stats.projected += adamp_update_tensor(w, st.m[idx], st.v[idx], st.t, st.hp, lr) ? 1 : 0;
    stats.tensors += 1;
    ++idx;
  });
  return stats;
}

void clip_gradients(ModelParams& params, double clip_norm) {
  if (clip_norm <= 0.0) return;
  double sq = 0.0;
  params.for_each_param([&sq](const char*, Tensor& w) {
    for (float g : w.grad()) sq += static_cast<double>(g) * g;
  });
  const double norm = std::sqrt(sq);
  if (norm <= clip_norm) return;
  const float factor = static_cast<float>(clip_norm / norm);
  params.for_each_param([factor](const char*, Tensor& w) {
    for (float& g : w.grad_buffer()) g *= factor;
  });
}

EpochMetrics train_epoch(ModelParams& params, const ModelConfig& cfg,
                         const std::vector<Utterance>& data, AdamPState& st,
                         const LrSchedule& sched, int64_t epoch, uint64_t seed,
                         const TrainOptions& opts) {
  if (data.empty()) throw TooFewItems("train_epoch: empty dataset");
  if (opts.batch_size < 1) throw InvalidConfig("train_epoch: batch size must be >= 1");
  const double lr = lr_at(sched, epoch);

  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(Rng::derive(seed, static_cast<uint64_t>(epoch)));
  rng.shuffle(order);

  EpochMetrics metrics;
  double loss_sum = 0.0, si_snri_sum = 0.0;
  int64_t batch_index = 0;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opts.batch_size)) {
    const size_t stop = std::min(order.size(), start + static_cast<size_t>(opts.batch_size));
    try {
      Tape tape;
      Tape::Scope scope(tape);
      Tensor batch_loss;
      int in_batch = 0;
      for (size_t pos = start; pos < stop; ++pos) {
        const Utterance& u = data[order[pos]];
        Tensor mix = Tensor::from_values({1, static_cast<int64_t>(u.mix.size())},
                                         std::vector<float>(u.mix.begin(), u.mix.end()));
        std::vector<Tensor> refs;
        refs.reserve(u.refs.size());
        for (const auto& r : u.refs) {
          refs.push_back(Tensor::from_values({1, static_cast<int64_t>(r.size())},
                                             std::vector<float>(r.begin(), r.end())));
        }
        std::vector<Tensor> ests = forward(mix, params, cfg);
        Tensor loss = upit_loss(ests, refs).first;
        loss_sum += loss.value();
        si_snri_sum += mean_si_snri(ests, refs, mix).first;
        metrics.items += 1;
        batch_loss = in_batch ? add(batch_loss, loss) : loss;
        ++in_batch;
      }
      batch_loss = div(batch_loss, Tensor::scalar(static_cast<float>(in_batch)));
      tape.backward(batch_loss);
      clip_gradients(params, opts.clip_norm);
      adamp_step(params, st, lr);
      params.for_each_param([](const char*, Tensor& w) { w.clear_grad(); });
    } catch (const NonFiniteValue& e) {
      params.for_each_param([](const char*, Tensor& w) { w.clear_grad(); });
      throw NonFiniteValue("batch " + std::to_string(batch_index) + ": " + e.what());
    } catch (const NonFiniteGradient& e) {
      params.for_each_param([](const char*, Tensor& w) { w.clear_grad(); });
      throw NonFiniteGradient("batch " + std::to_string(batch_index) + ": " + e.what());
    }
    ++batch_index;
  }
  metrics.mean_loss = loss_sum / static_cast<double>(metrics.items);
  metrics.mean_si_snri = si_snri_sum / static_cast<double>(metrics.items);
  return metrics;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization

namespace {

void wr_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void wr_u64(std::string& s, uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void wr_f32(std::string& s, float f) {
  uint32_t v = 0;
  std::memcpy(&v, &f, 4);
  wr_u32(s, v);
}

struct Reader {
  const uint8_t* p;
  size_t n;
  size_t off = 0;

  void need(size_t k) const {
    if (off + k > n) throw CorruptChecksum("checkpoint truncated mid-record");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[off + static_cast<size_t>(i)]) << (8 * i);
    off += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[off + static_cast<size_t>(i)]) << (8 * i);
    off += 8;
    return v;
  }
  float f32() {
    const uint32_t v = u32();
    float f = 0;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string str(uint32_t len) {
    need(len);
    std::string s(reinterpret_cast<const char*>(p + off), len);
    off += len;
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::string out;
  out.append("PCPR");
  wr_u32(out, c.version);
  wr_u32(out, static_cast<uint32_t>(c.config_text.size()));
  out.append(c.config_text);
  wr_u32(out, static_cast<uint32_t>(c.arrays.size()));
  for (const auto& [name, t] : c.arrays) {
    wr_u32(out, static_cast<uint32_t>(name.size()));
    out.append(name);
    wr_u32(out, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) wr_u64(out, static_cast<uint64_t>(d));
    for (float v : t.values()) wr_f32(out, v);
  }
  const auto crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
  wr_u32(out, crc);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<long>(out.size()));
  if (!f) throw IoError("write failed on " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed on " + path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "PCPR", 4) != 0) {
    throw CorruptChecksum(path + ": missing checkpoint magic");
  }
  const auto stored = static_cast<uint32_t>(
      static_cast<uint8_t>(bytes[bytes.size() - 4]) |
      (static_cast<uint32_t>(static_cast<uint8_t>(bytes[bytes.size() - 3])) << 8) |
      (static_cast<uint32_t>(static_cast<uint8_t>(bytes[bytes.size() - 2])) << 16) |
      (static_cast<uint32_t>(static_cast<uint8_t>(bytes[bytes.size() - 1])) << 24));
  const auto computed = static_cast<uint32_t>(crc32(
      0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size() - 4)));
  if (stored != computed) throw CorruptChecksum(path + ": CRC-32 mismatch");

  Reader r{reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size() - 4};
  r.off = 4;
  Checkpoint c;
  c.version = r.u32();
  if (c.version != kCheckpointVersion) {
    throw FormatVersionMismatch(path + ": format version " + std::to_string(c.version) +
                                ", expected " + std::to_string(kCheckpointVersion));
  }
  c.config_text = r.str(r.u32());
  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u32());
    const uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw CorruptChecksum(path + ": implausible array rank");
    Shape shape;
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape.push_back(static_cast<int64_t>(r.u64()));
      numel *= shape.back();
    }
    if (numel < 1 || numel > (1ll << 31)) throw CorruptChecksum(path + ": implausible array size");
    std::vector<float> vals(static_cast<size_t>(numel));
    for (auto& v : vals) v = r.f32();
    c.arrays.emplace_back(name, Tensor::from_values(std::move(shape), std::move(vals)));
  }
  if (r.off != r.n) throw CorruptChecksum(path + ": trailing bytes after arrays");
  return c;
}

Checkpoint make_checkpoint(const std::string& config_text, ModelParams& params, AdamPState& st,
                           int64_t epoch) {
  ensure_state(params, st);
  Checkpoint c;
  c.config_text = config_text;
  params.for_each_param([&c](const char* name, Tensor& t) { c.arrays.emplace_back(name, t.clone()); });
  size_t idx = 0;
  params.for_each_param([&](const char* name, Tensor&) {
    c.arrays.emplace_back(std::string("opt.m.") + name, st.m[idx].clone());
    c.arrays.emplace_back(std::string("opt.v.") + name, st.v[idx].clone());
    ++idx;
  });
  c.arrays.emplace_back("opt.t", Tensor::scalar(static_cast<float>(st.t)));
  c.arrays.emplace_back("epoch", Tensor::scalar(static_cast<float>(epoch)));
  return c;
}

int64_t restore_checkpoint(const Checkpoint& c, ModelParams& params, AdamPState& st) {
  std::map<std::string, Tensor> by_name;
  for (const auto& [name, t] : c.arrays) {
    if (!by_name.emplace(name, t).second) throw Error("checkpoint has duplicate array " + name);
  }
  const auto take = [&by_name](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("checkpoint missing array " + name);
    Tensor t = it->second;
    by_name.erase(it);
    return t;
  };
  const auto fill = [](Tensor& dst, const Tensor& src, const std::string& name) {
    if (dst.shape() != src.shape()) {
      throw ShapeMismatch("checkpoint array " + name + " has shape " + shape_str(src.shape()) +
                          ", expected " + shape_str(dst.shape()));
    }
    std::copy(src.values().begin(), src.values().end(), dst.values().begin());
  };

  params.for_each_param([&](const char* name, Tensor& t) { fill(t, take(name), name); });
  st.m.clear();
  st.v.clear();
  params.for_each_param([&](const char* name, Tensor& t) {
    Tensor m = take(std::string("opt.m.") + name);
    Tensor v = take(std::string("opt.v.") + name);
    if (m.shape() != t.shape() || v.shape() != t.shape()) {
      throw ShapeMismatch(std::string("checkpoint moments for ") + name + " have wrong shape");
    }
    st.m.push_back(m);
    st.v.push_back(v);
  });
  st.t = static_cast<int64_t>(take("opt.t").value());
  const auto epoch = static_cast<int64_t>(take("epoch").value());
  if (!by_name.empty()) throw Error("checkpoint has unknown array " + by_name.begin()->first);
  return epoch;
}

}  // namespace percep
