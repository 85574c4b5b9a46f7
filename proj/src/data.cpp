// SPDX-License-Identifier: Apache-2.0

#include "percep/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "percep/rng.hpp"

namespace percep {

namespace {

constexpr double kTau = 6.283185307179586;

// Harmonic stack under a slow AM envelope, peak-normalized to 0.5. Harmonics
// stop at band_ceiling so the two sources stay spectrally disjoint.
std::vector<float> tone_stack(Rng& rng, size_t n, int sample_rate, double f0_lo, double f0_hi,
                              double band_ceiling) {
  const double f0 = rng.uniform(f0_lo, f0_hi);
  const double am_freq = rng.uniform(1.0, 8.0);
  const double am_phase = rng.uniform(0.0, kTau);
  const double ceiling = std::min(band_ceiling, 0.45 * sample_rate);
  std::vector<double> phases;
  std::vector<double> amps;
  for (int k = 1; k <= 4 && k * f0 < ceiling; ++k) {
    phases.push_back(rng.uniform(0.0, kTau));
    amps.push_back(1.0 / k);
  }
  if (phases.empty()) {  // fundamental always sounds, even near the ceiling
    phases.push_back(rng.uniform(0.0, kTau));
    amps.push_back(1.0);
  }
  std::vector<float> out(n);
  double peak = 0.0;
  std::vector<double> raw(n);
  for (size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate;
    const double env = 1.0 - 0.5 * (0.5 + 0.5 * std::sin(kTau * am_freq * t + am_phase));
    double v = 0.0;
    for (size_t k = 0; k < amps.size(); ++k) {
      v += amps[k] * std::sin(kTau * (static_cast<double>(k + 1) * f0) * t + phases[k]);
    }
    raw[i] = env * v;
    peak = std::max(peak, std::abs(raw[i]));
  }
  const double gain = 0.5 / peak;
  for (size_t i = 0; i < n; ++i) out[i] = static_cast<float>(raw[i] * gain);
  return out;
}

}  // namespace

SynthPair synth_pair(uint64_t seed, double duration_s, int sample_rate) {
  if (duration_s <= 0.0 || sample_rate < 1) {
    throw InvalidConfig("synth_pair: duration and sample rate must be positive");
  }
  const size_t n = static_cast<size_t>(duration_s * sample_rate);
  if (n == 0) throw InvalidConfig("synth_pair: duration too short for one sample");
  Rng rng(seed);
  SynthPair p;
  p.s1 = tone_stack(rng, n, sample_rate, 100.0, 300.0, 400.0);
  p.s2 = tone_stack(rng, n, sample_rate, 400.0, 900.0, 0.45 * sample_rate);
  p.mixture.resize(n);
  for (size_t i = 0; i < n; ++i) p.mixture[i] = p.s1[i] + p.s2[i];
  return p;
}

std::vector<Utterance> synth_dataset(uint64_t seed, size_t n, double duration_s, int sample_rate) {
  std::vector<Utterance> items;
  items.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    SynthPair p = synth_pair(Rng::derive(seed, i), duration_s, sample_rate);
    Utterance u;
    u.mix = std::move(p.mixture);
    u.refs.push_back(std::move(p.s1));
    u.refs.push_back(std::move(p.s2));
    items.push_back(std::move(u));
  }
  return items;
}

SplitResult split(size_t item_count, const SplitSpec& spec, uint64_t seed) {
  if (spec.train <= 0.0 || spec.val <= 0.0 || spec.test <= 0.0) {
    throw InvalidConfig("split ratios must be positive");
  }
  if (item_count < 10) {
    throw TooFewItems("split needs at least 10 items, got " + std::to_string(item_count));
  }
  const double total = spec.train + spec.val + spec.test;
  const double ratios[3] = {spec.train / total, spec.val / total, spec.test / total};
  size_t sizes[3];
  double remainders[3];
  size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double ideal = ratios[i] * static_cast<double>(item_count);
    sizes[i] = static_cast<size_t>(ideal);
    remainders[i] = ideal - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  while (assigned < item_count) {  // largest remainder first; ties to the earlier bucket
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (remainders[i] > remainders[best]) best = i;
    }
    sizes[best]++;
    remainders[best] = -1.0;
    assigned++;
  }

  std::vector<size_t> idx(item_count);
  std::iota(idx.begin(), idx.end(), size_t{0});
  Rng rng(seed);
  rng.shuffle(idx);
  SplitResult r;
  r.train.assign(idx.begin(), idx.begin() + static_cast<long>(sizes[0]));
  r.val.assign(idx.begin() + static_cast<long>(sizes[0]),
               idx.begin() + static_cast<long>(sizes[0] + sizes[1]));
  r.test.assign(idx.begin() + static_cast<long>(sizes[0] + sizes[1]), idx.end());
  return r;
}

// ---------------------------------------------------------------------------
// WAV PCM16 mono

namespace {

uint32_t rd_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

uint16_t rd_u16(const uint8_t* p) {
  return static_cast<uint16_t>(static_cast<uint16_t>(p[0]) | (static_cast<uint16_t>(p[1]) << 8));
}

void wr_u32(std::string& s, uint32_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 24) & 0xff));
}

void wr_u16(std::string& s, uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

std::pair<std::vector<float>, int> wav_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed on " + path);
  const uint8_t* p = reinterpret_cast<const uint8_t*>(bytes.data());
  const size_t n = bytes.size();
  if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0) {
    throw UnsupportedFormat(path + ": not a RIFF/WAVE file");
  }

  bool have_fmt = false;
  int sample_rate = 0;
  std::vector<float> samples;
  bool have_data = false;
  size_t off = 12;
  while (off + 8 <= n) {
    const char* id = bytes.data() + off;
    const uint32_t sz = rd_u32(p + off + 4);
    off += 8;
    if (off + sz > n) throw UnsupportedFormat(path + ": chunk overruns file");
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (sz < 16) throw UnsupportedFormat(path + ": fmt chunk too small");
      const uint16_t audio_format = rd_u16(p + off);
      if (audio_format != 1) {
        throw UnsupportedFormat(path + ": audio_format=" + std::to_string(audio_format) +
                                " (only PCM=1)");
      }
      const uint16_t channels = rd_u16(p + off + 2);
      if (channels != 1) {
        throw UnsupportedFormat(path + ": channels=" + std::to_string(channels) + " (only mono)");
      }
      sample_rate = static_cast<int>(rd_u32(p + off + 4));
      const uint16_t bits = rd_u16(p + off + 14);
      if (bits != 16) {
        throw UnsupportedFormat(path + ": bits_per_sample=" + std::to_string(bits) + " (only 16)");
      }
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) throw UnsupportedFormat(path + ": data chunk before fmt chunk");
      const size_t count = sz / 2;
      samples.resize(count);
      for (size_t i = 0; i < count; ++i) {
        const int16_t v = static_cast<int16_t>(rd_u16(p + off + 2 * i));
        samples[i] = static_cast<float>(v) / 32768.0f;
      }
      have_data = true;
    }
    off += sz + (sz & 1);  // chunks are word-aligned
  }
  if (!have_fmt || !have_data) throw UnsupportedFormat(path + ": missing fmt or data chunk");
  return {std::move(samples), sample_rate};
}

void wav_write(const std::string& path, std::span<const float> samples, int sample_rate) {
  if (sample_rate < 1) throw InvalidConfig("wav_write: sample rate must be positive");
  for (float v : samples) {
    if (!std::isfinite(v)) throw NonFiniteValue("wav_write: non-finite sample");
  }
  const uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out.append("RIFF");
  wr_u32(out, 36 + data_bytes);
  out.append("WAVE");
  out.append("fmt ");
  wr_u32(out, 16);
  wr_u16(out, 1);  // PCM
  wr_u16(out, 1);  // mono
  wr_u32(out, static_cast<uint32_t>(sample_rate));
  wr_u32(out, static_cast<uint32_t>(sample_rate) * 2);  // byte rate
  wr_u16(out, 2);   // block align
  wr_u16(out, 16);  // bits per sample
  out.append("data");
  wr_u32(out, data_bytes);
  constexpr float kMax = 1.0f - 1.0f / 32768.0f;
  for (float v : samples) {
    const float c = std::min(kMax, std::max(-1.0f, v));
    const auto q = static_cast<int16_t>(std::lround(c * 32768.0f));
    wr_u16(out, static_cast<uint16_t>(q));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<long>(out.size()));
  if (!f) throw IoError("write failed on " + path);
}

std::vector<ManifestEntry> parse_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() < 3) {
      throw Error(path + " line " + std::to_string(line_no) +
                  ": expected <mix>\\t<ref1>\\t<ref2>[...], got " + std::to_string(fields.size()) +
                  " fields");
    }
    ManifestEntry e;
    e.mix = fields[0];
    e.refs.assign(fields.begin() + 1, fields.end());
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace percep
