// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale data plumbing: synthetic two-source mixtures (disjoint pitch
// bands so a tiny model can learn to separate them), dataset splitting, WAV
// PCM16 mono file I/O, and the evaluation manifest format.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "percep/errors.hpp"

namespace percep {

constexpr int kDefaultSampleRate = 8000;

struct SynthPair {
  std::vector<float> s1, s2, mixture;  // mixture == s1 + s2 element-exact
};

// Two independent harmonic stacks with amplitude-modulation envelopes:
// s1 from f0 in [100,300] Hz, s2 from [400,900] Hz, both peak 0.5.
SynthPair synth_pair(uint64_t seed, double duration_s, int sample_rate = kDefaultSampleRate);

struct Utterance {
  std::vector<float> mix;
  std::vector<std::vector<float>> refs;
};

// Convenience: n deterministic synthetic utterances from one base seed.
std::vector<Utterance> synth_dataset(uint64_t seed, size_t n, double duration_s,
                                     int sample_rate = kDefaultSampleRate);

struct SplitSpec {
  double train = 69.0, val = 21.0, test = 10.0;
};

struct SplitResult {
  std::vector<size_t> train, val, test;
};

// Seed-shuffled partition with largest-remainder rounding of the ratios.
SplitResult split(size_t item_count, const SplitSpec& spec, uint64_t seed);

// PCM16 mono little-endian only; anything else raises UnsupportedFormat
// naming the offending field. Samples scale by 1/32768 on read.
std::pair<std::vector<float>, int> wav_read(const std::string& path);
void wav_write(const std::string& path, std::span<const float> samples, int sample_rate);

struct ManifestEntry {
  std::string mix;
  std::vector<std::string> refs;
};

// One line per item: "<mix_path>\t<ref1_path>\t<ref2_path>[\t...]".
std::vector<ManifestEntry> parse_manifest(const std::string& path);

}  // namespace percep
