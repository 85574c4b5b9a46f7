// SPDX-License-Identifier: Apache-2.0
//
// Analytic multiply-accumulate tallies. Counts are pure functions of the
// shapes flowing through attention; they never depend on values or timing.

#pragma once

#include <cstdint>
#include <string>

namespace percep {

struct MacCounter {
  uint64_t projection = 0;   // q/k/v/output projections, cross and self combined
  uint64_t cross_score = 0;  // QK^T where queries are latents, keys are chunk frames
  uint64_t cross_mix = 0;    // attention-weighted V mix on the cross path
  uint64_t self_score = 0;   // QK^T with queries == keys
  uint64_t self_mix = 0;
  uint64_t ffn = 0;

  void reset() { *this = MacCounter{}; }

  uint64_t total() const {
    return projection + cross_score + cross_mix + self_score + self_mix + ffn;
  }

  MacCounter& operator+=(const MacCounter& o) {
    projection += o.projection;
    cross_score += o.cross_score;
    cross_mix += o.cross_mix;
    self_score += o.self_score;
    self_mix += o.self_mix;
    ffn += o.ffn;
    return *this;
  }

  bool operator==(const MacCounter& o) const = default;

  std::string str() const {
    return "projection=" + std::to_string(projection) + " cross_score=" + std::to_string(cross_score) +
           " cross_mix=" + std::to_string(cross_mix) + " self_score=" + std::to_string(self_score) +
           " self_mix=" + std::to_string(self_mix) + " ffn=" + std::to_string(ffn);
  }
};

}  // namespace percep
