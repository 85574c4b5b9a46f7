// SPDX-License-Identifier: Apache-2.0
//
// AdamP optimization (Adam with tangent-space projection for parameters whose
// gradient is nearly orthogonal to the weight vector), stepwise-halving
// learning-rate schedule, the epoch loop, and bit-exact checkpointing.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "percep/data.hpp"
#include "percep/errors.hpp"
#include "percep/model.hpp"

namespace percep {

struct AdamPHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double wd = 1e-2;   // decoupled weight decay, scaled by lr
  double eps = 1e-8;
  double delta = 0.1;  // projection threshold; 0 disables projection entirely
};

struct AdamPState {
  AdamPHyper hp;
  int64_t t = 0;               // completed steps
  std::vector<Tensor> m, v;    // moments in for_each_param order, lazily sized
};

struct LrSchedule {
  double base_rate = 1e-4;
  int64_t halving_interval = 64;  // epochs per halving
};

double lr_at(const LrSchedule& s, int64_t epoch);

// Updates one tensor in place from its accumulated gradient. Returns whether
// the tangent-space projection triggered (then weight decay is skipped so the
// applied update stays orthogonal to w).
bool adamp_update_tensor(Tensor& w, Tensor& m, Tensor& v, int64_t t, const AdamPHyper& hp,
                         double lr);

struct StepStats {
  int64_t tensors = 0;
  int64_t projected = 0;
};

// One optimizer step over every model parameter; gradients must be present.
StepStats adamp_step(ModelParams& params, AdamPState& st, double lr);

// Global-norm gradient clipping; no-op when clip_norm <= 0.
void clip_gradients(ModelParams& params, double clip_norm);

struct TrainOptions {
  int64_t batch_size = 4;
  double clip_norm = 5.0;
};

struct EpochMetrics {
  double mean_loss = 0.0;      // mean per-utterance uPIT loss
  double mean_si_snri = 0.0;   // mean per-utterance SI-SNR improvement, dB
  int64_t items = 0;
};

// One shuffled pass: forward -> uPIT loss -> backward -> clip -> AdamP.
// Deterministic given (params, data, seed, epoch); the shuffle stream is
// derived from (seed, epoch) so resuming at an epoch boundary is exact.
EpochMetrics train_epoch(ModelParams& params, const ModelConfig& cfg,
                         const std::vector<Utterance>& data, AdamPState& st,
                         const LrSchedule& sched, int64_t epoch, uint64_t seed,
                         const TrainOptions& opts);

// ---------------------------------------------------------------------------
// Checkpointing. Layout: magic "PCPR"; format version u32 LE; config text
// (u32 LE length + UTF-8); array count u32 LE; per array: name (u32 LE length
// + UTF-8), rank u32 LE, extents u64 LE, payload f32 LE row-major; trailing
// CRC-32 of all preceding bytes.

constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> arrays;
};

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

// Bundles params + optimizer state + epoch under the canonical names.
Checkpoint make_checkpoint(const std::string& config_text, ModelParams& params, AdamPState& st,
                           int64_t epoch);

// Restores params/optimizer from a loaded checkpoint; returns the stored
// epoch. Params must already match the config's shapes.
int64_t restore_checkpoint(const Checkpoint& c, ModelParams& params, AdamPState& st);

}  // namespace percep
