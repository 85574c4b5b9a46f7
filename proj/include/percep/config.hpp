// SPDX-License-Identifier: Apache-2.0
//
// Line-oriented `key = value` run configuration: model, optimizer, schedule,
// data source, and bookkeeping. Parse -> render -> parse is idempotent;
// unknown keys are errors.

#pragma once

#include <cstdint>
#include <string>

#include "percep/model.hpp"
#include "percep/training.hpp"

namespace percep {

struct RunConfig {
  ModelConfig model;

  // optimizer + schedule
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double wd = 1e-2;
  double adam_eps = 1e-8;
  double delta = 0.1;
  double clip_norm = 5.0;
  int64_t halving_interval = 64;

  // training loop
  int64_t epochs = 50;
  int64_t batch_size = 4;
  int64_t ckpt_every = 10;  // epochs between periodic checkpoints

  // data: a manifest of WAV files, or (when empty) the synthetic generator
  std::string manifest;
  int64_t synth_items = 200;
  double synth_duration_s = 2.0;
  int64_t sample_rate = 8000;

  uint64_t seed = 1;
  std::string out_dir = "runs";

  AdamPHyper optimizer_hyper() const { return {beta1, beta2, wd, adam_eps, delta}; }
  LrSchedule schedule() const { return {lr, halving_interval}; }
  TrainOptions train_options() const { return {batch_size, clip_norm}; }
};

// Parses config text; lines are `key = value`, full-line `#` comments and
// blank lines are skipped; later assignments win.
RunConfig parse_run_config(const std::string& text);

RunConfig load_run_config(const std::string& path);

// Canonical rendering: fixed key order, shortest round-trip float formatting.
std::string render_run_config(const RunConfig& c);

}  // namespace percep
