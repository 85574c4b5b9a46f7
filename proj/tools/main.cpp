// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train / separate / eval / bench.
// Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "percep/config.hpp"
#include "percep/data.hpp"
#include "percep/model.hpp"
#include "percep/objectives.hpp"
#include "percep/training.hpp"

namespace fs = std::filesystem;
using namespace percep;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;

uint64_t apply_seed_override(uint64_t seed) {
  const char* env = std::getenv("PERCEP_SEED");
  if (!env || !*env) return seed;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0') {
    throw InvalidConfig("PERCEP_SEED must be an unsigned integer, got '" + std::string(env) + "'");
  }
  return static_cast<uint64_t>(v);
}

std::vector<Utterance> load_dataset(const RunConfig& rc) {
  if (rc.manifest.empty()) {
    if (rc.synth_items < 1) throw InvalidConfig("synth_items must be >= 1");
    return synth_dataset(rc.seed, static_cast<size_t>(rc.synth_items), rc.synth_duration_s,
                         static_cast<int>(rc.sample_rate));
  }
  std::vector<Utterance> items;
  for (const ManifestEntry& e : parse_manifest(rc.manifest)) {
    Utterance u;
    u.mix = wav_read(e.mix).first;
    for (const std::string& r : e.refs) {
      u.refs.push_back(wav_read(r).first);
      if (u.refs.back().size() != u.mix.size()) {
        throw LengthMismatch("manifest item " + e.mix + ": reference " + r +
                             " length differs from mixture");
      }
    }
    items.push_back(std::move(u));
  }
  return items;
}

Tensor to_tensor(const std::vector<float>& wave) {
  return Tensor::from_values({1, static_cast<int64_t>(wave.size())},
                             std::vector<float>(wave.begin(), wave.end()));
}

struct LoadedModel {
  RunConfig rc;
  ModelParams params;
  AdamPState opt;
  int64_t epoch = 0;
};

LoadedModel load_model(const std::string& ckpt_path) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  LoadedModel lm;
  lm.rc = parse_run_config(ck.config_text);
  lm.rc.model.validate();
  lm.params = init_params<float>(lm.rc.model, lm.rc.seed);
  lm.opt.hp = lm.rc.optimizer_hyper();
  lm.epoch = restore_checkpoint(ck, lm.params, lm.opt);
  return lm;
}

int cmd_train(const std::string& config_path, int64_t epochs_override,
              const std::string& resume_path) {
  RunConfig rc;
  int64_t start_epoch = 0;
  ModelParams params;
  AdamPState opt;
  if (resume_path.empty()) {
    rc = load_run_config(config_path);
    rc.seed = apply_seed_override(rc.seed);
    rc.model.validate();
    params = init_params<float>(rc.model, rc.seed);
    opt.hp = rc.optimizer_hyper();
  } else {
    LoadedModel lm = load_model(resume_path);
    rc = lm.rc;
    params = lm.params;
    opt = lm.opt;
    start_epoch = lm.epoch;
  }
  if (epochs_override > 0) rc.epochs = epochs_override;
  if (start_epoch >= rc.epochs) {
    std::fprintf(stderr, "nothing to do: checkpoint already at epoch %lld of %lld\n",
                 static_cast<long long>(start_epoch), static_cast<long long>(rc.epochs));
    return kExitOk;
  }

  const std::vector<Utterance> data = load_dataset(rc);
  const LrSchedule sched = rc.schedule();
  const TrainOptions opts = rc.train_options();
  const std::string config_text = render_run_config(rc);

  fs::create_directories(rc.out_dir);
  const std::string metrics_path = rc.out_dir + "/metrics.csv";
  std::ofstream metrics(metrics_path, start_epoch > 0 ? std::ios::app : std::ios::trunc);
  if (!metrics) throw IoError("cannot open " + metrics_path + " for writing");
  if (start_epoch == 0) metrics << "epoch,lr,loss,si_snri\n";

  for (int64_t epoch = start_epoch; epoch < rc.epochs; ++epoch) {
    const EpochMetrics em = train_epoch(params, rc.model, data, opt, sched, epoch, rc.seed, opts);
    char row[160];
    std::snprintf(row, sizeof(row), "%lld,%.8g,%.6f,%.6f\n", static_cast<long long>(epoch),
                  lr_at(sched, epoch), em.mean_loss, em.mean_si_snri);
    metrics << row;
    metrics.flush();
    std::printf("epoch %lld: loss %.4f, si_snri %.2f dB\n", static_cast<long long>(epoch),
                em.mean_loss, em.mean_si_snri);
    std::fflush(stdout);
    Checkpoint ck = make_checkpoint(config_text, params, opt, epoch + 1);
    save_checkpoint(rc.out_dir + "/ckpt_last.pcpr", ck);
    if (rc.ckpt_every > 0 && (epoch + 1) % rc.ckpt_every == 0) {
      save_checkpoint(rc.out_dir + "/ckpt_" + std::to_string(epoch + 1) + ".pcpr", ck);
    }
  }
  return kExitOk;
}

int cmd_separate(const std::string& ckpt_path, const std::string& input_path,
                 const std::string& out_dir) {
  LoadedModel lm = load_model(ckpt_path);
  auto [wave, rate] = wav_read(input_path);
  if (wave.empty()) throw UnsupportedFormat(input_path + ": empty data chunk");
  const std::vector<Tensor> outs = forward(to_tensor(wave), lm.params, lm.rc.model);
  fs::create_directories(out_dir);
  for (size_t k = 0; k < outs.size(); ++k) {
    const std::string path = out_dir + "/source" + std::to_string(k + 1) + ".wav";
    wav_write(path, outs[k].values(), rate);
    std::printf("%s\n", path.c_str());
  }
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& manifest_path,
             const std::string& csv_path) {
  LoadedModel lm = load_model(ckpt_path);
  const std::vector<ManifestEntry> entries = parse_manifest(manifest_path);
  if (entries.empty()) {
    std::fprintf(stderr, "error: manifest %s has no items\n", manifest_path.c_str());
    return kExitConfig;
  }
  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path, std::ios::trunc);
    if (!csv) throw IoError("cannot open " + csv_path + " for writing");
    csv << "item,si_snri\n";
  }
  std::vector<double> scores;
  for (size_t i = 0; i < entries.size(); ++i) {
    const ManifestEntry& e = entries[i];
    Tensor mix = to_tensor(wav_read(e.mix).first);
    std::vector<Tensor> refs;
    for (const std::string& r : e.refs) refs.push_back(to_tensor(wav_read(r).first));
    const std::vector<Tensor> ests = forward(mix, lm.params, lm.rc.model);
    if (ests.size() != refs.size()) {
      throw ShapeMismatch("manifest item " + e.mix + " has " + std::to_string(refs.size()) +
                          " references but the model separates " + std::to_string(ests.size()));
    }
    const double score = mean_si_snri(ests, refs, mix).first;
    scores.push_back(score);
    std::printf("item %zu %s: si_snri %.3f dB\n", i, e.mix.c_str(), score);
    if (csv.is_open()) csv << i << "," << score << "\n";
  }
  double sum = 0.0;
  for (double s : scores) sum += s;
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  const size_t n = sorted.size();
  const double median = (n % 2 == 1) ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::printf("mean si_snri %.3f dB, median %.3f dB over %zu items\n",
              sum / static_cast<double>(n), median, n);
  return kExitOk;
}

int cmd_bench(const std::string& chunks_csv, int64_t latent, int64_t feat, int64_t heads,
              const std::string& csv_path) {
  std::vector<ProbeConfig> configs;
  std::stringstream ss(chunks_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    configs.push_back({std::stoll(tok), latent, feat, heads});
  }
  const ProbeResult res = complexity_probe(configs);
  std::printf("%s", res.table().c_str());
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw IoError("cannot open " + csv_path + " for writing");
    csv << res.csv();
  }
  const bool linear_ok = std::abs(res.cross_score_exp - 1.0) <= 0.05 &&
                         std::abs(res.cross_mix_exp - 1.0) <= 0.05 &&
                         std::abs(res.kv_projection_exp - 1.0) <= 0.05;
  const bool quad_ok = std::abs(res.ref_score_exp - 2.0) <= 0.05;
  if (!linear_ok || !quad_ok) {
    std::fprintf(stderr, "error: fitted exponents outside tolerance\n");
    return kExitNumeric;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-bottleneck speech separator"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "Train a model from a config file");
  std::string config_path;
  int64_t epochs_override = -1;
  std::string resume_path;
  train->add_option("--config", config_path, "Run configuration file");
  train->add_option("--epochs", epochs_override, "Override the configured epoch count");
  train->add_option("--resume", resume_path, "Resume from a checkpoint");

  auto* separate = app.add_subcommand("separate", "Separate one WAV into per-source files");
  std::string ckpt_path, input_path, sep_out_dir;
  separate->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  separate->add_option("--input", input_path, "Input mixture WAV")->required();
  separate->add_option("--out", sep_out_dir, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate SI-SNR improvement over a manifest");
  std::string eval_ckpt, manifest_path, eval_csv;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--manifest", manifest_path, "Manifest: mix TAB ref1 TAB ref2 per line")
      ->required();
  eval->add_option("--csv", eval_csv, "Optional per-item CSV output path");

  auto* bench = app.add_subcommand("bench", "Attention cost scaling probe");
  std::string chunks_csv = "125,250,500,1000";
  int64_t bench_latent = 32, bench_feat = 256, bench_heads = 16;
  std::string bench_csv;
  bench->add_option("--chunks", chunks_csv, "Comma-separated chunk lengths (>= 3)");
  bench->add_option("--latent", bench_latent, "Latent rows");
  bench->add_option("--feat", bench_feat, "Feature width");
  bench->add_option("--heads", bench_heads, "Attention heads");
  bench->add_option("--csv", bench_csv, "Optional CSV output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) {
      if (config_path.empty() && resume_path.empty()) {
        std::fprintf(stderr, "error: train needs --config or --resume\n");
        return kExitConfig;
      }
      return cmd_train(config_path, epochs_override, resume_path);
    }
    if (separate->parsed()) return cmd_separate(ckpt_path, input_path, sep_out_dir);
    if (eval->parsed()) return cmd_eval(eval_ckpt, manifest_path, eval_csv);
    if (bench->parsed()) return cmd_bench(chunks_csv, bench_latent, bench_feat, bench_heads, bench_csv);
  } catch (const InvalidConfig& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitConfig;
  } catch (const UnsupportedFormat& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kExitConfig;
  } catch (const FormatVersionMismatch& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kExitConfig;
  } catch (const CorruptChecksum& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kExitConfig;
  } catch (const TooFewItems& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  }
  return kExitConfig;
}
