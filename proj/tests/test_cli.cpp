// SPDX-License-Identifier: Apache-2.0
//
// Drives the installed binary as a subprocess and checks the exit-code
// contract: 0 success, 1 usage/config, 2 numeric failure.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "percep/data.hpp"

namespace fs = std::filesystem;
using namespace percep;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(PERCEP_BIN) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult r;
  char buf[4096];
  while (size_t n = fread(buf, 1, sizeof(buf), pipe)) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string sandbox() {
  static std::string dir = [] {
    std::string d = (fs::temp_directory_path() / "percep_cli_test").string();
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string write_config(const std::string& name, const std::string& extra) {
  const std::string path = sandbox() + "/" + name;
  std::ofstream out(path);
  out << "f = 16\nc = 20\nl = 4\nn = 1\nh = 2\n"
      << "lr = 0.002\nepochs = 2\nbatch_size = 2\nckpt_every = 1\n"
      << "synth_items = 4\nsynth_duration_s = 0.05\nseed = 7\n"
      << "out_dir = " << sandbox() << "/run\n"
      << extra;
  return path;
}

size_t count_lines(const std::string& path) {
  std::ifstream in(path);
  size_t n = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

TEST_CASE("missing config file exits 1 and names the path") {
  RunResult r = run("train --config definitely_absent.cfg");
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("definitely_absent.cfg") != std::string::npos);
}

TEST_CASE("train writes metrics rows and checkpoints; resume extends them") {
  const std::string cfg = write_config("train.cfg", "");
  RunResult r = run("train --config " + cfg);
  CHECK(r.exit_code == 0);
  const std::string metrics = sandbox() + "/run/metrics.csv";
  CHECK(count_lines(metrics) == 3);  // header + 2 epochs
  CHECK(fs::exists(sandbox() + "/run/ckpt_last.pcpr"));
  CHECK(fs::exists(sandbox() + "/run/ckpt_1.pcpr"));

  RunResult r2 = run("train --resume " + sandbox() + "/run/ckpt_last.pcpr --epochs 3");
  CHECK(r2.exit_code == 0);
  CHECK(count_lines(metrics) == 4);  // one more epoch appended
}

TEST_CASE("train honors the PERCEP_SEED override") {
  const std::string cfg = write_config("seed.cfg", "out_dir = " + sandbox() + "/seedrun\n");
  RunResult a = run("train --config " + cfg);
  const std::string first = a.output;
  RunResult b = run("train --config " + cfg);
  CHECK(b.output == first);  // same seed, same log
  const std::string env_cmd = "PERCEP_SEED=99 " + std::string(PERCEP_BIN) + " train --config " +
                              cfg + " 2>&1";
  FILE* pipe = popen(env_cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  while (size_t n = fread(buf, 1, sizeof(buf), pipe)) out.append(buf, n);
  pclose(pipe);
  CHECK(out != first);  // different stream, different numbers
}

TEST_CASE("separate produces one file per source, deterministic") {
  const std::string cfg = write_config("sep.cfg", "out_dir = " + sandbox() + "/seprun\n");
  REQUIRE(run("train --config " + cfg).exit_code == 0);
  const std::string ckpt = sandbox() + "/seprun/ckpt_last.pcpr";

  SynthPair p = synth_pair(77, 0.05);
  const std::string mix = sandbox() + "/sep_mix.wav";
  wav_write(mix, p.mixture, 8000);

  const std::string outdir = sandbox() + "/sepout";
  RunResult r = run("separate --ckpt " + ckpt + " --input " + mix + " --out " + outdir);
  CHECK(r.exit_code == 0);
  auto [s1, rate1] = wav_read(outdir + "/source1.wav");
  auto [s2, rate2] = wav_read(outdir + "/source2.wav");
  CHECK(rate1 == 8000);
  CHECK(s1.size() == p.mixture.size());
  CHECK(s2.size() == p.mixture.size());

  const std::string outdir2 = sandbox() + "/sepout2";
  REQUIRE(run("separate --ckpt " + ckpt + " --input " + mix + " --out " + outdir2).exit_code == 0);
  auto [s1b, rate1b] = wav_read(outdir2 + "/source1.wav");
  CHECK(s1b == s1);

  RunResult bad = run("separate --ckpt " + ckpt + " --input no_such.wav --out " + outdir);
  CHECK(bad.exit_code == 1);
}

TEST_CASE("eval walks a manifest and reports per-item and aggregate scores") {
  const std::string cfg = write_config("eval.cfg", "out_dir = " + sandbox() + "/evalrun\n");
  REQUIRE(run("train --config " + cfg).exit_code == 0);
  const std::string ckpt = sandbox() + "/evalrun/ckpt_last.pcpr";

  SynthPair p = synth_pair(88, 0.05);
  const std::string mix = sandbox() + "/eval_mix.wav";
  const std::string r1 = sandbox() + "/eval_r1.wav";
  const std::string r2 = sandbox() + "/eval_r2.wav";
  wav_write(mix, p.mixture, 8000);
  wav_write(r1, p.s1, 8000);
  wav_write(r2, p.s2, 8000);
  const std::string man = sandbox() + "/eval_man.tsv";
  {
    std::ofstream out(man);
    out << mix << "\t" << r1 << "\t" << r2 << "\n";
  }
  const std::string csv = sandbox() + "/eval_scores.csv";
  RunResult r = run("eval --ckpt " + ckpt + " --manifest " + man + " --csv " + csv);
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("mean si_snri") != std::string::npos);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "item,si_snri");

  const std::string empty_man = sandbox() + "/empty.tsv";
  {
    std::ofstream out(empty_man);
    out << "# nothing\n";
  }
  CHECK(run("eval --ckpt " + ckpt + " --manifest " + empty_man).exit_code == 1);
}

TEST_CASE("corrupt checkpoints are a config error, not a crash") {
  const std::string cfg = write_config("corrupt.cfg", "out_dir = " + sandbox() + "/corruptrun\n");
  REQUIRE(run("train --config " + cfg).exit_code == 0);
  const std::string ckpt = sandbox() + "/corruptrun/ckpt_last.pcpr";
  std::string bytes;
  {
    std::ifstream in(ckpt, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  bytes[bytes.size() / 2] ^= 0x10;
  const std::string broken = sandbox() + "/broken.pcpr";
  {
    std::ofstream out(broken, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  RunResult r = run("train --resume " + broken);
  CHECK(r.exit_code == 1);
}

TEST_CASE("an exploding run exits 2") {
  const std::string cfg = write_config("explode.cfg",
                                       "lr = 1e18\nepochs = 6\nout_dir = " + sandbox() +
                                           "/exploderun\n");
  RunResult r = run("train --config " + cfg);
  CHECK(r.exit_code == 2);
}

TEST_CASE("bench prints the scaling table and honors tolerance gates") {
  RunResult r = run("bench --chunks 50,100,200 --latent 8 --feat 32 --heads 2 --csv " +
                    sandbox() + "/bench.csv");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("cross_score") != std::string::npos);
  CHECK(r.output.find("ref_self_score") != std::string::npos);
  std::ifstream in(sandbox() + "/bench.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "C,L,F,H,category,macs");

  RunResult two = run("bench --chunks 50,100");
  CHECK(two.exit_code == 1);  // fewer than three points
}

TEST_CASE("unknown flags and missing subcommands exit 1") {
  CHECK(run("").exit_code == 1);
  CHECK(run("train --nonsense 1").exit_code == 1);
  CHECK(run("frobnicate").exit_code == 1);
}
