// SPDX-License-Identifier: Apache-2.0

#include "percep/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace percep {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || ptr != last) {
    throw InvalidConfig("config key '" + key + "': cannot parse '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw InvalidConfig("config key '" + key + "': expected true/false, got '" + value + "'");
}

Overlap parse_overlap(const std::string& key, const std::string& value) {
  if (value == "none") return Overlap::none;
  if (value == "half") return Overlap::half;
  throw InvalidConfig("config key '" + key + "': expected none/half, got '" + value + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void apply_key(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "f") c.model.f = parse_number<int64_t>(key, value);
  else if (key == "k") c.model.k = parse_number<int64_t>(key, value);
  else if (key == "stride") c.model.stride = parse_number<int64_t>(key, value);
  else if (key == "padding") c.model.padding = parse_number<int64_t>(key, value);
  else if (key == "c") c.model.c = parse_number<int64_t>(key, value);
  else if (key == "overlap") c.model.overlap = parse_overlap(key, value);
  else if (key == "l") c.model.l = parse_number<int64_t>(key, value);
  else if (key == "n") c.model.n = parse_number<int64_t>(key, value);
  else if (key == "h") c.model.h = parse_number<int64_t>(key, value);
  else if (key == "n_lat") c.model.n_lat = parse_number<int64_t>(key, value);
  else if (key == "n_perc") c.model.n_perc = parse_number<int64_t>(key, value);
  else if (key == "n_s") c.model.n_s = parse_number<int64_t>(key, value);
  else if (key == "d_ff") c.model.d_ff = parse_number<int64_t>(key, value);
  else if (key == "mask_ffw_width") c.model.mask_ffw_width = parse_number<int64_t>(key, value);
  else if (key == "share_block_weights") c.model.share_block_weights = parse_bool(key, value);
  else if (key == "lr") c.lr = parse_number<double>(key, value);
  else if (key == "beta1") c.beta1 = parse_number<double>(key, value);
  else if (key == "beta2") c.beta2 = parse_number<double>(key, value);
  else if (key == "wd") c.wd = parse_number<double>(key, value);
  else if (key == "adam_eps") c.adam_eps = parse_number<double>(key, value);
  else if (key == "delta") c.delta = parse_number<double>(key, value);
  else if (key == "clip_norm") c.clip_norm = parse_number<double>(key, value);
  else if (key == "halving_interval") c.halving_interval = parse_number<int64_t>(key, value);
  else if (key == "epochs") c.epochs = parse_number<int64_t>(key, value);
  else if (key == "batch_size") c.batch_size = parse_number<int64_t>(key, value);
  else if (key == "ckpt_every") c.ckpt_every = parse_number<int64_t>(key, value);
  else if (key == "manifest") c.manifest = value;
  else if (key == "synth_items") c.synth_items = parse_number<int64_t>(key, value);
  else if (key == "synth_duration_s") c.synth_duration_s = parse_number<double>(key, value);
  else if (key == "sample_rate") c.sample_rate = parse_number<int64_t>(key, value);
  else if (key == "seed") c.seed = parse_number<uint64_t>(key, value);
  else if (key == "out_dir") c.out_dir = value;
  else throw InvalidConfig("unknown config key '" + key + "'");
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw InvalidConfig("config line " + std::to_string(line_no) + ": expected key = value");
    }
    apply_key(c, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

std::string render_run_config(const RunConfig& c) {
  std::ostringstream os;
  os << "# model\n";
  os << "f = " << c.model.f << "\n";
  os << "k = " << c.model.k << "\n";
  os << "stride = " << c.model.stride << "\n";
  os << "padding = " << c.model.padding << "\n";
  os << "c = " << c.model.c << "\n";
  os << "overlap = " << (c.model.overlap == Overlap::half ? "half" : "none") << "\n";
  os << "l = " << c.model.l << "\n";
  os << "n = " << c.model.n << "\n";
  os << "h = " << c.model.h << "\n";
  os << "n_lat = " << c.model.n_lat << "\n";
  os << "n_perc = " << c.model.n_perc << "\n";
  os << "n_s = " << c.model.n_s << "\n";
  os << "d_ff = " << c.model.d_ff << "\n";
  os << "mask_ffw_width = " << c.model.mask_ffw_width << "\n";
  os << "share_block_weights = " << (c.model.share_block_weights ? "true" : "false") << "\n";
  os << "# optimizer\n";
  os << "lr = " << fmt_double(c.lr) << "\n";
  os << "beta1 = " << fmt_double(c.beta1) << "\n";
  os << "beta2 = " << fmt_double(c.beta2) << "\n";
  os << "wd = " << fmt_double(c.wd) << "\n";
  os << "adam_eps = " << fmt_double(c.adam_eps) << "\n";
  os << "delta = " << fmt_double(c.delta) << "\n";
  os << "clip_norm = " << fmt_double(c.clip_norm) << "\n";
  os << "halving_interval = " << c.halving_interval << "\n";
  os << "# training\n";
  os << "epochs = " << c.epochs << "\n";
  os << "batch_size = " << c.batch_size << "\n";
  os << "ckpt_every = " << c.ckpt_every << "\n";
  os << "# data\n";
  os << "manifest = " << c.manifest << "\n";
  os << "synth_items = " << c.synth_items << "\n";
  os << "synth_duration_s = " << fmt_double(c.synth_duration_s) << "\n";
  os << "sample_rate = " << c.sample_rate << "\n";
  os << "# run\n";
  os << "seed = " << c.seed << "\n";
  os << "out_dir = " << c.out_dir << "\n";
  return os.str();
}

}  // namespace percep
