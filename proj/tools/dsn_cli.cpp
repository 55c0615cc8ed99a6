// Copyright 2026 The DSN Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// dsn: command-line front end.
//
//   dsn enhance IN(.wav|dir) --out DIR      enhanced audio + gates.csv
//   dsn analyze gates.csv --metrics SIDE    activation.csv + groups.csv
//   dsn maccount                            per-block MAC table
//   dsn bench                               Slim vs MaskedDense timing
//   dsn gradcheck                           policy gradient check
//   dsn selftest                            end-to-end property checks
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 verification failure.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "dsn/dsn.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerify = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string weights;
  std::optional<std::uint64_t> seed;
  std::string mode = "slim";
  std::string gate_override = "policy";
  std::string metrics;
  std::string out;
};

dsn::ModelConfig load_config(const Options& o) {
  dsn::ModelConfig c = o.config.empty() ? dsn::ModelConfig{} : dsn::ModelConfig::load(o.config);
  if (o.seed) c.seed = *o.seed;
  return c;
}

dsn::DsnModel load_model(const Options& o) {
  const dsn::ModelConfig c = load_config(o);
  if (o.weights.empty()) return dsn::DsnModel::build(c);
  return dsn::DsnModel::build(c, dsn::WeightStore::load(o.weights));
}

dsn::ExecMode parse_mode(const std::string& s) {
  if (s == "slim") return dsn::ExecMode::Slim;
  if (s == "masked") return dsn::ExecMode::MaskedDense;
  throw UsageError("--mode must be slim or masked, got " + s);
}

std::optional<double> parse_override(const std::string& s) {
  if (s == "policy") return std::nullopt;
  if (s == "0") return 0.0;
  if (s == "1") return 1.0;
  throw UsageError("--gate-override must be 0, 1 or policy, got " + s);
}

std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DSN_THREADS")) {
    try {
      n = std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      throw UsageError(std::string("DSN_THREADS must be a positive integer, got ") + env);
    }
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

std::string fmt(double v, const char* f = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path ensure_out_dir(const std::string& out) {
  if (out.empty()) throw UsageError("--out is required");
  fs::create_directories(out);
  return fs::path(out);
}

// ---------------------------------------------------------------------------

struct EnhanceJob {
  fs::path input;
  std::string id;
  dsn::GateVector g;
  std::string error;
};

int cmd_enhance(const Options& o, const std::string& input) {
  const dsn::ExecMode mode = parse_mode(o.mode);
  const std::optional<double> ov = parse_override(o.gate_override);
  const fs::path out = ensure_out_dir(o.out);
  std::vector<EnhanceJob> jobs;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.is_regular_file() && e.path().extension() == ".wav") jobs.push_back({e.path(), e.path().stem().string(), {}, {}});
    std::sort(jobs.begin(), jobs.end(), [](const auto& a, const auto& b) { return a.input < b.input; });
    if (jobs.empty()) throw dsn::FormatError("no .wav files in " + input);
  } else if (fs::exists(input)) {
    jobs.push_back({fs::path(input), fs::path(input).stem().string(), {}, {}});
  } else {
    throw dsn::FormatError("input not found: " + input);
  }
  const dsn::DsnModel model = load_model(o);
  const double theta = model.config().theta;

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      EnhanceJob& job = jobs[i];
      try {
        const dsn::AudioBuffer x = dsn::read_wav(job.input);
        std::optional<dsn::GateVector> gv;
        if (ov) gv = dsn::GateVector::constant(dsn::frame_count(x.samples.size()), *ov);
        const dsn::UtteranceResult r = model.forward_utterance(x, mode, gv);
        dsn::write_wav(out / (job.id + ".wav"), r.enhanced);
        job.g = r.g;
      } catch (const std::exception& e) {
        job.error = job.input.string() + ": " + e.what();
      }
    }
  };
  const std::size_t n = worker_count(jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < n; ++i) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  int rc = kExitOk;
  std::ofstream csv(out / "gates.csv");
  csv << "utterance_id,frames,ratio,theta,gate_loss,gates\n";
  for (const auto& job : jobs) {
    if (!job.error.empty()) {
      std::cerr << "error: " << job.error << '\n';
      rc = kExitData;
      continue;
    }
    std::string bits;
    for (double v : job.g.values) bits += v != 0.0 ? '1' : '0';
    const double ratio = dsn::activation_ratio(job.g);
    csv << job.id << ',' << job.g.size() << ',' << fmt(ratio) << ',' << fmt(theta) << ','
        << fmt(dsn::gate_loss(job.g, theta)) << ',' << bits << '\n';
    std::cout << job.id << ": frames=" << job.g.size() << " ratio=" << fmt(ratio, "%.4f") << '\n';
  }
  return rc;
}

// ---------------------------------------------------------------------------

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int cmd_analyze(const Options& o, const std::string& gates_csv, std::optional<double> bin_width) {
  if (o.metrics.empty()) throw UsageError("--metrics is required");
  const fs::path out = ensure_out_dir(o.out);
  std::ifstream gin(gates_csv);
  if (!gin) throw dsn::FormatError("cannot open " + gates_csv);
  std::string line;
  std::getline(gin, line);
  std::vector<dsn::UtteranceGates> items;
  std::size_t lineno = 1;
  while (std::getline(gin, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 6) throw dsn::FormatError(gates_csv + ":" + std::to_string(lineno) + ": expected 6 columns");
    dsn::GateVector g{{}, dsn::GateMode::Hard};
    for (char c : cells[5]) {
      if (c != '0' && c != '1') throw dsn::FormatError(gates_csv + ":" + std::to_string(lineno) + ": bad gate string");
      g.values.push_back(c == '1' ? 1.0 : 0.0);
    }
    items.push_back({cells[0], std::move(g), ""});
  }

  // Sidecar rows are `utterance_id<TAB>key` or `utterance_id,key`; an
  // optional header row starts with "utterance_id".
  std::ifstream min(o.metrics);
  if (!min) throw dsn::FormatError("cannot open " + o.metrics);
  std::map<std::string, std::string> keys;
  while (std::getline(min, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t sep = line.find_first_of("\t,");
    if (sep == std::string::npos) throw dsn::FormatError(o.metrics + ": expected utterance_id and key per row");
    const std::string id = line.substr(0, sep);
    if (id == "utterance_id") continue;
    keys[id] = line.substr(sep + 1);
  }
  std::vector<std::string> missing;
  for (auto& it : items) {
    auto k = keys.find(it.utterance_id);
    if (k == keys.end()) {
      missing.push_back(it.utterance_id);
      continue;
    }
    it.key = bin_width ? dsn::bucket_key(k->second, *bin_width) : k->second;
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw dsn::FormatError("metrics sidecar has no rows for: " + list);
  }
  const dsn::ActivationReport r = dsn::activation_report(items);
  std::ofstream a(out / "activation.csv");
  dsn::write_activation_csv(a, r);
  std::ofstream gcsv(out / "groups.csv");
  dsn::write_groups_csv(gcsv, r);
  dsn::write_groups_csv(std::cout, r);
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_maccount(const Options& o) {
  const dsn::ModelConfig c = load_config(o);
  const dsn::MacReport r = dsn::count_macs(c);
  std::printf("%-10s %12s %12s %14s %8s\n", "block", "static/frm", "dynamic/frm", "delta MAC/s", "pct");
  for (const auto& b : r.blocks)
    std::printf("%-10s %12llu %12llu %14.0f %7.2f%%\n", b.name.c_str(),
                static_cast<unsigned long long>(b.static_per_frame),
                static_cast<unsigned long long>(b.dynamic_per_frame), b.delta_macs_s, b.pct);
  std::printf("\nmodule deltas (F rows per frequency transformer):\n");
  for (const auto& m : r.modules)
    std::printf("  %-8s %8.2f M MAC/s  %6.2f%%\n", m.name.c_str(), m.delta_macs_s / 1e6, m.pct);
  std::printf("\nzero activation %.2f M MAC/s\n", r.zero_activation_macs_s / 1e6);
  std::printf("50%% activation  %.2f M MAC/s\n", dsn::effective_macs(r, 0.5) / 1e6);
  std::printf("full activation %.2f M MAC/s\n", r.full_activation_macs_s / 1e6);
  if (!o.out.empty()) {
    std::ofstream csv(ensure_out_dir(o.out) / "macs.csv");
    dsn::write_macs_csv(csv, r);
  }
  return kExitOk;
}

int cmd_bench(const Options& o, double seconds, std::size_t repeats) {
  const dsn::DsnModel model = load_model(o);
  const auto rows = dsn::bench(model, seconds, {dsn::ExecMode::Slim, dsn::ExecMode::MaskedDense},
                               {dsn::GateSetting::Zero, dsn::GateSetting::One, dsn::GateSetting::Policy}, repeats,
                               model.config().seed);
  const dsn::MacReport rep = dsn::count_macs(model.config());
  std::printf("%-7s %-7s %10s %14s %8s %16s\n", "mode", "gate", "median_s", "realized_MACs", "ratio", "effective_MAC/s");
  std::ostringstream csv;
  csv << "mode,gate,median_seconds,realized_macs,ratio\n";
  for (const auto& r : rows) {
    const std::string mode(dsn::to_string(r.mode));
    std::printf("%-7s %-7s %10.4f %14llu %8.3f %16.0f\n", mode.c_str(), dsn::to_string(r.gate).c_str(),
                r.median_seconds, static_cast<unsigned long long>(r.realized_macs), r.activation_ratio,
                dsn::effective_macs(rep, r.activation_ratio));
    csv << mode << ',' << dsn::to_string(r.gate) << ',' << fmt(r.median_seconds) << ',' << r.realized_macs << ','
        << fmt(r.activation_ratio) << '\n';
  }
  if (!o.out.empty()) std::ofstream(ensure_out_dir(o.out) / "bench.csv") << csv.str();
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t seeds) {
  double worst = 0.0;
  for (std::size_t i = 0; i < seeds; ++i) {
    const auto r = dsn::verify::gradcheck_seed(seed + i);
    worst = std::max(worst, r.max_rel_error);
  }
  const bool ok = worst <= 1e-6;
  std::printf("gradcheck seeds=%zu step=%g max_rel_err=%.3e %s\n", seeds, dsn::verify::kGradStep, worst,
              ok ? "ok" : "FAILED");
  return ok ? kExitOk : kExitVerify;
}

int cmd_selftest(std::uint64_t seed) {
  bool ok = true;
  for (const auto& c : dsn::verify::selftest(seed)) {
    std::printf("%-22s %s  %s\n", c.name.c_str(), c.passed ? "ok" : "FAILED", c.detail.c_str());
    ok = ok && c.passed;
  }
  return ok ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic slimmable speech enhancement"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Model / check seed");
  app.add_option("--config", o.config, "JSON model configuration");
  app.add_option("--weights", o.weights, "Weight file stem (<stem>.json + <stem>.bin)");
  app.add_option("--mode", o.mode, "slim | masked")->check(CLI::IsMember({"slim", "masked"}));
  app.add_option("--gate-override", o.gate_override, "0 | 1 | policy")->check(CLI::IsMember({"0", "1", "policy"}));
  app.add_option("--metrics", o.metrics, "Sidecar: utterance_id<TAB>key per row");
  app.add_option("--out", o.out, "Output directory");
  app.fallthrough();

  std::string input;
  auto* enhance = app.add_subcommand("enhance", "Enhance a WAV file or every WAV in a directory");
  enhance->add_option("input", input, "Input .wav or directory")->required();

  std::string gates_csv;
  std::optional<double> bin_width;
  auto* analyze = app.add_subcommand("analyze", "Activation-ratio statistics from gates.csv");
  analyze->add_option("gates", gates_csv, "gates.csv written by enhance")->required();
  analyze->add_option("--bin-width", bin_width, "Bucket numeric keys to this width");

  auto* maccount = app.add_subcommand("maccount", "Per-block MAC accounting");

  double seconds = 2.0;
  std::size_t repeats = 5;
  auto* bench = app.add_subcommand("bench", "Wall-clock benchmark");
  bench->add_option("--seconds", seconds, "Seconds of audio")->check(CLI::PositiveNumber);
  bench->add_option("--repeats", repeats, "Runs per setting (median reported)")->check(CLI::PositiveNumber);

  std::size_t seeds = 100;
  auto* gradcheck = app.add_subcommand("gradcheck", "Policy gradients vs finite differences");
  gradcheck->add_option("--seeds", seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);

  auto* selftest = app.add_subcommand("selftest", "Slimming, causality and streaming checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }
  if (*seed_opt) o.seed = seed_value;

  try {
    if (*enhance) return cmd_enhance(o, input);
    if (*analyze) return cmd_analyze(o, gates_csv, bin_width);
    if (*maccount) return cmd_maccount(o);
    if (*bench) return cmd_bench(o, seconds, repeats);
    if (*gradcheck) return cmd_gradcheck(o.seed.value_or(7), seeds);
    if (*selftest) return cmd_selftest(o.seed.value_or(0));
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
