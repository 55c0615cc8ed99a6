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

// Property checks shared by the command-line self-test and the test suites.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dsn/model.hpp"
#include "dsn/policy.hpp"

namespace dsn::verify {

inline AudioBuffer random_noise(std::size_t samples, std::uint64_t seed, double amplitude = 0.5) {
  SeededRng rng(seed);
  AudioBuffer a;
  a.samples.resize(samples);
  for (double& v : a.samples) v = rng.uniform(-amplitude, amplitude);
  return a;
}

inline GateVector random_binary_gates(std::size_t frames, std::uint64_t seed, double p = 0.5) {
  SeededRng rng(seed);
  GateVector g{std::vector<double>(frames), GateMode::Hard};
  for (double& v : g.values) v = rng.bernoulli(p) ? 1.0 : 0.0;
  return g;
}

/// max |a - b| / max |b|.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / den;
}

// ---------------------------------------------------------------------------
// Policy gradient check

/// Denominator floor of the gradient relative error; entries whose true
/// gradient is below it are compared in absolute terms.
inline constexpr double kGradRelFloor = 1e-6;
inline constexpr double kGradStep = 1e-5;

inline double gate_loss_from_features(const Tensor& feats, const PolicyParams& p, const Tensor& noise,
                                      const GatingLossConfig& cfg) {
  return gate_loss(gumbel_softmax(policy_logits(p, feats), p.tau, GateMode::Soft, noise), cfg, std::nullopt);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t parameters = 0;
  double theta = 0.0;
  double activation = 0.0;
};

/// Analytic policy gradient against central differences for one seeded
/// problem. theta sits at half the mean soft gate so the hinge is active.
inline GradCheckResult gradcheck_seed(std::uint64_t seed, std::size_t frames = 20, std::size_t bins = 65,
                                      std::size_t channels = 32) {
  SeededRng rng(seed);
  Tensor enc({frames, bins, channels});
  for (double& v : enc.vec()) v = std::max(0.0, rng.normal());
  PolicyParams p = PolicyParams::init(rng, channels);
  for (double& v : p.fc1_b.vec()) v = rng.uniform(-0.1, 0.1);
  for (double& v : p.fc2_b.vec()) v = rng.uniform(-0.1, 0.1);
  const Tensor noise = sample_gumbel_noise(rng, frames);

  const Tensor feats = policy_features(enc, channels);
  const double ratio = activation_ratio(gumbel_softmax(policy_logits(p, feats), p.tau, GateMode::Soft, noise));
  GatingLossConfig cfg;
  cfg.theta = 0.5 * ratio;
  const PolicyGrads g = policy_grad(enc, p, noise, cfg);

  GradCheckResult r{0.0, 0, cfg.theta, ratio};
  auto check = [&](Tensor& param, const Tensor& analytic) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double saved = param[i];
      param[i] = saved + kGradStep;
      const double up = gate_loss_from_features(feats, p, noise, cfg);
      param[i] = saved - kGradStep;
      const double down = gate_loss_from_features(feats, p, noise, cfg);
      param[i] = saved;
      const double numeric = (up - down) / (2.0 * kGradStep);
      const double den = std::max({std::abs(numeric), std::abs(analytic[i]), kGradRelFloor});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(numeric - analytic[i]) / den);
      ++r.parameters;
    }
  };
  check(p.fc1_w, g.fc1_w);
  check(p.fc1_b, g.fc1_b);
  check(p.fc2_w, g.fc2_w);
  check(p.fc2_b, g.fc2_b);
  return r;
}

// ---------------------------------------------------------------------------
// End-to-end properties

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Slim vs MaskedDense relative waveform error under the given gates.
inline double slimming_error(const DsnModel& m, const AudioBuffer& x, const GateVector& g) {
  const auto slim = m.forward_utterance(x, ExecMode::Slim, g);
  const auto dense = m.forward_utterance(x, ExecMode::MaskedDense, g);
  return relative_error(slim.enhanced.samples, dense.enhanced.samples);
}

/// Perturbs every sample from `n` on and reports whether output samples
/// [0, n - 511) and the masks/gates of frames ending before n are unchanged.
inline bool causal_prefix_unchanged(const DsnModel& m, const AudioBuffer& x, std::size_t n, std::uint64_t seed) {
  AudioBuffer y = x;
  SeededRng rng(seed);
  for (std::size_t i = n; i < y.samples.size(); ++i) y.samples[i] = rng.uniform(-0.9, 0.9);
  const auto a = m.forward_utterance(x, ExecMode::Slim);
  const auto b = m.forward_utterance(y, ExecMode::Slim);
  const std::size_t win = m.config().fft_size, hop = m.config().hop;
  for (std::size_t s = 0; s + win - 1 < n && s < a.enhanced.samples.size(); ++s)
    if (a.enhanced.samples[s] != b.enhanced.samples[s]) return false;
  for (std::size_t t = 0; t < a.g.size() && t * hop + win <= n; ++t) {
    if (a.g[t] != b.g[t]) return false;
    if (!std::equal(a.mask.row(t).begin(), a.mask.row(t).end(), b.mask.row(t).begin())) return false;
  }
  return true;
}

/// Max abs difference between streamed and offline output over the samples
/// the stream completes.
inline double streaming_error(const DsnModel& m, const AudioBuffer& x, ExecMode mode = ExecMode::Slim) {
  const auto offline = m.forward_utterance(x, mode);
  StreamState st = m.make_state();
  const std::size_t win = m.config().fft_size, hop = m.config().hop;
  const std::size_t frames = frame_count(x.samples.size(), win, hop);
  double err = 0.0;
  for (std::size_t t = 0; t < frames; ++t) {
    const auto r = m.forward_streaming(std::span<const double>(x.samples).subspan(t * hop, win), st, mode);
    if (r.g != offline.g[t]) return std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < hop; ++i)
      err = std::max(err, std::abs(r.samples[i] - offline.enhanced.samples[t * hop + i]));
  }
  return err;
}

/// Every gate a dynamic block consumed equals the returned g of its frame.
inline bool gates_global(const DsnModel& m, const AudioBuffer& x, ExecMode mode) {
  GateTrace trace;
  const auto r = m.forward_utterance(x, mode, std::nullopt, nullptr, &trace);
  if (trace.entries.empty()) return false;
  for (const auto& e : trace.entries)
    if (e.frame >= r.g.size() || e.gate != r.g[e.frame]) return false;
  return true;
}

inline std::vector<CheckResult> selftest(std::uint64_t seed = 0, std::size_t seeds = 3) {
  std::vector<CheckResult> out;
  const ModelConfig cfg;
  double worst = 0.0;
  for (std::size_t i = 0; i < seeds; ++i) {
    const DsnModel m = DsnModel::build(cfg, seed + i);
    const AudioBuffer x = random_noise(kSampleRate / 2, seed + 100 + i);
    const GateVector g = random_binary_gates(frame_count(x.samples.size()), seed + 200 + i);
    worst = std::max(worst, slimming_error(m, x, g));
  }
  out.push_back({"slimming_equivalence", worst <= 1e-12, "max rel err " + std::to_string(worst)});

  const DsnModel m = DsnModel::build(cfg, seed);
  const AudioBuffer x = random_noise(kSampleRate, seed + 300);
  const bool causal = causal_prefix_unchanged(m, x, 9000, seed + 301);
  out.push_back({"causality", causal, causal ? "prefix unchanged" : "prefix changed"});

  const double s = streaming_error(m, x);
  out.push_back({"streaming_vs_offline", s <= 1e-9, "max abs diff " + std::to_string(s)});

  const bool global = gates_global(m, x, ExecMode::Slim);
  out.push_back({"gate_globality", global, global ? "all blocks used g" : "mismatched gate"});
  return out;
}

}  // namespace dsn::verify
