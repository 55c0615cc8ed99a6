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

// Compute accounting. MACs are counted from the configuration alone:
// one per multiply-accumulate in matmuls, convolutions, GRU gate matmuls and
// attention score/value products. Biases, activations, softmax and other
// elementwise work are not counted.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsn/exec.hpp"
#include "dsn/model.hpp"
#include "dsn/policy.hpp"

namespace dsn {

namespace detail {

struct Split {
  std::uint64_t s = 0, d = 0;
};

inline Split dyn_linear_macs(std::uint64_t in_s, std::uint64_t in_d, std::uint64_t out_s, std::uint64_t out_d) {
  return {out_s * in_s, out_s * in_d + out_d * in_s + out_d * in_d};
}

/// One attention block over `len` keys for each of `bins` queries.
inline Split mha_macs(const ModelConfig& c, std::uint64_t bins, std::uint64_t len) {
  const ChannelSplit cs = c.channel_split();
  const HeadSplit hs = c.head_split();
  const Split proj = dyn_linear_macs(cs.static_channels(), cs.dynamic_channels(), hs.static_dim(), hs.dynamic_dim());
  const Split out = dyn_linear_macs(hs.static_dim(), hs.dynamic_dim(), cs.static_channels(), cs.dynamic_channels());
  const std::uint64_t per_head = 2 * len * hs.head_dim();
  Split r;
  r.s = bins * (3 * proj.s + out.s + (hs.heads - hs.dynamic_heads) * per_head);
  r.d = bins * (3 * proj.d + out.d + hs.dynamic_heads * per_head);
  return r;
}

inline Split freq_gru_macs(const ModelConfig& c, std::uint64_t bins) {
  const ChannelSplit cs = c.channel_split();
  const std::uint64_t w = cs.group_width();
  const std::uint64_t group = 2 * (3 * w * w + 3 * w * w);
  const Split mix = dyn_linear_macs(2 * w * cs.static_groups(), 2 * w * cs.dynamic_groups, cs.static_channels(),
                                    cs.dynamic_channels());
  return {bins * (cs.static_groups() * group + mix.s), bins * (cs.dynamic_groups * group + mix.d)};
}

inline Split time_gru_macs(const ModelConfig& c, std::uint64_t bins) {
  const ChannelSplit cs = c.channel_split();
  const std::uint64_t w = cs.group_width();
  const std::uint64_t half = 3 * w * w;
  const Split mix =
      dyn_linear_macs(w * cs.static_groups(), w * cs.dynamic_groups, cs.static_channels(), cs.dynamic_channels());
  return {bins * (cs.groups * half + cs.static_groups() * half + mix.s), bins * (cs.dynamic_groups * half + mix.d)};
}

inline std::uint64_t conv_macs(std::uint64_t out_bins, std::uint64_t cin, std::uint64_t cout) {
  return out_bins * cout * kKernelTime * kKernelFreq * cin;
}
inline std::uint64_t deconv_macs(std::uint64_t in_bins, std::uint64_t cin, std::uint64_t cout) {
  return in_bins * cin * cout * kKernelTime * kKernelFreq;
}

}  // namespace detail

/// Static and dynamic MACs of one frame whose time attention sees `ctx_len`
/// frames. Dynamic work is included in `dynamic_macs`.
inline MacCounter frame_macs(const ModelConfig& c, std::size_t ctx_len) {
  c.validate();
  const auto& ch = c.channels;
  const std::uint64_t f1 = c.bins(1), f2 = c.bins(2), f3 = c.bins(3);
  const std::uint64_t layers = c.layers_per_transformer;
  MacCounter m;
  auto set = [&m](BlockId b, std::uint64_t s, std::uint64_t d) {
    m.static_macs[static_cast<std::size_t>(b)] = s;
    m.dynamic_macs[static_cast<std::size_t>(b)] = d;
  };
  set(BlockId::Conv1, detail::conv_macs(f1, 1, ch[0]), 0);
  set(BlockId::Conv2, detail::conv_macs(f2, ch[0], ch[1]), 0);
  set(BlockId::Policy, kPolicyHidden * 2 * ch[1] + kPolicyClasses * kPolicyHidden, 0);
  const std::uint64_t c3 = detail::conv_macs(f3, ch[1], ch[2]);
  set(BlockId::Conv3, c3, c.dynamic_conv ? c3 : 0);
  const detail::Split fm = detail::mha_macs(c, f3, f3);
  const detail::Split fg = detail::freq_gru_macs(c, f3);
  const detail::Split tm = detail::mha_macs(c, f3, ctx_len);
  const detail::Split tg = detail::time_gru_macs(c, f3);
  set(BlockId::FMha0, layers * fm.s, layers * fm.d);
  set(BlockId::FGru0, layers * fg.s, layers * fg.d);
  set(BlockId::TMha, layers * tm.s, layers * tm.d);
  set(BlockId::TGru, layers * tg.s, layers * tg.d);
  set(BlockId::FMha1, layers * fm.s, layers * fm.d);
  set(BlockId::FGru1, layers * fg.s, layers * fg.d);
  const std::uint64_t d3 = detail::deconv_macs(f3, ch[2], ch[1]);
  set(BlockId::Deconv3, d3, c.dynamic_conv ? d3 : 0);
  set(BlockId::Deconv2, detail::deconv_macs(f2, 2 * ch[1], ch[0]), 0);
  set(BlockId::Deconv1, detail::deconv_macs(f1, 2 * ch[0], 1), 0);
  return m;
}

struct BlockMacs {
  std::string name;
  std::uint64_t static_per_frame = 0;
  std::uint64_t dynamic_per_frame = 0;
  double delta_macs_s = 0.0;  // dynamic MACs/s
  double pct = 0.0;           // dynamic share of the block, in percent
};

struct MacReport {
  double frames_per_second = 62.5;
  std::vector<BlockMacs> blocks;      // per accounting block
  std::vector<BlockMacs> modules;     // per module, F-transformer rows per transformer
  double zero_activation_macs_s = 0.0;
  double full_activation_macs_s = 0.0;

  double dynamic_delta_sum() const {
    double s = 0.0;
    for (const auto& b : blocks) s += b.delta_macs_s;
    return s;
  }
  const BlockMacs& module(const std::string& name) const {
    for (const auto& m : modules)
      if (m.name == name) return m;
    throw std::out_of_range("no module " + name);
  }
};

inline BlockMacs make_row(std::string name, std::uint64_t s, std::uint64_t d, double fps) {
  BlockMacs r{std::move(name), s, d, static_cast<double>(d) * fps, 0.0};
  r.pct = s + d == 0 ? 0.0 : 100.0 * static_cast<double>(d) / static_cast<double>(s + d);
  return r;
}

/// Steady-state accounting (time attention at full context).
inline MacReport count_macs(const ModelConfig& c) {
  const MacCounter m = frame_macs(c, c.max_ctx_frames);
  MacReport r;
  r.frames_per_second = c.frames_per_second();
  std::uint64_t s = 0, d = 0;
  for (std::size_t i = 0; i < kNumBlocks; ++i) {
    r.blocks.push_back(make_row(std::string(kBlockNames[i]), m.static_macs[i], m.dynamic_macs[i], r.frames_per_second));
    s += m.static_macs[i];
    d += m.dynamic_macs[i];
  }
  r.zero_activation_macs_s = static_cast<double>(s) * r.frames_per_second;
  r.full_activation_macs_s = static_cast<double>(s + d) * r.frames_per_second;
  auto blk = [&](BlockId b) { return static_cast<std::size_t>(b); };
  auto add_module = [&](const char* name, BlockId b) {
    r.modules.push_back(make_row(name, m.static_macs[blk(b)], m.dynamic_macs[blk(b)], r.frames_per_second));
  };
  add_module("conv3", BlockId::Conv3);
  add_module("deconv3", BlockId::Deconv3);
  add_module("t_mha", BlockId::TMha);
  add_module("t_gru", BlockId::TGru);
  add_module("f_mha", BlockId::FMha0);
  add_module("f_gru", BlockId::FGru0);
  return r;
}

/// zero_activation + ratio * (sum of dynamic deltas).
inline double effective_macs(const MacReport& r, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("activation ratio must lie in [0, 1]");
  return r.zero_activation_macs_s + ratio * r.dynamic_delta_sum();
}

/// Exact MACs a pass over `g` executes, including attention warm-up.
inline MacCounter predict_macs(const ModelConfig& c, std::span<const double> g, ExecMode mode = ExecMode::Slim) {
  MacCounter total;
  std::vector<MacCounter> by_len(c.max_ctx_frames + 1);
  std::vector<bool> have(c.max_ctx_frames + 1, false);
  for (std::size_t t = 0; t < g.size(); ++t) {
    const std::size_t len = std::min(t + 1, c.max_ctx_frames);
    if (!have[len]) {
      by_len[len] = frame_macs(c, len);
      have[len] = true;
    }
    const MacCounter& f = by_len[len];
    const bool dyn = mode == ExecMode::MaskedDense || g[t] != 0.0;
    for (std::size_t i = 0; i < kNumBlocks; ++i) {
      total.static_macs[i] += f.static_macs[i];
      if (dyn) total.dynamic_macs[i] += f.dynamic_macs[i];
    }
  }
  return total;
}

inline void write_macs_csv(std::ostream& os, const MacReport& r) {
  os << "block,static,dynamic,delta,pct\n";
  char buf[64];
  auto row = [&](const BlockMacs& b) {
    std::snprintf(buf, sizeof buf, "%.1f,%.4f", b.delta_macs_s, b.pct);
    os << b.name << ',' << b.static_per_frame << ',' << b.dynamic_per_frame << ',' << buf << '\n';
  };
  for (const auto& b : r.blocks) row(b);
}

// ---------------------------------------------------------------------------
// Activation statistics

struct UtteranceGates {
  std::string utterance_id;
  GateVector g;
  std::string key;  // grouping key, may be empty
};

struct ActivationRow {
  std::string utterance_id;
  std::string key;
  double ratio = 0.0;
};

struct ActivationGroup {
  std::string key;
  std::size_t count = 0;
  double mean = 0.0;
  double std = 0.0;  // population
};

struct ActivationReport {
  std::vector<ActivationRow> rows;
  std::vector<ActivationGroup> groups;  // ordered by key (numeric keys numerically)
  double mean = 0.0;
  double std = 0.0;
};

namespace detail {
inline std::optional<double> as_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}
inline void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  double s = 0.0;
  for (double x : v) s += x;
  mean = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double x : v) q += (x - mean) * (x - mean);
  sd = std::sqrt(q / static_cast<double>(v.size()));
}
}  // namespace detail

/// Key of the bucket [k*w, (k+1)*w) containing a numeric key; other keys
/// pass through unchanged.
inline std::string bucket_key(const std::string& key, double width) {
  if (!(width > 0.0)) throw std::invalid_argument("bin width must be positive");
  const auto v = detail::as_number(key);
  if (!v) return key;
  std::ostringstream os;
  os << std::floor(*v / width) * width;
  return os.str();
}

inline ActivationReport activation_report(const std::vector<UtteranceGates>& items) {
  if (items.empty()) throw std::invalid_argument("activation_report: no utterances");
  ActivationReport r;
  std::vector<double> all;
  std::map<std::string, std::vector<double>> by_key;
  for (const auto& it : items) {
    const double ratio = activation_ratio(it.g);
    if (!(ratio >= 0.0 && ratio <= 1.0))
      throw std::invalid_argument("activation ratio of " + it.utterance_id + " outside [0, 1]");
    r.rows.push_back({it.utterance_id, it.key, ratio});
    all.push_back(ratio);
    by_key[it.key].push_back(ratio);
  }
  detail::mean_std(all, r.mean, r.std);
  for (const auto& [key, v] : by_key) {
    ActivationGroup g{key, v.size(), 0.0, 0.0};
    detail::mean_std(v, g.mean, g.std);
    r.groups.push_back(g);
  }
  std::stable_sort(r.groups.begin(), r.groups.end(), [](const ActivationGroup& a, const ActivationGroup& b) {
    const auto x = detail::as_number(a.key), y = detail::as_number(b.key);
    if (x && y) return *x < *y;
    if (x != y) return x.has_value();
    return a.key < b.key;
  });
  return r;
}

inline void write_activation_csv(std::ostream& os, const ActivationReport& r) {
  os << "utterance_id,key,ratio\n";
  char buf[32];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%.6f", row.ratio);
    os << row.utterance_id << ',' << row.key << ',' << buf << '\n';
  }
}

inline void write_groups_csv(std::ostream& os, const ActivationReport& r) {
  os << "key,count,mean,std\n";
  char buf[64];
  for (const auto& g : r.groups) {
    std::snprintf(buf, sizeof buf, "%.6f,%.6f", g.mean, g.std);
    os << g.key << ',' << g.count << ',' << buf << '\n';
  }
}

// ---------------------------------------------------------------------------
// Wall-clock benchmark

enum class GateSetting { Zero, One, Policy };

inline std::string to_string(GateSetting s) {
  return s == GateSetting::Zero ? "0" : s == GateSetting::One ? "1" : "policy";
}

struct BenchRow {
  ExecMode mode;
  GateSetting gate;
  double median_seconds = 0.0;
  std::uint64_t realized_macs = 0;
  double activation_ratio = 0.0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of nothing");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Median-of-`repeats` runtime per (mode, gate setting) on seeded noise.
inline std::vector<BenchRow> bench(const DsnModel& model, double seconds, const std::vector<ExecMode>& modes,
                                   const std::vector<GateSetting>& gates, std::size_t repeats = 5,
                                   std::uint64_t seed = 0) {
  SeededRng rng(seed);
  AudioBuffer x;
  x.samples.resize(std::max<std::size_t>(kFftSize, static_cast<std::size_t>(seconds * kSampleRate)));
  for (double& v : x.samples) v = rng.uniform(-0.5, 0.5);
  const std::size_t frames = frame_count(x.samples.size());
  std::vector<BenchRow> rows;
  for (ExecMode mode : modes) {
    for (GateSetting gs : gates) {
      std::optional<GateVector> ov;
      if (gs != GateSetting::Policy) ov = GateVector::constant(frames, gs == GateSetting::One ? 1.0 : 0.0);
      std::vector<double> times;
      BenchRow row{mode, gs};
      for (std::size_t i = 0; i < repeats; ++i) {
        MacCounter macs;
        const auto t0 = std::chrono::steady_clock::now();
        const UtteranceResult r = model.forward_utterance(x, mode, ov, &macs);
        times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        row.realized_macs = macs.total();
        row.activation_ratio = activation_ratio(r.g);
      }
      row.median_seconds = median(times);
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace dsn
