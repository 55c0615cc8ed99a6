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

// End-to-end enhancement network.
//
//   |X|^c -> conv1 -> conv2 -> [policy: g_t]
//         -> conv3 pair -> F-transformer -> T-transformer -> F-transformer
//         -> deconv3 pair -> deconv2 (+conv2 skip) -> deconv1 (+conv1 skip)
//         -> sigmoid mask -> m^(1/c) X -> overlap-add
//
// Offline and streaming inference share one per-frame processor, so a
// stream fed 512-sample windows reproduces the offline output exactly.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsn/blocks.hpp"
#include "dsn/exec.hpp"
#include "dsn/policy.hpp"
#include "dsn/signal.hpp"
#include "dsn/tensor.hpp"
#include "dsn/weights.hpp"

namespace dsn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t fft_size = kFftSize;
  std::size_t hop = kHop;
  double compression = kCompression;
  std::array<std::size_t, 3> channels{16, 32, 32};
  std::size_t n_groups = 4;
  std::size_t n_dynamic_groups = 2;
  std::size_t n_heads = 4;
  std::size_t n_dynamic_heads = 2;
  std::size_t attn_dim = 24;
  std::size_t layers_per_transformer = 4;
  std::size_t max_ctx_frames = 63;
  bool dynamic_conv = true;
  double tau = kDefaultTau;
  double theta = 0.5;
  double lambda = 0.5;
  double gate_weight = 1.0;
  std::uint64_t seed = 0;

  /// Same network with every dynamic branch removed.
  static ModelConfig static_baseline() {
    ModelConfig c;
    c.n_dynamic_groups = 0;
    c.n_dynamic_heads = 0;
    c.dynamic_conv = false;
    return c;
  }

  std::size_t bins(std::size_t level) const {
    std::size_t f = fft_size / 2 + 1;
    for (std::size_t i = 0; i < level; ++i) f = conv_out_bins(f);
    return f;
  }
  double frames_per_second() const { return static_cast<double>(kSampleRate) / static_cast<double>(hop); }
  ChannelSplit channel_split() const { return {channels[2], n_groups, n_dynamic_groups}; }
  HeadSplit head_split() const { return {attn_dim, n_heads, n_dynamic_heads}; }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(static_cast<double>(fft_size), "fft_size");
    positive(static_cast<double>(hop), "hop");
    positive(compression, "compression");
    for (std::size_t c : channels) positive(static_cast<double>(c), "channels");
    positive(static_cast<double>(n_groups), "n_groups");
    positive(static_cast<double>(n_heads), "n_heads");
    positive(static_cast<double>(attn_dim), "attn_dim");
    positive(static_cast<double>(layers_per_transformer), "layers_per_transformer");
    positive(static_cast<double>(max_ctx_frames), "max_ctx_frames");
    positive(tau, "tau");
    positive(lambda, "lambda");
    if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("theta must lie in [0, 1]");
    if (!(gate_weight >= 0.0)) throw ConfigError("gate_weight must be non-negative");
    if (fft_size % 2 != 0) throw ConfigError("fft_size must be even");
    if (channels[1] != channels[2]) throw ConfigError("channels[1] (policy input) must equal channels[2]");
    try {
      channel_split().validate();
      head_split().validate();
    } catch (const ShapeError& e) {
      throw ConfigError(e.what());
    }
  }

  /// Geometry the signal path supports.
  void validate_for_model() const {
    validate();
    if (fft_size != kFftSize || hop != kHop)
      throw ConfigError("the signal path supports fft_size 512 with hop 256 only");
  }

  nlohmann::ordered_json to_json() const {
    return {{"fft_size", fft_size},
            {"hop", hop},
            {"compression", compression},
            {"channels", channels},
            {"n_groups", n_groups},
            {"n_dynamic_groups", n_dynamic_groups},
            {"n_heads", n_heads},
            {"n_dynamic_heads", n_dynamic_heads},
            {"attn_dim", attn_dim},
            {"layers_per_transformer", layers_per_transformer},
            {"max_ctx_frames", max_ctx_frames},
            {"dynamic_conv", dynamic_conv},
            {"tau", tau},
            {"theta", theta},
            {"lambda", lambda},
            {"gate_weight", gate_weight},
            {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    ModelConfig c;
    const nlohmann::ordered_json known = c.to_json();
    for (const auto& [key, value] : j.items())
      if (!known.contains(key)) throw ConfigError("unknown config key: " + key);
    try {
      auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
      };
      get("fft_size", c.fft_size);
      get("hop", c.hop);
      get("compression", c.compression);
      get("channels", c.channels);
      get("n_groups", c.n_groups);
      get("n_dynamic_groups", c.n_dynamic_groups);
      get("n_heads", c.n_heads);
      get("n_dynamic_heads", c.n_dynamic_heads);
      get("attn_dim", c.attn_dim);
      get("layers_per_transformer", c.layers_per_transformer);
      get("max_ctx_frames", c.max_ctx_frames);
      get("dynamic_conv", c.dynamic_conv);
      get("tau", c.tau);
      get("theta", c.theta);
      get("lambda", c.lambda);
      get("gate_weight", c.gate_weight);
      get("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
  }

  static ModelConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("malformed config " + path.string() + ": " + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Streaming state

/// Everything a frame needs from the past. Its size depends only on the
/// configuration.
struct StreamState {
  std::size_t frame = 0;
  std::vector<double> prev_input, prev_enc1, prev_enc2, prev_mid, prev_dec3, prev_dec2;
  std::vector<TimeLayerState> time;
  std::vector<double> ola_tail;

  std::size_t byte_size() const {
    std::size_t n = prev_input.size() + prev_enc1.size() + prev_enc2.size() + prev_mid.size() + prev_dec3.size() +
                    prev_dec2.size() + ola_tail.size();
    for (const auto& t : time) n += t.cache.keys.size() + t.cache.values.size() + t.hidden.size();
    return n * sizeof(double) + sizeof(std::size_t) * (1 + time.size());
  }
};

struct UtteranceResult {
  AudioBuffer enhanced;
  GateVector g;
  Tensor mask;  // [T x bins]
};

struct StreamResult {
  std::vector<double> samples;  // hop completed output samples
  double g = 0.0;
};

// ---------------------------------------------------------------------------
// Model

class DsnModel {
 public:
  static DsnModel build(const ModelConfig& cfg) { return build(cfg, cfg.seed); }

  static DsnModel build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate_for_model();
    DsnModel m;
    m.cfg_ = cfg;
    m.cfg_.seed = seed;
    SeededRng rng(seed);
    const auto& ch = cfg.channels;
    const ChannelSplit cs = cfg.channel_split();
    const HeadSplit hs = cfg.head_split();
    m.conv1_ = DynConvPair::init(rng, 1, ch[0], false, false);
    m.conv2_ = DynConvPair::init(rng, ch[0], ch[1], false, false);
    m.policy_ = PolicyParams::init(rng, ch[1], cfg.tau);
    m.conv3_ = DynConvPair::init(rng, ch[1], ch[2], false, cfg.dynamic_conv);
    auto freq_layers = [&](std::vector<FreqLayer>& v) {
      for (std::size_t i = 0; i < cfg.layers_per_transformer; ++i)
        v.push_back({DynMhaBlock::init(rng, cs, hs), FreqGruBlock::init(rng, cs)});
    };
    freq_layers(m.freq0_);
    for (std::size_t i = 0; i < cfg.layers_per_transformer; ++i)
      m.time_.push_back({DynMhaBlock::init(rng, cs, hs), TimeGruBlock::init(rng, cs)});
    freq_layers(m.freq1_);
    m.deconv3_ = DynConvPair::init(rng, ch[2], ch[1], true, cfg.dynamic_conv);
    m.deconv2_ = DynConvPair::init(rng, 2 * ch[1], ch[0], true, false);
    m.deconv1_ = DynConvPair::init(rng, 2 * ch[0], 1, true, false);
    return m;
  }

  /// Build from stored weights; every parameter must be present with the
  /// expected shape and the store may not contain anything else.
  static DsnModel build(const ModelConfig& cfg, const WeightStore& ws) {
    DsnModel m = build(cfg, cfg.seed);
    std::size_t used = 0;
    m.visit([&](const std::string& name, Tensor& t, bool) {
      if (!ws.contains(name)) throw WeightError("missing weight: " + name);
      const Tensor& src = ws.get(name);
      if (src.shape() != t.shape())
        throw WeightError("mis-shaped weight: " + name + " is " + shape_str(src.shape()) + ", expected " +
                          shape_str(t.shape()));
      t = src;
      ++used;
    });
    if (used != ws.size()) {
      std::vector<std::string> expected;
      m.visit([&](const std::string& name, Tensor&, bool) { expected.push_back(name); });
      for (const auto& [name, t] : ws.entries())
        if (std::find(expected.begin(), expected.end(), name) == expected.end())
          throw WeightError("unknown extra weight: " + name);
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }

  /// Visits every parameter tensor as (name, tensor, on_dynamic_branch).
  template <class F>
  void visit(F&& f) {
    conv1_.visit("conv1", f);
    conv2_.visit("conv2", f);
    f("policy.fc1_w", policy_.fc1_w, false);
    f("policy.fc1_b", policy_.fc1_b, false);
    f("policy.fc2_w", policy_.fc2_w, false);
    f("policy.fc2_b", policy_.fc2_b, false);
    conv3_.visit("conv3", f);
    for (std::size_t i = 0; i < freq0_.size(); ++i) freq0_[i].visit("ftrans0.layer" + std::to_string(i), f);
    for (std::size_t i = 0; i < time_.size(); ++i) time_[i].visit("ttrans.layer" + std::to_string(i), f);
    for (std::size_t i = 0; i < freq1_.size(); ++i) freq1_[i].visit("ftrans1.layer" + std::to_string(i), f);
    deconv3_.visit("deconv3", f);
    deconv2_.visit("deconv2", f);
    deconv1_.visit("deconv1", f);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<DsnModel*>(this)->visit([&](const std::string& n, Tensor& t, bool d) {
      f(n, static_cast<const Tensor&>(t), d);
    });
  }

  WeightStore weights() const {
    WeightStore ws;
    visit([&](const std::string& n, const Tensor& t, bool) { ws.put(n, t); });
    return ws;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor& t, bool) { n += t.size(); });
    return n;
  }

  PolicyParams& policy() { return policy_; }
  const PolicyParams& policy() const { return policy_; }

  StreamState make_state() const {
    const auto& ch = cfg_.channels;
    StreamState s;
    s.prev_input.assign(cfg_.bins(0), 0.0);
    s.prev_enc1.assign(cfg_.bins(1) * ch[0], 0.0);
    s.prev_enc2.assign(cfg_.bins(2) * ch[1], 0.0);
    s.prev_mid.assign(cfg_.bins(3) * ch[2], 0.0);
    s.prev_dec3.assign(cfg_.bins(2) * 2 * ch[1], 0.0);
    s.prev_dec2.assign(cfg_.bins(1) * 2 * ch[0], 0.0);
    for (const auto& layer : time_) s.time.push_back(layer.make_state(cfg_.bins(3), cfg_.max_ctx_frames));
    s.ola_tail.assign(cfg_.hop, 0.0);
    return s;
  }

  /// Runs one spectrum frame through the network. Writes the mask and
  /// returns the gate used by every dynamic block on this frame.
  double process_frame(StreamState& st, std::span<const Complex> spec, std::optional<double> gate_override,
                       const ExecContext& ctx, std::span<double> mask) const {
    const auto& ch = cfg_.channels;
    const std::size_t f0 = cfg_.bins(0), f1 = cfg_.bins(1), f2 = cfg_.bins(2), f3 = cfg_.bins(3);
    if (spec.size() != f0 || mask.size() != f0) throw ShapeError("process_frame: expected " + std::to_string(f0) + " bins");
    const std::size_t t = st.frame;
    const bool first = t == 0;
    auto prev = [first](const std::vector<double>& v) {
      return first ? std::span<const double>{} : std::span<const double>(v);
    };

    std::vector<double> in(f0);
    for (std::size_t k = 0; k < f0; ++k) in[k] = std::pow(std::abs(spec[k]), cfg_.compression);

    std::vector<double> enc1(f1 * ch[0]), enc2(f2 * ch[1]), mid(f3 * ch[2]);
    std::vector<double> scratch(f0 * std::max({ch[0], ch[1], ch[2]}) * 2);
    conv1_.forward_frame(prev(st.prev_input), in, f0, 1.0, ctx, BlockId::Conv1, t, enc1, scratch);
    pointwise_inplace(enc1, Pointwise::Relu);
    conv2_.forward_frame(prev(st.prev_enc1), enc1, f1, 1.0, ctx, BlockId::Conv2, t, enc2, scratch);
    pointwise_inplace(enc2, Pointwise::Relu);

    std::vector<double> feat(2 * ch[1]);
    policy_features_frame(enc2, f2, ch[1], feat);
    PolicyActivations act;
    ctx.count(BlockId::Policy, false, policy_logits(policy_, feat, act));
    double g = hard_gate(act.logits[0], act.logits[1]);
    if (gate_override) {
      if (!(*gate_override >= 0.0 && *gate_override <= 1.0))
        throw std::invalid_argument("gate override must lie in [0, 1]");
      g = *gate_override;
    }

    conv3_.forward_frame(prev(st.prev_enc2), enc2, f2, g, ctx, BlockId::Conv3, t, mid, scratch);
    pointwise_inplace(mid, Pointwise::Relu);

    std::vector<double> x = mid;
    for (const auto& layer : freq0_) layer.forward_frame(x, f3, g, ctx, BlockId::FMha0, BlockId::FGru0, t);
    for (std::size_t i = 0; i < time_.size(); ++i) time_[i].step(x, f3, st.time[i], g, ctx, t);
    for (const auto& layer : freq1_) layer.forward_frame(x, f3, g, ctx, BlockId::FMha1, BlockId::FGru1, t);

    std::vector<double> dec3(f2 * ch[1]);
    deconv3_.forward_frame(prev(st.prev_mid), x, f3, g, ctx, BlockId::Deconv3, t, dec3, scratch);
    pointwise_inplace(dec3, Pointwise::Relu);
    std::vector<double> cat3 = concat_channels(dec3, enc2, f2, ch[1], ch[1]);

    std::vector<double> dec2(f1 * ch[0]);
    deconv2_.forward_frame(prev(st.prev_dec3), cat3, f2, 1.0, ctx, BlockId::Deconv2, t, dec2, scratch);
    pointwise_inplace(dec2, Pointwise::Relu);
    std::vector<double> cat2 = concat_channels(dec2, enc1, f1, ch[0], ch[0]);

    deconv1_.forward_frame(prev(st.prev_dec2), cat2, f1, 1.0, ctx, BlockId::Deconv1, t, mask, scratch);
    pointwise_inplace(mask, Pointwise::Sigmoid);

    st.prev_input = std::move(in);
    st.prev_enc1 = std::move(enc1);
    st.prev_enc2 = std::move(enc2);
    st.prev_mid = std::move(x);
    st.prev_dec3 = std::move(cat3);
    st.prev_dec2 = std::move(cat2);
    st.frame = t + 1;
    return g;
  }

  UtteranceResult forward_utterance(const AudioBuffer& noisy, ExecMode mode,
                                    const std::optional<GateVector>& gate_override = std::nullopt,
                                    MacCounter* macs = nullptr, GateTrace* trace = nullptr) const {
    if (noisy.sample_rate != kSampleRate)
      throw std::invalid_argument("unsupported sample rate: " + std::to_string(noisy.sample_rate));
    if (noisy.samples.size() < cfg_.fft_size)
      throw std::invalid_argument("input too short: " + std::to_string(noisy.samples.size()) +
                                  " samples, need at least " + std::to_string(cfg_.fft_size));
    const Spectrogram spec = stft(noisy);
    if (gate_override && gate_override->size() != spec.frames)
      throw ShapeError("gate override has " + std::to_string(gate_override->size()) + " frames, input has " +
                       std::to_string(spec.frames));
    const ExecContext ctx{mode, macs, trace};
    StreamState st = make_state();
    UtteranceResult r;
    r.mask = Tensor({spec.frames, spec.bins});
    r.g.values.resize(spec.frames);
    r.g.mode = gate_override ? gate_override->mode : GateMode::Hard;
    for (std::size_t t = 0; t < spec.frames; ++t) {
      std::optional<double> ov;
      if (gate_override) ov = (*gate_override)[t];
      r.g.values[t] = process_frame(st, spec.frame(t), ov, ctx, r.mask.row(t));
    }
    AudioBuffer y = istft(apply_mask(spec, r.mask, cfg_.compression));
    y.samples.resize(noisy.samples.size(), 0.0);
    y.sample_rate = noisy.sample_rate;
    r.enhanced = std::move(y);
    return r;
  }

  /// One streaming step: a 512-sample window advanced by 256 samples per
  /// call. Returns the 256 samples whose overlap-add is complete.
  StreamResult forward_streaming(std::span<const double> window, StreamState& st, ExecMode mode,
                                 std::optional<double> gate_override = std::nullopt, MacCounter* macs = nullptr,
                                 GateTrace* trace = nullptr) const {
    if (window.size() != cfg_.fft_size)
      throw std::invalid_argument("forward_streaming: frame must be " + std::to_string(cfg_.fft_size) +
                                  " samples, got " + std::to_string(window.size()));
    static const std::vector<double> w = sqrt_hann(kFftSize);
    const std::size_t bins = cfg_.bins(0);
    std::vector<Complex> spec(bins), masked(bins);
    analyze_frame(window, w, spec);
    std::vector<double> mask(bins);
    const ExecContext ctx{mode, macs, trace};
    StreamResult r;
    r.g = process_frame(st, spec, gate_override, ctx, mask);
    apply_mask_frame(spec, mask, cfg_.compression, masked);
    std::vector<double> buf(cfg_.fft_size);
    synthesize_frame(masked, w, buf);
    const std::size_t hop = cfg_.hop;
    r.samples.resize(hop);
    for (std::size_t i = 0; i < hop; ++i) r.samples[i] = st.ola_tail[i] + buf[i];
    for (std::size_t i = 0; i < hop; ++i) st.ola_tail[i] = buf[hop + i];
    return r;
  }

 private:
  static std::vector<double> concat_channels(const std::vector<double>& a, const std::vector<double>& b,
                                             std::size_t bins, std::size_t ca, std::size_t cb) {
    std::vector<double> out(bins * (ca + cb));
    for (std::size_t f = 0; f < bins; ++f) {
      std::copy_n(a.begin() + f * ca, ca, out.begin() + f * (ca + cb));
      std::copy_n(b.begin() + f * cb, cb, out.begin() + f * (ca + cb) + ca);
    }
    return out;
  }

  ModelConfig cfg_;
  DynConvPair conv1_, conv2_, conv3_;
  PolicyParams policy_;
  std::vector<FreqLayer> freq0_;
  std::vector<TimeLayer> time_;
  std::vector<FreqLayer> freq1_;
  DynConvPair deconv3_, deconv2_, deconv1_;
};

// ---------------------------------------------------------------------------
// Training objective (evaluation only)

struct StftResolution {
  std::size_t fft_size;
  std::size_t hop;
};

inline const std::vector<StftResolution>& default_resolutions() {
  static const std::vector<StftResolution> r = {{256, 64}, {512, 128}, {1024, 256}};
  return r;
}

inline constexpr double kLogMagFloor = 1e-7;

/// Spectral convergence plus mean absolute log-magnitude difference at one
/// resolution (Hann window). Signals shorter than the FFT are zero-padded.
inline double stft_loss_term(std::span<const double> est, std::span<const double> ref, StftResolution res) {
  std::vector<double> e(est.begin(), est.end()), r(ref.begin(), ref.end());
  if (e.size() < res.fft_size) {
    e.resize(res.fft_size, 0.0);
    r.resize(res.fft_size, 0.0);
  }
  const std::vector<double> w = hann(res.fft_size);
  const Tensor me = magnitude(stft(e, res.fft_size, res.hop, w));
  const Tensor mr = magnitude(stft(r, res.fft_size, res.hop, w));
  double diff = 0.0, norm = 0.0, logl1 = 0.0;
  for (std::size_t i = 0; i < mr.size(); ++i) {
    const double d = mr[i] - me[i];
    diff += d * d;
    norm += mr[i] * mr[i];
    logl1 += std::abs(std::log(std::max(mr[i], kLogMagFloor)) - std::log(std::max(me[i], kLogMagFloor)));
  }
  const double sc = diff == 0.0 ? 0.0 : std::sqrt(diff) / std::sqrt(std::max(norm, 1e-300));
  return sc + logl1 / static_cast<double>(mr.size());
}

inline double multi_res_stft_loss(std::span<const double> est, std::span<const double> ref,
                                  const std::vector<StftResolution>& resolutions = default_resolutions()) {
  if (est.size() != ref.size())
    throw std::invalid_argument("multi_res_stft_loss: length mismatch (" + std::to_string(est.size()) + " vs " +
                                std::to_string(ref.size()) + ")");
  if (est.empty()) throw std::invalid_argument("multi_res_stft_loss: empty signals");
  double s = 0.0;
  for (const auto& r : resolutions) s += stft_loss_term(est, ref, r);
  return s / static_cast<double>(resolutions.size());
}

inline double multi_res_stft_loss(const AudioBuffer& est, const AudioBuffer& ref) {
  return multi_res_stft_loss(std::span<const double>(est.samples), std::span<const double>(ref.samples));
}

struct ObjectiveBreakdown {
  double reconstruction = 0.0;
  double gate = 0.0;           // unweighted gating term
  double weighted_gate = 0.0;  // gate_weight * gate
  double total = 0.0;
};

inline ObjectiveBreakdown total_objective(const AudioBuffer& est, const AudioBuffer& ref, const GateVector& g,
                                          const GatingLossConfig& cfg, std::optional<MetricScore> m = std::nullopt,
                                          double gate_weight = 1.0) {
  if (!(gate_weight >= 0.0)) throw std::invalid_argument("gate weight must be non-negative");
  cfg.validate();
  ObjectiveBreakdown b;
  b.gate = gate_loss(g, cfg, m);
  b.reconstruction = multi_res_stft_loss(est, ref);
  b.weighted_gate = gate_weight * b.gate;
  b.total = b.reconstruction + b.weighted_gate;
  return b;
}

}  // namespace dsn
