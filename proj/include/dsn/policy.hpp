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

// Frame-wise gating policy: per-frame channel statistics -> FC(16) -> tanh ->
// FC(2) -> Gumbel-softmax, plus the activation-ratio regularisers and the
// closed-form gradients of the policy path.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsn/tensor.hpp"

namespace dsn {

inline constexpr std::size_t kPolicyHidden = 16;
inline constexpr std::size_t kPolicyClasses = 2;
inline constexpr std::size_t kSkipClass = 0;
inline constexpr std::size_t kActivateClass = 1;
inline constexpr double kDefaultTau = 0.5;

enum class GateMode { Soft, Hard };

/// Per-frame gate values; g_t is the activate-class probability (soft) or a
/// hard 0/1 decision. One vector drives every dynamic block of a pass.
struct GateVector {
  std::vector<double> values;
  GateMode mode = GateMode::Hard;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t t) const { return values[t]; }

  static GateVector constant(std::size_t frames, double g) {
    return {std::vector<double>(frames, g), (g == 0.0 || g == 1.0) ? GateMode::Hard : GateMode::Soft};
  }
};

/// Activation ratio: mean of the gate vector. Constant vectors return their
/// value exactly; otherwise the sum is compensated.
inline double activation_ratio(const GateVector& g) {
  if (g.values.empty()) throw std::invalid_argument("activation ratio of an empty gate vector");
  const double first = g.values.front();
  if (std::all_of(g.values.begin(), g.values.end(), [first](double v) { return v == first; })) return first;
  double s = 0.0, comp = 0.0;
  for (double v : g.values) {
    const double t = s + v;
    comp += std::abs(s) >= std::abs(v) ? (s - t) + v : (v - t) + s;
    s = t;
  }
  return (s + comp) / static_cast<double>(g.values.size());
}

struct PolicyParams {
  Tensor fc1_w;  // [16 x 2C]
  Tensor fc1_b;  // [16]
  Tensor fc2_w;  // [2 x 16]
  Tensor fc2_b;  // [2]
  double tau = kDefaultTau;

  std::size_t feature_dim() const { return fc1_w.dim(1); }

  static PolicyParams init(SeededRng& rng, std::size_t channels, double tau = kDefaultTau) {
    return {xavier_init(rng, {kPolicyHidden, 2 * channels}), Tensor({kPolicyHidden}),
            xavier_init(rng, {kPolicyClasses, kPolicyHidden}), Tensor({kPolicyClasses}), tau};
  }

  void validate() const {
    if (!(tau > 0.0)) throw std::invalid_argument("policy temperature must be positive");
    if (fc1_w.rank() != 2 || fc1_w.dim(0) != kPolicyHidden || fc1_b.size() != kPolicyHidden ||
        fc2_w.rank() != 2 || fc2_w.dim(0) != kPolicyClasses || fc2_w.dim(1) != kPolicyHidden ||
        fc2_b.size() != kPolicyClasses)
      throw ShapeError("policy parameters must be FC(2C->16) and FC(16->2)");
  }
};

// ---------------------------------------------------------------------------
// Features

/// [mu_c; sigma_c] over the frequency axis of one [F x C] frame.
inline void policy_features_frame(std::span<const double> frame, std::size_t bins, std::size_t channels,
                                  std::span<double> out) {
  if (frame.size() != bins * channels || out.size() != 2 * channels)
    throw ShapeError("policy_features: frame/feature size mismatch");
  const double n = static_cast<double>(bins);
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::size_t f = 0; f < bins; ++f) s += frame[f * channels + c];
    const double mu = s / n;
    double v = 0.0;
    for (std::size_t f = 0; f < bins; ++f) {
      const double d = frame[f * channels + c] - mu;
      v += d * d;
    }
    out[c] = mu;
    out[channels + c] = std::sqrt(v / n);
  }
}

/// enc: [T x F' x C] -> [T x 2C]. Strictly per frame, hence causal.
inline Tensor policy_features(const Tensor& enc, std::size_t expected_channels = 32) {
  if (enc.rank() != 3) throw ShapeError("policy_features: expected [T x F x C], got " + shape_str(enc.shape()));
  if (enc.dim(2) != expected_channels)
    throw ShapeError("policy_features: wrong channel count " + std::to_string(enc.dim(2)) + ", expected " +
                     std::to_string(expected_channels));
  const std::size_t frames = enc.dim(0), bins = enc.dim(1), ch = enc.dim(2);
  Tensor out({frames, 2 * ch});
  for (std::size_t t = 0; t < frames; ++t) policy_features_frame(enc.row(t), bins, ch, out.row(t));
  return out;
}

struct PolicyActivations {
  std::vector<double> hidden;  // tanh(fc1)
  double logits[kPolicyClasses];
};

/// Two logits [skip, activate] for one feature vector. Returns MACs.
inline std::uint64_t policy_logits(const PolicyParams& p, std::span<const double> feat, PolicyActivations& act) {
  act.hidden.assign(p.fc1_b.vec().begin(), p.fc1_b.vec().end());
  std::uint64_t macs = matvec_acc(act.hidden, p.fc1_w, feat);
  for (double& h : act.hidden) h = std::tanh(h);
  std::span<double> logits(act.logits, kPolicyClasses);
  logits[0] = p.fc2_b[0];
  logits[1] = p.fc2_b[1];
  macs += matvec_acc(logits, p.fc2_w, act.hidden);
  return macs;
}

inline Tensor policy_logits(const PolicyParams& p, const Tensor& features) {
  p.validate();
  Tensor out({features.dim(0), kPolicyClasses});
  PolicyActivations act;
  for (std::size_t t = 0; t < features.dim(0); ++t) {
    policy_logits(p, features.row(t), act);
    out.at(t, 0) = act.logits[0];
    out.at(t, 1) = act.logits[1];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gumbel-softmax

struct ClassProbs {
  double skip;
  double activate;
};

/// Two-class softmax((logits + noise) / tau). The larger probability is
/// sigma(|u|) and the smaller is 1 minus it, so the pair sums to 1 exactly.
inline ClassProbs soft_gate_probs(double skip_logit, double act_logit, double skip_noise, double act_noise,
                                  double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: temperature must be positive");
  const double u = ((act_logit + act_noise) - (skip_logit + skip_noise)) / tau;
  const double big = sigmoid(std::abs(u));
  const double small = 1.0 - big;
  return u >= 0.0 ? ClassProbs{small, big} : ClassProbs{big, small};
}

/// Hard decision: activate iff activate-logit > skip-logit; ties skip.
inline double hard_gate(double skip_logit, double act_logit) { return act_logit > skip_logit ? 1.0 : 0.0; }

/// logits: [T x 2] (skip, activate). Soft mode needs Gumbel noise of the same
/// shape; hard mode is the noiseless argmax.
inline GateVector gumbel_softmax(const Tensor& logits, double tau, GateMode mode,
                                 const std::optional<Tensor>& noise = std::nullopt) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: temperature must be positive");
  if (logits.rank() != 2 || logits.dim(1) != kPolicyClasses)
    throw ShapeError("gumbel_softmax: logits must be [T x 2], got " + shape_str(logits.shape()));
  const std::size_t frames = logits.dim(0);
  GateVector g{std::vector<double>(frames), mode};
  if (mode == GateMode::Hard) {
    if (noise) throw std::invalid_argument("gumbel_softmax: hard mode takes no noise");
    for (std::size_t t = 0; t < frames; ++t) g.values[t] = hard_gate(logits.at(t, 0), logits.at(t, 1));
    return g;
  }
  if (!noise) throw std::invalid_argument("gumbel_softmax: soft mode requires Gumbel noise");
  if (noise->shape() != logits.shape()) throw ShapeError("gumbel_softmax: noise shape mismatch");
  for (std::size_t t = 0; t < frames; ++t)
    g.values[t] = soft_gate_probs(logits.at(t, 0), logits.at(t, 1), noise->at(t, 0), noise->at(t, 1), tau).activate;
  return g;
}

inline Tensor sample_gumbel_noise(SeededRng& rng, std::size_t frames) {
  Tensor n({frames, kPolicyClasses});
  for (double& v : n.vec()) v = rng.gumbel();
  return n;
}

// ---------------------------------------------------------------------------
// Gating regularisation

enum class GateLossMode { Standard, Mgt };

struct GatingLossConfig {
  double theta = 0.5;
  double lambda = 0.5;
  GateLossMode mode = GateLossMode::Standard;

  void validate() const {
    if (!(theta >= 0.0 && theta <= 1.0)) throw std::invalid_argument("theta must lie in [0, 1]");
    if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be positive");
  }
};

/// DNS-MOS OVRL score of one utterance, in [1, 5].
struct MetricScore {
  double m;
  explicit MetricScore(double v) : m(v) {
    if (!(v >= 1.0 && v <= 5.0))
      throw std::invalid_argument("OVRL score " + std::to_string(v) + " outside [1, 5]");
  }
};

/// max(0, mean(g) - theta).
inline double gate_loss(const GateVector& g, double theta) {
  if (g.values.empty()) throw std::invalid_argument("gate_loss: empty gate vector");
  return std::max(0.0, activation_ratio(g) - theta);
}

/// theta_m = lambda * (5 - m) / 4, clipped to [0, 1].
inline double map_ovrl_to_theta(MetricScore m, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be positive");
  return std::clamp(lambda * (5.0 - m.m) / 4.0, 0.0, 1.0);
}

inline double gate_loss_mgt(const GateVector& g, MetricScore m, double lambda) {
  return gate_loss(g, map_ovrl_to_theta(m, lambda));
}

/// Target activation ratio implied by a loss configuration.
inline double gate_target(const GatingLossConfig& cfg, std::optional<MetricScore> m) {
  if (cfg.mode == GateLossMode::Mgt) {
    if (!m) throw std::invalid_argument("metric-guided gate loss requires an OVRL score");
    return map_ovrl_to_theta(*m, cfg.lambda);
  }
  return cfg.theta;
}

inline double gate_loss(const GateVector& g, const GatingLossConfig& cfg, std::optional<MetricScore> m) {
  return gate_loss(g, gate_target(cfg, m));
}

// ---------------------------------------------------------------------------
// Differentiable policy path

/// Soft gates for encoder features with fixed noise.
inline GateVector policy_soft_gates(const Tensor& enc, const PolicyParams& p, const Tensor& noise) {
  p.validate();
  const Tensor feats = policy_features(enc, p.feature_dim() / 2);
  return gumbel_softmax(policy_logits(p, feats), p.tau, GateMode::Soft, noise);
}

/// Scalar regulariser value of the soft policy path.
inline double policy_loss(const Tensor& enc, const PolicyParams& p, const Tensor& noise,
                          const GatingLossConfig& cfg, std::optional<MetricScore> m = std::nullopt) {
  return gate_loss(policy_soft_gates(enc, p, noise), cfg, m);
}

struct PolicyGrads {
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Closed-form gradient of gate_loss(gumbel_softmax(fc2(tanh(fc1(features)))))
/// with respect to all policy parameters. Subgradient 0 at the hinge kink.
inline PolicyGrads policy_grad(const Tensor& enc, const PolicyParams& p, const Tensor& noise,
                               const GatingLossConfig& cfg, GateMode mode = GateMode::Soft,
                               std::optional<MetricScore> m = std::nullopt) {
  if (mode != GateMode::Soft) throw std::invalid_argument("policy_grad: hard gating is not differentiable");
  p.validate();
  const Tensor feats = policy_features(enc, p.feature_dim() / 2);
  const std::size_t frames = feats.dim(0), fdim = feats.dim(1);
  if (frames == 0) throw std::invalid_argument("policy_grad: empty input");
  if (noise.rank() != 2 || noise.dim(0) != frames || noise.dim(1) != kPolicyClasses)
    throw ShapeError("policy_grad: noise must be [T x 2]");

  PolicyGrads gr{Tensor(p.fc1_w.shape()), Tensor(p.fc1_b.shape()), Tensor(p.fc2_w.shape()),
                 Tensor(p.fc2_b.shape())};
  std::vector<PolicyActivations> acts(frames);
  GateVector g{std::vector<double>(frames), GateMode::Soft};
  for (std::size_t t = 0; t < frames; ++t) {
    policy_logits(p, feats.row(t), acts[t]);
    g.values[t] = soft_gate_probs(acts[t].logits[0], acts[t].logits[1], noise.at(t, 0), noise.at(t, 1), p.tau)
                      .activate;
  }
  if (activation_ratio(g) - gate_target(cfg, m) <= 0.0) return gr;  // hinge inactive

  const double inv_t = 1.0 / static_cast<double>(frames);
  std::vector<double> dh(kPolicyHidden);
  for (std::size_t t = 0; t < frames; ++t) {
    const double gt = g.values[t];
    const double du = inv_t * gt * (1.0 - gt) / p.tau;  // dL/du_t
    const double dl[kPolicyClasses] = {-du, du};
    const auto& h = acts[t].hidden;
    for (std::size_t k = 0; k < kPolicyClasses; ++k) {
      gr.fc2_b[k] += dl[k];
      for (std::size_t j = 0; j < kPolicyHidden; ++j) gr.fc2_w.at(k, j) += dl[k] * h[j];
    }
    for (std::size_t j = 0; j < kPolicyHidden; ++j) {
      const double back = p.fc2_w.at(0, j) * dl[0] + p.fc2_w.at(1, j) * dl[1];
      dh[j] = back * (1.0 - h[j] * h[j]);
    }
    const auto f = feats.row(t);
    for (std::size_t j = 0; j < kPolicyHidden; ++j) {
      gr.fc1_b[j] += dh[j];
      for (std::size_t i = 0; i < fdim; ++i) gr.fc1_w.at(j, i) += dh[j] * f[i];
    }
  }
  return gr;
}

}  // namespace dsn
