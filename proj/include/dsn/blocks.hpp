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

// Dynamic-slimmable building blocks.
//
// Feature frames are [F x C] with the first C_s channels on the static path
// and the remaining C_d channels on the dynamic path. Every value produced on
// the dynamic path is scaled by the frame gate g_t, so with g_t == 0 it is
// exactly zero and Slim execution can skip computing it. Both execution modes
// share one code path for g_t != 0, which makes them bit-identical there.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsn/exec.hpp"
#include "dsn/policy.hpp"
#include "dsn/tensor.hpp"

namespace dsn {

namespace detail {
inline Tensor uniform_init(SeededRng& rng, Shape shape, double bound) {
  Tensor t(std::move(shape));
  for (double& v : t.vec()) v = rng.uniform(-bound, bound);
  return t;
}
inline double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}
inline void check_gates(std::span<const double> g, std::size_t frames, const char* who) {
  if (g.size() != frames)
    throw ShapeError(std::string(who) + ": gate length " + std::to_string(g.size()) + " != frames " +
                     std::to_string(frames));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Dynamic linear block

/// Dense linear layer split 2x2 into static/dynamic sublayers:
///   out_s = W_ss x_s + b_s + g * W_ds x_d
///   out_d = g * (W_sd x_s + W_dd x_d + b_d)
/// With g == 0 the static output depends on static inputs only.
struct DynLinearBlock {
  std::size_t in_s = 0, in_d = 0, out_s = 0, out_d = 0;
  Tensor w_ss, w_ds, w_sd, w_dd, b_s, b_d;

  static DynLinearBlock init(SeededRng& rng, std::size_t in_s, std::size_t in_d, std::size_t out_s,
                             std::size_t out_d) {
    const double bound = detail::glorot_bound(in_s + in_d, out_s + out_d);
    DynLinearBlock b{in_s, in_d, out_s, out_d, {}, {}, {}, {}, {}, {}};
    b.w_ss = detail::uniform_init(rng, {out_s, in_s}, bound);
    b.w_ds = detail::uniform_init(rng, {out_s, in_d}, bound);
    b.w_sd = detail::uniform_init(rng, {out_d, in_s}, bound);
    b.w_dd = detail::uniform_init(rng, {out_d, in_d}, bound);
    b.b_s = Tensor({out_s});
    b.b_d = Tensor({out_d});
    return b;
  }

  bool has_dynamic() const { return in_d + out_d > 0; }
  std::uint64_t static_macs() const { return out_s * in_s; }
  std::uint64_t dynamic_macs() const { return out_s * in_d + out_d * in_s + out_d * in_d; }

  void forward(std::span<const double> xs, std::span<const double> xd, double g, const ExecContext& ctx,
               BlockId id, std::span<double> ys, std::span<double> yd, std::span<double> scratch) const {
    std::copy(b_s.vec().begin(), b_s.vec().end(), ys.begin());
    ctx.count(id, false, matvec_acc(ys, w_ss, xs));
    if (has_dynamic() && ctx.runs_dynamic(g)) {
      std::span<double> tmp = scratch.first(out_s);
      std::fill(tmp.begin(), tmp.end(), 0.0);
      std::uint64_t n = matvec_acc(tmp, w_ds, xd);
      for (std::size_t o = 0; o < out_s; ++o) ys[o] += g * tmp[o];
      std::copy(b_d.vec().begin(), b_d.vec().end(), yd.begin());
      n += matvec_acc(yd, w_sd, xs);
      n += matvec_acc(yd, w_dd, xd);
      for (double& v : yd) v *= g;
      ctx.count(id, true, n);
    } else {
      std::fill(yd.begin(), yd.end(), 0.0);
    }
  }

  template <class F>
  void visit(const std::string& p, F&& f) {
    f(p + ".w_ss", w_ss, false);
    f(p + ".b_s", b_s, false);
    f(p + ".w_ds", w_ds, true);
    f(p + ".w_sd", w_sd, true);
    f(p + ".w_dd", w_dd, true);
    f(p + ".b_d", b_d, true);
  }
};

// ---------------------------------------------------------------------------
// Convolution pairs

struct ConvLayer {
  Tensor kernel;  // [2 x 3 x Cin x Cout]; for transposed layers [2 x 3 x Cout x Cin]
  Tensor bias;    // [Cout]

  static ConvLayer init(SeededRng& rng, std::size_t cin, std::size_t cout, bool transpose) {
    Shape s = transpose ? Shape{kKernelTime, kKernelFreq, cout, cin} : Shape{kKernelTime, kKernelFreq, cin, cout};
    return {xavier_init(rng, s), Tensor({cout})};
  }
  template <class F>
  void visit(const std::string& p, F&& f, bool dynamic) {
    f(p + ".kernel", kernel, dynamic);
    f(p + ".bias", bias, dynamic);
  }
};

/// Static and dynamic convs sharing an input; out = static(x) + g * dynamic(x).
struct DynConvPair {
  ConvLayer static_conv;
  ConvLayer dynamic_conv;  // empty kernel when the pair has no dynamic branch
  bool is_transpose = false;

  static DynConvPair init(SeededRng& rng, std::size_t cin, std::size_t cout, bool transpose, bool dynamic) {
    DynConvPair p;
    p.is_transpose = transpose;
    p.static_conv = ConvLayer::init(rng, cin, cout, transpose);
    if (dynamic) p.dynamic_conv = ConvLayer::init(rng, cin, cout, transpose);
    return p;
  }

  bool has_dynamic() const { return !dynamic_conv.kernel.empty(); }
  std::size_t in_channels() const { return is_transpose ? static_conv.kernel.dim(3) : static_conv.kernel.dim(2); }
  std::size_t out_channels() const { return is_transpose ? static_conv.kernel.dim(2) : static_conv.kernel.dim(3); }
  std::size_t out_bins(std::size_t in_bins) const {
    return is_transpose ? deconv_out_bins(in_bins) : conv_out_bins(in_bins);
  }

  std::uint64_t run(const ConvLayer& layer, std::span<const double> prev, std::span<const double> cur,
                    std::size_t bins, std::span<double> out) const {
    return is_transpose
               ? conv2d_transpose_frame(prev, cur, bins, out_bins(bins), layer.kernel, layer.bias.data(), out)
               : conv2d_frame(prev, cur, bins, layer.kernel, layer.bias.data(), out);
  }

  /// One output frame. `scratch` must hold one output frame.
  void forward_frame(std::span<const double> prev, std::span<const double> cur, std::size_t bins, double g,
                     const ExecContext& ctx, BlockId id, std::size_t frame, std::span<double> out,
                     std::span<double> scratch) const {
    ctx.count(id, false, run(static_conv, prev, cur, bins, out));
    if (!has_dynamic()) return;
    ctx.record(id, frame, g);
    if (!ctx.runs_dynamic(g)) return;
    ctx.count(id, true, run(dynamic_conv, prev, cur, bins, scratch.first(out.size())));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += g * scratch[i];
  }

  template <class F>
  void visit(const std::string& p, F&& f) {
    static_conv.visit(p + ".static", f, false);
    if (has_dynamic()) dynamic_conv.visit(p + ".dynamic", f, true);
  }
};

/// x: [T x F x Cin] -> [T x F' x Cout] with out_t = static(x)_t + g_t dynamic(x)_t.
inline Tensor dyn_conv_forward(const DynConvPair& pair, const Tensor& x, std::span<const double> g,
                               const ExecContext& ctx, BlockId id = BlockId::Conv3) {
  if (x.rank() != 3 || x.dim(2) != pair.in_channels())
    throw ShapeError("dyn_conv_forward: input " + shape_str(x.shape()) + " does not match the pair");
  detail::check_gates(g, x.dim(0), "dyn_conv_forward");
  const std::size_t frames = x.dim(0), bins = x.dim(1);
  Tensor y({frames, pair.out_bins(bins), pair.out_channels()});
  std::vector<double> scratch(y.size() / std::max<std::size_t>(frames, 1));
  for (std::size_t t = 0; t < frames; ++t)
    pair.forward_frame(t ? x.row(t - 1) : std::span<const double>{}, x.row(t), bins, g[t], ctx, id, t, y.row(t),
                       scratch);
  check_finite(y, "dyn_conv_forward");
  return y;
}

// ---------------------------------------------------------------------------
// GRU cells

/// GRU cell with gates ordered (z, r, n). The input-to-hidden path can be
/// gated: i = g * (W x + b_in), and skipped entirely when not computed.
struct GruCell {
  std::size_t input = 0, hidden = 0;
  Tensor w;     // [3h x in]
  Tensor u;     // [3h x h]
  Tensor b_in;  // [3h]
  Tensor b_hid; // [3h]

  static GruCell init(SeededRng& rng, std::size_t in, std::size_t h) {
    GruCell c{in, h, Tensor({3 * h, in}), Tensor({3 * h, h}), Tensor({3 * h}), Tensor({3 * h})};
    const double bw = detail::glorot_bound(in, h);
    const double bu = detail::glorot_bound(h, h);
    for (double& v : c.w.vec()) v = rng.uniform(-bw, bw);
    for (double& v : c.u.vec()) v = rng.uniform(-bu, bu);
    return c;
  }

  std::uint64_t input_macs() const { return 3 * hidden * input; }
  std::uint64_t recurrent_macs() const { return 3 * hidden * hidden; }

  /// scratch: 6h doubles. h_out may alias nothing else.
  void step(std::span<const double> x, std::span<const double> h_prev, double input_gate, bool compute_input,
            std::span<double> h_out, std::span<double> scratch) const {
    const std::size_t h = hidden;
    std::span<double> gi = scratch.first(3 * h);
    std::span<double> gh = scratch.subspan(3 * h, 3 * h);
    if (compute_input) {
      std::copy(b_in.vec().begin(), b_in.vec().end(), gi.begin());
      matvec_acc(gi, w, x);
      for (double& v : gi) v *= input_gate;
    } else {
      std::fill(gi.begin(), gi.end(), 0.0);
    }
    std::copy(b_hid.vec().begin(), b_hid.vec().end(), gh.begin());
    matvec_acc(gh, u, h_prev);
    for (std::size_t j = 0; j < h; ++j) {
      const double z = sigmoid(gi[j] + gh[j]);
      const double r = sigmoid(gi[h + j] + gh[h + j]);
      const double n = std::tanh(gi[2 * h + j] + r * gh[2 * h + j]);
      h_out[j] = (1.0 - z) * n + z * h_prev[j];
    }
  }

  template <class F>
  void visit(const std::string& p, F&& f, bool dynamic) {
    f(p + ".w", w, dynamic);
    f(p + ".u", u, dynamic);
    f(p + ".b_in", b_in, dynamic);
    f(p + ".b_hid", b_hid, dynamic);
  }
};

using TimeGruCell = GruCell;

/// Partially dynamic time-GRU update: input paths gated by g_t (skipped in
/// Slim mode when g_t == 0), recurrent path always evaluated.
inline std::vector<double> time_gru_step(const TimeGruCell& cell, std::span<const double> x,
                                         std::span<const double> h_prev, double g, const ExecContext& ctx,
                                         BlockId id = BlockId::TGru) {
  if (x.size() != cell.input || h_prev.size() != cell.hidden) throw ShapeError("time_gru_step: shape mismatch");
  std::vector<double> h(cell.hidden), scratch(6 * cell.hidden);
  const bool run = ctx.runs_dynamic(g);
  cell.step(x, h_prev, g, run, h, scratch);
  ctx.count(id, false, cell.recurrent_macs());
  if (run) ctx.count(id, true, cell.input_macs());
  check_finite(h, "time_gru_step");
  return h;
}

// ---------------------------------------------------------------------------
// Channel split shared by the transformer blocks

struct ChannelSplit {
  std::size_t channels = 32;
  std::size_t groups = 4;
  std::size_t dynamic_groups = 2;

  std::size_t group_width() const { return channels / groups; }
  std::size_t static_groups() const { return groups - dynamic_groups; }
  std::size_t static_channels() const { return group_width() * static_groups(); }
  std::size_t dynamic_channels() const { return group_width() * dynamic_groups; }

  void validate() const {
    if (groups == 0 || channels % groups != 0)
      throw ShapeError("channels " + std::to_string(channels) + " not divisible into " + std::to_string(groups) +
                       " groups");
    if (dynamic_groups > groups) throw ShapeError("more dynamic groups than groups");
  }
};

// ---------------------------------------------------------------------------
// Frequency-transformer GRU block

/// Grouped bidirectional GRUs along frequency (per frame, no time
/// dependence), followed by a DynLinearBlock mixing the concatenated group
/// outputs back to C channels.
struct FreqGruBlock {
  ChannelSplit split;
  std::vector<GruCell> fwd, bwd;  // one per group; hidden == group width
  DynLinearBlock mix;

  static FreqGruBlock init(SeededRng& rng, ChannelSplit s) {
    s.validate();
    FreqGruBlock b{s, {}, {}, {}};
    const std::size_t w = s.group_width();
    for (std::size_t k = 0; k < s.groups; ++k) {
      b.fwd.push_back(GruCell::init(rng, w, w));
      b.bwd.push_back(GruCell::init(rng, w, w));
    }
    b.mix = DynLinearBlock::init(rng, 2 * w * s.static_groups(), 2 * w * s.dynamic_groups, s.static_channels(),
                                 s.dynamic_channels());
    return b;
  }

  std::uint64_t group_macs() const { return 2 * (fwd[0].input_macs() + fwd[0].recurrent_macs()); }

  /// Bidirectional recurrence of group k over all bins of one frame.
  /// Writes [bins x 2h] into out (fwd state then bwd state per bin).
  void run_group(std::size_t k, std::span<const double> frame, std::size_t bins, std::span<double> out,
                 std::vector<double>& scratch) const {
    const std::size_t c = split.channels, w = split.group_width(), h = w;
    scratch.resize(8 * h);
    std::span<double> state(scratch.data(), h), next(scratch.data() + h, h), work(scratch.data() + 2 * h, 6 * h);
    std::fill(state.begin(), state.end(), 0.0);
    for (std::size_t f = 0; f < bins; ++f) {
      fwd[k].step(frame.subspan(f * c + k * w, w), state, 1.0, true, next, work);
      std::copy(next.begin(), next.end(), state.begin());
      std::copy(state.begin(), state.end(), out.begin() + f * 2 * h);
    }
    std::fill(state.begin(), state.end(), 0.0);
    for (std::size_t f = bins; f-- > 0;) {
      bwd[k].step(frame.subspan(f * c + k * w, w), state, 1.0, true, next, work);
      std::copy(next.begin(), next.end(), state.begin());
      std::copy(state.begin(), state.end(), out.begin() + f * 2 * h + h);
    }
  }

  /// One frame: frame [F x C] -> static path [F x C_s], dynamic path [F x C_d].
  void forward_frame(std::span<const double> frame, std::size_t bins, double g, const ExecContext& ctx, BlockId id,
                     std::size_t t, std::span<double> ys, std::span<double> yd) const {
    const std::size_t w = split.group_width(), gs = split.static_groups(), G = split.groups;
    const std::size_t cat = 2 * w * G;
    std::vector<double> outs(bins * cat, 0.0), group_out(bins * 2 * w), scratch;
    const bool run_dyn = ctx.runs_dynamic(g);
    if (split.dynamic_groups) ctx.record(id, t, g);
    for (std::size_t k = 0; k < G; ++k) {
      const bool dynamic = k >= gs;
      if (dynamic && !run_dyn) continue;
      run_group(k, frame, bins, group_out, scratch);
      for (std::size_t f = 0; f < bins; ++f)
        std::copy_n(group_out.begin() + f * 2 * w, 2 * w, outs.begin() + f * cat + k * 2 * w);
      ctx.count(id, dynamic, bins * group_macs());
    }
    std::vector<double> mix_scratch(mix.out_s);
    const std::size_t cs = split.static_channels(), cd = split.dynamic_channels();
    const std::size_t split_at = 2 * w * gs;
    for (std::size_t f = 0; f < bins; ++f) {
      std::span<const double> row(outs.data() + f * cat, cat);
      mix.forward(row.first(split_at), row.subspan(split_at), g, ctx, id, ys.subspan(f * cs, cs),
                  yd.subspan(f * cd, cd), mix_scratch);
    }
  }

  template <class F>
  void visit(const std::string& p, F&& f) {
    for (std::size_t k = 0; k < split.groups; ++k) {
      const bool dyn = k >= split.static_groups();
      fwd[k].visit(p + ".group" + std::to_string(k) + ".fwd", f, dyn);
      bwd[k].visit(p + ".group" + std::to_string(k) + ".bwd", f, dyn);
    }
    mix.visit(p + ".mix", f);
  }
};

struct GruPaths {
  Tensor static_path;   // [T x F x C_s]
  Tensor dynamic_path;  // [T x F x C_d]
};

inline GruPaths freq_gru_forward(const FreqGruBlock& block, const Tensor& x, std::span<const double> g,
                                 const ExecContext& ctx, BlockId id = BlockId::FGru0) {
  if (x.rank() != 3 || x.dim(2) != block.split.channels)
    throw ShapeError("freq_gru_forward: channel mismatch, input " + shape_str(x.shape()));
  detail::check_gates(g, x.dim(0), "freq_gru_forward");
  const std::size_t frames = x.dim(0), bins = x.dim(1);
  GruPaths p{Tensor({frames, bins, block.split.static_channels()}),
             Tensor({frames, bins, block.split.dynamic_channels()})};
  for (std::size_t t = 0; t < frames; ++t)
    block.forward_frame(x.row(t), bins, g[t], ctx, id, t, p.static_path.row(t),
                        frames && block.split.dynamic_channels() ? p.dynamic_path.row(t) : std::span<double>{});
  return p;
}

// ---------------------------------------------------------------------------
// Time-transformer GRU block

/// Grouped unidirectional GRUs along time, one recurrence per frequency bin.
/// Dynamic groups use the partially dynamic cell; their hidden state is
/// updated every frame.
struct TimeGruBlock {
  ChannelSplit split;
  std::vector<GruCell> cells;
  DynLinearBlock mix;

  static TimeGruBlock init(SeededRng& rng, ChannelSplit s) {
    s.validate();
    TimeGruBlock b{s, {}, {}};
    const std::size_t w = s.group_width();
    for (std::size_t k = 0; k < s.groups; ++k) b.cells.push_back(GruCell::init(rng, w, w));
    b.mix = DynLinearBlock::init(rng, w * s.static_groups(), w * s.dynamic_groups, s.static_channels(),
                                 s.dynamic_channels());
    return b;
  }

  std::size_t state_size(std::size_t bins) const { return bins * split.channels; }

  /// hidden: [F x G x h], updated in place.
  void step(std::span<const double> frame, std::size_t bins, std::span<double> hidden, double g,
            const ExecContext& ctx, BlockId id, std::size_t t, std::span<double> ys, std::span<double> yd) const {
    const std::size_t c = split.channels, w = split.group_width(), gs = split.static_groups();
    const bool run_dyn = ctx.runs_dynamic(g);
    if (split.dynamic_groups) ctx.record(id, t, g);
    std::vector<double> next(w), scratch(6 * w), mix_scratch(mix.out_s);
    const std::size_t cs = split.static_channels(), cd = split.dynamic_channels();
    for (std::size_t f = 0; f < bins; ++f) {
      for (std::size_t k = 0; k < split.groups; ++k) {
        const bool dynamic = k >= gs;
        std::span<double> h = hidden.subspan(f * c + k * w, w);
        const bool compute_input = !dynamic || run_dyn;
        cells[k].step(frame.subspan(f * c + k * w, w), h, dynamic ? g : 1.0, compute_input, next, scratch);
        std::copy(next.begin(), next.end(), h.begin());
        ctx.count(id, false, cells[k].recurrent_macs());
        if (compute_input) ctx.count(id, dynamic, cells[k].input_macs());
      }
      std::span<const double> hrow(hidden.data() + f * c, c);
      mix.forward(hrow.first(cs), hrow.subspan(cs), g, ctx, id, ys.subspan(f * cs, cs), yd.subspan(f * cd, cd),
                  mix_scratch);
    }
  }

  template <class F>
  void visit(const std::string& p, F&& f) {
    for (std::size_t k = 0; k < split.groups; ++k)
      cells[k].visit(p + ".group" + std::to_string(k), f, k >= split.static_groups());
    mix.visit(p + ".mix", f);
  }
};

// ---------------------------------------------------------------------------
// Dynamic multi-head attention

/// Causal trapezoidal support: (t, t') allowed iff 0 <= t - t' < max_ctx.
inline std::vector<std::vector<bool>> trapezoid_mask(std::size_t frames, std::size_t max_ctx) {
  if (max_ctx == 0) throw std::invalid_argument("trapezoid_mask: context must be positive");
  std::vector<std::vector<bool>> m(frames, std::vector<bool>(frames, false));
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t s = 0; s <= t; ++s) m[t][s] = t - s < max_ctx;
  return m;
}

struct HeadSplit {
  std::size_t attn_dim = 24;
  std::size_t heads = 4;
  std::size_t dynamic_heads = 2;

  std::size_t head_dim() const { return attn_dim / heads; }
  std::size_t static_dim() const { return head_dim() * (heads - dynamic_heads); }
  std::size_t dynamic_dim() const { return head_dim() * dynamic_heads; }

  void validate() const {
    if (heads == 0 || attn_dim % heads != 0)
      throw ShapeError("attention dim " + std::to_string(attn_dim) + " not divisible by " + std::to_string(heads) +
                       " heads");
    if (dynamic_heads > heads) throw ShapeError("more dynamic heads than heads");
  }
};

/// Scaled dot-product attention of one head over `len` keys. keys/values are
/// laid out with `stride` doubles between consecutive positions.
inline void attend(std::span<const double> q, const double* keys, const double* values, std::size_t len,
                   std::size_t stride, std::span<double> scores, std::span<double> out) {
  const std::size_t d = q.size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t j = 0; j < len; ++j) {
    const double* k = keys + j * stride;
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += q[i] * k[i];
    scores[j] = s * scale;
  }
  softmax_inplace(scores.first(len));
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t j = 0; j < len; ++j) {
    const double* v = values + j * stride;
    const double a = scores[j];
    for (std::size_t i = 0; i < d; ++i) out[i] += a * v[i];
  }
}

/// Attention ring buffer of one time-MHA block: per bin, the projected keys
/// and values of the last `capacity` frames.
struct KvCache {
  std::size_t capacity = 0, bins = 0, width = 0;  // width = attn_dim
  std::size_t frames_seen = 0;
  std::vector<double> keys, values;  // [bins x capacity x width]

  KvCache() = default;
  KvCache(std::size_t cap, std::size_t nbins, std::size_t w)
      : capacity(cap), bins(nbins), width(w), keys(nbins * cap * w, 0.0), values(nbins * cap * w, 0.0) {}

  std::size_t slot(std::size_t frame) const { return frame % capacity; }
  double* key(std::size_t bin, std::size_t s) { return keys.data() + (bin * capacity + s) * width; }
  double* value(std::size_t bin, std::size_t s) { return values.data() + (bin * capacity + s) * width; }
};

struct DynMhaBlock {
  ChannelSplit embed;
  HeadSplit heads;
  DynLinearBlock q, k, v, o;

  static DynMhaBlock init(SeededRng& rng, ChannelSplit e, HeadSplit h) {
    e.validate();
    h.validate();
    const std::size_t cs = e.static_channels(), cd = e.dynamic_channels();
    const std::size_t ds = h.static_dim(), dd = h.dynamic_dim();
    DynMhaBlock b{e, h, {}, {}, {}, {}};
    b.q = DynLinearBlock::init(rng, cs, cd, ds, dd);
    b.k = DynLinearBlock::init(rng, cs, cd, ds, dd);
    b.v = DynLinearBlock::init(rng, cs, cd, ds, dd);
    b.o = DynLinearBlock::init(rng, ds, dd, cs, cd);
    return b;
  }

  bool has_dynamic_heads() const { return heads.dynamic_heads > 0; }

  /// q/k/v projections of one position into [D] vectors (static dims first).
  void project(const DynLinearBlock& lin, std::span<const double> x, double g, const ExecContext& ctx, BlockId id,
               std::span<double> out, std::span<double> scratch) const {
    const std::size_t cs = embed.static_channels(), ds = heads.static_dim();
    lin.forward(x.first(cs), x.subspan(cs), g, ctx, id, out.first(ds), out.subspan(ds), scratch);
  }

  /// Runs every head of one query over `len` keys; dynamic heads only when
  /// the gate says so, their outputs scaled by g. `att` is [D].
  void attend_heads(std::span<const double> qrow, const double* keys, const double* values, std::size_t len,
                    std::size_t stride, double g, const ExecContext& ctx, BlockId id, std::span<double> scores,
                    std::span<double> att) const {
    const std::size_t hd = heads.head_dim(), hs = heads.heads - heads.dynamic_heads;
    const bool run_dyn = ctx.runs_dynamic(g);
    for (std::size_t h = 0; h < heads.heads; ++h) {
      const bool dynamic = h >= hs;
      std::span<double> out = att.subspan(h * hd, hd);
      if (dynamic && !run_dyn) {
        std::fill(out.begin(), out.end(), 0.0);
        continue;
      }
      attend(qrow.subspan(h * hd, hd), keys + h * hd, values + h * hd, len, stride, scores, out);
      if (dynamic)
        for (double& x : out) x *= g;
      ctx.count(id, dynamic, 2 * len * hd);
    }
  }

  /// Frequency attention within one frame: every bin attends to every bin.
  void forward_freq_frame(std::span<const double> frame, std::size_t bins, double g, const ExecContext& ctx,
                          BlockId id, std::size_t t, std::span<double> ys, std::span<double> yd) const {
    const std::size_t c = embed.channels, d = heads.attn_dim;
    if (has_dynamic_heads()) ctx.record(id, t, g);
    std::vector<double> qs(bins * d), ks(bins * d), vs(bins * d), att(d), scores(bins), scratch(d + c);
    for (std::size_t f = 0; f < bins; ++f) {
      std::span<const double> x = frame.subspan(f * c, c);
      project(q, x, g, ctx, id, std::span<double>(qs).subspan(f * d, d), scratch);
      project(k, x, g, ctx, id, std::span<double>(ks).subspan(f * d, d), scratch);
      project(v, x, g, ctx, id, std::span<double>(vs).subspan(f * d, d), scratch);
    }
    const std::size_t cs = embed.static_channels(), cd = embed.dynamic_channels(), ds = heads.static_dim();
    for (std::size_t f = 0; f < bins; ++f) {
      attend_heads(std::span<const double>(qs).subspan(f * d, d), ks.data(), vs.data(), bins, d, g, ctx, id, scores,
                   att);
      std::span<const double> a(att);
      o.forward(a.first(ds), a.subspan(ds), g, ctx, id, ys.subspan(f * cs, cs), yd.subspan(f * cd, cd), scratch);
    }
  }

  /// Causal time attention for the newest frame, using and updating `cache`.
  void step_time(std::span<const double> frame, std::size_t bins, KvCache& cache, double g, const ExecContext& ctx,
                 BlockId id, std::size_t t, std::span<double> ys, std::span<double> yd) const {
    const std::size_t c = embed.channels, d = heads.attn_dim;
    if (has_dynamic_heads()) ctx.record(id, t, g);
    const std::size_t now = cache.frames_seen;
    const std::size_t s = cache.slot(now);
    const std::size_t len = std::min(now + 1, cache.capacity);
    std::vector<double> qrow(d), att(d), scores(len), scratch(d + c);
    std::vector<double> ks(len * d), vs(len * d);
    const std::size_t cs = embed.static_channels(), cd = embed.dynamic_channels(), ds = heads.static_dim();
    for (std::size_t f = 0; f < bins; ++f) {
      std::span<const double> x = frame.subspan(f * c, c);
      project(q, x, g, ctx, id, qrow, scratch);
      project(k, x, g, ctx, id, std::span<double>(cache.key(f, s), d), scratch);
      project(v, x, g, ctx, id, std::span<double>(cache.value(f, s), d), scratch);
      // Gather oldest -> newest so the summation order is fixed.
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t src = cache.slot(now + 1 - len + j);
        std::copy_n(cache.key(f, src), d, ks.begin() + j * d);
        std::copy_n(cache.value(f, src), d, vs.begin() + j * d);
      }
      attend_heads(qrow, ks.data(), vs.data(), len, d, g, ctx, id, scores, att);
      std::span<const double> a(att);
      o.forward(a.first(ds), a.subspan(ds), g, ctx, id, ys.subspan(f * cs, cs), yd.subspan(f * cd, cd), scratch);
    }
    cache.frames_seen = now + 1;
  }

  template <class F>
  void visit(const std::string& p, F&& f) {
    q.visit(p + ".q", f);
    k.visit(p + ".k", f);
    v.visit(p + ".v", f);
    o.visit(p + ".o", f);
  }
};

enum class AttentionAxis { Frequency, Time };

/// Whole-sequence MHA output (no residual): x [T x F x C] -> [T x F x C].
inline Tensor dyn_mha_forward(const DynMhaBlock& block, const Tensor& x, std::span<const double> g,
                              const ExecContext& ctx, AttentionAxis axis, std::size_t max_ctx = 63,
                              BlockId id = BlockId::TMha) {
  if (x.rank() != 3 || x.dim(2) != block.embed.channels)
    throw ShapeError("dyn_mha_forward: input " + shape_str(x.shape()) + " does not match embed dim");
  detail::check_gates(g, x.dim(0), "dyn_mha_forward");
  const std::size_t frames = x.dim(0), bins = x.dim(1), c = block.embed.channels;
  const std::size_t cs = block.embed.static_channels(), cd = block.embed.dynamic_channels();
  Tensor y({frames, bins, c});
  std::vector<double> ys(bins * cs), yd(bins * cd);
  KvCache cache(max_ctx, bins, block.heads.attn_dim);
  for (std::size_t t = 0; t < frames; ++t) {
    if (axis == AttentionAxis::Frequency)
      block.forward_freq_frame(x.row(t), bins, g[t], ctx, id, t, ys, yd);
    else
      block.step_time(x.row(t), bins, cache, g[t], ctx, id, t, ys, yd);
    auto out = y.row(t);
    for (std::size_t f = 0; f < bins; ++f) {
      std::copy_n(ys.begin() + f * cs, cs, out.begin() + f * c);
      std::copy_n(yd.begin() + f * cd, cd, out.begin() + f * c + cs);
    }
  }
  check_finite(y, "dyn_mha_forward");
  return y;
}

// ---------------------------------------------------------------------------
// Transformer layers (attention + GRU, each with a residual connection)

namespace detail {
inline void add_paths(std::span<double> frame, std::size_t bins, std::size_t cs, std::size_t cd,
                      std::span<const double> ys, std::span<const double> yd) {
  const std::size_t c = cs + cd;
  for (std::size_t f = 0; f < bins; ++f) {
    for (std::size_t i = 0; i < cs; ++i) frame[f * c + i] += ys[f * cs + i];
    for (std::size_t i = 0; i < cd; ++i) frame[f * c + cs + i] += yd[f * cd + i];
  }
}
}  // namespace detail

struct FreqLayer {
  DynMhaBlock mha;
  FreqGruBlock gru;

  void forward_frame(std::span<double> frame, std::size_t bins, double g, const ExecContext& ctx, BlockId mha_id,
                     BlockId gru_id, std::size_t t) const {
    const std::size_t cs = mha.embed.static_channels(), cd = mha.embed.dynamic_channels();
    std::vector<double> ys(bins * cs), yd(bins * cd);
    mha.forward_freq_frame(frame, bins, g, ctx, mha_id, t, ys, yd);
    detail::add_paths(frame, bins, cs, cd, ys, yd);
    gru.forward_frame(frame, bins, g, ctx, gru_id, t, ys, yd);
    detail::add_paths(frame, bins, cs, cd, ys, yd);
  }

  template <class F>
  void visit(const std::string& p, F&& f) {
    mha.visit(p + ".mha", f);
    gru.visit(p + ".gru", f);
  }
};

struct TimeLayerState {
  KvCache cache;
  std::vector<double> hidden;  // [F x C]
};

struct TimeLayer {
  DynMhaBlock mha;
  TimeGruBlock gru;

  TimeLayerState make_state(std::size_t bins, std::size_t max_ctx) const {
    return {KvCache(max_ctx, bins, mha.heads.attn_dim), std::vector<double>(gru.state_size(bins), 0.0)};
  }

  void step(std::span<double> frame, std::size_t bins, TimeLayerState& st, double g, const ExecContext& ctx,
            std::size_t t) const {
    const std::size_t cs = mha.embed.static_channels(), cd = mha.embed.dynamic_channels();
    std::vector<double> ys(bins * cs), yd(bins * cd);
    mha.step_time(frame, bins, st.cache, g, ctx, BlockId::TMha, t, ys, yd);
    detail::add_paths(frame, bins, cs, cd, ys, yd);
    gru.step(frame, bins, st.hidden, g, ctx, BlockId::TGru, t, ys, yd);
    detail::add_paths(frame, bins, cs, cd, ys, yd);
  }

  template <class F>
  void visit(const std::string& p, F&& f) {
    mha.visit(p + ".mha", f);
    gru.visit(p + ".gru", f);
  }
};

}  // namespace dsn
