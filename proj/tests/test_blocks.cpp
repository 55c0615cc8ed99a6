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


#include <gtest/gtest.h>

#include <cmath>

#include "dsn/blocks.hpp"
#include "dsn/verify.hpp"

namespace {

using namespace dsn;

const ExecContext kSlim{ExecMode::Slim};
const ExecContext kDense{ExecMode::MaskedDense};

Tensor random_tensor(SeededRng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<double> binary_gates(std::size_t n, std::uint64_t seed) { return verify::random_binary_gates(n, seed).values; }

void randomize_biases(SeededRng& rng, Tensor& t) {
  for (double& v : t.vec()) v = rng.uniform(-0.5, 0.5);
}

// Plain linear map y = W x + b from the full (unsplit) weight.
std::vector<double> affine(const Tensor& w, const Tensor& b, const std::vector<double>& x) {
  std::vector<double> y(w.dim(0));
  for (std::size_t o = 0; o < w.dim(0); ++o) {
    double s = b.empty() ? 0.0 : b[o];
    for (std::size_t i = 0; i < w.dim(1); ++i) s += w.at(o, i) * x[i];
    y[o] = s;
  }
  return y;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Textbook GRU step with gates (z, r, n), input path scaled by g.
std::vector<double> gru_oracle(const GruCell& c, const std::vector<double>& x, const std::vector<double>& h, double g) {
  const std::size_t n = c.hidden;
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    double iz = c.b_in[j], ir = c.b_in[n + j], in = c.b_in[2 * n + j];
    for (std::size_t i = 0; i < c.input; ++i) {
      iz += c.w.at(j, i) * x[i];
      ir += c.w.at(n + j, i) * x[i];
      in += c.w.at(2 * n + j, i) * x[i];
    }
    double hz = c.b_hid[j], hr = c.b_hid[n + j], hn = c.b_hid[2 * n + j];
    for (std::size_t i = 0; i < n; ++i) {
      hz += c.u.at(j, i) * h[i];
      hr += c.u.at(n + j, i) * h[i];
      hn += c.u.at(2 * n + j, i) * h[i];
    }
    const double z = sig(g * iz + hz), r = sig(g * ir + hr);
    const double nn = std::tanh(g * in + r * hn);
    out[j] = (1 - z) * nn + z * h[j];
  }
  return out;
}

// ---------------------------------------------------------------------------

TEST(DynLinear, MatchesPartitionedFormula) {
  SeededRng rng(1);
  DynLinearBlock b = DynLinearBlock::init(rng, 3, 4, 5, 2);
  randomize_biases(rng, b.b_s);
  randomize_biases(rng, b.b_d);
  std::vector<double> xs{0.1, -0.2, 0.3}, xd{0.5, 0.4, -0.3, 0.2}, ys(5), yd(2), scratch(5);
  const double g = 0.7;
  b.forward(xs, xd, g, kDense, BlockId::TMha, ys, yd, scratch);
  const auto ss = affine(b.w_ss, b.b_s, xs), ds = affine(b.w_ds, Tensor(), xd);
  const auto sd = affine(b.w_sd, b.b_d, xs), dd = affine(b.w_dd, Tensor(), xd);
  for (std::size_t o = 0; o < 5; ++o) EXPECT_NEAR(ys[o], ss[o] + g * ds[o], 1e-14);
  for (std::size_t o = 0; o < 2; ++o) EXPECT_NEAR(yd[o], g * (sd[o] + dd[o]), 1e-14);
}

TEST(DynLinear, StaticOutputIgnoresDynamicInputsAtZeroGate) {
  SeededRng rng(2);
  const DynLinearBlock b = DynLinearBlock::init(rng, 4, 4, 4, 4);
  std::vector<double> xs{1, 2, 3, 4}, xd{5, 6, 7, 8}, ys(4), yd(4), ys2(4), yd2(4), scratch(4);
  for (const auto& ctx : {kSlim, kDense}) {
    b.forward(xs, xd, 0.0, ctx, BlockId::TMha, ys, yd, scratch);
    std::vector<double> other{-9, 9, -9, 9};
    b.forward(xs, other, 0.0, ctx, BlockId::TMha, ys2, yd2, scratch);
    EXPECT_EQ(ys, ys2);
    for (double v : yd) EXPECT_EQ(v, 0.0);
  }
}

TEST(DynLinear, MacCountsPerMode) {
  SeededRng rng(3);
  const DynLinearBlock b = DynLinearBlock::init(rng, 16, 16, 12, 12);
  std::vector<double> x(16, 0.1), ys(12), yd(12), scratch(12);
  MacCounter m;
  b.forward(x, x, 0.0, {ExecMode::Slim, &m}, BlockId::TMha, ys, yd, scratch);
  EXPECT_EQ(m.total(), 12u * 16u);
  MacCounter d;
  b.forward(x, x, 0.0, {ExecMode::MaskedDense, &d}, BlockId::TMha, ys, yd, scratch);
  EXPECT_EQ(d.total(), 4u * 12u * 16u);
  EXPECT_EQ(b.static_macs() + b.dynamic_macs(), 4u * 12u * 16u);
}

// ---------------------------------------------------------------------------

TEST(DynConv, ZeroGateEqualsStaticBranch) {
  SeededRng rng(4);
  const DynConvPair p = DynConvPair::init(rng, 4, 6, false, true);
  const Tensor x = random_tensor(rng, {5, 17, 4});
  const std::vector<double> g(5, 0.0);
  const Tensor y = dyn_conv_forward(p, x, g, kSlim);
  EXPECT_EQ(y, conv2d(x, p.static_conv.kernel, p.static_conv.bias.data()));
}

TEST(DynConv, SlimEqualsMaskedDense) {
  SeededRng rng(5);
  for (bool transpose : {false, true}) {
    const DynConvPair p = DynConvPair::init(rng, 4, 6, transpose, true);
    const Tensor x = random_tensor(rng, {12, 9, 4});
    const std::vector<double> ones(12, 1.0);
    EXPECT_EQ(dyn_conv_forward(p, x, ones, kSlim), dyn_conv_forward(p, x, ones, kDense));
    const auto g = binary_gates(12, 6);
    const Tensor a = dyn_conv_forward(p, x, g, kSlim), b = dyn_conv_forward(p, x, g, kDense);
    EXPECT_LE(verify::relative_error(a.data(), b.data()), 1e-12);
  }
}

TEST(DynConv, SoftGateScalesDynamicBranch) {
  SeededRng rng(7);
  const DynConvPair p = DynConvPair::init(rng, 2, 3, false, true);
  const Tensor x = random_tensor(rng, {3, 9, 2});
  const std::vector<double> g{0.25, 0.5, 0.75};
  const Tensor y = dyn_conv_forward(p, x, g, kDense);
  const Tensor s = conv2d(x, p.static_conv.kernel, p.static_conv.bias.data());
  const Tensor d = conv2d(x, p.dynamic_conv.kernel, p.dynamic_conv.bias.data());
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < y.row(t).size(); ++i) EXPECT_NEAR(y.row(t)[i], s.row(t)[i] + g[t] * d.row(t)[i], 1e-14);
}

TEST(DynConv, Errors) {
  SeededRng rng(8);
  const DynConvPair p = DynConvPair::init(rng, 2, 3, false, true);
  EXPECT_THROW(dyn_conv_forward(p, Tensor({3, 9, 2}), std::vector<double>(2), kSlim), ShapeError);
  EXPECT_THROW(dyn_conv_forward(p, Tensor({3, 9, 5}), std::vector<double>(3), kSlim), ShapeError);
}

TEST(DynConv, MacsSkippedAtZeroGate) {
  SeededRng rng(9);
  const DynConvPair p = DynConvPair::init(rng, 2, 3, false, true);
  const Tensor x = random_tensor(rng, {4, 9, 2});
  MacCounter m;
  dyn_conv_forward(p, x, std::vector<double>{1, 0, 0, 1}, {ExecMode::Slim, &m});
  const std::uint64_t per_frame = 5 * 3 * 6 * 2;
  EXPECT_EQ(m.static_macs[static_cast<std::size_t>(BlockId::Conv3)], 4 * per_frame);
  EXPECT_EQ(m.dynamic_macs[static_cast<std::size_t>(BlockId::Conv3)], 2 * per_frame);
}

// ---------------------------------------------------------------------------

TEST(TimeGru, ZeroGateIgnoresInput) {
  SeededRng rng(10);
  const GruCell c = GruCell::init(rng, 8, 8);
  std::vector<double> x(8), x2(8), h(8);
  for (std::size_t i = 0; i < 8; ++i) {
    x[i] = rng.uniform(-1, 1);
    x2[i] = rng.uniform(-1, 1);
    h[i] = rng.uniform(-1, 1);
  }
  for (const auto& ctx : {kSlim, kDense}) EXPECT_EQ(time_gru_step(c, x, h, 0.0, ctx), time_gru_step(c, x2, h, 0.0, ctx));
}

TEST(TimeGru, UnitGateIsStandardGru) {
  SeededRng rng(11);
  GruCell c = GruCell::init(rng, 8, 8);
  randomize_biases(rng, c.b_in);
  randomize_biases(rng, c.b_hid);
  std::vector<double> x(8), h(8);
  for (std::size_t i = 0; i < 8; ++i) {
    x[i] = rng.uniform(-1, 1);
    h[i] = rng.uniform(-1, 1);
  }
  const auto got = time_gru_step(c, x, h, 1.0, kSlim);
  const auto want = gru_oracle(c, x, h, 1.0);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(got[i], want[i], 1e-14);
  const auto soft = time_gru_step(c, x, h, 0.3, kDense);
  const auto soft_want = gru_oracle(c, x, h, 0.3);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(soft[i], soft_want[i], 1e-14);
}

TEST(TimeGru, ClosedFormHalfDecay) {
  SeededRng rng(12);
  GruCell c = GruCell::init(rng, 4, 4);
  std::fill(c.u.vec().begin(), c.u.vec().end(), 0.0);
  std::vector<double> x{1, 2, 3, 4}, h{0.8, -0.4, 0.2, 1.0};
  const auto out = time_gru_step(c, x, h, 0.0, kSlim);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out[i], 0.5 * h[i]);
}

TEST(TimeGru, StateStaysConvexAcrossGateFlip) {
  SeededRng rng(13);
  const GruCell c = GruCell::init(rng, 8, 8);
  std::vector<double> h(8, 0.0);
  for (int t = 0; t < 40; ++t) {
    std::vector<double> x(8);
    for (double& v : x) v = rng.uniform(-2, 2);
    const double g = t < 20 ? 1.0 : 0.0;
    const auto next = time_gru_step(c, x, h, g, kSlim);
    const auto want = gru_oracle(c, x, h, g);
    for (std::size_t i = 0; i < 8; ++i) {
      EXPECT_NEAR(next[i], want[i], 1e-14);
      EXPECT_LE(std::abs(next[i]), std::max(1.0, std::abs(h[i])) + 1e-15);
    }
    h = next;
  }
  EXPECT_THROW(time_gru_step(c, std::vector<double>(3), h, 1.0, kSlim), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(FreqGru, SingleFrameMatchesUnrolledOracle) {
  SeededRng rng(14);
  FreqGruBlock b = FreqGruBlock::init(rng, {32, 4, 2});
  const Tensor x = random_tensor(rng, {1, 7, 32});
  const double g = 1.0;
  const GruPaths p = freq_gru_forward(b, x, std::vector<double>{g}, kSlim);
  // Unrolled reference: each group forward and backward over the 7 bins.
  std::vector<std::vector<double>> cat(7, std::vector<double>(64));
  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<double> h(8, 0.0);
    for (std::size_t f = 0; f < 7; ++f) {
      std::vector<double> in(x.row(0).begin() + f * 32 + k * 8, x.row(0).begin() + f * 32 + k * 8 + 8);
      h = gru_oracle(b.fwd[k], in, h, 1.0);
      std::copy(h.begin(), h.end(), cat[f].begin() + k * 16);
    }
    h.assign(8, 0.0);
    for (std::size_t f = 7; f-- > 0;) {
      std::vector<double> in(x.row(0).begin() + f * 32 + k * 8, x.row(0).begin() + f * 32 + k * 8 + 8);
      h = gru_oracle(b.bwd[k], in, h, 1.0);
      std::copy(h.begin(), h.end(), cat[f].begin() + k * 16 + 8);
    }
  }
  for (std::size_t f = 0; f < 7; ++f) {
    std::vector<double> s(cat[f].begin(), cat[f].begin() + 32), d(cat[f].begin() + 32, cat[f].end());
    const auto ss = affine(b.mix.w_ss, b.mix.b_s, s), ds = affine(b.mix.w_ds, Tensor(), d);
    const auto sd = affine(b.mix.w_sd, b.mix.b_d, s), dd = affine(b.mix.w_dd, Tensor(), d);
    for (std::size_t o = 0; o < 16; ++o) {
      EXPECT_NEAR(p.static_path.at(0, f, o), ss[o] + g * ds[o], 1e-13);
      EXPECT_NEAR(p.dynamic_path.at(0, f, o), g * (sd[o] + dd[o]), 1e-13);
    }
  }
}

TEST(FreqGru, ZeroGateInvariantToDynamicWeights) {
  SeededRng rng(15);
  FreqGruBlock b = FreqGruBlock::init(rng, {32, 4, 2});
  const Tensor x = random_tensor(rng, {3, 9, 32});
  const std::vector<double> g(3, 0.0);
  const GruPaths before = freq_gru_forward(b, x, g, kSlim);
  b.visit("f", [&](const std::string&, Tensor& t, bool dyn) {
    if (dyn)
      for (double& v : t.vec()) v = rng.uniform(-3, 3);
  });
  EXPECT_EQ(freq_gru_forward(b, x, g, kSlim).static_path, before.static_path);
  EXPECT_EQ(freq_gru_forward(b, x, g, kDense).static_path, before.static_path);
}

TEST(FreqGru, SlimEqualsMaskedDenseAndNoTimeDependence) {
  SeededRng rng(16);
  const FreqGruBlock b = FreqGruBlock::init(rng, {32, 4, 2});
  Tensor x = random_tensor(rng, {6, 9, 32});
  const std::vector<double> ones(6, 1.0);
  const GruPaths s1 = freq_gru_forward(b, x, ones, kSlim), d1 = freq_gru_forward(b, x, ones, kDense);
  EXPECT_EQ(s1.static_path, d1.static_path);
  EXPECT_EQ(s1.dynamic_path, d1.dynamic_path);
  const auto g = binary_gates(6, 17);
  const GruPaths s = freq_gru_forward(b, x, g, kSlim), d = freq_gru_forward(b, x, g, kDense);
  EXPECT_LE(verify::relative_error(s.static_path.data(), d.static_path.data()), 1e-12);
  EXPECT_LE(verify::relative_error(s.dynamic_path.data(), d.dynamic_path.data()), 1e-12);
  // Changing frame 0 changes no other frame.
  for (double& v : x.row(0)) v += 1.0;
  const GruPaths s2 = freq_gru_forward(b, x, ones, kSlim);
  for (std::size_t t = 1; t < 6; ++t)
    EXPECT_TRUE(std::equal(s1.static_path.row(t).begin(), s1.static_path.row(t).end(), s2.static_path.row(t).begin()));
  EXPECT_THROW(freq_gru_forward(b, Tensor({2, 9, 16}), std::vector<double>(2), kSlim), ShapeError);
  EXPECT_THROW(FreqGruBlock::init(rng, {30, 4, 2}), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(Trapezoid, Examples) {
  const auto id = trapezoid_mask(5, 1);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(id[i][j], i == j);
  const auto m = trapezoid_mask(100, 63);
  std::size_t count = 0;
  for (std::size_t j = 0; j < 100; ++j) {
    EXPECT_EQ(m[99][j], j >= 37);
    count += m[99][j];
  }
  EXPECT_EQ(count, 63u);
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t j = i + 1; j < 100; ++j) EXPECT_FALSE(m[i][j]);
  EXPECT_THROW(trapezoid_mask(4, 0), std::invalid_argument);
}

// Reference attention: projections of every position, then masked softmax
// attention per head, all written out directly.
Tensor mha_oracle(const DynMhaBlock& b, const Tensor& x, AttentionAxis axis, std::size_t ctx, bool static_only) {
  const std::size_t T = x.dim(0), F = x.dim(1), C = x.dim(2);
  const std::size_t D = b.heads.attn_dim, hd = b.heads.head_dim(), cs = b.embed.static_channels();
  const std::size_t ds = b.heads.static_dim();
  auto proj = [&](const DynLinearBlock& l, std::span<const double> v) {
    std::vector<double> xs(v.begin(), v.begin() + cs), xd(v.begin() + cs, v.end());
    auto s = affine(l.w_ss, l.b_s, xs);
    auto d = affine(l.w_sd, l.b_d, xs);
    if (!static_only) {
      const auto a = affine(l.w_ds, Tensor(), xd), e = affine(l.w_dd, Tensor(), xd);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += a[i];
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += e[i];
    } else {
      std::fill(d.begin(), d.end(), 0.0);
    }
    s.insert(s.end(), d.begin(), d.end());
    return s;
  };
  std::vector<std::vector<double>> q(T * F), k(T * F), v(T * F);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f) {
      auto pos = x.row(t).subspan(f * C, C);
      q[t * F + f] = proj(b.q, pos);
      k[t * F + f] = proj(b.k, pos);
      v[t * F + f] = proj(b.v, pos);
    }
  const auto mask = trapezoid_mask(T, ctx);
  const std::size_t heads = static_only ? b.heads.heads - b.heads.dynamic_heads : b.heads.heads;
  Tensor y({T, F, C});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f) {
      std::vector<double> att(D, 0.0);
      for (std::size_t h = 0; h < heads; ++h) {
        std::vector<std::pair<std::size_t, double>> sc;
        double mx = -1e300;
        auto key_at = [&](std::size_t j) { return axis == AttentionAxis::Time ? j * F + f : t * F + j; };
        const std::size_t n = axis == AttentionAxis::Time ? T : F;
        for (std::size_t j = 0; j < n; ++j) {
          if (axis == AttentionAxis::Time && !mask[t][j]) continue;
          double s = 0.0;
          for (std::size_t i = 0; i < hd; ++i) s += q[t * F + f][h * hd + i] * k[key_at(j)][h * hd + i];
          s /= std::sqrt(static_cast<double>(hd));
          sc.push_back({key_at(j), s});
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (auto& [j, s] : sc) z += std::exp(s - mx);
        for (auto& [j, s] : sc)
          for (std::size_t i = 0; i < hd; ++i) att[h * hd + i] += std::exp(s - mx) / z * v[j][h * hd + i];
      }
      std::vector<double> as(att.begin(), att.begin() + ds), ad(att.begin() + ds, att.end());
      auto os = affine(b.o.w_ss, b.o.b_s, as);
      auto od = affine(b.o.w_sd, b.o.b_d, as);
      if (!static_only) {
        const auto a = affine(b.o.w_ds, Tensor(), ad), e = affine(b.o.w_dd, Tensor(), ad);
        for (std::size_t i = 0; i < os.size(); ++i) os[i] += a[i];
        for (std::size_t i = 0; i < od.size(); ++i) od[i] += e[i];
      } else {
        std::fill(od.begin(), od.end(), 0.0);
      }
      for (std::size_t i = 0; i < os.size(); ++i) y.at(t, f, i) = os[i];
      for (std::size_t i = 0; i < od.size(); ++i) y.at(t, f, cs + i) = od[i];
    }
  return y;
}

DynMhaBlock random_mha(SeededRng& rng) {
  DynMhaBlock b = DynMhaBlock::init(rng, {32, 4, 2}, {24, 4, 2});
  for (DynLinearBlock* l : {&b.q, &b.k, &b.v, &b.o}) {
    randomize_biases(rng, l->b_s);
    randomize_biases(rng, l->b_d);
  }
  return b;
}

TEST(DynMha, MatchesReferenceAttention) {
  SeededRng rng(18);
  const DynMhaBlock b = random_mha(rng);
  const Tensor x = random_tensor(rng, {9, 5, 32});
  const std::vector<double> ones(9, 1.0);
  for (auto axis : {AttentionAxis::Frequency, AttentionAxis::Time}) {
    const Tensor y = dyn_mha_forward(b, x, ones, kSlim, axis, 4);
    const Tensor ref = mha_oracle(b, x, axis, 4, false);
    EXPECT_LT(max_abs_diff(y.data(), ref.data()), 1e-12);
  }
}

TEST(DynMha, ZeroGateIsStaticTwoHeadAttention) {
  SeededRng rng(19);
  const DynMhaBlock b = random_mha(rng);
  const Tensor x = random_tensor(rng, {7, 5, 32});
  const std::vector<double> zeros(7, 0.0);
  for (auto axis : {AttentionAxis::Frequency, AttentionAxis::Time}) {
    const Tensor ref = mha_oracle(b, x, axis, 63, true);
    for (const auto& ctx : {kSlim, kDense}) {
      const Tensor y = dyn_mha_forward(b, x, zeros, ctx, axis);
      EXPECT_LT(max_abs_diff(y.data(), ref.data()), 1e-12);
    }
  }
}

TEST(DynMha, SinglePositionReturnsValueProjection) {
  SeededRng rng(20);
  const DynMhaBlock b = random_mha(rng);
  const Tensor x = random_tensor(rng, {1, 1, 32});
  const Tensor y = dyn_mha_forward(b, x, std::vector<double>{1.0}, kSlim, AttentionAxis::Frequency);
  std::vector<double> xs(x.vec().begin(), x.vec().begin() + 16), xd(x.vec().begin() + 16, x.vec().end());
  auto vs = affine(b.v.w_ss, b.v.b_s, xs), vd = affine(b.v.w_sd, b.v.b_d, xs);
  const auto a = affine(b.v.w_ds, Tensor(), xd), e = affine(b.v.w_dd, Tensor(), xd);
  for (std::size_t i = 0; i < 12; ++i) {
    vs[i] += a[i];
    vd[i] += e[i];
  }
  auto os = affine(b.o.w_ss, b.o.b_s, vs), od = affine(b.o.w_sd, b.o.b_d, vs);
  const auto c = affine(b.o.w_ds, Tensor(), vd), d = affine(b.o.w_dd, Tensor(), vd);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_NEAR(y[i], os[i] + c[i], 1e-13);
    EXPECT_NEAR(y[16 + i], od[i] + d[i], 1e-13);
  }
}

TEST(DynMha, SlimEqualsMaskedDense) {
  SeededRng rng(21);
  const DynMhaBlock b = random_mha(rng);
  const Tensor x = random_tensor(rng, {20, 5, 32});
  const auto g = binary_gates(20, 22);
  const std::vector<double> ones(20, 1.0);
  for (auto axis : {AttentionAxis::Frequency, AttentionAxis::Time}) {
    EXPECT_EQ(dyn_mha_forward(b, x, ones, kSlim, axis, 8), dyn_mha_forward(b, x, ones, kDense, axis, 8));
    const Tensor s = dyn_mha_forward(b, x, g, kSlim, axis, 8), d = dyn_mha_forward(b, x, g, kDense, axis, 8);
    EXPECT_LE(verify::relative_error(s.data(), d.data()), 1e-12);
  }
}

TEST(DynMha, TimeAttentionIsCausal) {
  SeededRng rng(23);
  const DynMhaBlock b = random_mha(rng);
  Tensor x = random_tensor(rng, {12, 3, 32});
  const auto g = binary_gates(12, 24);
  const Tensor y = dyn_mha_forward(b, x, g, kSlim, AttentionAxis::Time, 5);
  for (std::size_t t = 7; t < 12; ++t)
    for (double& v : x.row(t)) v = rng.uniform(-2, 2);
  const Tensor y2 = dyn_mha_forward(b, x, g, kSlim, AttentionAxis::Time, 5);
  for (std::size_t t = 0; t < 7; ++t) EXPECT_TRUE(std::equal(y.row(t).begin(), y.row(t).end(), y2.row(t).begin()));
}

TEST(DynMha, Errors) {
  SeededRng rng(25);
  EXPECT_THROW(DynMhaBlock::init(rng, {32, 4, 2}, {25, 4, 2}), ShapeError);
  const DynMhaBlock b = random_mha(rng);
  EXPECT_THROW(dyn_mha_forward(b, Tensor({2, 3, 16}), std::vector<double>(2), kSlim, AttentionAxis::Time), ShapeError);
}

TEST(TimeLayer, ZeroGateInvariantToDynamicWeights) {
  SeededRng rng(26);
  TimeLayer layer{random_mha(rng), TimeGruBlock::init(rng, {32, 4, 2})};
  const Tensor x = random_tensor(rng, {6, 3, 32});
  auto run = [&](const TimeLayer& l) {
    TimeLayerState st = l.make_state(3, 63);
    std::vector<double> out;
    for (std::size_t t = 0; t < 6; ++t) {
      std::vector<double> frame(x.row(t).begin(), x.row(t).end());
      l.step(frame, 3, st, 0.0, kSlim, t);
      out.insert(out.end(), frame.begin(), frame.end());
    }
    return out;
  };
  const auto before = run(layer);
  layer.visit("t", [&](const std::string&, Tensor& t, bool dyn) {
    if (dyn)
      for (double& v : t.vec()) v = rng.uniform(-3, 3);
  });
  EXPECT_EQ(run(layer), before);
}

}  // namespace
