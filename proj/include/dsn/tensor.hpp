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

// Dense float64 tensors and the small deterministic kernel set the network
// is built from. Everything here is single-threaded and bit-reproducible.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace dsn {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_volume(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Row-major dense tensor of doubles. product(shape) == data.size() always.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_volume(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Contiguous slice along the leading axis.
  std::span<double> row(std::size_t i) {
    const std::size_t stride = data_.size() / shape_.at(0);
    return std::span<double>(data_).subspan(i * stride, stride);
  }
  std::span<const double> row(std::size_t i) const {
    const std::size_t stride = data_.size() / shape_.at(0);
    return std::span<const double>(data_).subspan(i * stride, stride);
  }

  Tensor reshaped(Shape s) const {
    if (shape_volume(s) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void check_finite(std::span<const double> v, const char* where) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + where);
}

inline void check_finite(const Tensor& t, const char* where) { check_finite(t.data(), where); }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// max |a-b| / max(max|b|, tiny): relative error of a against reference b.
inline double max_rel_diff(std::span<const double> a, std::span<const double> b) {
  double scale = 0.0;
  for (double x : b) scale = std::max(scale, std::abs(x));
  const double d = max_abs_diff(a, b);
  return scale > 0.0 ? d / scale : d;
}

// ---------------------------------------------------------------------------
// Seeded randomness

/// mt19937_64 plus explicit bit-to-double mapping, so streams are identical on
/// every platform (std distributions are implementation-defined).
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  /// Uniform in the open interval (0, 1).
  double uniform_open() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard Gumbel(0, 1).
  double gumbel() { return -std::log(-std::log(uniform_open())); }
  /// Standard normal via Box-Muller.
  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Glorot-uniform. For rank >= 3 the leading dims are the receptive field and
/// the last two are (fan_in, fan_out); for rank 2 the shape is [out, in].
inline Tensor xavier_init(SeededRng& rng, const Shape& shape) {
  if (shape.empty()) throw ShapeError("xavier_init: empty shape");
  double fan_in = 1.0;
  double fan_out = 1.0;
  if (shape.size() == 1) {
    fan_in = fan_out = static_cast<double>(shape[0]);
  } else if (shape.size() == 2) {
    fan_out = static_cast<double>(shape[0]);
    fan_in = static_cast<double>(shape[1]);
  } else {
    double receptive = 1.0;
    for (std::size_t i = 0; i + 2 < shape.size(); ++i) receptive *= static_cast<double>(shape[i]);
    fan_in = receptive * static_cast<double>(shape[shape.size() - 2]);
    fan_out = receptive * static_cast<double>(shape[shape.size() - 1]);
  }
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t(shape);
  for (double& v : t.vec()) v = rng.uniform(-bound, bound);
  return t;
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.vec().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b.vec().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  check_finite(c, "matmul");
  return c;
}

/// out[o] (+)= sum_i w[o, i] * x[i], w stored [out x in]. Returns MACs.
inline std::uint64_t matvec_acc(std::span<double> out, const Tensor& w, std::span<const double> x) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  if (out.size() != rows || x.size() != cols)
    throw ShapeError("matvec: weight " + shape_str(w.shape()) + " vs in " +
                     std::to_string(x.size()) + " out " + std::to_string(out.size()));
  const double* wp = w.vec().data();
  for (std::size_t o = 0; o < rows; ++o) {
    const double* wr = wp + o * cols;
    double acc = 0.0;
    for (std::size_t i = 0; i < cols; ++i) acc += wr[i] * x[i];
    out[o] += acc;
  }
  return static_cast<std::uint64_t>(rows) * cols;
}

// ---------------------------------------------------------------------------
// Convolutions. Frames are laid out [F x C] (frequency-major, channel-minor).
// Kernels are [2 x 3 x Cin x Cout]: time tap 0 is the previous frame, tap 1
// the current frame; frequency stride 2 with one bin of symmetric padding.

inline constexpr std::size_t kKernelTime = 2;
inline constexpr std::size_t kKernelFreq = 3;
inline constexpr std::size_t kFreqStride = 2;
inline constexpr std::size_t kFreqPad = 1;

inline std::size_t conv_out_bins(std::size_t bins) {
  return (bins + 2 * kFreqPad - kKernelFreq) / kFreqStride + 1;
}
inline std::size_t deconv_out_bins(std::size_t bins) {
  return (bins - 1) * kFreqStride + kKernelFreq - 2 * kFreqPad;
}

inline void check_kernel(const Tensor& k, std::size_t cin, const char* who) {
  if (k.rank() != 4 || k.dim(0) != kKernelTime || k.dim(1) != kKernelFreq || k.dim(2) != cin)
    throw ShapeError(std::string(who) + ": kernel " + shape_str(k.shape()) +
                     " incompatible with " + std::to_string(cin) + " input channels");
}

/// One output frame of the causal strided conv. `prev` may be empty (zero
/// padding before the first frame). Returns the nominal MAC count.
inline std::uint64_t conv2d_frame(std::span<const double> prev, std::span<const double> cur,
                                  std::size_t bins, const Tensor& k,
                                  std::span<const double> bias, std::span<double> out) {
  const std::size_t cin = k.dim(2), cout = k.dim(3);
  const std::size_t obins = conv_out_bins(bins);
  if (cur.size() != bins * cin || out.size() != obins * cout ||
      (!prev.empty() && prev.size() != cur.size()) || (!bias.empty() && bias.size() != cout))
    throw ShapeError("conv2d_frame: frame sizes do not match kernel " + shape_str(k.shape()));
  const double* kp = k.vec().data();
  for (std::size_t fo = 0; fo < obins; ++fo) {
    double* acc = out.data() + fo * cout;
    for (std::size_t o = 0; o < cout; ++o) acc[o] = bias.empty() ? 0.0 : bias[o];
    for (std::size_t kt = 0; kt < kKernelTime; ++kt) {
      std::span<const double> src = kt == 0 ? prev : cur;
      if (src.empty()) continue;
      for (std::size_t kf = 0; kf < kKernelFreq; ++kf) {
        const std::ptrdiff_t fi = static_cast<std::ptrdiff_t>(fo * kFreqStride + kf) -
                                  static_cast<std::ptrdiff_t>(kFreqPad);
        if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(bins)) continue;
        const double* xin = src.data() + static_cast<std::size_t>(fi) * cin;
        const double* wk = kp + (kt * kKernelFreq + kf) * cin * cout;
        for (std::size_t c = 0; c < cin; ++c) {
          const double xv = xin[c];
          const double* wr = wk + c * cout;
          for (std::size_t o = 0; o < cout; ++o) acc[o] += wr[o] * xv;
        }
      }
    }
  }
  return static_cast<std::uint64_t>(obins) * cout * kKernelTime * kKernelFreq * cin;
}

/// One output frame of the transposed conv: the frequency-axis adjoint of
/// conv2d with conv2d's causal time taps. `k` has the shape of the conv2d
/// kernel being transposed, [2 x 3 x Cout x Cin] from this layer's view.
inline std::uint64_t conv2d_transpose_frame(std::span<const double> prev,
                                            std::span<const double> cur, std::size_t bins,
                                            std::size_t out_bins, const Tensor& k,
                                            std::span<const double> bias, std::span<double> out) {
  const std::size_t cout = k.dim(2), cin = k.dim(3);
  if (cur.size() != bins * cin || out.size() != out_bins * cout ||
      (!prev.empty() && prev.size() != cur.size()) || (!bias.empty() && bias.size() != cout))
    throw ShapeError("conv2d_transpose_frame: frame sizes do not match kernel " +
                     shape_str(k.shape()));
  for (std::size_t f = 0; f < out_bins; ++f)
    for (std::size_t c = 0; c < cout; ++c) out[f * cout + c] = bias.empty() ? 0.0 : bias[c];
  const double* kp = k.vec().data();
  for (std::size_t kt = 0; kt < kKernelTime; ++kt) {
    std::span<const double> src = kt == 0 ? prev : cur;
    if (src.empty()) continue;
    for (std::size_t fi = 0; fi < bins; ++fi) {
      const double* yin = src.data() + fi * cin;
      for (std::size_t kf = 0; kf < kKernelFreq; ++kf) {
        const std::ptrdiff_t fo = static_cast<std::ptrdiff_t>(fi * kFreqStride + kf) -
                                  static_cast<std::ptrdiff_t>(kFreqPad);
        if (fo < 0 || fo >= static_cast<std::ptrdiff_t>(out_bins)) continue;
        double* acc = out.data() + static_cast<std::size_t>(fo) * cout;
        const double* wk = kp + (kt * kKernelFreq + kf) * cout * cin;
        for (std::size_t c = 0; c < cout; ++c) {
          const double* wr = wk + c * cin;
          double s = 0.0;
          for (std::size_t i = 0; i < cin; ++i) s += wr[i] * yin[i];
          acc[c] += s;
        }
      }
    }
  }
  return static_cast<std::uint64_t>(bins) * cin * cout * kKernelTime * kKernelFreq;
}

/// x: [T x F x Cin] -> [T x F' x Cout]. Output frame t sees input frames t-1, t.
inline Tensor conv2d(const Tensor& x, const Tensor& k, std::span<const double> bias = {}) {
  if (x.rank() != 3) throw ShapeError("conv2d: input must be [T x F x C], got " + shape_str(x.shape()));
  check_kernel(k, x.dim(2), "conv2d");
  const std::size_t frames = x.dim(0), bins = x.dim(1), cout = k.dim(3);
  Tensor y({frames, conv_out_bins(bins), cout});
  for (std::size_t t = 0; t < frames; ++t)
    conv2d_frame(t ? x.row(t - 1) : std::span<const double>{}, x.row(t), bins, k, bias, y.row(t));
  check_finite(y, "conv2d");
  return y;
}

/// x: [T x F x Cin] -> [T x out_bins x Cout], out_bins defaulting to 2F-1.
inline Tensor conv2d_transpose(const Tensor& x, const Tensor& k, std::size_t out_bins = 0,
                               std::span<const double> bias = {}) {
  if (x.rank() != 3)
    throw ShapeError("conv2d_transpose: input must be [T x F x C], got " + shape_str(x.shape()));
  if (k.rank() != 4 || k.dim(0) != kKernelTime || k.dim(1) != kKernelFreq || k.dim(3) != x.dim(2))
    throw ShapeError("conv2d_transpose: kernel " + shape_str(k.shape()) + " incompatible with " +
                     std::to_string(x.dim(2)) + " input channels");
  const std::size_t frames = x.dim(0), bins = x.dim(1), cout = k.dim(2);
  if (out_bins == 0) out_bins = deconv_out_bins(bins);
  if (conv_out_bins(out_bins) != bins)
    throw ShapeError("conv2d_transpose: " + std::to_string(out_bins) +
                     " output bins do not downsample to " + std::to_string(bins));
  Tensor y({frames, out_bins, cout});
  for (std::size_t t = 0; t < frames; ++t)
    conv2d_transpose_frame(t ? x.row(t - 1) : std::span<const double>{}, x.row(t), bins, out_bins,
                           k, bias, y.row(t));
  check_finite(y, "conv2d_transpose");
  return y;
}

// ---------------------------------------------------------------------------
// Elementwise and reductions

enum class Pointwise { Sigmoid, Tanh, Relu };

inline double sigmoid(double x) {
  // Split form keeps exp() from overflowing for large |x|.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double apply_pointwise(Pointwise fn, double x) {
  switch (fn) {
    case Pointwise::Sigmoid: return sigmoid(x);
    case Pointwise::Tanh: return std::tanh(x);
    case Pointwise::Relu: return x > 0.0 ? x : 0.0;
  }
  return x;
}

inline void pointwise_inplace(std::span<double> x, Pointwise fn) {
  for (double& v : x) v = apply_pointwise(fn, v);
}

inline Tensor pointwise(Tensor x, Pointwise fn) {
  pointwise_inplace(x.data(), fn);
  return x;
}

namespace detail {
// (outer, axis_len, inner) decomposition of a shape around one axis.
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}
}  // namespace detail

/// Numerically stable softmax in place over a contiguous span.
inline void softmax_inplace(std::span<double> x) {
  if (x.empty()) return;
  const double mx = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (double& v : x) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : x) v /= sum;
}

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  auto [outer, len, inner] = detail::split_axis(x.shape(), axis);
  Tensor y = x;
  std::vector<double> buf(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      for (std::size_t a = 0; a < len; ++a) buf[a] = x[(o * len + a) * inner + i];
      softmax_inplace(buf);
      for (std::size_t a = 0; a < len; ++a) y[(o * len + a) * inner + i] = buf[a];
    }
  return y;
}

struct AxisStats {
  Tensor mean;
  Tensor std;  // population (divisor N)
};

/// Mean and population std over the given axes; reduced axes are dropped.
inline AxisStats axis_stats(const Tensor& x, std::vector<std::size_t> axes) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  if (axes.empty()) throw ShapeError("axis_stats: no axes");
  for (auto a : axes)
    if (a >= x.rank()) throw ShapeError("axis_stats: axis out of range for " + shape_str(x.shape()));
  Shape kept;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (!std::binary_search(axes.begin(), axes.end(), i)) kept.push_back(x.dim(i));
  if (kept.empty()) kept.push_back(1);
  const std::size_t nout = shape_volume(kept);
  std::vector<double> sum(nout, 0.0), sq(nout, 0.0);
  std::vector<std::size_t> counts(nout, 0);
  // Walk every element once, mapping its multi-index to the kept index.
  std::vector<std::size_t> idx(x.rank(), 0);
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t out = 0;
    for (std::size_t d = 0; d < x.rank(); ++d)
      if (!std::binary_search(axes.begin(), axes.end(), d)) out = out * x.dim(d) + idx[d];
    sum[out] += x[flat];
    ++counts[out];
    for (std::size_t d = x.rank(); d-- > 0;) {
      if (++idx[d] < x.dim(d)) break;
      idx[d] = 0;
    }
  }
  AxisStats st{Tensor(kept), Tensor(kept)};
  for (std::size_t i = 0; i < nout; ++i) st.mean[i] = sum[i] / static_cast<double>(counts[i]);
  std::fill(idx.begin(), idx.end(), 0);
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t out = 0;
    for (std::size_t d = 0; d < x.rank(); ++d)
      if (!std::binary_search(axes.begin(), axes.end(), d)) out = out * x.dim(d) + idx[d];
    const double dlt = x[flat] - st.mean[out];
    sq[out] += dlt * dlt;
    for (std::size_t d = x.rank(); d-- > 0;) {
      if (++idx[d] < x.dim(d)) break;
      idx[d] = 0;
    }
  }
  for (std::size_t i = 0; i < nout; ++i) st.std[i] = std::sqrt(sq[i] / static_cast<double>(counts[i]));
  return st;
}

}  // namespace dsn
