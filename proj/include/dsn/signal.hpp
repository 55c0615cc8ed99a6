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

// Audio front end: PCM-16 WAV I/O, sqrt-Hann STFT/iSTFT, power-law magnitude
// compression and ratio-mask application with the noisy phase.

#pragma once

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsn/tensor.hpp"

namespace dsn {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kFftSize = 512;
inline constexpr std::size_t kHop = 256;
inline constexpr double kCompression = 0.3;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AudioBuffer {
  std::vector<double> samples;
  int sample_rate = kSampleRate;

  std::size_t size() const { return samples.size(); }
};

// ---------------------------------------------------------------------------
// WAV

namespace detail {
inline std::uint32_t read_le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}
inline std::uint16_t read_le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}
inline void put_le32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void put_le16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(static_cast<unsigned char>(v));
  b.push_back(static_cast<unsigned char>(v >> 8));
}
}  // namespace detail

/// Parses RIFF/WAVE bytes. Only PCM-16 mono 16 kHz is accepted.
inline AudioBuffer parse_wav(std::span<const unsigned char> bytes, const std::string& name = "<memory>") {
  auto fail = [&](const std::string& what) { throw FormatError(name + ": " + what); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    fail("not a RIFF/WAVE file");
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t len = detail::read_le32(hdr + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) fail("truncated chunk");
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (len < 16) fail("fmt chunk too short");
      const unsigned char* f = bytes.data() + body;
      const std::uint16_t format = detail::read_le16(f);
      channels = detail::read_le16(f + 2);
      rate = detail::read_le32(f + 4);
      bits = detail::read_le16(f + 14);
      if (format != 1) fail("unsupported format: audio format code " + std::to_string(format) + " (PCM required)");
      if (channels != 1) fail("unsupported channel count: " + std::to_string(channels));
      if (rate != static_cast<std::uint32_t>(kSampleRate)) fail("unsupported sample rate: " + std::to_string(rate));
      if (bits != 16) fail("unsupported bit depth: " + std::to_string(bits));
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      if (!have_fmt) fail("data chunk before fmt chunk");
      AudioBuffer a;
      a.sample_rate = static_cast<int>(rate);
      const std::size_t n = len / 2;
      a.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto s = static_cast<std::int16_t>(detail::read_le16(bytes.data() + body + 2 * i));
        a.samples[i] = static_cast<double>(s) / 32768.0;
      }
      return a;
    }
    pos = body + len + (len & 1u);
  }
  fail("missing data chunk");
  return {};
}

inline AudioBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_wav(bytes, path.string());
}

/// Canonical 44-byte-header PCM-16 encoding; samples are clipped to [-1, 1].
inline std::vector<unsigned char> encode_wav(const AudioBuffer& a) {
  if (a.sample_rate != kSampleRate)
    throw FormatError("unsupported sample rate: " + std::to_string(a.sample_rate));
  const auto data_len = static_cast<std::uint32_t>(a.samples.size() * 2);
  std::vector<unsigned char> b;
  b.reserve(44 + data_len);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  detail::put_le32(b, 36 + data_len);
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  detail::put_le32(b, 16);
  detail::put_le16(b, 1);
  detail::put_le16(b, 1);
  detail::put_le32(b, static_cast<std::uint32_t>(kSampleRate));
  detail::put_le32(b, static_cast<std::uint32_t>(kSampleRate) * 2);
  detail::put_le16(b, 2);
  detail::put_le16(b, 16);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  detail::put_le32(b, data_len);
  for (double x : a.samples) {
    const double q = std::round(std::clamp(x, -1.0, 1.0) * 32768.0);
    const auto s = static_cast<std::int16_t>(std::clamp(q, -32768.0, 32767.0));
    detail::put_le16(b, static_cast<std::uint16_t>(s));
  }
  return b;
}

inline void write_wav(const std::filesystem::path& path, const AudioBuffer& a) {
  const auto bytes = encode_wav(a);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(path.string() + ": write failed");
}

// ---------------------------------------------------------------------------
// FFT

using Complex = std::complex<double>;

/// Real FFT of one size. Plans are built once per size (FFTW_ESTIMATE, so no
/// timing-dependent plan choice) and executed on buffers owned by the object.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    in_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
    out_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
    std::lock_guard<std::mutex> lock(planner_mutex());
    fwd_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), out_, in_, FFTW_ESTIMATE);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() {
    std::lock_guard<std::mutex> lock(planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
    fftw_free(in_);
    fftw_free(out_);
  }

  std::size_t size() const { return n_; }

  void forward(std::span<const double> x, std::span<Complex> spec) {
    std::copy(x.begin(), x.end(), in_);
    fftw_execute(fwd_);
    for (std::size_t k = 0; k <= n_ / 2; ++k) spec[k] = {out_[k][0], out_[k][1]};
  }

  /// Inverse including the 1/n normalisation.
  void inverse(std::span<const Complex> spec, std::span<double> x) {
    for (std::size_t k = 0; k <= n_ / 2; ++k) {
      out_[k][0] = spec[k].real();
      out_[k][1] = spec[k].imag();
    }
    fftw_execute(inv_);
    const double scale = 1.0 / static_cast<double>(n_);
    for (std::size_t i = 0; i < n_; ++i) x[i] = in_[i] * scale;
  }

  /// Per-thread cached instance for size n.
  static RealFft& cached(std::size_t n) {
    thread_local std::map<std::size_t, std::unique_ptr<RealFft>> cache;
    auto& slot = cache[n];
    if (!slot) slot = std::make_unique<RealFft>(n);
    return *slot;
  }

 private:
  static std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
  }

  std::size_t n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan fwd_ = nullptr;
  fftw_plan inv_ = nullptr;
};

// ---------------------------------------------------------------------------
// STFT

/// Periodic sqrt-Hann; its square overlap-adds to exactly 1 at 50% overlap.
inline std::vector<double> sqrt_hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = std::sqrt(0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n))));
  return w;
}

inline std::vector<double> hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n)));
  return w;
}

struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::size_t fft_size = kFftSize;
  std::size_t hop = kHop;
  std::vector<Complex> values;  // [frames x bins]

  Complex& at(std::size_t t, std::size_t k) { return values[t * bins + k]; }
  const Complex& at(std::size_t t, std::size_t k) const { return values[t * bins + k]; }
  std::span<Complex> frame(std::size_t t) { return std::span<Complex>(values).subspan(t * bins, bins); }
  std::span<const Complex> frame(std::size_t t) const {
    return std::span<const Complex>(values).subspan(t * bins, bins);
  }
};

/// Frames fully contained in n samples; the trailing partial frame is dropped.
inline std::size_t frame_count(std::size_t n, std::size_t fft_size = kFftSize, std::size_t hop = kHop) {
  return n < fft_size ? 0 : (n - fft_size) / hop + 1;
}

/// Windowed spectrum of one analysis frame.
inline void analyze_frame(std::span<const double> samples, std::span<const double> window,
                          std::span<Complex> spec) {
  const std::size_t n = window.size();
  std::vector<double> buf(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = samples[i] * window[i];
  RealFft::cached(n).forward(buf, spec);
}

inline Spectrogram stft(std::span<const double> x, std::size_t fft_size, std::size_t hop,
                        std::span<const double> window) {
  if (x.size() < fft_size)
    throw std::invalid_argument("stft: input too short (" + std::to_string(x.size()) +
                                " samples, need at least " + std::to_string(fft_size) + ")");
  if (window.size() != fft_size) throw std::invalid_argument("stft: window length mismatch");
  Spectrogram s;
  s.fft_size = fft_size;
  s.hop = hop;
  s.bins = fft_size / 2 + 1;
  s.frames = frame_count(x.size(), fft_size, hop);
  s.values.resize(s.frames * s.bins);
  for (std::size_t t = 0; t < s.frames; ++t) analyze_frame(x.subspan(t * hop, fft_size), window, s.frame(t));
  return s;
}

inline Spectrogram stft(const AudioBuffer& a) {
  static const std::vector<double> w = sqrt_hann(kFftSize);
  return stft(a.samples, kFftSize, kHop, w);
}

/// Windowed time-domain frame of one spectrum (synthesis window applied).
inline void synthesize_frame(std::span<const Complex> spec, std::span<const double> window,
                             std::span<double> out) {
  RealFft::cached(window.size()).inverse(spec, out);
  for (std::size_t i = 0; i < window.size(); ++i) out[i] *= window[i];
}

/// Plain overlap-add with the sqrt-Hann synthesis window. Output length is
/// (T-1)*hop + fft_size; only samples covered by two frames are exact.
inline AudioBuffer istft(const Spectrogram& s) {
  static const std::vector<double> w = sqrt_hann(kFftSize);
  if (s.fft_size != kFftSize || s.hop != kHop) throw std::invalid_argument("istft: unsupported frame geometry");
  AudioBuffer a;
  if (s.frames == 0) return a;
  a.samples.assign((s.frames - 1) * s.hop + s.fft_size, 0.0);
  std::vector<double> buf(s.fft_size);
  for (std::size_t t = 0; t < s.frames; ++t) {
    synthesize_frame(s.frame(t), w, buf);
    for (std::size_t i = 0; i < s.fft_size; ++i) a.samples[t * s.hop + i] += buf[i];
  }
  return a;
}

inline Tensor magnitude(const Spectrogram& s) {
  Tensor m({s.frames, s.bins});
  for (std::size_t i = 0; i < s.values.size(); ++i) m[i] = std::abs(s.values[i]);
  return m;
}

// ---------------------------------------------------------------------------
// Compression and masking

struct CompressedMag {
  Tensor values;  // |X|^c
  double c = kCompression;
};

inline CompressedMag compress(const Tensor& mag, double c = kCompression) {
  if (!(c > 0.0)) throw std::invalid_argument("compress: exponent must be positive");
  CompressedMag out{Tensor(mag.shape()), c};
  for (std::size_t i = 0; i < mag.size(); ++i) {
    if (mag[i] < 0.0) throw std::invalid_argument("compress: negative magnitude");
    out.values[i] = std::pow(mag[i], c);
  }
  return out;
}

inline Tensor decompress(const CompressedMag& cm) {
  Tensor out(cm.values.shape());
  for (std::size_t i = 0; i < cm.values.size(); ++i) {
    if (cm.values[i] < 0.0) throw std::invalid_argument("decompress: negative magnitude");
    out[i] = std::pow(cm.values[i], 1.0 / cm.c);
  }
  return out;
}

/// Scales one frame: |Y| = ((m * |X|^c))^(1/c) with the phase of X. Evaluated
/// as m^(1/c) * X, which is the same quantity and exact for m == 1.
inline void apply_mask_frame(std::span<const Complex> noisy, std::span<const double> mask, double c,
                             std::span<Complex> out) {
  for (std::size_t k = 0; k < noisy.size(); ++k) {
    const double m = mask[k];
    if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("apply_mask: mask value out of [0, 1]");
    out[k] = std::pow(m, 1.0 / c) * noisy[k];
  }
}

inline Spectrogram apply_mask(const Spectrogram& noisy, const Tensor& mask, double c = kCompression) {
  if (mask.rank() != 2 || mask.dim(0) != noisy.frames || mask.dim(1) != noisy.bins)
    throw ShapeError("apply_mask: mask " + shape_str(mask.shape()) + " does not match spectrogram [" +
                     std::to_string(noisy.frames) + "x" + std::to_string(noisy.bins) + "]");
  Spectrogram y = noisy;
  for (std::size_t t = 0; t < noisy.frames; ++t) apply_mask_frame(noisy.frame(t), mask.row(t), c, y.frame(t));
  return y;
}

/// Compressed-domain ideal ratio mask clip(|S|^c / |X|^c, 0, 1); zero where
/// the noisy bin is silent.
inline Tensor ideal_ratio_mask(const Spectrogram& clean, const Spectrogram& noisy, double c = kCompression) {
  if (clean.frames != noisy.frames || clean.bins != noisy.bins)
    throw ShapeError("ideal_ratio_mask: spectrogram sizes differ");
  const Tensor s = compress(magnitude(clean), c).values;
  const Tensor x = compress(magnitude(noisy), c).values;
  Tensor m(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) m[i] = x[i] > 0.0 ? std::clamp(s[i] / x[i], 0.0, 1.0) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// SI-SDR

inline constexpr double kSiSdrCap = 100.0;

/// Scale-invariant SDR in dB, clamped to [-100, 100].
inline double si_sdr(std::span<const double> estimate, std::span<const double> reference) {
  if (estimate.size() != reference.size())
    throw std::invalid_argument("si_sdr: length mismatch (" + std::to_string(estimate.size()) + " vs " +
                                std::to_string(reference.size()) + ")");
  double ref_energy = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    ref_energy += reference[i] * reference[i];
    dot += estimate[i] * reference[i];
  }
  if (ref_energy == 0.0) throw std::invalid_argument("si_sdr: zero reference");
  const double alpha = dot / ref_energy;
  double target = 0.0, noise = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double s = alpha * reference[i];
    const double e = estimate[i] - s;
    target += s * s;
    noise += e * e;
  }
  if (target == 0.0) return -kSiSdrCap;
  if (noise == 0.0) return kSiSdrCap;
  return std::clamp(10.0 * std::log10(target / noise), -kSiSdrCap, kSiSdrCap);
}

inline double si_sdr(const AudioBuffer& estimate, const AudioBuffer& reference) {
  return si_sdr(std::span<const double>(estimate.samples), std::span<const double>(reference.samples));
}

}  // namespace dsn
