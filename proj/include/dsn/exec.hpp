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

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace dsn {

/// Slim skips dynamic work on frames with g_t == 0; MaskedDense computes
/// everything and scales dynamic contributions by g_t (the reference oracle).
enum class ExecMode { Slim, MaskedDense };

inline std::string_view to_string(ExecMode m) { return m == ExecMode::Slim ? "slim" : "masked"; }

/// Accounting units of the network, in execution order.
enum class BlockId : std::size_t {
  Conv1,
  Conv2,
  Policy,
  Conv3,
  FMha0,
  FGru0,
  TMha,
  TGru,
  FMha1,
  FGru1,
  Deconv3,
  Deconv2,
  Deconv1,
  Count
};

inline constexpr std::size_t kNumBlocks = static_cast<std::size_t>(BlockId::Count);

inline constexpr std::array<std::string_view, kNumBlocks> kBlockNames = {
    "conv1", "conv2", "policy", "conv3", "f0_mha", "f0_gru", "t_mha",
    "t_gru", "f1_mha", "f1_gru", "deconv3", "deconv2", "deconv1"};

inline std::string_view block_name(BlockId b) { return kBlockNames[static_cast<std::size_t>(b)]; }

/// Runtime MAC counter. Kernels report what they actually executed.
struct MacCounter {
  std::array<std::uint64_t, kNumBlocks> static_macs{};
  std::array<std::uint64_t, kNumBlocks> dynamic_macs{};

  void add(BlockId b, bool dynamic, std::uint64_t n) {
    (dynamic ? dynamic_macs : static_macs)[static_cast<std::size_t>(b)] += n;
  }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < kNumBlocks; ++i) s += static_macs[i] + dynamic_macs[i];
    return s;
  }
  bool operator==(const MacCounter&) const = default;
};

/// Records every gate value a dynamic block consumed, for globality checks.
struct GateTrace {
  struct Entry {
    BlockId block;
    std::size_t frame;
    double gate;
  };
  std::vector<Entry> entries;
};

/// Per-call execution settings threaded through every block.
struct ExecContext {
  ExecMode mode = ExecMode::Slim;
  MacCounter* macs = nullptr;
  GateTrace* trace = nullptr;

  void count(BlockId b, bool dynamic, std::uint64_t n) const {
    if (macs) macs->add(b, dynamic, n);
  }
  void record(BlockId b, std::size_t frame, double g) const {
    if (trace) trace->entries.push_back({b, frame, g});
  }
  /// True when the dynamic branch must run for gate value g.
  bool runs_dynamic(double g) const { return mode == ExecMode::MaskedDense || g != 0.0; }
};

}  // namespace dsn
