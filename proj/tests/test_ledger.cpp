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

#include <sstream>

#include "dsn/dsn.hpp"

namespace {

using namespace dsn;

// Hand counts for the reference build, per bin of the 33-bin bottleneck and
// per layer, then times 33 bins, 4 layers and 62.5 frames/s.
//   conv3:   33 out bins x 32 x 6 x 32 = 202752 per branch.
//   t_mha:   projections 4 x (192 static, 576 dynamic); attention 2 heads x
//            2 x 6 x 63 keys = 1512 each side.          -> 2280 / 3816
//   t_gru:   2 static cells 384, 2 dynamic cells 192+192, mix 256/768.
//                                                        -> 1408 / 1152
//   f_mha:   as t_mha with 33 keys: 768 + 792 / 2304 + 792. -> 1560 / 3096
//   f_gru:   bidirectional cells 4 x 384 per side, mix 32->16: 512 / 1536.
//                                                        -> 2048 / 3072
struct Expected {
  const char* name;
  std::uint64_t s, d;
};
constexpr Expected kExpected[] = {
    {"conv3", 202752, 202752},
    {"deconv3", 202752, 202752},
    {"t_mha", 2280ull * 33 * 4, 3816ull * 33 * 4},
    {"t_gru", 1408ull * 33 * 4, 1152ull * 33 * 4},
    {"f_mha", 1560ull * 33 * 4, 3096ull * 33 * 4},
    {"f_gru", 2048ull * 33 * 4, 3072ull * 33 * 4},
};

TEST(MacLedger, ModuleCountsMatchHandDerivation) {
  const MacReport r = count_macs(ModelConfig{});
  for (const auto& e : kExpected) {
    const BlockMacs& m = r.module(e.name);
    EXPECT_EQ(m.static_per_frame, e.s) << e.name;
    EXPECT_EQ(m.dynamic_per_frame, e.d) << e.name;
    EXPECT_DOUBLE_EQ(m.delta_macs_s, 62.5 * static_cast<double>(e.d)) << e.name;
  }
  EXPECT_NEAR(r.module("conv3").pct, 50.0, 1e-12);
  EXPECT_NEAR(r.module("t_mha").pct, 62.6, 0.05);
  EXPECT_NEAR(r.module("t_gru").pct, 45.0, 1e-12);
  EXPECT_NEAR(r.module("f_mha").pct, 66.5, 0.05);
  EXPECT_NEAR(r.module("f_gru").pct, 60.0, 1e-12);
  EXPECT_THROW(r.module("nope"), std::out_of_range);
}

TEST(MacLedger, WithinToleranceOfReferenceFigures) {
  const MacReport r = count_macs(ModelConfig{});
  const std::pair<const char*, std::pair<double, double>> table[] = {
      {"conv3", {50, 11.48}}, {"deconv3", {50, 11.43}}, {"t_mha", {63, 28.84}},
      {"t_gru", {44, 9.02}},  {"f_mha", {65, 25.17}},   {"f_gru", {59, 24.47}}};
  for (const auto& [name, ref] : table) {
    EXPECT_LE(std::abs(r.module(name).pct - ref.first), 8.0) << name;
    EXPECT_LE(std::abs(r.module(name).delta_macs_s / 1e6 - ref.second) / ref.second, 0.20) << name;
  }
}

TEST(MacLedger, ZeroPlusDeltasIsFull) {
  const MacReport r = count_macs(ModelConfig{});
  EXPECT_NEAR(r.zero_activation_macs_s + r.dynamic_delta_sum(), r.full_activation_macs_s, 1e-3);
  EXPECT_DOUBLE_EQ(effective_macs(r, 0.0), r.zero_activation_macs_s);
  EXPECT_NEAR(effective_macs(r, 1.0), r.full_activation_macs_s, 1e-3);
  EXPECT_NEAR(effective_macs(r, 0.5), 0.5 * (r.zero_activation_macs_s + r.full_activation_macs_s), 1e-3);
  EXPECT_THROW(effective_macs(r, 1.01), std::invalid_argument);
  EXPECT_THROW(effective_macs(r, -0.1), std::invalid_argument);
}

TEST(MacLedger, HalfHopDoublesRates) {
  ModelConfig fast;
  fast.hop = 128;
  const MacReport a = count_macs(ModelConfig{}), b = count_macs(fast);
  EXPECT_DOUBLE_EQ(b.zero_activation_macs_s, 2 * a.zero_activation_macs_s);
  EXPECT_DOUBLE_EQ(b.full_activation_macs_s, 2 * a.full_activation_macs_s);
  for (std::size_t i = 0; i < a.modules.size(); ++i) {
    EXPECT_DOUBLE_EQ(b.modules[i].delta_macs_s, 2 * a.modules[i].delta_macs_s);
    EXPECT_DOUBLE_EQ(b.modules[i].pct, a.modules[i].pct);
  }
}

TEST(MacLedger, StaticBaselineHasNoDeltas) {
  const MacReport r = count_macs(ModelConfig::static_baseline());
  EXPECT_EQ(r.dynamic_delta_sum(), 0.0);
  EXPECT_EQ(r.zero_activation_macs_s, r.full_activation_macs_s);
}

TEST(MacLedger, PredictionEqualsRuntimeCounter) {
  // 70 frames, past the 63-frame attention window.
  const DsnModel m = DsnModel::build(ModelConfig{}, 8);
  const auto x = verify::random_noise(69 * kHop + kFftSize, 9);
  const std::size_t T = frame_count(x.samples.size());
  ASSERT_EQ(T, 70u);
  for (const auto& g : {GateVector::constant(T, 0.0), GateVector::constant(T, 1.0), verify::random_binary_gates(T, 10)}) {
    MacCounter slim, dense;
    m.forward_utterance(x, ExecMode::Slim, g, &slim);
    EXPECT_EQ(slim, predict_macs(m.config(), g.values, ExecMode::Slim));
    m.forward_utterance(x, ExecMode::MaskedDense, g, &dense);
    EXPECT_EQ(dense, predict_macs(m.config(), g.values, ExecMode::MaskedDense));
  }
  const MacCounter steady = frame_macs(m.config(), 63);
  const MacCounter all = predict_macs(m.config(), std::vector<double>(200, 1.0));
  const MacCounter first = predict_macs(m.config(), std::vector<double>(199, 1.0));
  EXPECT_EQ(all.total() - first.total(), steady.total());
}

TEST(MacLedger, CsvHasOneRowPerBlock) {
  std::ostringstream os;
  write_macs_csv(os, count_macs(ModelConfig{}));
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "block,static,dynamic,delta,pct");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, kNumBlocks);
}

// ---------------------------------------------------------------------------

GateVector gates(std::initializer_list<double> v) { return {std::vector<double>(v), GateMode::Hard}; }

TEST(Activation, RatiosAndGroups) {
  const std::vector<UtteranceGates> items = {
      {"a", gates({1, 1, 0, 0}), "10"}, {"b", gates({1, 1, 1, 1}), "5"}, {"c", gates({0, 0, 0, 0}), "5"},
      {"d", gates({1, 0, 0, 0}), "-5"}};
  const ActivationReport r = activation_report(items);
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_DOUBLE_EQ(r.rows[0].ratio, 0.5);
  EXPECT_DOUBLE_EQ(r.rows[3].ratio, 0.25);
  EXPECT_DOUBLE_EQ(r.mean, 0.4375);
  ASSERT_EQ(r.groups.size(), 3u);
  EXPECT_EQ(r.groups[0].key, "-5");
  EXPECT_EQ(r.groups[1].key, "5");
  EXPECT_EQ(r.groups[2].key, "10");
  EXPECT_EQ(r.groups[1].count, 2u);
  EXPECT_DOUBLE_EQ(r.groups[1].mean, 0.5);
  EXPECT_DOUBLE_EQ(r.groups[1].std, 0.5);
  EXPECT_THROW(activation_report({}), std::invalid_argument);
  EXPECT_THROW(activation_report({{"e", GateVector{}, ""}}), std::invalid_argument);
}

TEST(Activation, BucketKeys) {
  EXPECT_EQ(bucket_key("0.37", 0.25), "0.25");
  EXPECT_EQ(bucket_key("7", 5), "5");
  EXPECT_EQ(bucket_key("-1", 5), "-5");
  EXPECT_EQ(bucket_key("babble", 5), "babble");
  EXPECT_THROW(bucket_key("1", 0), std::invalid_argument);
}

TEST(Activation, BernoulliGatesAverageToProbability) {
  std::vector<UtteranceGates> items;
  for (std::uint64_t i = 0; i < 200; ++i)
    items.push_back({"u" + std::to_string(i), verify::random_binary_gates(500, 1000 + i, 0.3), ""});
  const ActivationReport r = activation_report(items);
  EXPECT_NEAR(r.mean, 0.3, 0.01);
  EXPECT_NEAR(r.std, std::sqrt(0.3 * 0.7 / 500), 0.006);
}

TEST(Activation, CsvOutput) {
  const ActivationReport r = activation_report({{"x", gates({1, 0}), "a"}});
  std::ostringstream rows, groups;
  write_activation_csv(rows, r);
  write_groups_csv(groups, r);
  EXPECT_EQ(rows.str(), "utterance_id,key,ratio\nx,a,0.500000\n");
  EXPECT_EQ(groups.str(), "key,count,mean,std\na,1,0.500000,0.000000\n");
}

TEST(Bench, RowsAndRealizedMacs) {
  const DsnModel m = DsnModel::build(ModelConfig{}, 2);
  const auto rows = bench(m, 0.1, {ExecMode::Slim}, {GateSetting::Zero, GateSetting::One}, 1);
  ASSERT_EQ(rows.size(), 2u);
  const std::size_t T = frame_count(1600);
  EXPECT_EQ(rows[0].realized_macs, predict_macs(m.config(), std::vector<double>(T, 0.0)).total());
  EXPECT_EQ(rows[1].realized_macs, predict_macs(m.config(), std::vector<double>(T, 1.0)).total());
  EXPECT_EQ(rows[0].activation_ratio, 0.0);
  EXPECT_EQ(rows[1].activation_ratio, 1.0);
  EXPECT_GT(rows[0].median_seconds, 0.0);
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median({}), std::invalid_argument);
}

}  // namespace
