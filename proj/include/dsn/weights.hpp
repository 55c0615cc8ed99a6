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

// Named parameter storage. On disk a store is two files sharing a stem:
// `<stem>.json` lists the tensors in order with their dims and byte offsets,
// `<stem>.bin` holds the values as little-endian 64-bit floats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dsn/tensor.hpp"

namespace dsn {

inline constexpr const char* kWeightsVersion = "dsn-weights-v1";

class WeightError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class WeightStore {
 public:
  void put(const std::string& name, Tensor t) {
    if (index_.count(name)) throw WeightError("duplicate weight: " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw WeightError("missing weight: " + name);
    return entries_[it->second].second;
  }
  Tensor& get(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const WeightStore*>(this)->get(name));
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  /// Concatenated values in store order.
  std::vector<double> flat() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& [name, t] : entries_) out.insert(out.end(), t.vec().begin(), t.vec().end());
    return out;
  }

  bool operator==(const WeightStore& o) const { return entries_ == o.entries_; }

  void remove(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw WeightError("missing weight: " + name);
    entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(it->second));
    index_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) index_[entries_[i].first] = i;
  }

  void save(const std::filesystem::path& stem) const {
    nlohmann::ordered_json manifest;
    manifest["version"] = kWeightsVersion;
    manifest["dtype"] = "float64-le";
    auto& list = manifest["tensors"] = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    std::ofstream bin(path_with(stem, ".bin"), std::ios::binary);
    if (!bin) throw WeightError("cannot write " + path_with(stem, ".bin").string());
    for (const auto& [name, t] : entries_) {
      list.push_back({{"name", name}, {"dims", t.shape()}, {"offset", offset}, {"count", t.size()}});
      for (double v : t.vec()) write_le(bin, v);
      offset += 8 * t.size();
    }
    std::ofstream js(path_with(stem, ".json"));
    if (!js) throw WeightError("cannot write " + path_with(stem, ".json").string());
    js << manifest.dump(2) << '\n';
  }

  static WeightStore load(const std::filesystem::path& stem) {
    std::ifstream js(path_with(stem, ".json"));
    if (!js) throw WeightError("cannot open weight manifest " + path_with(stem, ".json").string());
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
      throw WeightError("malformed weight manifest: " + std::string(e.what()));
    }
    if (manifest.value("version", "") != kWeightsVersion)
      throw WeightError("unsupported weight manifest version (expected " + std::string(kWeightsVersion) + ")");
    std::ifstream bin(path_with(stem, ".bin"), std::ios::binary);
    if (!bin) throw WeightError("cannot open weight blob " + path_with(stem, ".bin").string());
    std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    WeightStore ws;
    try {
      for (const auto& e : manifest.at("tensors")) {
        const auto name = e.at("name").get<std::string>();
        const auto dims = e.at("dims").get<Shape>();
        const auto offset = e.at("offset").get<std::uint64_t>();
        Tensor t(dims);
        if (offset % 8 != 0 || offset + 8 * t.size() > blob.size())
          throw WeightError("weight " + name + " lies outside the blob");
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = read_le(blob.data() + offset + 8 * i);
        ws.put(name, std::move(t));
      }
    } catch (const nlohmann::json::exception& e) {
      throw WeightError("malformed weight manifest: " + std::string(e.what()));
    }
    return ws;
  }

 private:
  static std::filesystem::path path_with(const std::filesystem::path& stem, const char* ext) {
    std::filesystem::path p = stem;
    if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
    p += ext;
    return p;
  }
  static void write_le(std::ofstream& out, double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    out.write(b, 8);
  }
  static double read_le(const char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<double>(bits);
  }

  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace dsn
