// Copyright 2026 The netdissect Authors.
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

// Per-unit top-quantile activation thresholds.
//
// T_k is the nearest-rank order statistic v_m with m = ceil((1 - q) n) over
// the unit's raw activations, i.e. the smallest sample value such that at
// most floor(q n) samples lie strictly above it. The rank is computed in
// integer arithmetic with q quantised to 1e-9, so 0.005 means exactly 5/1000.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "netdissect/error.hpp"
#include "netdissect/hash.hpp"
#include "netdissect/parallel.hpp"
#include "netdissect/tensor_io.hpp"

namespace netdissect {

inline constexpr double kDefaultQuantile = 0.005;

enum class ThresholdMode { kExact, kSampled };

struct SamplingOptions {
  std::uint64_t seed = 0;
  std::uint64_t sample_size = 0;
};

struct ThresholdTable {
  std::string layer;
  double quantile = kDefaultQuantile;
  ThresholdMode mode = ThresholdMode::kExact;
  std::optional<SamplingOptions> sampling;
  std::vector<double> thresholds;
  std::vector<std::uint64_t> population_counts;

  std::size_t units() const { return thresholds.size(); }

  /// Provenance tag: FNV-1a over the layer, quantile and threshold bits.
  std::string hash() const {
    Fnv1a64 h;
    h.update(layer);
    auto put = [&h](std::uint64_t bits) {
      std::uint8_t b[8];
      for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(bits >> (8 * i));
      h.update(std::span<const std::uint8_t>(b, 8));
    };
    put(std::bit_cast<std::uint64_t>(quantile));
    for (double t : thresholds) put(std::bit_cast<std::uint64_t>(t));
    return h.hex();
  }

  friend bool operator==(const ThresholdTable& a, const ThresholdTable& b) {
    return a.layer == b.layer && a.quantile == b.quantile && a.mode == b.mode &&
           a.thresholds == b.thresholds && a.population_counts == b.population_counts &&
           a.sampling.has_value() == b.sampling.has_value() &&
           (!a.sampling || (a.sampling->seed == b.sampling->seed &&
                            a.sampling->sample_size == b.sampling->sample_size));
  }
};

inline void check_quantile(double quantile) {
  if (!(quantile > 0.0 && quantile < 0.5)) {
    fail(ErrorKind::kUsage, "quantile must lie in (0, 0.5), got " + std::to_string(quantile));
  }
}

/// floor(q * n) with q quantised to 1e-9.
inline std::uint64_t allowed_above(double quantile, std::uint64_t n) {
  constexpr std::uint64_t kScale = 1'000'000'000ULL;
  const auto q = static_cast<unsigned __int128>(std::llround(quantile * static_cast<double>(kScale)));
  return static_cast<std::uint64_t>(q * n / kScale);
}

/// 1-based nearest rank m = ceil((1 - q) n).
inline std::uint64_t nearest_rank(double quantile, std::uint64_t n) {
  return n - allowed_above(quantile, n);
}

/// Value of the nearest-rank order statistic. Reorders `values`.
inline double select_threshold(std::vector<float>& values, double quantile) {
  if (values.empty()) fail(ErrorKind::kConsistency, "cannot threshold an empty unit");
  const std::uint64_t m = nearest_rank(quantile, values.size());
  auto nth = values.begin() + static_cast<std::ptrdiff_t>(m - 1);
  std::nth_element(values.begin(), nth, values.end());
  return static_cast<double>(*nth);
}

/// Per-shard exact selection state: every raw activation of every unit, plus
/// the image ids it covers. Merging is concatenation, so any shard split
/// gives the same table.
class UnitSelectionState {
 public:
  UnitSelectionState() = default;
  explicit UnitSelectionState(std::size_t units) : values_(units) {}

  std::size_t units() const { return values_.size(); }
  const std::vector<std::string>& image_ids() const { return image_ids_; }

  void add(const ActivationStack& stack) {
    const std::size_t k = stack.tensor.dim(0);
    if (values_.empty() && image_ids_.empty()) values_.resize(k);
    if (k != values_.size()) {
      fail(ErrorKind::kConsistency, "unit-count mismatch: '" + stack.image_id + "' has " +
                                        std::to_string(k) + " units, expected " +
                                        std::to_string(values_.size()));
    }
    if (std::binary_search(image_ids_.begin(), image_ids_.end(), stack.image_id)) {
      fail(ErrorKind::kConsistency, "duplicate image_id '" + stack.image_id + "' in threshold shards");
    }
    image_ids_.insert(std::upper_bound(image_ids_.begin(), image_ids_.end(), stack.image_id),
                      stack.image_id);
    for (std::size_t u = 0; u < k; ++u) {
      const auto plane = stack.tensor.slice(u);
      values_[u].insert(values_[u].end(), plane.begin(), plane.end());
    }
  }

  void merge(UnitSelectionState&& other) {
    if (other.image_ids_.empty()) return;
    if (image_ids_.empty()) {
      *this = std::move(other);
      return;
    }
    if (other.values_.size() != values_.size()) {
      fail(ErrorKind::kConsistency, "unit-count mismatch between shards (" +
                                        std::to_string(values_.size()) + " vs " +
                                        std::to_string(other.values_.size()) + ")");
    }
    std::vector<std::string> merged;
    merged.reserve(image_ids_.size() + other.image_ids_.size());
    std::merge(image_ids_.begin(), image_ids_.end(), other.image_ids_.begin(),
               other.image_ids_.end(), std::back_inserter(merged));
    if (std::adjacent_find(merged.begin(), merged.end()) != merged.end()) {
      fail(ErrorKind::kConsistency, "overlapping shards: duplicate image_id '" +
                                        *std::adjacent_find(merged.begin(), merged.end()) + "'");
    }
    image_ids_ = std::move(merged);
    for (std::size_t u = 0; u < values_.size(); ++u) {
      values_[u].insert(values_[u].end(), other.values_[u].begin(), other.values_[u].end());
    }
  }

  ThresholdTable finalize(double quantile, const std::string& layer) const {
    check_quantile(quantile);
    if (image_ids_.empty()) fail(ErrorKind::kConsistency, "empty archive: nothing to threshold");
    ThresholdTable t;
    t.layer = layer;
    t.quantile = quantile;
    t.mode = ThresholdMode::kExact;
    for (const auto& v : values_) {
      std::vector<float> scratch = v;
      t.thresholds.push_back(select_threshold(scratch, quantile));
      t.population_counts.push_back(v.size());
    }
    return t;
  }

 private:
  std::vector<std::string> image_ids_;  // sorted
  std::vector<std::vector<float>> values_;
};

inline ThresholdTable merge_partials(std::vector<UnitSelectionState> partials, double quantile,
                                     const std::string& layer) {
  if (partials.empty()) fail(ErrorKind::kConsistency, "no shards to merge");
  UnitSelectionState acc = std::move(partials.front());
  for (std::size_t i = 1; i < partials.size(); ++i) acc.merge(std::move(partials[i]));
  return acc.finalize(quantile, layer);
}

namespace detail {

struct SplitMix64 {
  std::uint64_t state;
  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  // Uniform in [0, bound) via 128-bit multiply-shift.
  std::uint64_t below(std::uint64_t bound) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * bound) >> 64);
  }
};

}  // namespace detail

inline void check_activation_archive(const Manifest& m) {
  if (m.kind != ArchiveKind::kActivations) {
    fail(ErrorKind::kConsistency, m.root.string() + " is not an activation archive");
  }
  if (m.records.empty()) fail(ErrorKind::kConsistency, "empty archive: " + m.root.string());
}

inline ActivationStack load_checked_stack(const Manifest& m, const ManifestEntry& e) {
  auto stack = read_record_as<ActivationStack>(m, e);
  if (stack.tensor.dim(0) != m.units) {
    fail(ErrorKind::kConsistency, "unit-count mismatch with manifest for '" + e.image_id + "'");
  }
  return stack;
}

/// Exact thresholds over a whole archive. The result is identical for every
/// thread count.
inline ThresholdTable compute_thresholds(const Manifest& m, double quantile, unsigned threads = 1) {
  check_quantile(quantile);
  check_activation_archive(m);
  auto state = parallel_reduce<UnitSelectionState>(
      m.records.size(), threads, [] { return UnitSelectionState(); },
      [&m](UnitSelectionState& s, std::size_t i) { s.add(load_checked_stack(m, m.records[i])); },
      [](UnitSelectionState& a, UnitSelectionState&& b) { a.merge(std::move(b)); });
  return state.finalize(quantile, m.layer);
}

/// Thresholds over a seeded uniform subsample of at most `sample_size`
/// activations per unit (reservoir sampling in manifest order).
inline ThresholdTable compute_thresholds_sampled(const Manifest& m, double quantile,
                                                 SamplingOptions sampling) {
  check_quantile(quantile);
  check_activation_archive(m);
  if (sampling.sample_size == 0) fail(ErrorKind::kUsage, "sample size must be positive");
  const std::size_t k = m.units;
  std::vector<std::vector<float>> reservoirs(k);
  std::vector<std::uint64_t> seen(k, 0);
  std::vector<detail::SplitMix64> rngs;
  for (std::size_t u = 0; u < k; ++u) rngs.push_back({sampling.seed ^ (0xd1b54a32d192ed03ULL * (u + 1))});
  for (const auto& e : m.records) {
    const auto stack = load_checked_stack(m, e);
    for (std::size_t u = 0; u < k; ++u) {
      for (float v : stack.tensor.slice(u)) {
        auto& r = reservoirs[u];
        if (r.size() < sampling.sample_size) {
          r.push_back(v);
        } else {
          const std::uint64_t j = rngs[u].below(seen[u] + 1);
          if (j < sampling.sample_size) r[j] = v;
        }
        ++seen[u];
      }
    }
  }
  ThresholdTable t;
  t.layer = m.layer;
  t.quantile = quantile;
  t.mode = ThresholdMode::kSampled;
  t.sampling = sampling;
  for (auto& r : reservoirs) {
    t.population_counts.push_back(r.size());
    t.thresholds.push_back(select_threshold(r, quantile));
  }
  return t;
}

inline nlohmann::ordered_json to_json(const ThresholdTable& t) {
  nlohmann::ordered_json j;
  j["layer"] = t.layer;
  j["quantile"] = t.quantile;
  j["mode"] = t.mode == ThresholdMode::kExact ? "exact" : "sampled";
  if (t.sampling) {
    j["seed"] = t.sampling->seed;
    j["sample_size"] = t.sampling->sample_size;
  }
  j["thresholds"] = t.thresholds;
  j["population_counts"] = t.population_counts;
  return j;
}

inline ThresholdTable threshold_table_from_json(const nlohmann::json& j) {
  ThresholdTable t;
  try {
    t.layer = j.at("layer").get<std::string>();
    t.quantile = j.at("quantile").get<double>();
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "exact") {
      t.mode = ThresholdMode::kExact;
    } else if (mode == "sampled") {
      t.mode = ThresholdMode::kSampled;
      t.sampling = SamplingOptions{j.at("seed").get<std::uint64_t>(), j.at("sample_size").get<std::uint64_t>()};
    } else {
      fail(ErrorKind::kInputFormat, "unknown threshold mode '" + mode + "'");
    }
    t.thresholds = j.at("thresholds").get<std::vector<double>>();
    t.population_counts = j.at("population_counts").get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kInputFormat, std::string("malformed thresholds.json: ") + ex.what());
  }
  if (t.thresholds.size() != t.population_counts.size()) {
    fail(ErrorKind::kInputFormat, "thresholds.json: thresholds and population_counts differ in length");
  }
  for (double v : t.thresholds) {
    if (!std::isfinite(v)) fail(ErrorKind::kNumericDegenerate, "thresholds.json: non-finite threshold");
  }
  return t;
}

}  // namespace netdissect
