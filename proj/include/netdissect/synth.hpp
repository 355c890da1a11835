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

// Synthetic archives with planted concept detectors.
//
// Each concept appears as one rectangle in a fixed fraction `presence` of
// the images.
// A planted unit's map is its concept's mask box-averaged down to the unit
// resolution (amplitude 1) plus N(0, sigma^2) noise; a noise unit is pure
// N(0, sigma^2). All randomness comes from SplitMix64 so archives are
// identical across platforms for a given seed.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "netdissect/error.hpp"
#include "netdissect/tensor_io.hpp"
#include "netdissect/thresholds.hpp"

namespace netdissect {

struct PlantedUnit {
  std::optional<std::string> concept_name;  // nullopt: pure noise
  double sigma = 1.0;
};

struct SynthSpec {
  std::vector<std::string> concepts = {"Atelectasis", "Cardiomegaly", "Consolidation",
                                       "Effusion",    "Infiltration", "Pneumothorax"};
  std::vector<PlantedUnit> units;
  std::size_t images = 50;
  std::size_t mask_rows = 64;
  std::size_t mask_cols = 64;
  std::size_t unit_rows = 32;
  std::size_t unit_cols = 32;
  double presence = 0.1;
  std::size_t min_box = 12;
  std::size_t max_box = 20;
  std::string layer = "synthetic";
  std::optional<std::int64_t> epoch;

  /// `total` units with `planted` of them spread evenly and assigned to
  /// concepts in order; the rest are noise with standard deviation 1.
  static SynthSpec standard(std::size_t total, std::size_t planted, double sigma) {
    SynthSpec s;
    if (planted > total) fail(ErrorKind::kUsage, "more planted units than units");
    s.units.assign(total, PlantedUnit{std::nullopt, 1.0});
    for (std::size_t p = 0; p < planted; ++p) {
      const std::size_t unit = p * total / planted;
      s.units[unit] = PlantedUnit{s.concepts[p % s.concepts.size()], sigma};
    }
    return s;
  }
};

struct SynthArchive {
  std::vector<ActivationStack> activations;
  std::vector<ConceptMaskStack> masks;
  std::vector<std::optional<std::string>> ground_truth;  // per unit
};

namespace detail {

class SynthRng {
 public:
  explicit SynthRng(std::uint64_t seed) : mix_{seed} {}

  double uniform() { return static_cast<double>(mix_.next() >> 11) * 0x1.0p-53; }
  std::size_t below(std::size_t bound) { return static_cast<std::size_t>(mix_.below(bound)); }
  // Box-Muller, both outputs used.
  double normal() {
    if (spare_) {
      const double v = *spare_;
      spare_.reset();
      return v;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  SplitMix64 mix_;
  std::optional<double> spare_;
};

}  // namespace detail

/// Box average of a (rows x cols) binary mask onto (out_rows x out_cols);
/// the sizes must divide evenly.
inline std::vector<float> box_downsample(std::span<const std::uint8_t> mask, std::size_t rows,
                                         std::size_t cols, std::size_t out_rows, std::size_t out_cols) {
  if (rows % out_rows != 0 || cols % out_cols != 0) {
    fail(ErrorKind::kUsage, "mask size must be a multiple of the unit map size");
  }
  const std::size_t fy = rows / out_rows, fx = cols / out_cols;
  std::vector<float> out(out_rows * out_cols);
  for (std::size_t i = 0; i < out_rows; ++i) {
    for (std::size_t j = 0; j < out_cols; ++j) {
      std::uint32_t sum = 0;
      for (std::size_t y = i * fy; y < (i + 1) * fy; ++y) {
        for (std::size_t x = j * fx; x < (j + 1) * fx; ++x) sum += mask[y * cols + x];
      }
      out[i * out_cols + j] = static_cast<float>(static_cast<double>(sum) / static_cast<double>(fy * fx));
    }
  }
  return out;
}

inline SynthArchive synth_planted_archive(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.units.empty()) fail(ErrorKind::kUsage, "synthetic spec has no units");
  if (spec.images == 0) fail(ErrorKind::kUsage, "synthetic spec has no images");
  if (spec.concepts.empty()) fail(ErrorKind::kUsage, "synthetic spec has no concepts");
  if (spec.min_box == 0 || spec.min_box > spec.max_box || spec.max_box > spec.mask_rows ||
      spec.max_box > spec.mask_cols) {
    fail(ErrorKind::kUsage, "invalid box size range");
  }
  std::vector<std::optional<std::size_t>> plant_index;
  for (const auto& u : spec.units) {
    if (!u.concept_name) {
      plant_index.push_back(std::nullopt);
      continue;
    }
    const auto it = std::find(spec.concepts.begin(), spec.concepts.end(), *u.concept_name);
    if (it == spec.concepts.end()) fail(ErrorKind::kUsage, "planted unit references unknown concept '" + *u.concept_name + "'");
    plant_index.push_back(static_cast<std::size_t>(it - spec.concepts.begin()));
  }

  detail::SynthRng rng(seed);
  SynthArchive out;
  const std::size_t concepts = spec.concepts.size();
  // Each concept occurs in exactly max(1, round(presence * images)) images,
  // picked by a seeded partial Fisher-Yates shuffle.
  const auto occurrences = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(spec.presence * static_cast<double>(spec.images))), 1, spec.images);
  std::vector<std::vector<bool>> present(concepts, std::vector<bool>(spec.images, false));
  for (std::size_t c = 0; c < concepts; ++c) {
    std::vector<std::size_t> order(spec.images);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = 0; i < occurrences; ++i) {
      std::swap(order[i], order[i + rng.below(order.size() - i)]);
      present[c][order[i]] = true;
    }
  }
  const std::size_t units = spec.units.size();
  const std::size_t digits = std::to_string(spec.images - 1).size();
  for (std::size_t img = 0; img < spec.images; ++img) {
    std::string id = std::to_string(img);
    id = "img" + std::string(digits - id.size(), '0') + id;

    Tensor<std::uint8_t> masks({concepts, spec.mask_rows, spec.mask_cols}, 0);
    for (std::size_t c = 0; c < concepts; ++c) {
      if (!present[c][img]) continue;
      const std::size_t span = spec.max_box - spec.min_box + 1;
      const std::size_t bh = spec.min_box + rng.below(span);
      const std::size_t bw = spec.min_box + rng.below(span);
      const std::size_t y0 = rng.below(spec.mask_rows - bh + 1);
      const std::size_t x0 = rng.below(spec.mask_cols - bw + 1);
      auto plane = masks.slice(c);
      for (std::size_t y = y0; y < y0 + bh; ++y) {
        for (std::size_t x = x0; x < x0 + bw; ++x) plane[y * spec.mask_cols + x] = 1;
      }
    }
    std::vector<std::vector<float>> signals(concepts);
    for (std::size_t c = 0; c < concepts; ++c) {
      signals[c] = box_downsample(masks.slice(c), spec.mask_rows, spec.mask_cols, spec.unit_rows, spec.unit_cols);
    }

    Tensor<float> acts({units, spec.unit_rows, spec.unit_cols}, 0.0f);
    for (std::size_t u = 0; u < units; ++u) {
      auto plane = acts.slice(u);
      for (std::size_t p = 0; p < plane.size(); ++p) {
        const double base = plant_index[u] ? signals[*plant_index[u]][p] : 0.0;
        const double noise = spec.units[u].sigma == 0.0 ? 0.0 : spec.units[u].sigma * rng.normal();
        plane[p] = static_cast<float>(base + noise);
      }
    }
    out.activations.push_back({id, spec.layer, spec.epoch, std::move(acts)});
    out.masks.push_back({id, spec.concepts, std::move(masks)});
  }
  for (const auto& u : spec.units) out.ground_truth.push_back(u.concept_name);
  return out;
}

inline void write_synth_archive(const SynthArchive& synth, const std::filesystem::path& activation_root,
                                const std::filesystem::path& mask_root) {
  {
    ArchiveWriter writer(activation_root);
    for (const auto& r : synth.activations) writer.write(r);
  }
  ArchiveWriter writer(mask_root);
  for (const auto& r : synth.masks) writer.write(r);
}

inline nlohmann::ordered_json ground_truth_json(const SynthArchive& synth) {
  auto units = nlohmann::ordered_json::array();
  for (std::size_t u = 0; u < synth.ground_truth.size(); ++u) {
    nlohmann::ordered_json j;
    j["unit"] = u;
    j["planted_concept"] = synth.ground_truth[u] ? nlohmann::ordered_json(*synth.ground_truth[u])
                                                 : nlohmann::ordered_json(nullptr);
    units.push_back(std::move(j));
  }
  return nlohmann::ordered_json{{"units", std::move(units)}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  try {
    if (j.contains("concepts")) s.concepts = j.at("concepts").get<std::vector<std::string>>();
    s.images = j.value("images", s.images);
    s.mask_rows = j.value("mask_rows", s.mask_rows);
    s.mask_cols = j.value("mask_cols", s.mask_cols);
    s.unit_rows = j.value("unit_rows", s.unit_rows);
    s.unit_cols = j.value("unit_cols", s.unit_cols);
    s.presence = j.value("presence", s.presence);
    s.min_box = j.value("min_box", s.min_box);
    s.max_box = j.value("max_box", s.max_box);
    s.layer = j.value("layer", s.layer);
    if (j.contains("epoch") && !j.at("epoch").is_null()) s.epoch = j.at("epoch").get<std::int64_t>();
    for (const auto& u : j.at("units")) {
      PlantedUnit p;
      if (u.contains("concept") && !u.at("concept").is_null()) p.concept_name = u.at("concept").get<std::string>();
      p.sigma = u.value("sigma", 1.0);
      s.units.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kInputFormat, std::string("malformed synth spec: ") + ex.what());
  }
  return s;
}

}  // namespace netdissect
