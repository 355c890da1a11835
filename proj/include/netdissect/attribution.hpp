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

// Unit-level Integrated Gradients over a dumped whole-layer path.
//
// For neuron i of unit k with activation a, the dump holds the gradients
// g_j = df/da evaluated with the layer scaled to alpha_j * a. The neuron
// attribution is s = a * Q(g), Q a quadrature of g over alpha in [0, 1],
// and the unit contribution is sum_i |s_k^i|.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "netdissect/dissect.hpp"
#include "netdissect/error.hpp"
#include "netdissect/resample.hpp"
#include "netdissect/tensor_io.hpp"

namespace netdissect {

inline constexpr std::size_t kDefaultIgSteps = 50;

enum class Quadrature { kRiemannLeft, kTrapezoid };

inline const char* to_string(Quadrature q) {
  return q == Quadrature::kTrapezoid ? "trapezoid" : "riemann-left";
}

inline Quadrature parse_quadrature(const std::string& s) {
  if (s == "trapezoid") return Quadrature::kTrapezoid;
  if (s == "riemann-left") return Quadrature::kRiemannLeft;
  fail(ErrorKind::kUsage, "unknown quadrature rule '" + s + "' (expected trapezoid or riemann-left)");
}

/// Uniform path positions j / steps, j = 1..steps.
inline std::vector<double> uniform_alphas(std::size_t steps) {
  if (steps == 0) fail(ErrorKind::kUsage, "need at least one alpha step");
  std::vector<double> a(steps);
  for (std::size_t j = 0; j < steps; ++j) a[j] = static_cast<double>(j + 1) / static_cast<double>(steps);
  return a;
}

/// Weights w_j with Q = sum_j w_j g_j.
///
/// riemann-left: w_j = alpha_j - alpha_{j-1}, alpha_0 = 0.
/// trapezoid: panel rule over the dumped nodes; the gradient at alpha = 0 is
/// not dumped, so the first panel uses the value extrapolated linearly from
/// the first two nodes (constant extrapolation when there is only one).
inline std::vector<double> quadrature_weights(std::span<const double> alphas, Quadrature rule) {
  const std::size_t n = alphas.size();
  std::vector<double> w(n, 0.0);
  if (rule == Quadrature::kRiemannLeft) {
    double prev = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      w[j] = alphas[j] - prev;
      prev = alphas[j];
    }
    return w;
  }
  if (n == 0) fail(ErrorKind::kUsage, "need at least one alpha step");
  if (n == 1) return {1.0};
  for (std::size_t j = 1; j < n; ++j) {
    const double half = 0.5 * (alphas[j] - alphas[j - 1]);
    w[j - 1] += half;
    w[j] += half;
  }
  // g(0) ~ g_1 - r (g_2 - g_1), r = alpha_1 / (alpha_2 - alpha_1).
  const double a1 = alphas[0];
  const double r = a1 / (alphas[1] - alphas[0]);
  w[0] += 0.5 * a1 * (2.0 + r);
  w[1] -= 0.5 * a1 * r;
  return w;
}

struct NeuronContributionMap {
  std::size_t unit = 0;
  std::string image_id;
  std::string target;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // s_k^i, row-major
};

/// Per-neuron attributions for every unit of the dump.
///
/// Q is evaluated as g_S + sum_j w_j (g_j - g_S), which equals sum_j w_j g_j
/// because the weights sum to 1, and is exact when the gradient is constant
/// along the path.
inline std::vector<NeuronContributionMap> integrate_gradients(const GradientDump& dump, Quadrature rule) {
  validate(dump);
  const auto weights = quadrature_weights(dump.alphas, rule);
  const std::size_t steps = dump.alphas.size();
  const std::size_t units = dump.activations.dim(0);
  const std::size_t rows = dump.activations.dim(1);
  const std::size_t cols = dump.activations.dim(2);
  const std::size_t layer_size = dump.activations.size();

  std::vector<NeuronContributionMap> maps(units);
  for (std::size_t k = 0; k < units; ++k) {
    auto& m = maps[k];
    m.unit = k;
    m.image_id = dump.image_id;
    m.target = dump.target;
    m.rows = rows;
    m.cols = cols;
    m.values.resize(rows * cols);
    for (std::size_t p = 0; p < rows * cols; ++p) {
      const std::size_t i = k * rows * cols + p;
      const double g_end = dump.gradients[(steps - 1) * layer_size + i];
      double deviation = 0.0;
      for (std::size_t j = 0; j < steps; ++j) {
        deviation += weights[j] * (static_cast<double>(dump.gradients[j * layer_size + i]) - g_end);
      }
      m.values[p] = static_cast<double>(dump.activations[i]) * (g_end + deviation);
    }
  }
  return maps;
}

struct AttributionResult {
  std::string image_id;
  std::string target;
  std::string layer;
  std::vector<double> contributions;  // sum_i |s_k^i|
  std::vector<double> signed_totals;  // sum_i s_k^i
  std::vector<std::size_t> ranking;   // unit indices, descending contribution
  double signed_total = 0.0;
  double f_at_input = 0.0;
  double f_at_baseline = 0.0;
  double completeness_gap = 0.0;  // |sum s - (f(a) - f(0))|
};

inline AttributionResult unit_contributions(const std::vector<NeuronContributionMap>& maps,
                                            double f_at_input, double f_at_baseline,
                                            std::size_t expected_units) {
  std::vector<const NeuronContributionMap*> by_unit(expected_units, nullptr);
  for (const auto& m : maps) {
    if (m.unit >= expected_units) {
      fail(ErrorKind::kConsistency, "contribution map for unit " + std::to_string(m.unit) +
                                        " outside layer of " + std::to_string(expected_units));
    }
    by_unit[m.unit] = &m;
  }
  AttributionResult r;
  for (std::size_t k = 0; k < expected_units; ++k) {
    if (!by_unit[k]) fail(ErrorKind::kConsistency, "missing contribution map for unit " + std::to_string(k));
    double abs_sum = 0.0, sum = 0.0;
    for (double s : by_unit[k]->values) {
      if (!std::isfinite(s)) fail(ErrorKind::kNumericDegenerate, "non-finite attribution in unit " + std::to_string(k));
      abs_sum += std::abs(s);
      sum += s;
    }
    if (abs_sum < std::abs(sum)) {
      fail(ErrorKind::kNumericDegenerate, "triangle inequality violated for unit " + std::to_string(k));
    }
    r.contributions.push_back(abs_sum);
    r.signed_totals.push_back(sum);
  }
  if (!maps.empty()) {
    r.image_id = maps.front().image_id;
    r.target = maps.front().target;
  }
  r.ranking.resize(expected_units);
  std::iota(r.ranking.begin(), r.ranking.end(), std::size_t{0});
  std::stable_sort(r.ranking.begin(), r.ranking.end(), [&r](std::size_t a, std::size_t b) {
    return r.contributions[a] > r.contributions[b];
  });
  // Signed total over (unit, neuron) in layer order.
  for (std::size_t k = 0; k < expected_units; ++k) {
    for (double s : by_unit[k]->values) r.signed_total += s;
  }
  r.f_at_input = f_at_input;
  r.f_at_baseline = f_at_baseline;
  r.completeness_gap = std::abs(r.signed_total - (f_at_input - f_at_baseline));
  return r;
}

inline AttributionResult attribute(const GradientDump& dump, Quadrature rule,
                                   std::vector<NeuronContributionMap>* maps_out = nullptr) {
  auto maps = integrate_gradients(dump, rule);
  auto result = unit_contributions(maps, dump.f_at_input, dump.f_at_baseline, dump.activations.dim(0));
  result.layer = dump.layer;
  if (maps_out) *maps_out = std::move(maps);
  return result;
}

// ---------------------------------------------------------------------------
// Semantic explanation

inline constexpr const char* kUnannotated = "unannotated";

struct ExplainedUnit {
  std::size_t rank = 0;  // 1-based
  std::size_t unit = 0;
  double contribution = 0.0;
  std::string label;  // concept name or "unannotated"
  std::optional<double> iou;
};

struct SemanticExplanation {
  std::vector<ExplainedUnit> top;
  std::optional<ExplainedUnit> first_annotated;  // highest-ranked detector unit, if any
  std::string statement;
};

inline SemanticExplanation semantic_join(const AttributionResult& result, const DetectorReport& report,
                                         std::size_t top_n) {
  if (!report.units.empty() && report.layer != result.layer) {
    fail(ErrorKind::kConsistency, "detector report is for layer '" + report.layer +
                                      "', attribution is for layer '" + result.layer + "'");
  }
  auto explain = [&](std::size_t rank) {
    ExplainedUnit e;
    e.rank = rank + 1;
    e.unit = result.ranking[rank];
    e.contribution = result.contributions[e.unit];
    e.label = kUnannotated;
    if (const auto* u = report.find_unit(e.unit); u && u->is_detector && u->best_concept) {
      e.label = *u->best_concept;
      e.iou = u->best_iou;
    }
    return e;
  };
  SemanticExplanation out;
  const std::size_t n = std::min(top_n, result.ranking.size());
  for (std::size_t i = 0; i < n; ++i) out.top.push_back(explain(i));
  for (std::size_t i = 0; i < result.ranking.size(); ++i) {
    auto e = explain(i);
    if (e.label != kUnannotated) {
      out.first_annotated = std::move(e);
      break;
    }
  }

  char buf[256];
  if (out.top.empty()) {
    out.statement = "no units to explain";
  } else if (out.top.front().label != kUnannotated) {
    std::snprintf(buf, sizeof(buf), "top contributing unit %zu detects %s (IoU %.4f)", out.top.front().unit,
                  out.top.front().label.c_str(), *out.top.front().iou);
    out.statement = buf;
  } else if (out.first_annotated) {
    std::snprintf(buf, sizeof(buf),
                  "top contributing unit %zu is unannotated; highest-ranked annotated unit %zu (rank %zu) "
                  "detects %s (IoU %.4f)",
                  out.top.front().unit, out.first_annotated->unit, out.first_annotated->rank,
                  out.first_annotated->label.c_str(), *out.first_annotated->iou);
    out.statement = buf;
  } else {
    std::snprintf(buf, sizeof(buf), "top contributing unit %zu is unannotated; no contributing unit is a concept detector",
                  out.top.front().unit);
    out.statement = buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Overlays

struct OverlayMap {
  std::size_t unit = 0;
  std::string image_id;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;
  bool degenerate = false;    // all-zero map, overlay is zero
  bool negative_max = false;  // maximum <= 0 but map not all zero
  std::string warning;
};

/// Divides the map by its (signed) maximum and upsamples it to (rows, cols).
inline OverlayMap render_overlay(const NeuronContributionMap& map, std::size_t rows, std::size_t cols) {
  if (map.values.empty() || map.values.size() != map.rows * map.cols) {
    fail(ErrorKind::kConsistency, "contribution map has inconsistent shape");
  }
  OverlayMap out;
  out.unit = map.unit;
  out.image_id = map.image_id;
  out.rows = rows;
  out.cols = cols;
  const double max = *std::max_element(map.values.begin(), map.values.end());
  const bool all_zero = std::all_of(map.values.begin(), map.values.end(), [](double v) { return v == 0.0; });
  if (all_zero) {
    out.degenerate = true;
    out.warning = "unit " + std::to_string(map.unit) + ": all-zero contribution map, overlay left at zero";
    out.values.assign(rows * cols, 0.0f);
    return out;
  }
  if (max <= 0.0) {
    out.negative_max = true;
    out.warning = "unit " + std::to_string(map.unit) + ": non-positive maximum, overlay sign is flipped";
  }
  if (max == 0.0) {
    // Non-positive map whose maximum is exactly zero: scale by the magnitude
    // of the minimum instead of dividing by zero.
    const double min = *std::min_element(map.values.begin(), map.values.end());
    std::vector<float> normalized(map.values.size());
    for (std::size_t i = 0; i < normalized.size(); ++i) normalized[i] = static_cast<float>(map.values[i] / -min);
    out.values = upsample_bilinear(normalized, map.rows, map.cols, rows, cols);
    return out;
  }
  std::vector<float> normalized(map.values.size());
  for (std::size_t i = 0; i < normalized.size(); ++i) normalized[i] = static_cast<float>(map.values[i] / max);
  out.values = upsample_bilinear(normalized, map.rows, map.cols, rows, cols);
  return out;
}

/// Binary 8-bit PGM, pixel = round(255 * clamp(v, 0, 1)).
inline std::string overlay_pgm(const OverlayMap& overlay) {
  std::string out = "P5\n" + std::to_string(overlay.cols) + " " + std::to_string(overlay.rows) + "\n255\n";
  out.reserve(out.size() + overlay.values.size());
  for (float v : overlay.values) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * c))));
  }
  return out;
}

inline nlohmann::ordered_json to_json(const AttributionResult& r, Quadrature rule, std::size_t steps,
                                      const SemanticExplanation* semantics = nullptr) {
  nlohmann::ordered_json j;
  j["image_id"] = r.image_id;
  j["target"] = r.target;
  j["layer"] = r.layer;
  j["quadrature"] = to_string(rule);
  j["steps"] = steps;
  j["baseline"] = "zero";
  j["f_at_input"] = r.f_at_input;
  j["f_at_baseline"] = r.f_at_baseline;
  j["signed_total"] = r.signed_total;
  j["completeness_gap"] = r.completeness_gap;
  j["ranking"] = r.ranking;
  j["contributions"] = r.contributions;
  j["signed_totals"] = r.signed_totals;
  if (semantics) {
    nlohmann::ordered_json s;
    auto unit_json = [](const ExplainedUnit& e) {
      nlohmann::ordered_json u;
      u["rank"] = e.rank;
      u["unit"] = e.unit;
      u["contribution"] = e.contribution;
      u["label"] = e.label;
      u["iou"] = e.iou ? nlohmann::ordered_json(*e.iou) : nlohmann::ordered_json(nullptr);
      return u;
    };
    auto top = nlohmann::ordered_json::array();
    for (const auto& e : semantics->top) top.push_back(unit_json(e));
    s["top_units"] = std::move(top);
    s["first_annotated"] =
        semantics->first_annotated ? unit_json(*semantics->first_annotated) : nlohmann::ordered_json(nullptr);
    s["statement"] = semantics->statement;
    j["semantic"] = std::move(s);
  }
  return j;
}

}  // namespace netdissect
