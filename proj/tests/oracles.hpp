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

// Slow, obviously-correct reference computations. Nothing here calls into the
// library's numeric code.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace netdissect::oracle {

/// Smallest sorted value t such that at most q*n values lie strictly above t.
inline float quantile_threshold(std::vector<float> values, double q) {
  std::sort(values.begin(), values.end());
  const long double budget = static_cast<long double>(q) * values.size();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto above = static_cast<long double>(values.end() - std::upper_bound(values.begin(), values.end(), values[i]));
    if (above <= budget) return values[i];
  }
  return values.back();
}

inline std::size_t count_above(const std::vector<float>& values, double t) {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [t](float v) { return v > t; }));
}

using PixelSet = std::set<std::size_t>;

inline PixelSet pixels_at_or_above(const float* map, std::size_t n, double t) {
  PixelSet s;
  for (std::size_t i = 0; i < n; ++i) {
    if (static_cast<double>(map[i]) >= t) s.insert(i);
  }
  return s;
}

inline PixelSet pixels_set(const std::uint8_t* mask, std::size_t n) {
  PixelSet s;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) s.insert(i);
  }
  return s;
}

struct Counts {
  std::uint64_t intersection = 0;
  std::uint64_t union_pixels = 0;
  std::uint64_t images = 0;
};

/// Per (unit, concept) intersection and union summed over the images where
/// the concept is present. unit_sets[image][unit], concept_sets[image][concept].
inline std::map<std::pair<std::size_t, std::size_t>, Counts> iou_counts(
    const std::vector<std::vector<PixelSet>>& unit_sets, const std::vector<std::vector<PixelSet>>& concept_sets) {
  std::map<std::pair<std::size_t, std::size_t>, Counts> out;
  for (std::size_t n = 0; n < unit_sets.size(); ++n) {
    for (std::size_t k = 0; k < unit_sets[n].size(); ++k) {
      for (std::size_t c = 0; c < concept_sets[n].size(); ++c) {
        const auto& a = unit_sets[n][k];
        const auto& b = concept_sets[n][c];
        if (b.empty()) continue;
        std::vector<std::size_t> inter, uni;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
        std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(uni));
        auto& cell = out[{k, c}];
        cell.intersection += inter.size();
        cell.union_pixels += uni.size();
        cell.images += 1;
      }
    }
  }
  return out;
}

/// Bilinear sample of a (h x w) map at continuous source coordinates, with
/// clamping at the borders.
inline double bilinear_at(const std::vector<float>& src, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  auto at = [&](std::size_t r, std::size_t c) { return static_cast<double>(src[r * w + c]); };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

/// Full resize with one rounding to float per output pixel. Exact agreement
/// with other implementations needs dst sizes whose src/dst is dyadic.
inline std::vector<float> bilinear_resize_f32(const std::vector<float>& src, std::size_t h, std::size_t w,
                                              std::size_t H, std::size_t W) {
  std::vector<float> out(H * W);
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const double y = (static_cast<double>(i) + 0.5) * static_cast<double>(h) / static_cast<double>(H) - 0.5;
      const double x = (static_cast<double>(j) + 0.5) * static_cast<double>(w) / static_cast<double>(W) - 0.5;
      out[i * W + j] = static_cast<float>(bilinear_at(src, h, w, y, x));
    }
  }
  return out;
}

/// Left Riemann sum of the path integral of d/da (sum w a)^2 with K uniform
/// steps: 2 dot^2 * sum_j (j/K)(1/K) = dot^2 (1 + 1/K).
inline double quadratic_left_riemann_total(double dot, std::size_t k) {
  return dot * dot * (1.0 + 1.0 / static_cast<double>(k));
}

/// Binary cross-entropy written out per element, no weighting.
inline double plain_bce(const std::vector<int>& y, const std::vector<double>& p) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] ? -std::log(p[i]) : -std::log1p(-p[i]);
  return s;
}

}  // namespace netdissect::oracle
