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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "netdissect/error.hpp"
#include "netdissect/tensor.hpp"

namespace netdissect {

namespace detail {

struct AxisTap {
  std::size_t lo;
  std::size_t hi;
  double frac;  // weight of `hi`
};

// Half-pixel centres: output index I samples (I + 0.5) * src / dst - 0.5,
// clamped to [0, src - 1].
inline std::vector<AxisTap> axis_taps(std::size_t src, std::size_t dst) {
  std::vector<AxisTap> taps(dst);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  const double last = static_cast<double>(src - 1);
  for (std::size_t i = 0; i < dst; ++i) {
    double x = (static_cast<double>(i) + 0.5) * scale - 0.5;
    x = std::clamp(x, 0.0, last);
    const auto lo = static_cast<std::size_t>(std::floor(x));
    const std::size_t hi = std::min(lo + 1, src - 1);
    taps[i] = {lo, hi, x - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of a row-major (rows x cols) map to (out_rows x out_cols).
/// Blending is done in double and rounded once to float, so constant inputs
/// stay constant and scaling the input by a power of two scales the output
/// exactly.
inline std::vector<float> upsample_bilinear(std::span<const float> map, std::size_t rows,
                                            std::size_t cols, std::size_t out_rows,
                                            std::size_t out_cols) {
  if (rows == 0 || cols == 0) fail(ErrorKind::kConsistency, "cannot resample an empty map");
  if (out_rows == 0 || out_cols == 0) fail(ErrorKind::kUsage, "zero-sized resample target");
  if (map.size() != rows * cols) {
    fail(ErrorKind::kConsistency, "map has " + std::to_string(map.size()) + " values, expected " +
                                      std::to_string(rows * cols));
  }
  const auto ty = detail::axis_taps(rows, out_rows);
  const auto tx = detail::axis_taps(cols, out_cols);
  std::vector<float> out(out_rows * out_cols);
  for (std::size_t i = 0; i < out_rows; ++i) {
    const auto& y = ty[i];
    const float* r0 = map.data() + y.lo * cols;
    const float* r1 = map.data() + y.hi * cols;
    for (std::size_t j = 0; j < out_cols; ++j) {
      const auto& x = tx[j];
      const double top = (1.0 - x.frac) * r0[x.lo] + x.frac * r0[x.hi];
      const double bottom = (1.0 - x.frac) * r1[x.lo] + x.frac * r1[x.hi];
      out[i * out_cols + j] = static_cast<float>((1.0 - y.frac) * top + y.frac * bottom);
    }
  }
  return out;
}

}  // namespace netdissect
