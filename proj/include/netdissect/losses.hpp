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

// Value-only reference implementations of the training losses, used as
// parity oracles for framework code. No gradients.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "netdissect/error.hpp"

namespace netdissect::losses {

inline constexpr double kProbabilityEpsilon = 1e-7;
inline constexpr std::size_t kRegions = 6;
inline constexpr std::size_t kSeverityClasses = 4;

/// Multi-label classification batch, row-major (N, C).
struct ClassificationBatch {
  std::size_t batch = 0;
  std::size_t categories = 0;
  std::vector<std::uint8_t> labels;
  std::vector<double> probabilities;
};

/// Global severity regression batch.
struct RegressionBatch {
  std::vector<double> predictions;
  std::vector<int> labels;  // 0..18
  std::vector<double> weights;
};

/// Six lung regions with four severity classes each: logits (N, 6, 4),
/// labels (N, 6).
struct RegionBatch {
  std::size_t batch = 0;
  std::vector<double> logits;
  std::vector<int> labels;
};

struct BceLoss {
  double sum = 0.0;         // over samples and categories
  double batch_mean = 0.0;  // sum / N
  double beta = 1.0;
};

/// beta = #negative labels / #positive labels over the batch.
inline double beta_from_batch(const ClassificationBatch& b) {
  std::size_t pos = 0;
  for (auto y : b.labels) pos += (y != 0);
  if (pos == 0) {
    fail(ErrorKind::kNumericDegenerate, "batch has no positive labels; beta is undefined (use a fixed beta)");
  }
  return static_cast<double>(b.labels.size() - pos) / static_cast<double>(pos);
}

namespace detail {

inline void check(const ClassificationBatch& b) {
  if (b.batch == 0 || b.categories == 0) fail(ErrorKind::kUsage, "empty classification batch");
  if (b.labels.size() != b.batch * b.categories || b.probabilities.size() != b.labels.size()) {
    fail(ErrorKind::kConsistency, "classification batch arrays do not match (N, C)");
  }
  for (auto y : b.labels) {
    if (y > 1) fail(ErrorKind::kConsistency, "classification labels must be 0 or 1");
  }
  for (double p : b.probabilities) {
    if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::kNumericDegenerate, "probability outside [0, 1]");
  }
}

inline void check(const RegionBatch& b) {
  if (b.batch == 0) fail(ErrorKind::kUsage, "empty region batch");
  if (b.logits.size() != b.batch * kRegions * kSeverityClasses || b.labels.size() != b.batch * kRegions) {
    fail(ErrorKind::kConsistency, "region batch must hold (N, 6, 4) logits and (N, 6) labels");
  }
  for (double v : b.logits) {
    if (!std::isfinite(v)) fail(ErrorKind::kNumericDegenerate, "non-finite logit");
  }
  for (int y : b.labels) {
    if (y < 0 || y >= static_cast<int>(kSeverityClasses)) {
      fail(ErrorKind::kConsistency, "region label " + std::to_string(y) + " outside {0,1,2,3}");
    }
  }
}

inline double clamp_probability(double p) {
  return std::clamp(p, kProbabilityEpsilon, 1.0 - kProbabilityEpsilon);
}

inline std::array<double, kSeverityClasses> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::array<double, kSeverityClasses> p{};
  double z = 0.0;
  for (std::size_t c = 0; c < kSeverityClasses; ++c) z += (p[c] = std::exp(logits[c] - m));
  for (auto& v : p) v /= z;
  return p;
}

inline double log_softmax_at(std::span<const double> logits, std::size_t cls) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  return logits[cls] - m - std::log(z);
}

}  // namespace detail

/// L = -sum_c [beta y_c log p_c + (1 - y_c) log(1 - p_c)], summed over the
/// batch. `fixed_beta` empty means beta is taken from the batch.
inline BceLoss weighted_bce(const ClassificationBatch& b, std::optional<double> fixed_beta = std::nullopt) {
  detail::check(b);
  BceLoss out;
  out.beta = fixed_beta ? *fixed_beta : beta_from_batch(b);
  if (!(out.beta >= 0.0) || !std::isfinite(out.beta)) fail(ErrorKind::kUsage, "beta must be finite and >= 0");
  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    const double p = detail::clamp_probability(b.probabilities[i]);
    const double y = b.labels[i];
    out.sum -= out.beta * y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  out.batch_mean = out.sum / static_cast<double>(b.batch);
  return out;
}

/// L = (1/N) sum_n w_n (pred_n - y_n)^2.
inline double weighted_mse(const RegressionBatch& b) {
  const std::size_t n = b.predictions.size();
  if (n == 0) fail(ErrorKind::kUsage, "empty regression batch");
  if (b.labels.size() != n || b.weights.size() != n) {
    fail(ErrorKind::kConsistency, "regression batch arrays differ in length");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(b.weights[i] > 0.0)) fail(ErrorKind::kConsistency, "regression weights must be positive");
    if (b.labels[i] < 0 || b.labels[i] > 18) fail(ErrorKind::kConsistency, "severity score outside 0..18");
    const double e = b.predictions[i] - b.labels[i];
    sum += b.weights[i] * e * e;
  }
  return sum / static_cast<double>(n);
}

/// Inverse-frequency weights over score bins: w_n = N / (B * count(bin(y_n)))
/// with B the number of occupied bins, so the weights average to 1.
inline std::vector<double> inverse_frequency_weights(std::span<const int> labels, int bin_width = 1) {
  if (labels.empty()) fail(ErrorKind::kUsage, "no labels");
  if (bin_width < 1) fail(ErrorKind::kUsage, "bin width must be >= 1");
  std::map<int, std::size_t> counts;
  for (int y : labels) ++counts[y / bin_width];
  const double n = static_cast<double>(labels.size());
  const double bins = static_cast<double>(counts.size());
  std::vector<double> w;
  w.reserve(labels.size());
  for (int y : labels) w.push_back(n / (bins * static_cast<double>(counts[y / bin_width])));
  return w;
}

/// Per sample -(1/6) sum_regions log softmax(logits)[label], batch-averaged.
inline double scce(const RegionBatch& b) {
  detail::check(b);
  double total = 0.0;
  for (std::size_t n = 0; n < b.batch; ++n) {
    double sample = 0.0;
    for (std::size_t r = 0; r < kRegions; ++r) {
      const auto logits = std::span<const double>(b.logits).subspan((n * kRegions + r) * kSeverityClasses,
                                                                   kSeverityClasses);
      sample -= detail::log_softmax_at(logits, static_cast<std::size_t>(b.labels[n * kRegions + r]));
    }
    total += sample / static_cast<double>(kRegions);
  }
  return total / static_cast<double>(b.batch);
}

/// Per sample (1/6) sum_regions |y - E[class]| with E taken under the
/// softmax, batch-averaged.
inline double mae_d(const RegionBatch& b) {
  detail::check(b);
  double total = 0.0;
  for (std::size_t n = 0; n < b.batch; ++n) {
    double sample = 0.0;
    for (std::size_t r = 0; r < kRegions; ++r) {
      const auto p = detail::softmax(std::span<const double>(b.logits).subspan(
          (n * kRegions + r) * kSeverityClasses, kSeverityClasses));
      double expected = 0.0;
      for (std::size_t c = 0; c < kSeverityClasses; ++c) expected += p[c] * static_cast<double>(c);
      sample += std::abs(static_cast<double>(b.labels[n * kRegions + r]) - expected);
    }
    total += sample / static_cast<double>(kRegions);
  }
  return total / static_cast<double>(b.batch);
}

}  // namespace netdissect::losses
