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

#include <gtest/gtest.h>

#include <random>

#include "netdissect/resample.hpp"
#include "oracles.hpp"

namespace netdissect {
namespace {

TEST(Resample, TwoPixelsToFour) {
  const std::vector<float> src = {0.0f, 1.0f};
  EXPECT_EQ(upsample_bilinear(src, 1, 2, 1, 4), (std::vector<float>{0.0f, 0.25f, 0.75f, 1.0f}));
}

TEST(Resample, ConstantStaysConstant) {
  const std::vector<float> src(6, 0.1f);
  for (float v : upsample_bilinear(src, 2, 3, 7, 11)) EXPECT_EQ(v, 0.1f);
}

TEST(Resample, IdentitySize) {
  std::vector<float> src(12);
  for (std::size_t i = 0; i < src.size(); ++i) src[i] = static_cast<float>(i) * 0.3f;
  EXPECT_EQ(upsample_bilinear(src, 3, 4, 3, 4), src);
}

TEST(Resample, MatchesPointwiseOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 1 + rng() % 6, w = 1 + rng() % 6, H = 1 + rng() % 13, W = 1 + rng() % 13;
    std::vector<float> src(h * w);
    for (auto& v : src) v = std::uniform_real_distribution<float>(-3, 3)(rng);
    const auto out = upsample_bilinear(src, h, w, H, W);
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        const double y = (i + 0.5) * h / H - 0.5, x = (j + 0.5) * w / W - 0.5;
        EXPECT_NEAR(out[i * W + j], oracle::bilinear_at(src, h, w, y, x), 1e-5);
      }
    }
  }
}

TEST(Resample, ScalingByTwoIsExact) {
  std::mt19937_64 rng(2);
  std::vector<float> src(25), twice(25);
  for (std::size_t i = 0; i < src.size(); ++i) {
    src[i] = std::uniform_real_distribution<float>(-1, 1)(rng);
    twice[i] = 2.0f * src[i];
  }
  const auto a = upsample_bilinear(src, 5, 5, 17, 17);
  const auto b = upsample_bilinear(twice, 5, 5, 17, 17);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(b[i], 2.0f * a[i]);
}

TEST(Resample, ZeroTargetIsUsageError) {
  const std::vector<float> src = {1.0f};
  try {
    upsample_bilinear(src, 1, 1, 0, 3);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kUsage);
  }
}

}  // namespace
}  // namespace netdissect
