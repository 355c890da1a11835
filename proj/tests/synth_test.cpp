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

#include "netdissect/dissect.hpp"
#include "netdissect/synth.hpp"
#include "test_support.hpp"

namespace netdissect {
namespace {

using testing::TempDir;

DetectorReport dissect_synth(const SynthArchive& s, const TempDir& dir) {
  write_synth_archive(s, dir / "acts", dir / "masks");
  const auto acts = scan_archive(dir / "acts");
  const auto masks = scan_archive(dir / "masks");
  return label_detectors(accumulate_iou(acts, masks, compute_thresholds(acts, kDefaultQuantile)));
}

TEST(Synth, SameSeedSameArchive) {
  const auto spec = SynthSpec::standard(8, 2, 0.3);
  const auto a = synth_planted_archive(spec, 7);
  const auto b = synth_planted_archive(spec, 7);
  ASSERT_EQ(a.activations.size(), b.activations.size());
  for (std::size_t i = 0; i < a.activations.size(); ++i) {
    EXPECT_EQ(a.activations[i].tensor, b.activations[i].tensor);
    EXPECT_EQ(a.masks[i].tensor, b.masks[i].tensor);
  }
  EXPECT_NE(synth_planted_archive(spec, 8).activations[0].tensor, a.activations[0].tensor);
}

TEST(Synth, PlantedUnitsAreSpreadOut) {
  const auto spec = SynthSpec::standard(16, 4, 0.3);
  const auto s = synth_planted_archive(spec, 1);
  ASSERT_EQ(s.ground_truth.size(), 16u);
  EXPECT_EQ(*s.ground_truth[0], "Atelectasis");
  EXPECT_EQ(*s.ground_truth[4], "Cardiomegaly");
  EXPECT_EQ(*s.ground_truth[8], "Consolidation");
  EXPECT_EQ(*s.ground_truth[12], "Effusion");
  EXPECT_FALSE(s.ground_truth[1]);
}

TEST(Synth, NoiseFreePlantIsRecoveredWithHighIoU) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    TempDir dir;
    const auto s = synth_planted_archive(SynthSpec::standard(4, 1, 0.0), seed);
    const auto r = dissect_synth(s, dir);
    EXPECT_EQ(*r.units[0].best_concept, *s.ground_truth[0]);
    EXPECT_GE(r.units[0].best_iou, 0.5) << "seed " << seed;
  }
}

TEST(Synth, NoisyPlantsRecovered) {
  TempDir dir;
  const auto s = synth_planted_archive(SynthSpec::standard(16, 4, 0.3), 3);
  const auto r = dissect_synth(s, dir);
  for (std::size_t u = 0; u < 16; ++u) {
    if (s.ground_truth[u]) {
      EXPECT_TRUE(r.units[u].is_detector) << u;
      EXPECT_EQ(*r.units[u].best_concept, *s.ground_truth[u]) << u;
      EXPECT_GE(r.units[u].best_iou, 0.2) << u;
    }
  }
}

TEST(Synth, SpecJsonRoundTrip) {
  nlohmann::json j = {{"images", 5},
                      {"units", {{{"concept", "Effusion"}, {"sigma", 0.5}}, {{"concept", nullptr}}}},
                      {"seed_note", "ignored"}};
  const auto spec = synth_spec_from_json(j);
  EXPECT_EQ(spec.images, 5u);
  ASSERT_EQ(spec.units.size(), 2u);
  EXPECT_EQ(*spec.units[0].concept_name, "Effusion");
  EXPECT_EQ(spec.units[0].sigma, 0.5);
  EXPECT_FALSE(spec.units[1].concept_name);
}

}  // namespace
}  // namespace netdissect
