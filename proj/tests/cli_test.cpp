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
#include <sys/wait.h>

#include <sstream>

#include "netdissect/cli.hpp"
#include "test_support.hpp"

namespace netdissect {
namespace {

using testing::TempDir;

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome cli(std::vector<std::string> args) {
  args.insert(args.begin(), "netdissect");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

nlohmann::json read_json(const std::filesystem::path& p) { return nlohmann::json::parse(testing::slurp(p)); }

// One synth fixture shared by the tests below.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir();
    const auto o = cli({"synth", "--seed", "7", "--images", "20", "--gradient-model", "linear", "--steps", "8",
                        "--out", (*dir_ / "synth").string()});
    ASSERT_EQ(o.code, 0) << o.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string synth(const std::string& sub) { return (*dir_ / "synth" / sub).string(); }
  static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

TEST_F(CliTest, MissingArchivePathIsUsageError) {
  const auto o = cli({"thresholds"});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("--activations"), std::string::npos) << o.err;
}

TEST_F(CliTest, NonexistentArchiveIsInputFormatError) {
  TempDir out;
  EXPECT_EQ(cli({"thresholds", "--activations", "/nonexistent/acts", "--out", out.path().string()}).code, 3);
}

TEST_F(CliTest, UnknownSubcommandIsUsageError) { EXPECT_EQ(cli({"frobnicate"}).code, 2); }

TEST_F(CliTest, ThresholdsDeterministicAndDefaultQuantileRecorded) {
  TempDir a, b;
  ASSERT_EQ(cli({"thresholds", "-a", synth("activations"), "--out", a.path().string()}).code, 0);
  ASSERT_EQ(cli({"thresholds", "-a", synth("activations"), "--out", b.path().string(), "--threads", "4"}).code, 0);
  EXPECT_EQ(testing::slurp(a / "thresholds.json"), testing::slurp(b / "thresholds.json"));
  const auto meta = read_json(a / "run-meta.json");
  EXPECT_EQ(meta["config"]["quantile"].get<double>(), 0.005);
  EXPECT_EQ(meta["config"]["detector_threshold"].get<double>(), 0.04);
  EXPECT_EQ(meta["config"]["ig_steps"].get<int>(), 50);
  EXPECT_TRUE(meta["input_hashes"].contains(synth("activations")));
  EXPECT_TRUE(meta.contains("started_at"));
}

TEST_F(CliTest, DissectRecoversPlantedUnits) {
  TempDir out;
  const auto o = cli({"dissect", "-a", synth("activations"), "-m", synth("masks"), "--tag", "synthetic", "--out",
                      out.path().string()});
  ASSERT_EQ(o.code, 0) << o.err;
  for (const char* f : {"iou.csv", "report.json", "report.svg", "thresholds.json", "run-meta.json"}) {
    EXPECT_TRUE(std::filesystem::exists(out / f)) << f;
  }
  const auto report = detector_report_from_json(read_json(out / "report.json"));
  const auto truth = read_json(synth("ground_truth.json"));
  for (const auto& unit : truth["units"]) {
    if (unit["planted_concept"].is_null()) continue;
    const auto* label = report.find_unit(unit["unit"].get<std::size_t>());
    ASSERT_NE(label, nullptr);
    EXPECT_TRUE(label->is_detector);
    EXPECT_EQ(*label->best_concept, unit["planted_concept"].get<std::string>());
  }
}

TEST_F(CliTest, EmptyUnitSubsetRejected) {
  TempDir out;
  const auto o = cli({"dissect", "-a", synth("activations"), "-m", synth("masks"), "--units", "", "--out",
                      out.path().string()});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("no units selected"), std::string::npos) << o.err;
}

TEST_F(CliTest, UnitSubsetOnlyReportsThoseUnits) {
  TempDir out;
  ASSERT_EQ(cli({"dissect", "-a", synth("activations"), "-m", synth("masks"), "--units", "4,0", "--out",
                 out.path().string()})
                .code,
            0);
  const auto report = detector_report_from_json(read_json(out / "report.json"));
  ASSERT_EQ(report.units.size(), 2u);
  EXPECT_EQ(report.units[0].unit, 0u);
  EXPECT_EQ(report.units[1].unit, 4u);
}

TEST_F(CliTest, HigherDetectorThresholdNeverAddsDetectors) {
  TempDir lo, hi;
  ASSERT_EQ(cli({"dissect", "-a", synth("activations"), "-m", synth("masks"), "--out", lo.path().string()}).code, 0);
  ASSERT_EQ(cli({"dissect", "-a", synth("activations"), "-m", synth("masks"), "--detector-threshold", "0.1",
                 "--out", hi.path().string()})
                .code,
            0);
  EXPECT_LE(detector_report_from_json(read_json(hi / "report.json")).total_detectors(),
            detector_report_from_json(read_json(lo / "report.json")).total_detectors());
}

TEST_F(CliTest, CompareSelfHasZeroDeltaAndVocabularyMismatchFails) {
  TempDir d;
  ASSERT_EQ(cli({"dissect", "-a", synth("activations"), "-m", synth("masks"), "--out", (d / "r").string()}).code, 0);
  const auto report = (d / "r" / "report.json").string();
  ASSERT_EQ(cli({"compare", "-r", report, "-r", report, "--out", (d / "cmp").string()}).code, 0);
  const auto csv = testing::slurp(d / "cmp" / "evolution.csv");
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line.rfind("concept,", 0), 0u);
  while (std::getline(lines, line)) EXPECT_EQ(line.substr(line.rfind(',') + 1), "0") << line;

  // Same structure, one concept renamed everywhere.
  auto other = testing::slurp(report);
  for (auto pos = other.find("Atelectasis"); pos != std::string::npos; pos = other.find("Atelectasis")) {
    other.replace(pos, 11, "Hernia");
  }
  testing::spit(d / "other.json", other);
  EXPECT_EQ(cli({"compare", "-r", report, "-r", (d / "other.json").string(), "--out", (d / "x").string()}).code, 4);
}

TEST_F(CliTest, AttributeLinearDumpsAreComplete) {
  TempDir out;
  ASSERT_EQ(cli({"dissect", "-a", synth("activations"), "-m", synth("masks"), "--out", (out / "d").string()}).code, 0);
  const auto o = cli({"attribute", "-g", synth("gradients"), "--report", (out / "d" / "report.json").string(),
                      "--steps", "8", "--top", "2", "--input-size", "64", "--out", (out / "a").string()});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto j = read_json(out / "a" / "attributions" / "img00.json");
  EXPECT_EQ(j["completeness_gap"].get<double>(), 0.0);
  // The synthetic model favours the first planted unit.
  EXPECT_EQ(j["ranking"][0].get<int>(), 0);
  EXPECT_NE(j["semantic"]["statement"].get<std::string>().find("detects Atelectasis"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(out / "a" / "attributions" / "img00.unit0.pgm"));
}

TEST_F(CliTest, AttributeQuadraticWithinTolerance) {
  TempDir d;
  ASSERT_EQ(cli({"synth", "--seed", "3", "--images", "2", "--gradient-model", "quadratic", "--out",
                 (d / "s").string()})
                .code,
            0);
  ASSERT_EQ(cli({"attribute", "-g", (d / "s" / "gradients").string(), "--out", (d / "a").string()}).code, 0);
  for (const char* id : {"img0", "img1"}) {
    const auto j = read_json(d / "a" / "attributions" / (std::string(id) + ".json"));
    const double scale = std::abs(j["f_at_input"].get<double>());
    EXPECT_LE(j["completeness_gap"].get<double>(), 1e-6 * std::max(1.0, scale)) << id;
  }
}

TEST_F(CliTest, AttributeReportLayerMismatchFails) {
  TempDir d;
  ASSERT_EQ(cli({"dissect", "-a", synth("activations"), "-m", synth("masks"), "--out", (d / "r").string()}).code, 0);
  auto report = read_json(d / "r" / "report.json");
  report["layer"] = "layer3";
  testing::spit(d / "bad.json", report.dump());
  EXPECT_EQ(cli({"attribute", "-g", synth("gradients"), "--report", (d / "bad.json").string(), "--steps", "8",
                 "--out", (d / "a").string()})
                .code,
            4);
}

TEST_F(CliTest, LossesCheckPrintsValues) {
  TempDir d;
  const nlohmann::json cases = nlohmann::json::array(
      {{{"op", "weighted_bce"},
        {"inputs", {{"labels", {{1, 0}}}, {"probabilities", {{0.5, 0.5}}}, {"beta", 1.0}}},
        {"expected", 1.3862943611198906}},
       {{"op", "beta"}, {"inputs", {{"labels", {{1, 0, 0, 0}}}, {"probabilities", {{0.5, 0.5, 0.5, 0.5}}}}},
        {"expected", 3.0}},
       {{"op", "weighted_mse"}, {"inputs", {{"predictions", {2.0, 6.0}}, {"labels", {1, 3}}, {"weights", {1.0, 1.0}}}},
        {"expected", 5.0}}});
  testing::spit(d / "cases.json", cases.dump());
  const auto o = cli({"losses-check", "--case", (d / "cases.json").string()});
  EXPECT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(std::count(o.out.begin(), o.out.end(), '\n'), 3);
  EXPECT_EQ(o.out.find("\"pass\":false"), std::string::npos) << o.out;

  const nlohmann::json wrong = {{"op", "weighted_mse"},
                                {"inputs", {{"predictions", {2.0}}, {"labels", {1}}, {"weights", {1.0}}}},
                                {"expected", 2.0}};
  testing::spit(d / "wrong.json", wrong.dump());
  EXPECT_EQ(cli({"losses-check", "--case", (d / "wrong.json").string()}).code, 4);
}

TEST_F(CliTest, SynthSameSeedIsByteIdentical) {
  TempDir a, b;
  ASSERT_EQ(cli({"synth", "--seed", "7", "--images", "5", "--out", a.path().string()}).code, 0);
  ASSERT_EQ(cli({"synth", "--seed", "7", "--images", "5", "--out", b.path().string()}).code, 0);
  auto sa = testing::snapshot(a.path()), sb = testing::snapshot(b.path());
  // run-meta records the output directory, which differs here by design.
  sa.erase("run-meta.json");
  sb.erase("run-meta.json");
  EXPECT_EQ(sa, sb);
}

TEST_F(CliTest, SynthRefusesToOverwrite) {
  TempDir a;
  ASSERT_EQ(cli({"synth", "--images", "2", "--out", a.path().string()}).code, 0);
  EXPECT_EQ(cli({"synth", "--images", "2", "--out", a.path().string()}).code, 4);
}

TEST(CliBinary, ExitCodesFromTheExecutable) {
  const std::string exe = NETDISSECT_CLI_PATH;
  auto status = [](const std::string& cmd) {
    const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  EXPECT_EQ(status(exe + " --version"), 0);
  EXPECT_EQ(status(exe + " thresholds"), 2);
  EXPECT_EQ(status(exe + " thresholds --activations /nonexistent"), 3);
  TempDir d;
  EXPECT_EQ(status(exe + " synth --images 3 --out " + d.path().string()), 0);
  EXPECT_EQ(status("DISSECT_THREADS=3 " + exe + " thresholds -a " + (d / "activations").string() + " --out " +
                   (d / "t").string()),
            0);
  EXPECT_EQ(read_json(d / "t" / "run-meta.json")["config"]["threads"].get<int>(), 3);
}

}  // namespace
}  // namespace netdissect
