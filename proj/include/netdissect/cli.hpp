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

// Command-line front end. Every subcommand writes its outputs plus a
// run-meta.json with the resolved configuration and input hashes.
//
// Exit codes: 0 success, 2 usage, 3 input format, 4 consistency,
// 5 numeric degenerate.

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "netdissect/attribution.hpp"
#include "netdissect/dissect.hpp"
#include "netdissect/error.hpp"
#include "netdissect/hash.hpp"
#include "netdissect/losses.hpp"
#include "netdissect/parallel.hpp"
#include "netdissect/synth.hpp"
#include "netdissect/tensor_io.hpp"
#include "netdissect/thresholds.hpp"

namespace netdissect::cli {

inline constexpr const char* kVersion = "0.1.0";

enum class LogLevel { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

struct RunConfig {
  std::string subcommand;
  std::string activations;
  std::string masks;
  std::string gradients;
  std::string thresholds_file;
  std::vector<std::string> reports;
  std::string report_file;
  std::string case_file;
  std::string spec_file;
  double quantile = kDefaultQuantile;
  std::string threshold_mode = "exact";
  std::uint64_t sample_size = 1'000'000;
  double detector_threshold = kDefaultDetectorThreshold;
  std::size_t ig_steps = kDefaultIgSteps;
  std::string quadrature = "trapezoid";
  std::size_t top_n = 3;
  std::size_t input_size = 224;
  std::optional<std::string> units;
  std::string tag;
  std::uint64_t seed = 0;
  std::size_t synth_units = 16;
  std::size_t synth_planted = 4;
  double synth_sigma = 0.3;
  std::size_t synth_images = 50;
  std::string gradient_model;
  unsigned threads = 0;
  std::string out_dir = ".";
  std::string log_level = "warn";
};

class Logger {
 public:
  Logger(std::ostream& err, LogLevel level) : err_(err), level_(level) {}
  void warn(const std::string& m) const { emit(LogLevel::kWarn, "warning", m); }
  void info(const std::string& m) const { emit(LogLevel::kInfo, "info", m); }
  void debug(const std::string& m) const { emit(LogLevel::kDebug, "debug", m); }
  void error(const std::string& m) const { emit(LogLevel::kError, "error", m); }

 private:
  void emit(LogLevel l, const char* tag, const std::string& m) const {
    if (l <= level_) err_ << "netdissect: " << tag << ": " << m << "\n";
  }
  std::ostream& err_;
  LogLevel level_;
};

inline LogLevel parse_log_level(const std::string& s) {
  if (s == "error") return LogLevel::kError;
  if (s == "warn") return LogLevel::kWarn;
  if (s == "info") return LogLevel::kInfo;
  if (s == "debug") return LogLevel::kDebug;
  fail(ErrorKind::kUsage, "unknown log level '" + s + "'");
}

namespace detail {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  netdissect::detail::write_text_atomically(path, text);
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kInputFormat, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kInputFormat, path.string() + ": " + ex.what());
  }
}

inline Manifest open_archive(const std::string& path, const char* what) {
  if (path.empty()) fail(ErrorKind::kUsage, std::string("missing ") + what + " archive path");
  if (!fs::exists(path)) fail(ErrorKind::kInputFormat, std::string(what) + " archive not found: " + path);
  return scan_archive(path);
}

/// Order-independent content hash of an archive: manifest plus every record
/// file, in manifest order.
inline std::string hash_archive(const Manifest& m) {
  Fnv1a64 h;
  h.update(hash_file(m.root / kManifestName));
  for (const auto& e : m.records) {
    h.update(e.file);
    h.update(hash_file(m.path_of(e)));
  }
  return h.hex();
}

inline std::vector<std::size_t> parse_units(const std::string& text) {
  std::vector<std::size_t> units;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (...) {
      fail(ErrorKind::kUsage, "bad unit index '" + item + "'");
    }
    if (used != item.size()) fail(ErrorKind::kUsage, "bad unit index '" + item + "'");
    units.push_back(static_cast<std::size_t>(v));
  }
  return units;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::ordered_json config_json(const RunConfig& c, unsigned threads) {
  nlohmann::ordered_json j;
  j["subcommand"] = c.subcommand;
  j["activations"] = c.activations;
  j["masks"] = c.masks;
  j["gradients"] = c.gradients;
  j["thresholds"] = c.thresholds_file;
  j["reports"] = c.reports;
  j["report"] = c.report_file;
  j["case"] = c.case_file;
  j["spec"] = c.spec_file;
  j["quantile"] = c.quantile;
  j["threshold_mode"] = c.threshold_mode;
  j["sample_size"] = c.sample_size;
  j["detector_threshold"] = c.detector_threshold;
  j["ig_steps"] = c.ig_steps;
  j["quadrature"] = c.quadrature;
  j["top_n"] = c.top_n;
  j["input_size"] = c.input_size;
  j["units"] = c.units ? nlohmann::ordered_json(*c.units) : nlohmann::ordered_json(nullptr);
  j["tag"] = c.tag;
  j["seed"] = c.seed;
  j["synth_units"] = c.synth_units;
  j["synth_planted"] = c.synth_planted;
  j["synth_sigma"] = c.synth_sigma;
  j["synth_images"] = c.synth_images;
  j["gradient_model"] = c.gradient_model;
  j["threads"] = threads;
  j["out"] = c.out_dir;
  j["log_level"] = c.log_level;
  return j;
}

inline void write_run_meta(const RunConfig& c, unsigned threads,
                           const std::vector<std::pair<std::string, std::string>>& inputs) {
  nlohmann::ordered_json j;
  j["tool"] = "netdissect";
  j["version"] = kVersion;
  j["started_at"] = utc_timestamp();
  j["config"] = config_json(c, threads);
  nlohmann::ordered_json hashes = nlohmann::ordered_json::object();
  for (const auto& [path, hash] : inputs) hashes[path] = hash;
  j["input_hashes"] = std::move(hashes);
  write_text(fs::path(c.out_dir) / "run-meta.json", j.dump(2) + "\n");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands

inline ThresholdTable thresholds_for(const RunConfig& c, const Manifest& acts, unsigned threads) {
  if (c.threshold_mode == "exact") return compute_thresholds(acts, c.quantile, threads);
  if (c.threshold_mode == "sampled") {
    return compute_thresholds_sampled(acts, c.quantile, SamplingOptions{c.seed, c.sample_size});
  }
  fail(ErrorKind::kUsage, "unknown threshold mode '" + c.threshold_mode + "' (expected exact or sampled)");
}

inline int cmd_thresholds(const RunConfig& c, const Logger& log) {
  const unsigned threads = resolve_threads(c.threads);
  check_quantile(c.quantile);
  const auto acts = detail::open_archive(c.activations, "activation");
  log.info("thresholding " + std::to_string(acts.units) + " units over " + std::to_string(acts.records.size()) + " images");
  const auto table = thresholds_for(c, acts, threads);
  detail::write_text(detail::fs::path(c.out_dir) / "thresholds.json", to_json(table).dump(2) + "\n");
  detail::write_run_meta(c, threads, {{c.activations, detail::hash_archive(acts)}});
  return 0;
}

inline int cmd_dissect(const RunConfig& c, const Logger& log) {
  const unsigned threads = resolve_threads(c.threads);
  std::optional<std::vector<std::size_t>> units;
  if (c.units) {
    units = detail::parse_units(*c.units);
    if (units->empty()) fail(ErrorKind::kUsage, "no units selected");
  }
  const auto acts = detail::open_archive(c.activations, "activation");
  const auto masks = detail::open_archive(c.masks, "mask");
  std::vector<std::pair<std::string, std::string>> inputs = {
      {c.activations, detail::hash_archive(acts)}, {c.masks, detail::hash_archive(masks)}};

  ThresholdTable table;
  if (!c.thresholds_file.empty()) {
    table = threshold_table_from_json(detail::read_json(c.thresholds_file));
    inputs.emplace_back(c.thresholds_file, hash_file(c.thresholds_file));
  } else {
    check_quantile(c.quantile);
    table = thresholds_for(c, acts, threads);
    detail::write_text(detail::fs::path(c.out_dir) / "thresholds.json", to_json(table).dump(2) + "\n");
  }

  const auto iou = accumulate_iou(acts, masks, table, units, threads);
  auto report = label_detectors(iou, c.detector_threshold);
  report.model_tag = c.tag;
  for (const auto& u : report.units) {
    if (u.tie() && u.is_detector) {
      log.info("unit " + std::to_string(u.unit) + " tied between " + *u.best_concept + " and " +
               std::to_string(u.tied_with.size()) + " other concept(s)");
    }
  }
  const detail::fs::path out(c.out_dir);
  detail::write_text(out / "iou.csv", iou_csv(iou));
  detail::write_text(out / "report.json", to_json(report).dump(2) + "\n");
  detail::write_text(out / "report.svg", detector_svg({report}));
  detail::write_run_meta(c, threads, inputs);
  log.info(std::to_string(report.total_detectors()) + " concept detectors");
  return 0;
}

inline int cmd_compare(const RunConfig& c, const Logger&) {
  if (c.reports.empty()) fail(ErrorKind::kUsage, "compare needs at least one --report");
  std::vector<DetectorReport> reports;
  std::vector<std::pair<std::string, std::string>> inputs;
  for (const auto& path : c.reports) {
    reports.push_back(detector_report_from_json(detail::read_json(path)));
    inputs.emplace_back(path, hash_file(path));
  }
  const auto table = compare_reports(reports);
  const detail::fs::path out(c.out_dir);
  detail::write_text(out / "evolution.csv", evolution_csv(table));
  detail::write_text(out / "evolution.svg", detector_svg(reports));
  detail::write_run_meta(c, resolve_threads(c.threads), inputs);
  return 0;
}

inline int cmd_attribute(const RunConfig& c, const Logger& log) {
  const unsigned threads = resolve_threads(c.threads);
  const auto rule = parse_quadrature(c.quadrature);
  if (c.input_size == 0) fail(ErrorKind::kUsage, "input size must be positive");
  const auto grads = detail::open_archive(c.gradients, "gradient");
  if (grads.kind != ArchiveKind::kGradients) {
    fail(ErrorKind::kConsistency, c.gradients + " is not a gradient archive");
  }
  std::vector<std::pair<std::string, std::string>> inputs = {{c.gradients, detail::hash_archive(grads)}};
  DetectorReport report;
  if (!c.report_file.empty()) {
    report = detector_report_from_json(detail::read_json(c.report_file));
    inputs.emplace_back(c.report_file, hash_file(c.report_file));
    if (report.layer != grads.layer) {
      fail(ErrorKind::kConsistency, "report layer '" + report.layer + "' does not match gradient layer '" +
                                        grads.layer + "'");
    }
  }
  const detail::fs::path dir = detail::fs::path(c.out_dir) / "attributions";
  detail::fs::create_directories(dir);

  std::vector<std::string> warnings(grads.records.size());
  parallel_reduce<int>(
      grads.records.size(), threads, [] { return 0; },
      [&](int&, std::size_t i) {
        const auto& entry = grads.records[i];
        const auto dump = read_record_as<GradientDump>(grads, entry);
        if (c.ig_steps != 0 && dump.alphas.size() != c.ig_steps) {
          warnings[i] += "'" + entry.image_id + "': dump has " + std::to_string(dump.alphas.size()) +
                         " alpha steps, expected " + std::to_string(c.ig_steps) + "\n";
        }
        std::vector<NeuronContributionMap> maps;
        const auto result = attribute(dump, rule, &maps);
        const auto semantics = semantic_join(result, report, c.top_n);
        const auto stem = netdissect::detail::file_stem_for(entry.image_id);
        detail::write_text(dir / (stem + ".json"),
                           to_json(result, rule, dump.alphas.size(), &semantics).dump(2) + "\n");
        for (const auto& top : semantics.top) {
          const auto overlay = render_overlay(maps[top.unit], c.input_size, c.input_size);
          if (!overlay.warning.empty()) warnings[i] += "'" + entry.image_id + "' " + overlay.warning + "\n";
          detail::write_text(dir / (stem + ".unit" + std::to_string(top.unit) + ".pgm"), overlay_pgm(overlay));
        }
      },
      [](int&, int&&) {});
  for (const auto& w : warnings) {
    std::stringstream ss(w);
    std::string line;
    while (std::getline(ss, line)) log.warn(line);
  }
  detail::write_run_meta(c, threads, inputs);
  return 0;
}

/// Analytic models for synthetic gradient dumps over an activation stack.
/// linear: f(a) = sum w_i a_i. quadratic: f(a) = (sum w_i a_i)^2.
inline GradientDump analytic_gradient_dump(const ActivationStack& stack, const std::vector<float>& weights,
                                           const std::string& model, std::size_t steps) {
  if (model != "linear" && model != "quadratic") {
    fail(ErrorKind::kUsage, "unknown gradient model '" + model + "' (expected linear or quadratic)");
  }
  GradientDump d;
  d.image_id = stack.image_id;
  d.layer = stack.layer;
  d.target = model;
  d.alphas = uniform_alphas(steps);
  d.activations = stack.tensor;
  const std::size_t n = stack.tensor.size();
  Shape gshape = {steps};
  gshape.insert(gshape.end(), stack.tensor.shape().begin(), stack.tensor.shape().end());
  d.gradients = Tensor<float>(gshape, 0.0f);
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) dot += static_cast<double>(weights[i]) * stack.tensor[i];
  for (std::size_t j = 0; j < steps; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      d.gradients[j * n + i] = model == "linear" ? weights[i]
                                                 : static_cast<float>(2.0 * d.alphas[j] * dot * weights[i]);
    }
  }
  d.f_at_input = model == "linear" ? dot : dot * dot;
  d.f_at_baseline = 0.0;
  return d;
}

inline int cmd_synth(const RunConfig& c, const Logger& log) {
  SynthSpec spec = c.spec_file.empty()
                       ? SynthSpec::standard(c.synth_units, c.synth_planted, c.synth_sigma)
                       : synth_spec_from_json(detail::read_json(c.spec_file));
  if (c.spec_file.empty()) spec.images = c.synth_images;
  const auto synth = synth_planted_archive(spec, c.seed);
  const detail::fs::path out(c.out_dir);
  for (const char* sub : {"activations", "masks", "gradients"}) {
    if (detail::fs::exists(out / sub / kManifestName)) {
      fail(ErrorKind::kConsistency, (out / sub).string() + " already holds an archive");
    }
  }
  write_synth_archive(synth, out / "activations", out / "masks");
  detail::write_text(out / "ground_truth.json", ground_truth_json(synth).dump(2) + "\n");

  if (!c.gradient_model.empty()) {
    // Unit weights favour the first planted unit so attribution has a clear
    // winner; per-neuron jitter is seeded.
    const auto& first = synth.activations.front().tensor;
    const std::size_t per_unit = first.dim(1) * first.dim(2);
    std::optional<std::size_t> favoured;
    for (std::size_t u = 0; u < synth.ground_truth.size() && !favoured; ++u) {
      if (synth.ground_truth[u]) favoured = u;
    }
    netdissect::detail::SplitMix64 rng{c.seed ^ 0x5bd1e995ULL};
    std::vector<float> weights(first.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const std::size_t unit = i / per_unit;
      const double base = (favoured && unit == *favoured) ? 1.0 : 0.125;
      const double jitter = (static_cast<double>(rng.below(17)) - 8.0) / 256.0;
      weights[i] = static_cast<float>(base + jitter);
    }
    ArchiveWriter writer(out / "gradients");
    for (const auto& stack : synth.activations) {
      writer.write(analytic_gradient_dump(stack, weights, c.gradient_model, c.ig_steps));
    }
  }
  detail::write_run_meta(c, resolve_threads(c.threads), {});
  log.info("wrote " + std::to_string(spec.images) + " synthetic images to " + c.out_dir);
  return 0;
}

// losses-check ---------------------------------------------------------------

namespace detail {

inline losses::ClassificationBatch classification_batch(const nlohmann::json& in) {
  const auto labels = in.at("labels").get<std::vector<std::vector<int>>>();
  const auto probs = in.at("probabilities").get<std::vector<std::vector<double>>>();
  losses::ClassificationBatch b;
  b.batch = labels.size();
  b.categories = labels.empty() ? 0 : labels.front().size();
  if (probs.size() != labels.size()) fail(ErrorKind::kConsistency, "labels and probabilities differ in batch size");
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n].size() != b.categories || probs[n].size() != b.categories) {
      fail(ErrorKind::kConsistency, "ragged classification batch");
    }
    for (std::size_t c = 0; c < b.categories; ++c) {
      if (labels[n][c] != 0 && labels[n][c] != 1) fail(ErrorKind::kConsistency, "labels must be 0 or 1");
      b.labels.push_back(static_cast<std::uint8_t>(labels[n][c]));
      b.probabilities.push_back(probs[n][c]);
    }
  }
  return b;
}

inline losses::RegionBatch region_batch(const nlohmann::json& in) {
  const auto logits = in.at("logits").get<std::vector<std::vector<std::vector<double>>>>();
  const auto labels = in.at("labels").get<std::vector<std::vector<int>>>();
  losses::RegionBatch b;
  b.batch = logits.size();
  if (labels.size() != logits.size()) fail(ErrorKind::kConsistency, "logits and labels differ in batch size");
  for (std::size_t n = 0; n < logits.size(); ++n) {
    if (logits[n].size() != losses::kRegions || labels[n].size() != losses::kRegions) {
      fail(ErrorKind::kConsistency, "region batches need exactly 6 regions");
    }
    for (std::size_t r = 0; r < losses::kRegions; ++r) {
      if (logits[n][r].size() != losses::kSeverityClasses) {
        fail(ErrorKind::kConsistency, "region logits need exactly 4 classes");
      }
      b.logits.insert(b.logits.end(), logits[n][r].begin(), logits[n][r].end());
      b.labels.push_back(labels[n][r]);
    }
  }
  return b;
}

inline nlohmann::ordered_json evaluate_case(const nlohmann::json& kase) {
  const auto op = kase.at("op").get<std::string>();
  const auto& in = kase.at("inputs");
  nlohmann::ordered_json out;
  out["op"] = op;
  double value = 0.0;
  if (op == "weighted_bce") {
    const auto batch = classification_batch(in);
    std::optional<double> beta;
    if (in.contains("beta") && in.at("beta").is_number()) beta = in.at("beta").get<double>();
    const auto loss = losses::weighted_bce(batch, beta);
    value = loss.sum;
    out["value"] = loss.sum;
    out["batch_mean"] = loss.batch_mean;
    out["beta"] = loss.beta;
  } else if (op == "beta") {
    value = losses::beta_from_batch(classification_batch(in));
    out["value"] = value;
  } else if (op == "weighted_mse") {
    losses::RegressionBatch b{in.at("predictions").get<std::vector<double>>(), in.at("labels").get<std::vector<int>>(),
                              in.at("weights").get<std::vector<double>>()};
    value = losses::weighted_mse(b);
    out["value"] = value;
  } else if (op == "scce") {
    value = losses::scce(region_batch(in));
    out["value"] = value;
  } else if (op == "mae_d") {
    value = losses::mae_d(region_batch(in));
    out["value"] = value;
  } else if (op == "inverse_frequency_weights") {
    const auto labels = in.at("labels").get<std::vector<int>>();
    out["value"] = losses::inverse_frequency_weights(labels, in.value("bin_width", 1));
    return out;
  } else {
    fail(ErrorKind::kUsage, "unknown loss op '" + op + "'");
  }
  if (kase.contains("expected")) {
    const double expected = kase.at("expected").get<double>();
    const double tol = kase.value("tolerance", 1e-9);
    out["expected"] = expected;
    out["tolerance"] = tol;
    out["pass"] = std::abs(value - expected) <= tol;
  }
  return out;
}

}  // namespace detail

inline int cmd_losses_check(const RunConfig& c, const Logger&, std::ostream& out) {
  if (c.case_file.empty()) fail(ErrorKind::kUsage, "losses-check needs --case");
  nlohmann::json cases;
  try {
    cases = detail::read_json(c.case_file);
  } catch (const Error&) {
    throw;
  }
  if (!cases.is_array()) cases = nlohmann::json::array({cases});
  bool all_pass = true;
  nlohmann::ordered_json results = nlohmann::ordered_json::array();
  try {
    for (const auto& kase : cases) {
      auto r = detail::evaluate_case(kase);
      if (r.contains("pass") && !r["pass"].get<bool>()) all_pass = false;
      out << r.dump() << "\n";
      results.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kInputFormat, c.case_file + ": " + ex.what());
  }
  if (c.out_dir != ".") {
    detail::write_text(detail::fs::path(c.out_dir) / "losses.json", results.dump(2) + "\n");
    detail::write_run_meta(c, 1, {{c.case_file, hash_file(c.case_file)}});
  }
  return all_pass ? 0 : static_cast<int>(ErrorKind::kConsistency);
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  RunConfig cfg;
  CLI::App app{"netdissect: concept detectors and unit attribution over tensor archives"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  auto common = [&cfg](CLI::App* sub) {
    sub->add_option("--out,-o", cfg.out_dir, "Output directory")->capture_default_str();
    sub->add_option("--threads", cfg.threads, "Worker threads (default: $DISSECT_THREADS or 1)");
    sub->add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
    sub->add_option("--log-level", cfg.log_level, "error|warn|info|debug")->capture_default_str();
  };

  auto* th = app.add_subcommand("thresholds", "Per-unit top-quantile activation thresholds");
  th->add_option("--activations,-a", cfg.activations, "Activation archive")->required();
  th->add_option("--quantile,-q", cfg.quantile, "Fraction of activations above the threshold")->capture_default_str();
  th->add_option("--mode", cfg.threshold_mode, "exact|sampled")->capture_default_str();
  th->add_option("--sample-size", cfg.sample_size, "Per-unit sample size in sampled mode")->capture_default_str();
  common(th);

  auto* ds = app.add_subcommand("dissect", "IoU between unit masks and concept masks, detector labels");
  ds->add_option("--activations,-a", cfg.activations, "Activation archive")->required();
  ds->add_option("--masks,-m", cfg.masks, "Concept mask archive")->required();
  ds->add_option("--thresholds", cfg.thresholds_file, "Precomputed thresholds.json");
  ds->add_option("--quantile,-q", cfg.quantile, "Quantile when computing thresholds")->capture_default_str();
  ds->add_option("--mode", cfg.threshold_mode, "exact|sampled")->capture_default_str();
  ds->add_option("--sample-size", cfg.sample_size, "Per-unit sample size in sampled mode")->capture_default_str();
  ds->add_option("--detector-threshold", cfg.detector_threshold, "Minimum IoU for a detector")->capture_default_str();
  ds->add_option("--units", cfg.units, "Comma-separated unit subset");
  ds->add_option("--tag", cfg.tag, "Model tag used in charts and comparisons");
  common(ds);

  auto* cp = app.add_subcommand("compare", "Detector counts across models or epochs");
  cp->add_option("--report,-r", cfg.reports, "report.json files in order")->required();
  common(cp);

  auto* at = app.add_subcommand("attribute", "Integrated-gradients unit contributions");
  at->add_option("--gradients,-g", cfg.gradients, "Gradient archive")->required();
  at->add_option("--report", cfg.report_file, "report.json for semantic labels");
  at->add_option("--rule", cfg.quadrature, "trapezoid|riemann-left")->capture_default_str();
  at->add_option("--steps", cfg.ig_steps, "Expected alpha steps per dump (0: no check)")->capture_default_str();
  at->add_option("--top", cfg.top_n, "Number of top units to explain and render")->capture_default_str();
  at->add_option("--input-size", cfg.input_size, "Overlay side length in pixels")->capture_default_str();
  common(at);

  auto* sy = app.add_subcommand("synth", "Synthetic archives with planted detectors");
  sy->add_option("--spec", cfg.spec_file, "JSON synth spec (overrides the flags below)");
  sy->add_option("--units", cfg.synth_units, "Units per layer")->capture_default_str();
  sy->add_option("--planted", cfg.synth_planted, "Planted units")->capture_default_str();
  sy->add_option("--sigma", cfg.synth_sigma, "Noise on planted units")->capture_default_str();
  sy->add_option("--images", cfg.synth_images, "Number of images")->capture_default_str();
  sy->add_option("--gradient-model", cfg.gradient_model, "Also write gradient dumps: linear|quadratic");
  sy->add_option("--steps", cfg.ig_steps, "Alpha steps for gradient dumps")->capture_default_str();
  common(sy);

  auto* lc = app.add_subcommand("losses-check", "Evaluate reference losses on a JSON case file");
  lc->add_option("--case,-c", cfg.case_file, "Case file")->required();
  common(lc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::kUsage);
  }

  try {
    const Logger log(err, parse_log_level(cfg.log_level));
    if (cfg.synth_images == 0) fail(ErrorKind::kUsage, "--images must be positive");
    for (auto* sub : app.get_subcommands()) cfg.subcommand = sub->get_name();
    if (cfg.subcommand == "thresholds") return cmd_thresholds(cfg, log);
    if (cfg.subcommand == "dissect") return cmd_dissect(cfg, log);
    if (cfg.subcommand == "compare") return cmd_compare(cfg, log);
    if (cfg.subcommand == "attribute") return cmd_attribute(cfg, log);
    if (cfg.subcommand == "synth") return cmd_synth(cfg, log);
    if (cfg.subcommand == "losses-check") return cmd_losses_check(cfg, log, out);
    fail(ErrorKind::kUsage, "unknown subcommand");
  } catch (const Error& e) {
    err << "netdissect: " << to_string(e.kind()) << " error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    err << "netdissect: input-format error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::kInputFormat);
  } catch (const nlohmann::json::exception& e) {
    err << "netdissect: input-format error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::kInputFormat);
  }
}

}  // namespace netdissect::cli
