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

// Dataset-wide IoU between thresholded unit maps and concept masks, and
// detector labelling on top of it.
//
// For unit k and concept c the table holds
//
//   IoU_{k,c} = sum_x |M_k(x) & L_c(x)| / sum_x |M_k(x) | L_c(x)|
//
// where x ranges over the images whose mask for c is non-empty and
// M_k(x) = upsample(F_k(x)) >= T_k. Both sums are kept as exact integers.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "netdissect/error.hpp"
#include "netdissect/parallel.hpp"
#include "netdissect/resample.hpp"
#include "netdissect/tensor_io.hpp"
#include "netdissect/thresholds.hpp"

namespace netdissect {

inline constexpr double kDefaultDetectorThreshold = 0.04;

/// mask[p] = 1 iff map[p] >= threshold.
inline std::vector<std::uint8_t> binarize(std::span<const float> map, double threshold) {
  if (!std::isfinite(threshold)) fail(ErrorKind::kNumericDegenerate, "non-finite unit threshold");
  std::vector<std::uint8_t> mask(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) mask[i] = static_cast<double>(map[i]) >= threshold;
  return mask;
}

/// Upsamples unit `unit` of `stack` to (rows, cols) and thresholds it.
inline std::vector<std::uint8_t> unit_mask(const ActivationStack& stack, std::size_t unit,
                                           double threshold, std::size_t rows, std::size_t cols) {
  const auto up = upsample_bilinear(stack.tensor.slice(unit), stack.tensor.dim(1),
                                    stack.tensor.dim(2), rows, cols);
  return binarize(up, threshold);
}

struct IoUCell {
  std::uint64_t intersection = 0;
  std::uint64_t union_pixels = 0;
  std::uint64_t images_counted = 0;

  bool present() const { return images_counted > 0; }
  double iou() const {
    return union_pixels == 0 ? 0.0 : static_cast<double>(intersection) / static_cast<double>(union_pixels);
  }
  IoUCell& operator+=(const IoUCell& o) {
    intersection += o.intersection;
    union_pixels += o.union_pixels;
    images_counted += o.images_counted;
    return *this;
  }
  friend bool operator==(const IoUCell&, const IoUCell&) = default;
};

/// Exact (a.i / a.u) <=> (b.i / b.u) by cross-multiplication.
inline std::strong_ordering compare_ratio(const IoUCell& a, const IoUCell& b) {
  const auto lhs = static_cast<unsigned __int128>(a.intersection) * b.union_pixels;
  const auto rhs = static_cast<unsigned __int128>(b.intersection) * a.union_pixels;
  return lhs <=> rhs;
}

struct IoUTable {
  std::string layer;
  std::optional<std::int64_t> epoch;
  std::string threshold_hash;
  std::vector<std::size_t> units;
  std::vector<std::string> concepts;
  std::vector<IoUCell> cells;  // row-major (units.size() x concepts.size())

  IoUTable() = default;
  IoUTable(std::vector<std::size_t> unit_ids, std::vector<std::string> concept_names)
      : units(std::move(unit_ids)), concepts(std::move(concept_names)),
        cells(units.size() * concepts.size()) {}

  IoUCell& at(std::size_t row, std::size_t col) { return cells[row * concepts.size() + col]; }
  const IoUCell& at(std::size_t row, std::size_t col) const {
    return cells[row * concepts.size() + col];
  }

  void merge(const IoUTable& other) {
    if (other.units != units || other.concepts != concepts) {
      fail(ErrorKind::kConsistency, "cannot merge IoU tables over different units/concepts");
    }
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] += other.cells[i];
  }

  friend bool operator==(const IoUTable&, const IoUTable&) = default;
};

/// Adds one image's counts. `unit_masks[row]` must be (rows x cols) and the
/// concept masks the image's (C, rows, cols) stack.
inline void accumulate_image(IoUTable& table, std::span<const std::vector<std::uint8_t>> unit_masks,
                             const ConceptMaskStack& masks) {
  const std::size_t concepts = masks.tensor.dim(0);
  const std::size_t pixels = masks.tensor.dim(1) * masks.tensor.dim(2);
  std::vector<std::uint64_t> concept_area(concepts, 0);
  for (std::size_t c = 0; c < concepts; ++c) {
    for (auto v : masks.tensor.slice(c)) concept_area[c] += v;
  }
  for (std::size_t row = 0; row < unit_masks.size(); ++row) {
    const auto& m = unit_masks[row];
    if (m.size() != pixels) {
      fail(ErrorKind::kConsistency, "unit mask size does not match concept masks for '" + masks.image_id + "'");
    }
    std::uint64_t unit_area = 0;
    for (auto v : m) unit_area += v;
    for (std::size_t c = 0; c < concepts; ++c) {
      if (concept_area[c] == 0) continue;
      const auto label = masks.tensor.slice(c);
      std::uint64_t inter = 0;
      for (std::size_t p = 0; p < pixels; ++p) inter += m[p] & label[p];
      auto& cell = table.at(row, c);
      cell.intersection += inter;
      cell.union_pixels += unit_area + concept_area[c] - inter;
      cell.images_counted += 1;
    }
  }
}

/// Dataset-wide IoU for every (unit, concept) pair. `units` selects a subset
/// of unit indices; nullopt means all units. The result is identical for any
/// thread count.
inline IoUTable accumulate_iou(const Manifest& activations, const Manifest& masks,
                               const ThresholdTable& thresholds,
                               std::optional<std::vector<std::size_t>> units = std::nullopt,
                               unsigned threads = 1) {
  if (activations.kind != ArchiveKind::kActivations) {
    fail(ErrorKind::kConsistency, activations.root.string() + " is not an activation archive");
  }
  if (masks.kind != ArchiveKind::kMasks) {
    fail(ErrorKind::kConsistency, masks.root.string() + " is not a mask archive");
  }
  if (activations.records.empty()) fail(ErrorKind::kConsistency, "empty activation archive");
  if (thresholds.units() != activations.units) {
    fail(ErrorKind::kConsistency, "threshold table has " + std::to_string(thresholds.units()) +
                                      " units, archive has " + std::to_string(activations.units));
  }
  if (thresholds.layer != activations.layer) {
    fail(ErrorKind::kConsistency, "threshold table is for layer '" + thresholds.layer +
                                      "', archive is '" + activations.layer + "'");
  }
  if (activations.records.size() != masks.records.size()) {
    fail(ErrorKind::kConsistency, "image_id mismatch: " + std::to_string(activations.records.size()) +
                                      " activation records vs " + std::to_string(masks.records.size()) +
                                      " mask records");
  }
  for (std::size_t i = 0; i < activations.records.size(); ++i) {
    if (activations.records[i].image_id != masks.records[i].image_id) {
      fail(ErrorKind::kConsistency, "image_id mismatch between archives: '" +
                                        activations.records[i].image_id + "' vs '" +
                                        masks.records[i].image_id + "'");
    }
  }

  std::vector<std::size_t> selected;
  if (units) {
    selected = *units;
    if (selected.empty()) fail(ErrorKind::kUsage, "no units selected");
    std::sort(selected.begin(), selected.end());
    selected.erase(std::unique(selected.begin(), selected.end()), selected.end());
    if (selected.back() >= activations.units) {
      fail(ErrorKind::kUsage, "unit " + std::to_string(selected.back()) + " out of range (layer has " +
                                  std::to_string(activations.units) + " units)");
    }
  } else {
    selected.resize(activations.units);
    for (std::size_t u = 0; u < selected.size(); ++u) selected[u] = u;
  }

  const IoUTable empty(selected, masks.concepts);
  auto table = parallel_reduce<IoUTable>(
      activations.records.size(), threads, [&] { return empty; },
      [&](IoUTable& acc, std::size_t i) {
        const auto stack = read_record_as<ActivationStack>(activations, activations.records[i]);
        const auto labels = read_record_as<ConceptMaskStack>(masks, masks.records[i]);
        if (stack.tensor.dim(0) != activations.units) {
          fail(ErrorKind::kConsistency, "unit-count mismatch for '" + stack.image_id + "'");
        }
        const std::size_t rows = labels.tensor.dim(1);
        const std::size_t cols = labels.tensor.dim(2);
        std::vector<std::vector<std::uint8_t>> unit_masks;
        unit_masks.reserve(selected.size());
        for (std::size_t u : selected) {
          unit_masks.push_back(unit_mask(stack, u, thresholds.thresholds[u], rows, cols));
        }
        accumulate_image(acc, unit_masks, labels);
      },
      [](IoUTable& a, IoUTable&& b) { a.merge(b); });
  table.layer = activations.layer;
  table.epoch = activations.epoch;
  table.threshold_hash = thresholds.hash();
  return table;
}

// ---------------------------------------------------------------------------
// Detector labelling

struct UnitLabel {
  std::size_t unit = 0;
  std::optional<std::string> best_concept;
  IoUCell best;
  double best_iou = 0.0;
  bool is_detector = false;
  std::vector<std::string> tied_with;  // other concepts with exactly best_iou

  bool tie() const { return !tied_with.empty(); }
  friend bool operator==(const UnitLabel&, const UnitLabel&) = default;
};

struct DetectorReport {
  std::string layer;
  std::optional<std::int64_t> epoch;
  std::string model_tag;
  std::string threshold_hash;
  double detector_threshold = kDefaultDetectorThreshold;
  std::vector<std::string> concepts;
  std::vector<UnitLabel> units;
  std::vector<std::uint64_t> detector_counts;  // aligned with `concepts`

  std::uint64_t total_detectors() const {
    std::uint64_t n = 0;
    for (auto c : detector_counts) n += c;
    return n;
  }

  const UnitLabel* find_unit(std::size_t unit) const {
    for (const auto& u : units) {
      if (u.unit == unit) return &u;
    }
    return nullptr;
  }

  friend bool operator==(const DetectorReport&, const DetectorReport&) = default;
};

/// Assigns each unit its argmax concept (ties to the lexicographically
/// smallest name) and flags units whose best IoU reaches the cutoff.
inline DetectorReport label_detectors(const IoUTable& table,
                                      double detector_threshold = kDefaultDetectorThreshold) {
  if (table.units.empty()) fail(ErrorKind::kConsistency, "empty IoU table");
  DetectorReport report;
  report.layer = table.layer;
  report.epoch = table.epoch;
  report.threshold_hash = table.threshold_hash;
  report.detector_threshold = detector_threshold;
  report.concepts = table.concepts;
  report.detector_counts.assign(table.concepts.size(), 0);

  for (std::size_t row = 0; row < table.units.size(); ++row) {
    UnitLabel label;
    label.unit = table.units[row];
    std::optional<std::size_t> best;
    for (std::size_t c = 0; c < table.concepts.size(); ++c) {
      const auto& cell = table.at(row, c);
      if (!cell.present()) continue;
      if (!best) {
        best = c;
        continue;
      }
      const auto order = compare_ratio(cell, table.at(row, *best));
      if (order > 0 || (order == 0 && table.concepts[c] < table.concepts[*best])) best = c;
    }
    if (best) {
      label.best_concept = table.concepts[*best];
      label.best = table.at(row, *best);
      label.best_iou = label.best.iou();
      for (std::size_t c = 0; c < table.concepts.size(); ++c) {
        const auto& cell = table.at(row, c);
        if (c != *best && cell.present() && compare_ratio(cell, label.best) == 0) {
          label.tied_with.push_back(table.concepts[c]);
        }
      }
      std::sort(label.tied_with.begin(), label.tied_with.end());
      label.is_detector = label.best_iou >= detector_threshold;
      if (label.is_detector) ++report.detector_counts[*best];
    }
    report.units.push_back(std::move(label));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Comparison across models or epochs

struct EvolutionTable {
  std::vector<std::string> labels;    // one per report
  std::vector<std::string> concepts;
  std::vector<std::vector<std::uint64_t>> counts;  // [concept][report]
  std::vector<std::uint64_t> totals;               // per report

  std::int64_t delta(std::size_t row_index) const {
    const auto& row = counts.at(row_index);
    return static_cast<std::int64_t>(row.back()) - static_cast<std::int64_t>(row.front());
  }
  std::int64_t total_delta() const {
    return static_cast<std::int64_t>(totals.back()) - static_cast<std::int64_t>(totals.front());
  }
};

inline std::string report_label(const DetectorReport& r, std::size_t index) {
  if (!r.model_tag.empty()) return r.model_tag;
  if (r.epoch) return "epoch" + std::to_string(*r.epoch);
  return "report" + std::to_string(index);
}

inline EvolutionTable compare_reports(const std::vector<DetectorReport>& reports) {
  if (reports.empty()) fail(ErrorKind::kUsage, "no reports to compare");
  EvolutionTable t;
  t.concepts = reports.front().concepts;
  const std::set<std::string> vocab(t.concepts.begin(), t.concepts.end());
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const std::set<std::string> other(reports[r].concepts.begin(), reports[r].concepts.end());
    if (other != vocab) {
      fail(ErrorKind::kConsistency, "concept vocabulary mismatch between report 0 and report " + std::to_string(r));
    }
    t.labels.push_back(report_label(reports[r], r));
    t.totals.push_back(reports[r].total_detectors());
  }
  t.counts.assign(t.concepts.size(), {});
  for (std::size_t c = 0; c < t.concepts.size(); ++c) {
    for (const auto& rep : reports) {
      const auto it = std::find(rep.concepts.begin(), rep.concepts.end(), t.concepts[c]);
      t.counts[c].push_back(rep.detector_counts[static_cast<std::size_t>(it - rep.concepts.begin())]);
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Serialisation

inline nlohmann::ordered_json to_json(const DetectorReport& r) {
  nlohmann::ordered_json j;
  j["layer"] = r.layer;
  j["epoch"] = r.epoch ? nlohmann::ordered_json(*r.epoch) : nlohmann::ordered_json(nullptr);
  j["model_tag"] = r.model_tag;
  j["threshold_hash"] = r.threshold_hash;
  j["detector_threshold"] = r.detector_threshold;
  j["concepts"] = r.concepts;
  nlohmann::ordered_json counts = nlohmann::ordered_json::object();
  for (std::size_t c = 0; c < r.concepts.size(); ++c) counts[r.concepts[c]] = r.detector_counts[c];
  j["detector_counts"] = std::move(counts);
  j["total_detectors"] = r.total_detectors();
  auto units = nlohmann::ordered_json::array();
  for (const auto& u : r.units) {
    nlohmann::ordered_json ju;
    ju["unit"] = u.unit;
    ju["best_concept"] = u.best_concept ? nlohmann::ordered_json(*u.best_concept) : nlohmann::ordered_json(nullptr);
    ju["best_iou"] = u.best_concept ? nlohmann::ordered_json(u.best_iou) : nlohmann::ordered_json(nullptr);
    ju["intersection"] = u.best.intersection;
    ju["union"] = u.best.union_pixels;
    ju["images_counted"] = u.best.images_counted;
    ju["is_detector"] = u.is_detector;
    ju["tie"] = u.tie();
    ju["tied_with"] = u.tied_with;
    units.push_back(std::move(ju));
  }
  j["units"] = std::move(units);
  return j;
}

inline DetectorReport detector_report_from_json(const nlohmann::json& j) {
  DetectorReport r;
  try {
    r.layer = j.at("layer").get<std::string>();
    if (!j.at("epoch").is_null()) r.epoch = j.at("epoch").get<std::int64_t>();
    r.model_tag = j.value("model_tag", std::string{});
    r.threshold_hash = j.value("threshold_hash", std::string{});
    r.detector_threshold = j.at("detector_threshold").get<double>();
    r.concepts = j.at("concepts").get<std::vector<std::string>>();
    for (const auto& c : r.concepts) r.detector_counts.push_back(j.at("detector_counts").at(c).get<std::uint64_t>());
    for (const auto& ju : j.at("units")) {
      UnitLabel u;
      u.unit = ju.at("unit").get<std::size_t>();
      if (!ju.at("best_concept").is_null()) {
        u.best_concept = ju.at("best_concept").get<std::string>();
        u.best_iou = ju.at("best_iou").get<double>();
      }
      u.best.intersection = ju.at("intersection").get<std::uint64_t>();
      u.best.union_pixels = ju.at("union").get<std::uint64_t>();
      u.best.images_counted = ju.at("images_counted").get<std::uint64_t>();
      u.is_detector = ju.at("is_detector").get<bool>();
      u.tied_with = ju.at("tied_with").get<std::vector<std::string>>();
      r.units.push_back(std::move(u));
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kInputFormat, std::string("malformed report.json: ") + ex.what());
  }
  return r;
}

namespace detail {

inline std::string format_double(double v, const char* fmt = "%.12g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/// unit,concept,intersection,union,iou,images_counted. Pairs whose concept
/// never occurs are omitted.
inline std::string iou_csv(const IoUTable& t) {
  std::string out = "unit,concept,intersection,union,iou,images_counted\n";
  for (std::size_t row = 0; row < t.units.size(); ++row) {
    for (std::size_t c = 0; c < t.concepts.size(); ++c) {
      const auto& cell = t.at(row, c);
      if (!cell.present()) continue;
      out += std::to_string(t.units[row]) + "," + detail::csv_field(t.concepts[c]) + "," +
             std::to_string(cell.intersection) + "," + std::to_string(cell.union_pixels) + "," +
             detail::format_double(cell.iou()) + "," + std::to_string(cell.images_counted) + "\n";
    }
  }
  return out;
}

inline std::string evolution_csv(const EvolutionTable& t) {
  std::string out = "concept";
  for (const auto& l : t.labels) out += "," + detail::csv_field(l);
  out += ",delta\n";
  auto row = [&out](const std::string& name, const std::vector<std::uint64_t>& values, std::int64_t delta) {
    out += detail::csv_field(name);
    for (auto v : values) out += "," + std::to_string(v);
    out += "," + std::to_string(delta) + "\n";
  };
  for (std::size_t c = 0; c < t.concepts.size(); ++c) row(t.concepts[c], t.counts[c], t.delta(c));
  row("total", t.totals, t.total_delta());
  return out;
}

/// Grouped bar chart: concepts along x, detector counts along y, one bar
/// per report in each group.
inline std::string detector_svg(const std::vector<DetectorReport>& reports) {
  const auto table = compare_reports(reports);
  static constexpr const char* kPalette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2",
                                             "#59a14f", "#edc948", "#b07aa1", "#ff9da7"};
  const std::size_t groups = table.concepts.size();
  const std::size_t series = table.labels.size();
  const double bar = 14.0;
  const double group_w = bar * static_cast<double>(series) + 16.0;
  const double left = 50.0, top = 30.0, plot_h = 200.0, bottom = 110.0;
  const double width = left + group_w * static_cast<double>(std::max<std::size_t>(groups, 1)) + 20.0 + 140.0;
  const double height = top + plot_h + bottom;
  std::uint64_t max_count = 1;
  for (const auto& row : table.counts) {
    for (auto v : row) max_count = std::max(max_count, v);
  }
  auto fmt = [](double v) { return detail::format_double(v, "%.2f"); };

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width) + "\" height=\"" + fmt(height) +
       "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<text x=\"" + fmt(left) + "\" y=\"18\" font-size=\"13\">Concept detectors per concept</text>\n";
  s += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(top) + "\" x2=\"" + fmt(left) + "\" y2=\"" +
       fmt(top + plot_h) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(top + plot_h) + "\" x2=\"" +
       fmt(left + group_w * static_cast<double>(groups)) + "\" y2=\"" + fmt(top + plot_h) +
       "\" stroke=\"black\"/>\n";
  // Integer ticks, at most five of them.
  const std::uint64_t step = (max_count + 3) / 4;
  for (std::uint64_t value = 0; value <= max_count; value += step) {
    const double y = top + plot_h - plot_h * static_cast<double>(value) / static_cast<double>(max_count);
    s += "<text x=\"" + fmt(left - 6) + "\" y=\"" + fmt(y + 4) + "\" text-anchor=\"end\">" +
         std::to_string(value) + "</text>\n";
  }
  s += "<text transform=\"translate(14," + fmt(top + plot_h / 2) +
       ") rotate(-90)\" text-anchor=\"middle\">detectors</text>\n";
  for (std::size_t c = 0; c < groups; ++c) {
    const double gx = left + group_w * static_cast<double>(c) + 8.0;
    for (std::size_t r = 0; r < series; ++r) {
      const double h = plot_h * static_cast<double>(table.counts[c][r]) / static_cast<double>(max_count);
      s += "<rect x=\"" + fmt(gx + bar * static_cast<double>(r)) + "\" y=\"" + fmt(top + plot_h - h) +
           "\" width=\"" + fmt(bar - 2) + "\" height=\"" + fmt(h) + "\" fill=\"" + kPalette[r % 8] +
           "\"><title>" + detail::xml_escape(table.labels[r] + " / " + table.concepts[c]) + ": " +
           std::to_string(table.counts[c][r]) + "</title></rect>\n";
    }
    const double cx = gx + bar * static_cast<double>(series) / 2.0;
    s += "<text transform=\"translate(" + fmt(cx) + "," + fmt(top + plot_h + 10) +
         ") rotate(45)\">" + detail::xml_escape(table.concepts[c]) + "</text>\n";
  }
  const double lx = left + group_w * static_cast<double>(groups) + 30.0;
  for (std::size_t r = 0; r < series; ++r) {
    const double ly = top + 16.0 * static_cast<double>(r);
    s += "<rect x=\"" + fmt(lx) + "\" y=\"" + fmt(ly) + "\" width=\"10\" height=\"10\" fill=\"" +
         kPalette[r % 8] + "\"/>\n";
    s += "<text x=\"" + fmt(lx + 14) + "\" y=\"" + fmt(ly + 9) + "\">" +
         detail::xml_escape(table.labels[r]) + " (" + std::to_string(table.totals[r]) + ")</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace netdissect
