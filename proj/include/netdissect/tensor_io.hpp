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

// Tensor archive format.
//
// A record file is a sequence of tensor chunks. Each chunk is laid out as
//
//   bytes 0-3   magic "DTAR"
//   bytes 4-5   version, little-endian u16 (= 1)
//   byte  6     dtype code (F32=1, U8=2, F64=3)
//   byte  7     ndim, 1..5
//   ndim x 8    extents, little-endian u64, each >= 1
//   payload     row-major, little-endian
//
// Activation and mask records hold one chunk. Gradient dumps hold four:
// activations (K,h,w) F32, gradients (S,K,h,w) F32, alphas (S) F64 and the
// endpoints [f(a), f(0)] F64. Per-record metadata lives in manifest.json at
// the archive root.

#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <system_error>
#include <variant>
#include <vector>

#include "json.hpp"
#include "netdissect/error.hpp"
#include "netdissect/tensor.hpp"

namespace netdissect {

inline constexpr std::array<char, 4> kMagic = {'D', 'T', 'A', 'R'};
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kMaxDims = 5;
inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kLockName = ".lock";

using AnyTensor = std::variant<Tensor<float>, Tensor<std::uint8_t>, Tensor<double>>;

// ---------------------------------------------------------------------------
// Records

struct ActivationStack {
  std::string image_id;
  std::string layer;
  std::optional<std::int64_t> epoch;
  Tensor<float> tensor;  // (K_units, h, w)
};

struct ConceptMaskStack {
  std::string image_id;
  std::vector<std::string> concepts;
  Tensor<std::uint8_t> tensor;  // (C_concepts, H, W), values in {0,1}
};

struct GradientDump {
  std::string image_id;
  std::string layer;
  std::string target;
  std::vector<double> alphas;
  Tensor<float> activations;  // (K_units, h, w)
  Tensor<float> gradients;    // (S, K_units, h, w)
  double f_at_input = 0.0;
  double f_at_baseline = 0.0;
};

using Record = std::variant<ActivationStack, ConceptMaskStack, GradientDump>;

enum class ArchiveKind { kActivations, kMasks, kGradients };

inline const char* to_string(ArchiveKind kind) {
  switch (kind) {
    case ArchiveKind::kActivations: return "activations";
    case ArchiveKind::kMasks: return "masks";
    case ArchiveKind::kGradients: return "gradients";
  }
  return "?";
}

inline ArchiveKind parse_archive_kind(const std::string& s) {
  if (s == "activations") return ArchiveKind::kActivations;
  if (s == "masks") return ArchiveKind::kMasks;
  if (s == "gradients") return ArchiveKind::kGradients;
  fail(ErrorKind::kInputFormat, "unknown archive kind '" + s + "'");
}

inline ArchiveKind kind_of(const Record& r) {
  return static_cast<ArchiveKind>(r.index());
}

inline const std::string& image_id_of(const Record& r) {
  return std::visit([](const auto& v) -> const std::string& { return v.image_id; }, r);
}

// ---------------------------------------------------------------------------
// Invariant checks

namespace detail {

template <typename T>
void check_shape(const Tensor<T>& t, std::size_t ndim, const std::string& what) {
  if (t.ndim() != ndim) {
    fail(ErrorKind::kConsistency, what + " must have " + std::to_string(ndim) +
                                      " dims, got " + shape_string(t.shape()));
  }
  for (auto e : t.shape()) {
    if (e == 0) fail(ErrorKind::kConsistency, what + " has a zero extent " + shape_string(t.shape()));
  }
}

inline void check_finite(std::span<const float> values, const std::string& what) {
  for (float v : values) {
    if (!std::isfinite(v)) fail(ErrorKind::kNumericDegenerate, what + " contains a non-finite value");
  }
}

}  // namespace detail

inline void validate(const ActivationStack& r) {
  if (r.image_id.empty()) fail(ErrorKind::kConsistency, "activation stack without image_id");
  detail::check_shape(r.tensor, 3, "activation stack '" + r.image_id + "'");
  detail::check_finite(r.tensor.data(), "activation stack '" + r.image_id + "'");
}

inline void validate(const ConceptMaskStack& r) {
  if (r.image_id.empty()) fail(ErrorKind::kConsistency, "mask stack without image_id");
  detail::check_shape(r.tensor, 3, "mask stack '" + r.image_id + "'");
  if (r.concepts.size() != r.tensor.dim(0)) {
    fail(ErrorKind::kConsistency, "mask stack '" + r.image_id + "' has " +
                                      std::to_string(r.tensor.dim(0)) + " channels but " +
                                      std::to_string(r.concepts.size()) + " concept names");
  }
  for (auto v : r.tensor.data()) {
    if (v > 1) {
      fail(ErrorKind::kConsistency, "mask stack '" + r.image_id +
                                        "' has non-binary value " + std::to_string(int(v)));
    }
  }
}

inline void validate(const GradientDump& r) {
  const std::string what = "gradient dump '" + r.image_id + "'";
  if (r.image_id.empty()) fail(ErrorKind::kConsistency, "gradient dump without image_id");
  if (r.alphas.empty()) fail(ErrorKind::kConsistency, what + " has no alpha steps");
  double prev = 0.0;
  for (double a : r.alphas) {
    if (!(a > prev) || a > 1.0) {
      fail(ErrorKind::kConsistency, what + ": alphas must be strictly increasing in (0, 1]");
    }
    prev = a;
  }
  if (r.alphas.back() != 1.0) fail(ErrorKind::kConsistency, what + ": last alpha must be 1");
  detail::check_shape(r.activations, 3, what + " activations");
  detail::check_shape(r.gradients, 4, what + " gradients");
  const Shape expected = {r.alphas.size(), r.activations.dim(0), r.activations.dim(1),
                          r.activations.dim(2)};
  if (r.gradients.shape() != expected) {
    fail(ErrorKind::kConsistency, what + ": gradients shape " + shape_string(r.gradients.shape()) +
                                      " inconsistent with " + shape_string(expected));
  }
  detail::check_finite(r.activations.data(), what + " activations");
  detail::check_finite(r.gradients.data(), what + " gradients");
  if (!std::isfinite(r.f_at_input) || !std::isfinite(r.f_at_baseline)) {
    fail(ErrorKind::kNumericDegenerate, what + ": non-finite endpoint value");
  }
}

inline void validate(const Record& r) {
  std::visit([](const auto& v) { validate(v); }, r);
}

// ---------------------------------------------------------------------------
// Chunk encoding

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <typename T>
void put_value(std::vector<std::uint8_t>& out, T value) {
  if constexpr (std::is_same_v<T, float>) {
    put_le(out, std::bit_cast<std::uint32_t>(value));
  } else if constexpr (std::is_same_v<T, double>) {
    put_le(out, std::bit_cast<std::uint64_t>(value));
  } else {
    out.push_back(value);
  }
}

template <typename T>
T get_value(const std::uint8_t* p) {
  if constexpr (std::is_same_v<T, float>) {
    return std::bit_cast<float>(get_le<std::uint32_t>(p));
  } else if constexpr (std::is_same_v<T, double>) {
    return std::bit_cast<double>(get_le<std::uint64_t>(p));
  } else {
    return *p;
  }
}

}  // namespace detail

template <typename T>
void append_chunk(std::vector<std::uint8_t>& out, const Tensor<T>& t) {
  if (t.ndim() < 1 || t.ndim() > kMaxDims) {
    fail(ErrorKind::kConsistency, "tensor ndim must be in [1, 5], got " + std::to_string(t.ndim()));
  }
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  detail::put_le<std::uint16_t>(out, kFormatVersion);
  out.push_back(static_cast<std::uint8_t>(dtype_of<T>::value));
  out.push_back(static_cast<std::uint8_t>(t.ndim()));
  for (auto e : t.shape()) detail::put_le<std::uint64_t>(out, e);
  out.reserve(out.size() + t.size() * sizeof(T));
  for (T v : t.data()) detail::put_value(out, v);
}

/// Sequential chunk reader over an in-memory file image.
class ChunkReader {
 public:
  ChunkReader(std::vector<std::uint8_t> bytes, std::string source)
      : bytes_(std::move(bytes)), source_(std::move(source)) {}

  static ChunkReader open(const std::filesystem::path& path, std::uint64_t offset = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::kInputFormat, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (offset > bytes.size()) {
      fail(ErrorKind::kInputFormat, path.string() + ": offset " + std::to_string(offset) +
                                        " beyond end of file");
    }
    bytes.erase(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(offset));
    return ChunkReader(std::move(bytes), path.string());
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t position() const { return pos_; }

  /// Parses the next chunk header; returns dtype and shape, leaves the
  /// cursor on the payload.
  std::pair<DType, Shape> next_header() {
    constexpr std::size_t kFixed = 8;
    if (bytes_.size() - pos_ < kFixed) {
      if (bytes_.size() - pos_ < 4 ||
          !std::equal(kMagic.begin(), kMagic.end(), bytes_.begin() + pos_)) {
        fail(ErrorKind::kInputFormat, source_ + ": bad magic");
      }
      fail(ErrorKind::kInputFormat, source_ + ": truncated header");
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    if (!std::equal(kMagic.begin(), kMagic.end(), p)) {
      fail(ErrorKind::kInputFormat, source_ + ": bad magic");
    }
    const auto version = detail::get_le<std::uint16_t>(p + 4);
    if (version != kFormatVersion) {
      fail(ErrorKind::kInputFormat, source_ + ": unsupported version " + std::to_string(version));
    }
    const std::uint8_t code = p[6];
    if (code < 1 || code > 3) {
      fail(ErrorKind::kInputFormat, source_ + ": unknown dtype code " + std::to_string(code));
    }
    const std::uint8_t ndim = p[7];
    if (ndim < 1 || ndim > kMaxDims) {
      fail(ErrorKind::kInputFormat, source_ + ": ndim " + std::to_string(ndim) + " out of range");
    }
    pos_ += kFixed;
    if (bytes_.size() - pos_ < ndim * 8u) fail(ErrorKind::kInputFormat, source_ + ": truncated header");
    Shape shape(ndim);
    for (std::size_t i = 0; i < ndim; ++i) {
      shape[i] = detail::get_le<std::uint64_t>(bytes_.data() + pos_ + 8 * i);
      if (shape[i] == 0) fail(ErrorKind::kInputFormat, source_ + ": zero extent in shape");
    }
    pos_ += ndim * 8u;
    return {static_cast<DType>(code), shape};
  }

  template <typename T>
  Tensor<T> next() {
    auto [dtype, shape] = next_header();
    if (dtype != dtype_of<T>::value) {
      fail(ErrorKind::kInputFormat, source_ + ": expected dtype code " +
                                        std::to_string(int(dtype_of<T>::value)) + ", got " +
                                        std::to_string(int(dtype)));
    }
    return read_payload<T>(std::move(shape));
  }

  AnyTensor next_any() {
    auto [dtype, shape] = next_header();
    switch (dtype) {
      case DType::kF32: return read_payload<float>(std::move(shape));
      case DType::kU8: return read_payload<std::uint8_t>(std::move(shape));
      case DType::kF64: return read_payload<double>(std::move(shape));
    }
    fail(ErrorKind::kInputFormat, source_ + ": unknown dtype");
  }

  /// Skips the payload after next_header(), checking that it is complete.
  void skip_payload(DType dtype, const Shape& shape) {
    const std::uint64_t need = payload_bytes(dtype, shape);
    check_available(need);
    pos_ += need;
  }

 private:
  std::uint64_t payload_bytes(DType dtype, const Shape& shape) const {
    std::uint64_t n = 1;
    for (auto e : shape) {
      if (n > UINT64_MAX / e) fail(ErrorKind::kInputFormat, source_ + ": shape/payload mismatch (overflow)");
      n *= e;
    }
    const std::uint64_t sz = dtype_size(dtype);
    if (n > UINT64_MAX / sz) fail(ErrorKind::kInputFormat, source_ + ": shape/payload mismatch (overflow)");
    return n * sz;
  }

  void check_available(std::uint64_t need) const {
    const std::uint64_t have = bytes_.size() - pos_;
    if (have < need) {
      fail(ErrorKind::kInputFormat, source_ + ": truncated payload (expected " +
                                        std::to_string(need) + " bytes, got " +
                                        std::to_string(have) + ")");
    }
  }

  template <typename T>
  Tensor<T> read_payload(Shape shape) {
    const std::uint64_t need = payload_bytes(dtype_of<T>::value, shape);
    check_available(need);
    std::vector<T> data(need / sizeof(T));
    const std::uint8_t* p = bytes_.data() + pos_;
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = detail::get_value<T>(p + i * sizeof(T));
    pos_ += need;
    return Tensor<T>(std::move(shape), std::move(data));
  }

  std::vector<std::uint8_t> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> encode_payload(const Record& record) {
  std::vector<std::uint8_t> out;
  std::visit(
      [&out](const auto& r) {
        using R = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<R, GradientDump>) {
          append_chunk(out, r.activations);
          append_chunk(out, r.gradients);
          append_chunk(out, Tensor<double>({r.alphas.size()}, r.alphas));
          append_chunk(out, Tensor<double>({2}, {r.f_at_input, r.f_at_baseline}));
        } else {
          append_chunk(out, r.tensor);
        }
      },
      record);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string image_id;
  std::string file;
  std::uint64_t offset = 0;
  std::string target;  // gradient archives only
};

struct Manifest {
  std::filesystem::path root;
  ArchiveKind kind = ArchiveKind::kActivations;
  std::string layer;
  std::optional<std::int64_t> epoch;
  std::vector<std::string> concepts;
  std::vector<ManifestEntry> records;  // sorted by image_id after scan_archive
  std::uint64_t units = 0;             // K_units (activations/gradients) or C (masks)

  std::filesystem::path path_of(const ManifestEntry& e) const { return root / e.file; }

  const ManifestEntry* find(const std::string& image_id) const {
    auto it = std::lower_bound(records.begin(), records.end(), image_id,
                               [](const ManifestEntry& e, const std::string& id) { return e.image_id < id; });
    if (it != records.end() && it->image_id == image_id) return &*it;
    return nullptr;
  }
};

inline nlohmann::ordered_json manifest_to_json(const Manifest& m) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(m.kind);
  j["layer"] = m.layer;
  j["epoch"] = m.epoch ? nlohmann::ordered_json(*m.epoch) : nlohmann::ordered_json(nullptr);
  j["concepts"] = m.concepts;
  auto records = nlohmann::ordered_json::array();
  for (const auto& e : m.records) {
    nlohmann::ordered_json r;
    r["image_id"] = e.image_id;
    r["file"] = e.file;
    r["offset"] = e.offset;
    if (m.kind == ArchiveKind::kGradients) r["target"] = e.target;
    records.push_back(std::move(r));
  }
  j["records"] = std::move(records);
  return j;
}

inline Manifest parse_manifest(const std::filesystem::path& root) {
  const auto path = root / kManifestName;
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kInputFormat, "missing manifest: " + path.string());
  Manifest m;
  m.root = root;
  try {
    const auto j = nlohmann::json::parse(in);
    m.kind = parse_archive_kind(j.at("kind").get<std::string>());
    m.layer = j.value("layer", std::string{});
    if (j.contains("epoch") && !j.at("epoch").is_null()) m.epoch = j.at("epoch").get<std::int64_t>();
    if (j.contains("concepts")) m.concepts = j.at("concepts").get<std::vector<std::string>>();
    for (const auto& r : j.at("records")) {
      ManifestEntry e;
      e.image_id = r.at("image_id").get<std::string>();
      e.file = r.at("file").get<std::string>();
      e.offset = r.value("offset", std::uint64_t{0});
      e.target = r.value("target", std::string{});
      m.records.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kInputFormat, path.string() + ": malformed manifest: " + ex.what());
  }
  return m;
}

namespace detail {

inline void write_file_atomically(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kInputFormat, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) fail(ErrorKind::kInputFormat, "I/O failure writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::kInputFormat, "cannot rename " + tmp.string() + ": " + ec.message());
}

inline void write_text_atomically(const std::filesystem::path& path, const std::string& text) {
  write_file_atomically(path, std::span<const std::uint8_t>(
                                  reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string file_stem_for(const std::string& image_id) {
  std::string s;
  for (char c : image_id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '-' || c == '_' || c == '.';
    s.push_back(ok ? c : '_');
  }
  if (s.empty() || s.front() == '.') s.insert(s.begin(), '_');
  return s;
}

// Reads just the chunk headers of a record file and verifies the payloads are
// complete. Returns the leading dimension of the first chunk.
inline std::vector<Shape> probe_shapes(const std::filesystem::path& path, std::uint64_t offset,
                                       std::size_t chunks) {
  auto reader = ChunkReader::open(path, offset);
  std::vector<Shape> shapes;
  for (std::size_t i = 0; i < chunks; ++i) {
    auto [dtype, shape] = reader.next_header();
    reader.skip_payload(dtype, shape);
    shapes.push_back(std::move(shape));
  }
  return shapes;
}

inline std::size_t chunk_count(ArchiveKind kind) { return kind == ArchiveKind::kGradients ? 4 : 1; }

}  // namespace detail

/// Validates an archive and returns its manifest with records sorted by
/// image_id.
inline Manifest scan_archive(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) {
    fail(ErrorKind::kInputFormat, "archive root is not a directory: " + root.string());
  }
  Manifest m = parse_manifest(root);
  std::sort(m.records.begin(), m.records.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.image_id < b.image_id; });
  for (std::size_t i = 1; i < m.records.size(); ++i) {
    if (m.records[i].image_id == m.records[i - 1].image_id) {
      fail(ErrorKind::kConsistency, root.string() + ": duplicate image_id '" + m.records[i].image_id + "'");
    }
  }
  std::optional<std::uint64_t> units;
  for (const auto& e : m.records) {
    const auto path = m.path_of(e);
    if (!std::filesystem::is_regular_file(path)) {
      fail(ErrorKind::kInputFormat, root.string() + ": dangling entry '" + e.image_id + "' -> " + e.file);
    }
    const auto shapes = detail::probe_shapes(path, e.offset, detail::chunk_count(m.kind));
    const std::uint64_t k = shapes.front().front();
    if (units && *units != k) {
      fail(ErrorKind::kConsistency, root.string() + ": inconsistent unit count across images (" +
                                        std::to_string(*units) + " vs " + std::to_string(k) +
                                        " in '" + e.image_id + "')");
    }
    units = k;
  }
  if (m.kind == ArchiveKind::kMasks && units && *units != m.concepts.size()) {
    fail(ErrorKind::kConsistency, root.string() + ": mask stacks have " + std::to_string(*units) +
                                      " channels but manifest lists " +
                                      std::to_string(m.concepts.size()) + " concepts");
  }
  m.units = units.value_or(0);
  return m;
}

/// Loads one record using manifest metadata.
inline Record read_record(const Manifest& m, const ManifestEntry& e) {
  auto reader = ChunkReader::open(m.path_of(e), e.offset);
  Record out;
  switch (m.kind) {
    case ArchiveKind::kActivations: {
      ActivationStack r{e.image_id, m.layer, m.epoch, reader.next<float>()};
      out = std::move(r);
      break;
    }
    case ArchiveKind::kMasks: {
      ConceptMaskStack r{e.image_id, m.concepts, reader.next<std::uint8_t>()};
      out = std::move(r);
      break;
    }
    case ArchiveKind::kGradients: {
      GradientDump r;
      r.image_id = e.image_id;
      r.layer = m.layer;
      r.target = e.target;
      r.activations = reader.next<float>();
      r.gradients = reader.next<float>();
      r.alphas = reader.next<double>().storage();
      const auto ends = reader.next<double>();
      if (ends.size() != 2) fail(ErrorKind::kInputFormat, m.path_of(e).string() + ": endpoint chunk must hold 2 values");
      r.f_at_input = ends[0];
      r.f_at_baseline = ends[1];
      out = std::move(r);
      break;
    }
  }
  validate(out);
  return out;
}

template <typename R>
R read_record_as(const Manifest& m, const ManifestEntry& e) {
  auto rec = read_record(m, e);
  if (auto* p = std::get_if<R>(&rec)) return std::move(*p);
  fail(ErrorKind::kConsistency, m.root.string() + ": unexpected record kind");
}

/// Reads a record file. Chunk structure is checked first; metadata then comes
/// from the manifest in the same directory.
inline Record read_record(const std::filesystem::path& source) {
  {
    auto reader = ChunkReader::open(source);
    while (!reader.at_end()) {
      auto [dtype, shape] = reader.next_header();
      reader.skip_payload(dtype, shape);
    }
  }
  const auto root = source.parent_path();
  Manifest m = parse_manifest(root.empty() ? std::filesystem::path(".") : root);
  const auto name = source.filename().string();
  for (const auto& e : m.records) {
    if (e.file == name) return read_record(m, e);
  }
  fail(ErrorKind::kConsistency, source.string() + " is not listed in the archive manifest");
}

// ---------------------------------------------------------------------------
// Writing

/// Single writer for one archive directory. Holds `.lock` for its lifetime;
/// a second writer on the same archive fails.
class ArchiveWriter {
 public:
  explicit ArchiveWriter(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_, ec);
    if (ec) fail(ErrorKind::kInputFormat, "cannot create archive " + root_.string() + ": " + ec.message());
    const auto lock = root_ / kLockName;
    lock_fd_ = ::open(lock.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (lock_fd_ < 0) {
      if (errno == EEXIST) {
        fail(ErrorKind::kConsistency, "archive " + root_.string() +
                                          " is locked by another writer (remove " + lock.string() +
                                          " if stale)");
      }
      fail(ErrorKind::kInputFormat, "cannot create lock " + lock.string() + ": " + std::strerror(errno));
    }
    if (std::filesystem::exists(root_ / kManifestName)) {
      try {
        manifest_ = scan_archive(root_);
      } catch (...) {
        release();
        throw;
      }
    }
  }

  ArchiveWriter(const ArchiveWriter&) = delete;
  ArchiveWriter& operator=(const ArchiveWriter&) = delete;
  ~ArchiveWriter() { release(); }

  const std::optional<Manifest>& manifest() const { return manifest_; }

  /// Writes a record and commits the updated manifest. Returns the record
  /// file size in bytes.
  std::uint64_t write(const Record& record) {
    validate(record);
    Manifest next = manifest_.value_or(fresh_manifest(record));
    check_compatible(next, record);

    ManifestEntry entry;
    entry.image_id = image_id_of(record);
    entry.file = unique_file_name(next, entry.image_id);
    if (const auto* g = std::get_if<GradientDump>(&record)) entry.target = g->target;

    const auto bytes = encode_payload(record);
    detail::write_file_atomically(root_ / entry.file, bytes);

    auto pos = std::lower_bound(next.records.begin(), next.records.end(), entry.image_id,
                                [](const ManifestEntry& e, const std::string& id) { return e.image_id < id; });
    next.records.insert(pos, entry);
    next.units = leading_dim(record);
    detail::write_text_atomically(root_ / kManifestName, manifest_to_json(next).dump(2) + "\n");
    manifest_ = std::move(next);
    return bytes.size();
  }

 private:
  static std::uint64_t leading_dim(const Record& r) {
    return std::visit(
        [](const auto& v) -> std::uint64_t {
          using R = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<R, GradientDump>) return v.activations.dim(0);
          else return v.tensor.dim(0);
        },
        r);
  }

  Manifest fresh_manifest(const Record& record) const {
    Manifest m;
    m.root = root_;
    m.kind = kind_of(record);
    std::visit(
        [&m](const auto& r) {
          using R = std::decay_t<decltype(r)>;
          if constexpr (std::is_same_v<R, ActivationStack>) {
            m.layer = r.layer;
            m.epoch = r.epoch;
          } else if constexpr (std::is_same_v<R, ConceptMaskStack>) {
            m.concepts = r.concepts;
          } else {
            m.layer = r.layer;
          }
        },
        record);
    return m;
  }

  void check_compatible(const Manifest& m, const Record& record) const {
    const auto where = "archive " + root_.string();
    if (m.kind != kind_of(record)) {
      fail(ErrorKind::kConsistency, where + " holds " + to_string(m.kind) + ", not " + to_string(kind_of(record)));
    }
    if (m.find(image_id_of(record))) {
      fail(ErrorKind::kConsistency, where + " already has image_id '" + image_id_of(record) + "'");
    }
    if (!m.records.empty() && m.units != leading_dim(record)) {
      fail(ErrorKind::kConsistency, where + ": inconsistent unit count (" + std::to_string(m.units) +
                                        " vs " + std::to_string(leading_dim(record)) + ")");
    }
    std::visit(
        [&](const auto& r) {
          using R = std::decay_t<decltype(r)>;
          if constexpr (std::is_same_v<R, ActivationStack>) {
            if (r.layer != m.layer || r.epoch != m.epoch) {
              fail(ErrorKind::kConsistency, where + ": layer/epoch differ from the archive");
            }
          } else if constexpr (std::is_same_v<R, ConceptMaskStack>) {
            if (r.concepts != m.concepts) fail(ErrorKind::kConsistency, where + ": concept list differs from the archive");
          } else {
            if (r.layer != m.layer) fail(ErrorKind::kConsistency, where + ": layer differs from the archive");
          }
        },
        record);
  }

  static std::string unique_file_name(const Manifest& m, const std::string& image_id) {
    std::set<std::string> taken;
    for (const auto& e : m.records) taken.insert(e.file);
    const auto stem = detail::file_stem_for(image_id);
    std::string name = stem + ".dtar";
    for (int i = 1; taken.count(name); ++i) name = stem + "~" + std::to_string(i) + ".dtar";
    return name;
  }

  void release() {
    if (lock_fd_ >= 0) {
      ::close(lock_fd_);
      std::error_code ec;
      std::filesystem::remove(root_ / kLockName, ec);
      lock_fd_ = -1;
    }
  }

  std::filesystem::path root_;
  std::optional<Manifest> manifest_;
  int lock_fd_ = -1;
};

inline std::uint64_t write_record(const Record& record, const std::filesystem::path& destination) {
  validate(record);
  ArchiveWriter writer(destination);
  return writer.write(record);
}

/// Loads every record of an archive in manifest order.
template <typename R>
std::vector<R> load_all(const Manifest& m) {
  std::vector<R> out;
  out.reserve(m.records.size());
  for (const auto& e : m.records) out.push_back(read_record_as<R>(m, e));
  return out;
}

}  // namespace netdissect
