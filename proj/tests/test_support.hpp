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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "netdissect/tensor_io.hpp"

namespace netdissect::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "netdissect-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

inline std::string image_name(std::size_t i) {
  std::string digits = std::to_string(i);
  return "im" + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

/// Distinct float activations: a shuffled ramp plus jitter, so no two values
/// in a unit are equal.
inline std::vector<ActivationStack> random_stacks(std::uint64_t seed, std::size_t images, std::size_t units,
                                                  std::size_t rows, std::size_t cols,
                                                  const std::string& layer = "layer4") {
  std::mt19937_64 rng(seed);
  const std::size_t per_unit = images * rows * cols;
  std::vector<std::vector<float>> pools(units);
  for (auto& pool : pools) {
    pool.resize(per_unit);
    const double scale = std::uniform_real_distribution<double>(0.1, 10.0)(rng);
    for (std::size_t i = 0; i < per_unit; ++i) pool[i] = static_cast<float>(scale * (static_cast<double>(i) - 0.3 * per_unit));
    std::shuffle(pool.begin(), pool.end(), rng);
  }
  std::vector<ActivationStack> out;
  for (std::size_t n = 0; n < images; ++n) {
    ActivationStack s;
    s.image_id = image_name(n);
    s.layer = layer;
    s.tensor = Tensor<float>({units, rows, cols});
    for (std::size_t u = 0; u < units; ++u) {
      for (std::size_t p = 0; p < rows * cols; ++p) s.tensor[u * rows * cols + p] = pools[u][n * rows * cols + p];
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline ConceptMaskStack random_masks(std::mt19937_64& rng, const std::string& image_id,
                                     const std::vector<std::string>& concepts, std::size_t rows, std::size_t cols,
                                     double density) {
  ConceptMaskStack m;
  m.image_id = image_id;
  m.concepts = concepts;
  m.tensor = Tensor<std::uint8_t>({concepts.size(), rows, cols});
  std::bernoulli_distribution on(density);
  // Some concepts absent from some images.
  std::bernoulli_distribution present(0.7);
  for (std::size_t c = 0; c < concepts.size(); ++c) {
    if (!present(rng)) continue;
    for (std::size_t p = 0; p < rows * cols; ++p) m.tensor[c * rows * cols + p] = on(rng) ? 1 : 0;
  }
  return m;
}

/// Every regular file under `root` keyed by relative path. run-meta.json is
/// included with its timestamp removed.
inline std::map<std::string, std::string> snapshot(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    auto bytes = slurp(e.path());
    if (e.path().filename() == "run-meta.json") {
      auto j = nlohmann::ordered_json::parse(bytes);
      j.erase("started_at");
      bytes = j.dump();
    }
    out[std::filesystem::relative(e.path(), root).string()] = std::move(bytes);
  }
  return out;
}

template <typename R>
Manifest write_archive(const std::filesystem::path& root, const std::vector<R>& records) {
  {
    ArchiveWriter w(root);
    for (const auto& r : records) w.write(r);
  }
  return scan_archive(root);
}

}  // namespace netdissect::testing
