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
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace netdissect {

/// Explicit request if > 0, else DISSECT_THREADS, else 1.
inline unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("DISSECT_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<unsigned>(v);
    } catch (...) {
    }
  }
  return 1;
}

/// Splits [0, n) into contiguous blocks, folds each block into its own
/// state with `work(state, i)`, then merges the block states left to right.
/// Callers are expected to pass an associative, commutative merge so the
/// result does not depend on `threads`.
template <typename State, typename Init, typename Work, typename Merge>
State parallel_reduce(std::size_t n, unsigned threads, Init init, Work work, Merge merge) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads, n));
  std::vector<State> states;
  states.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) states.push_back(init());
  std::vector<std::exception_ptr> errors(workers);

  auto run_block = [&](std::size_t w) {
    const std::size_t begin = n * w / workers;
    const std::size_t end = n * (w + 1) / workers;
    try {
      for (std::size_t i = begin; i < end; ++i) work(states[w], i);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };

  if (workers == 1) {
    run_block(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run_block, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  State result = std::move(states.front());
  for (std::size_t w = 1; w < workers; ++w) merge(result, std::move(states[w]));
  return result;
}

}  // namespace netdissect
