#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "ssmrec/ingest.hpp"
#include "ssmrec/model.hpp"

namespace ssmrec::testing {

inline ModelConfig tiny_config(std::size_t num_items = 20) {
  ModelConfig c;
  c.num_items = num_items;
  c.d = 8;
  c.d_state = 4;
  c.conv_width = 4;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.init_std = 0.3;
  c.layer_norm_eps = 1e-12;
  return c;
}

/// Random examples with history lengths drawn from [min_len, max_len] and
/// strictly increasing timestamps with irregular gaps.
inline std::vector<Example> random_examples(std::size_t count, std::size_t num_items, std::size_t min_len,
                                            std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> item(1, num_items - 1);
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<std::int64_t> gap(1, 500);
  std::vector<Example> out(count);
  for (std::size_t e = 0; e < count; ++e) {
    auto& ex = out[e];
    ex.user = e;
    std::int64_t t = 1000;
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) {
      ex.items.push_back(item(rng));
      ex.timestamps.push_back(t);
      t += gap(rng);
    }
    ex.target_item = item(rng);
    ex.target_timestamp = t;
  }
  return out;
}

inline Batch random_batch(std::size_t rows, std::size_t num_items, std::size_t min_len, std::size_t max_len,
                          std::uint64_t seed) {
  auto ex = random_examples(rows, num_items, min_len, max_len, seed);
  BatchOptions opts;
  opts.max_len = max_len;
  opts.batch_size = rows;
  return make_batch(ex, 0, ex.size(), opts);
}

}  // namespace ssmrec::testing
