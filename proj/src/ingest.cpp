#include "ssmrec/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

namespace ssmrec {

std::size_t InteractionDataset::num_interactions() const {
  std::size_t n = 0;
  for (const auto& u : users) n += u.items.size();
  return n;
}

std::size_t Batch::interval_column(std::size_t row, std::size_t k) const {
  const std::size_t len = lengths.at(row);
  if (k > len) throw std::out_of_range("interval_column: k beyond row length");
  if (pad_side == PadSide::kLeft) return width - len + k;
  return k == len ? width : k;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

bool parse_int64(const std::string& s, std::int64_t& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && !s.empty();
}

}  // namespace

InteractionDataset load_tsv(const std::filesystem::path& path, const TsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("load_tsv: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("load_tsv: empty file " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_tabs(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("load_tsv: header lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t cu = column(schema.user_column);
  const std::size_t ci = column(schema.item_column);
  const std::size_t ct = column(schema.timestamp_column);

  InteractionDataset ds;
  std::unordered_map<std::string, std::size_t> user_index;
  std::unordered_map<std::string, std::size_t> item_index;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != header.size()) {
      throw DataError("load_tsv: line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields, got " + std::to_string(fields.size()));
    }
    std::int64_t ts = 0;
    if (!parse_int64(fields[ct], ts)) {
      throw DataError("load_tsv: line " + std::to_string(line_no) + ": timestamp '" + fields[ct] +
                      "' is not an integer");
    }
    if (ts < 0) throw DataError("load_tsv: line " + std::to_string(line_no) + ": negative timestamp");
    auto [uit, unew] = user_index.try_emplace(fields[cu], ds.users.size());
    if (unew) ds.users.push_back(UserSequence{fields[cu], {}, {}});
    auto [iit, inew] = item_index.try_emplace(fields[ci], ds.vocabulary.size());
    if (inew) ds.vocabulary.push_back(fields[ci]);
    auto& u = ds.users[uit->second];
    u.items.push_back(iit->second);
    u.timestamps.push_back(ts);
  }
  if (ds.users.empty()) throw DataError("load_tsv: no interactions in " + path.string());

  for (auto& u : ds.users) {
    std::vector<std::size_t> order(u.items.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return u.timestamps[a] < u.timestamps[b]; });
    UserSequence sorted{u.user_id, {}, {}};
    for (std::size_t k : order) {
      sorted.items.push_back(u.items[k]);
      sorted.timestamps.push_back(u.timestamps[k]);
    }
    u = std::move(sorted);
  }
  return ds;
}

void write_tsv(const std::filesystem::path& path, const InteractionDataset& ds) {
  std::ofstream out(path);
  if (!out) throw DataError("write_tsv: cannot open " + path.string());
  out << "user_id\titem_id\ttimestamp\n";
  for (const auto& u : ds.users)
    for (std::size_t k = 0; k < u.items.size(); ++k)
      out << u.user_id << '\t' << ds.vocabulary[u.items[k]] << '\t' << u.timestamps[k] << '\n';
}

InteractionDataset filter_min_interactions(const InteractionDataset& ds, std::size_t k) {
  if (k < 3) throw std::invalid_argument("filter_min_interactions: k must be at least 3");
  std::vector<UserSequence> users = ds.users;
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<std::size_t> counts(ds.num_items(), 0);
    for (const auto& u : users)
      for (std::size_t it : u.items) ++counts[it];
    for (auto& u : users) {
      UserSequence kept{u.user_id, {}, {}};
      for (std::size_t j = 0; j < u.items.size(); ++j) {
        if (counts[u.items[j]] >= k) {
          kept.items.push_back(u.items[j]);
          kept.timestamps.push_back(u.timestamps[j]);
        }
      }
      if (kept.items.size() != u.items.size()) changed = true;
      u = std::move(kept);
    }
    const auto before = users.size();
    std::erase_if(users, [k](const UserSequence& u) { return u.items.size() < k; });
    if (users.size() != before) changed = true;
  }
  if (users.empty()) throw DataError("dataset exhausted by filtering");

  std::vector<std::uint8_t> used(ds.num_items(), 0);
  for (const auto& u : users)
    for (std::size_t it : u.items) used[it] = 1;
  InteractionDataset out;
  std::vector<std::size_t> remap(ds.num_items(), 0);
  for (std::size_t i = 1; i < ds.num_items(); ++i) {
    if (!used[i]) continue;
    remap[i] = out.vocabulary.size();
    out.vocabulary.push_back(ds.vocabulary[i]);
  }
  for (auto& u : users)
    for (auto& it : u.items) it = remap[it];
  out.users = std::move(users);
  return out;
}

SplitDataset leave_one_out_split(const InteractionDataset& ds) {
  SplitDataset split;
  for (std::size_t ui = 0; ui < ds.users.size(); ++ui) {
    const auto& u = ds.users[ui];
    const std::size_t n = u.items.size();
    if (n < 3) {
      throw DataError("leave_one_out_split: user '" + u.user_id + "' has " + std::to_string(n) +
                      " interactions, need at least 3");
    }
    auto example = [&](std::size_t target) {
      Example e;
      e.user = ui;
      e.items.assign(u.items.begin(), u.items.begin() + static_cast<std::ptrdiff_t>(target));
      e.timestamps.assign(u.timestamps.begin(), u.timestamps.begin() + static_cast<std::ptrdiff_t>(target));
      e.target_item = u.items[target];
      e.target_timestamp = u.timestamps[target];
      return e;
    };
    for (std::size_t j = 1; j + 2 < n; ++j) split.train.push_back(example(j));
    split.valid.push_back(example(n - 2));
    split.test.push_back(example(n - 1));
  }
  return split;
}

Batch make_batch(const std::vector<Example>& examples, std::size_t begin, std::size_t end, const BatchOptions& opts) {
  if (opts.max_len < 1) throw std::invalid_argument("make_batches: max_len must be at least 1");
  if (begin >= end || end > examples.size()) throw std::invalid_argument("make_batch: empty or invalid range");
  Batch b;
  b.rows = end - begin;
  b.pad_side = opts.pad_side;
  std::size_t longest = 0;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& e = examples[i];
    if (e.items.empty()) throw DataError("make_batches: example with empty input");
    if (e.items.size() != e.timestamps.size()) throw DataError("make_batches: items/timestamps length mismatch");
    if (e.target_timestamp < e.timestamps.back()) throw DataError("non-causal target");
    longest = std::max(longest, std::min(e.items.size(), opts.max_len));
  }
  b.width = opts.fixed_width ? opts.max_len : longest;
  const std::size_t W = b.width, TC = W + 1;
  b.items.assign(b.rows * W, 0);
  b.timestamps.assign(b.rows * W, 0);
  b.mask.assign(b.rows * W, 0);
  b.intervals.assign(b.rows * TC, 0.0);
  b.interval_mask.assign(b.rows * TC, 0);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto& e = examples[begin + r];
    const std::size_t len = std::min(e.items.size(), opts.max_len);
    const std::size_t skip = e.items.size() - len;  // keep the most recent items
    const std::size_t first = opts.pad_side == PadSide::kLeft ? W - len : 0;
    for (std::size_t j = 0; j < len; ++j) {
      b.items[r * W + first + j] = e.items[skip + j];
      b.timestamps[r * W + first + j] = e.timestamps[skip + j];
      b.mask[r * W + first + j] = 1;
    }
    b.lengths.push_back(len);
    b.target_item.push_back(e.target_item);
    b.target_timestamp.push_back(e.target_timestamp);
    b.example_index.push_back(begin + r);
    // k = 0 is the leading zero; pairs use k = 1..len.
    for (std::size_t k = 0; k <= len; ++k) {
      const std::size_t col = b.interval_column(r, k);
      std::int64_t gap = 0;
      if (k > 0 && k < len) gap = e.timestamps[skip + k] - e.timestamps[skip + k - 1];
      if (k == len && k > 0) gap = e.target_timestamp - e.timestamps[skip + len - 1];
      b.intervals[r * TC + col] = static_cast<double>(gap);
      b.interval_mask[r * TC + col] = k > 0 ? 1 : 0;
    }
  }
  return b;
}

std::vector<Batch> make_batches(const std::vector<Example>& examples, const BatchOptions& opts) {
  if (opts.batch_size < 1) throw std::invalid_argument("make_batches: batch_size must be at least 1");
  std::vector<Batch> out;
  for (std::size_t s = 0; s < examples.size(); s += opts.batch_size)
    out.push_back(make_batch(examples, s, std::min(s + opts.batch_size, examples.size()), opts));
  return out;
}

std::vector<std::vector<std::size_t>> segment_indices_by_time(const std::vector<Example>& test, std::size_t k) {
  if (k < 2) throw std::invalid_argument("segment_test_by_time: k must be at least 2");
  if (test.empty()) throw std::invalid_argument("segment_test_by_time: empty test set");
  if (k > test.size()) throw std::invalid_argument("segment_test_by_time: more segments than examples");
  std::vector<std::size_t> order(test.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return test[a].target_timestamp < test[b].target_timestamp; });
  std::vector<std::vector<std::size_t>> out(k);
  const std::size_t base = test.size() / k, extra = test.size() % k;
  std::size_t pos = 0;
  for (std::size_t s = 0; s < k; ++s) {
    const std::size_t n = base + (s < extra ? 1 : 0);
    out[s].assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
  }
  return out;
}

std::vector<std::vector<Example>> segment_test_by_time(const std::vector<Example>& test, std::size_t k) {
  std::vector<std::vector<Example>> out;
  for (const auto& seg : segment_indices_by_time(test, k)) {
    auto& group = out.emplace_back();
    for (std::size_t i : seg) group.push_back(test[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const ShiftGeneratorConfig& c) {
  j = nlohmann::json{{"users", c.users},
                     {"items", c.items},
                     {"clusters", c.clusters},
                     {"regimes", c.regimes},
                     {"switch_fractions", c.switch_fractions},
                     {"noise", c.noise},
                     {"min_len", c.min_len},
                     {"max_len", c.max_len},
                     {"mean_gap", c.mean_gap},
                     {"start_spread", c.start_spread},
                     {"step_one_prob", c.step_one_prob}};
}

void from_json(const nlohmann::json& j, ShiftGeneratorConfig& c) {
  const ShiftGeneratorConfig d;
  c.users = j.value("users", d.users);
  c.items = j.value("items", d.items);
  c.clusters = j.value("clusters", d.clusters);
  c.regimes = j.value("regimes", d.regimes);
  c.switch_fractions = j.value("switch_fractions", d.switch_fractions);
  c.noise = j.value("noise", d.noise);
  c.min_len = j.value("min_len", d.min_len);
  c.max_len = j.value("max_len", d.max_len);
  c.mean_gap = j.value("mean_gap", d.mean_gap);
  c.start_spread = j.value("start_spread", d.start_spread);
  c.step_one_prob = j.value("step_one_prob", d.step_one_prob);
}

GeneratedData synth_shift_generate(const ShiftGeneratorConfig& cfg, std::uint64_t seed) {
  if (cfg.clusters == 0) throw std::invalid_argument("synth_shift_generate: need at least one cluster");
  if (cfg.items < cfg.clusters) throw std::invalid_argument("synth_shift_generate: item count below cluster count");
  if (cfg.min_len < 3 || cfg.max_len < cfg.min_len) throw std::invalid_argument("synth_shift_generate: bad length range");
  if (cfg.noise < 0.0 || cfg.noise > 1.0) throw std::invalid_argument("synth_shift_generate: noise outside [0,1]");
  if (cfg.mean_gap < 1) throw std::invalid_argument("synth_shift_generate: mean_gap must be positive");

  std::vector<std::vector<double>> regimes = cfg.regimes;
  if (regimes.empty()) {
    const std::size_t half = std::max<std::size_t>(1, cfg.clusters / 2);
    std::vector<double> r1(cfg.clusters, 0.0), r2(cfg.clusters, 0.0);
    for (std::size_t c = 0; c < cfg.clusters; ++c) (c < half ? r1 : r2)[c] = 1.0;
    if (cfg.clusters == 1) r2 = r1;
    regimes = {r1, r2};
  }
  if (regimes.size() < 2) throw std::invalid_argument("synth_shift_generate: need at least two regimes");
  if (cfg.switch_fractions.size() != regimes.size() - 1) {
    throw std::invalid_argument("synth_shift_generate: need one switch fraction per regime boundary");
  }
  for (const auto& r : regimes)
    if (r.size() != cfg.clusters) throw std::invalid_argument("synth_shift_generate: regime weight count != clusters");

  GeneratedData out;
  auto& ds = out.dataset;
  out.item_cluster.assign(cfg.items + 1, 0);
  std::vector<std::vector<std::size_t>> cluster_items(cfg.clusters);
  for (std::size_t k = 0; k < cfg.items; ++k) {
    ds.vocabulary.push_back("item" + std::to_string(k));
    const std::size_t c = k * cfg.clusters / cfg.items;
    out.item_cluster[k + 1] = c;
    cluster_items[c].push_back(k + 1);
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double mean_len = 0.5 * static_cast<double>(cfg.min_len + cfg.max_len);
  const double spread = cfg.start_spread * mean_len * static_cast<double>(cfg.mean_gap);

  // Timestamps first so switch times can be placed on the global span.
  ds.users.resize(cfg.users);
  std::int64_t lo = std::numeric_limits<std::int64_t>::max(), hi = 0;
  for (std::size_t u = 0; u < cfg.users; ++u) {
    auto& seq = ds.users[u];
    seq.user_id = "user" + std::to_string(u);
    const std::size_t n = cfg.min_len + static_cast<std::size_t>(unit(rng) * static_cast<double>(cfg.max_len - cfg.min_len + 1));
    std::int64_t t = static_cast<std::int64_t>(unit(rng) * spread);
    for (std::size_t j = 0; j < std::min(n, cfg.max_len); ++j) {
      if (j > 0) t += 1 + static_cast<std::int64_t>(-std::log(1.0 - unit(rng)) * static_cast<double>(cfg.mean_gap));
      seq.timestamps.push_back(t);
    }
    lo = std::min(lo, seq.timestamps.front());
    hi = std::max(hi, seq.timestamps.back());
  }
  for (double f : cfg.switch_fractions)
    out.switch_times.push_back(lo + static_cast<std::int64_t>(f * static_cast<double>(hi - lo)));

  for (auto& seq : ds.users) {
    std::vector<std::size_t> user_cluster;
    for (const auto& w : regimes) {
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      user_cluster.push_back(pick(rng));
    }
    std::size_t current = cfg.clusters;  // none yet
    std::size_t pos = 0;
    for (std::int64_t t : seq.timestamps) {
      const std::size_t regime = static_cast<std::size_t>(
          std::upper_bound(out.switch_times.begin(), out.switch_times.end(), t) - out.switch_times.begin());
      const std::size_t c = user_cluster[regime];
      const auto& members = cluster_items[c];
      if (unit(rng) < cfg.noise) {
        seq.items.push_back(1 + static_cast<std::size_t>(unit(rng) * static_cast<double>(cfg.items)));
        continue;
      }
      if (c != current) {
        pos = static_cast<std::size_t>(unit(rng) * static_cast<double>(members.size()));
        current = c;
      } else {
        pos = (pos + (unit(rng) < cfg.step_one_prob ? 1 : 2)) % members.size();
      }
      seq.items.push_back(members[pos]);
    }
  }
  return out;
}

nlohmann::json split_manifest(const SplitDataset& split) {
  return nlohmann::json{{"train", split.train.size()}, {"valid", split.valid.size()}, {"test", split.test.size()}};
}

}  // namespace ssmrec
