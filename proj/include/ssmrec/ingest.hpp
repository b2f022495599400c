#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ssmrec {

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
};

struct UserSequence {
  std::string user_id;
  std::vector<std::size_t> items;  // vocabulary indices, never 0
  std::vector<std::int64_t> timestamps;
};

/// Chronological per-user sequences. Index 0 of the vocabulary is the padding
/// slot, so `num_items()` counts it.
struct InteractionDataset {
  std::vector<UserSequence> users;
  std::vector<std::string> vocabulary{""};

  std::size_t num_items() const { return vocabulary.size(); }
  std::size_t num_interactions() const;
};

struct Example {
  std::size_t user = 0;  // index into InteractionDataset::users
  std::vector<std::size_t> items;
  std::vector<std::int64_t> timestamps;
  std::size_t target_item = 0;
  std::int64_t target_timestamp = 0;
};

struct SplitDataset {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

enum class PadSide { kLeft, kRight };

/// Padded batch. Row r, position j lives at r * width + j. The interval
/// matrix has width + 1 columns: with left padding column j pairs with input
/// position j and the last column holds the gap to the prediction time.
struct Batch {
  std::size_t rows = 0;
  std::size_t width = 0;
  PadSide pad_side = PadSide::kLeft;
  std::vector<std::size_t> items;
  std::vector<std::int64_t> timestamps;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> target_item;
  std::vector<std::int64_t> target_timestamp;
  std::vector<double> intervals;               // rows × (width + 1)
  std::vector<std::uint8_t> interval_mask;     // entries the alignment loss may read
  std::vector<std::size_t> example_index;      // position in the source example list

  std::size_t interval_cols() const { return width + 1; }
  /// Column holding row-local interval k (k = 0 is the leading zero, k = len
  /// is the gap to the prediction time).
  std::size_t interval_column(std::size_t row, std::size_t k) const;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TsvSchema {
  std::string user_column = "user_id";
  std::string item_column = "item_id";
  std::string timestamp_column = "timestamp";
};

InteractionDataset load_tsv(const std::filesystem::path& path, const TsvSchema& schema = {});
void write_tsv(const std::filesystem::path& path, const InteractionDataset& ds);

/// Drops users and items with fewer than k interactions, repeating until
/// nothing changes, then re-densifies the vocabulary in its original order.
InteractionDataset filter_min_interactions(const InteractionDataset& ds, std::size_t k);

SplitDataset leave_one_out_split(const InteractionDataset& ds);

struct BatchOptions {
  std::size_t max_len = 50;
  std::size_t batch_size = 256;
  PadSide pad_side = PadSide::kLeft;
  /// Pad every batch to max_len instead of the longest row in the batch.
  bool fixed_width = false;
};

std::vector<Batch> make_batches(const std::vector<Example>& examples, const BatchOptions& opts);
Batch make_batch(const std::vector<Example>& examples, std::size_t begin, std::size_t end, const BatchOptions& opts);

/// Splits examples, ordered by target timestamp (stable), into k contiguous
/// groups. Earlier groups take the remainder.
std::vector<std::vector<Example>> segment_test_by_time(const std::vector<Example>& test, std::size_t k);
/// Same partition, expressed as indices into `test`.
std::vector<std::vector<std::size_t>> segment_indices_by_time(const std::vector<Example>& test, std::size_t k);

// ---------------------------------------------------------------------------
// Synthetic interest-shift data.

struct ShiftGeneratorConfig {
  std::size_t users = 500;
  std::size_t items = 200;
  std::size_t clusters = 8;
  /// Cluster preference weights per regime. Regime r is active from
  /// switch time r-1 onward. Empty means two regimes over disjoint halves.
  std::vector<std::vector<double>> regimes;
  /// Regime switch points as fractions of the global time span.
  std::vector<double> switch_fractions{0.6};
  double noise = 0.05;
  std::size_t min_len = 15;
  std::size_t max_len = 30;
  std::int64_t mean_gap = 3600;
  /// Users start uniformly in [0, start_spread · mean sequence duration].
  double start_spread = 2.0;
  /// Probability of the within-cluster walk advancing one slot (else two).
  double step_one_prob = 0.8;
};

void to_json(nlohmann::json& j, const ShiftGeneratorConfig& c);
void from_json(const nlohmann::json& j, ShiftGeneratorConfig& c);

struct GeneratedData {
  InteractionDataset dataset;
  std::vector<std::size_t> item_cluster;   // by vocabulary index; padding maps to clusters
  std::vector<std::int64_t> switch_times;  // absolute, one per switch
};

GeneratedData synth_shift_generate(const ShiftGeneratorConfig& cfg, std::uint64_t seed);

nlohmann::json split_manifest(const SplitDataset& split);

}  // namespace ssmrec
