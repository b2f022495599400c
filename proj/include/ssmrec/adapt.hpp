#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssmrec/eval.hpp"
#include "ssmrec/ingest.hpp"
#include "ssmrec/losses.hpp"
#include "ssmrec/model.hpp"

namespace ssmrec {

enum class BatchPolicy { kWholeTestSet, kFixedSize };

struct AdaptConfig {
  std::size_t steps = 1;  // M
  double lr = 0.005;      // α
  double mu_time = 1e-2;
  double mu_state = 1e-1;
  bool use_time = true;
  bool use_state = true;
  BatchPolicy policy = BatchPolicy::kWholeTestSet;
  std::size_t batch_size = 256;
  void validate() const;
};

void to_json(nlohmann::json& j, const AdaptConfig& c);
void from_json(const nlohmann::json& j, AdaptConfig& c);

struct AdaptReport {
  std::size_t batch = 0;
  std::size_t rows = 0;
  std::vector<double> time_loss;   // one per step taken
  std::vector<double> state_loss;
  std::uint64_t pre_logits_checksum = 0;
  std::uint64_t post_logits_checksum = 0;
  double adapt_seconds = 0.0;
  double predict_seconds = 0.0;
  double restore_seconds = 0.0;
  bool restored = false;
  bool aborted = false;
  std::string abort_reason;
  std::size_t clamped_steps = 0;
};

void to_json(nlohmann::json& j, const AdaptReport& r);

struct AdaptOutcome {
  Tensor logits;  // [rows, |V|]
  AdaptReport report;
};

/// Snapshot, M SGD steps on the test-phase self-supervised loss, predict,
/// restore. `params` is bit-identical to its input state on return, also
/// when an exception escapes.
AdaptOutcome adapt_and_predict(const Batch& batch, ModelParams& params, const AdaptConfig& cfg,
                               const LossWeights& weights, const StateLossOptions& state_opts = {});

struct EvalOutcome {
  std::vector<RankResult> results;  // in example order
  MetricsReport metrics;
  std::vector<AdaptReport> reports;
};

/// Rank every example with the frozen model.
EvalOutcome evaluate_frozen(const std::vector<Example>& examples, const ModelParams& params,
                            const BatchOptions& batching, std::size_t k);

/// Adapt-then-predict over every batch of `examples`.
EvalOutcome evaluate_with_adaptation(const std::vector<Example>& examples, ModelParams& params,
                                     const AdaptConfig& cfg, const LossWeights& weights,
                                     const StateLossOptions& state_opts, const BatchOptions& batching, std::size_t k);

void write_reports_jsonl(std::ostream& out, const std::vector<AdaptReport>& reports);

}  // namespace ssmrec
