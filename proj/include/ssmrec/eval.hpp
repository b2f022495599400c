#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssmrec/ingest.hpp"

namespace ssmrec {

struct RankResult {
  std::size_t rank = 0;
  double recall = 0.0;
  double rr = 0.0;
  double ndcg = 0.0;
};

/// rank = 1 + #{i : z_i > z_t} + #{i < t : z_i = z_t}, over items in
/// [first_item, |V|). Metrics are zero when rank > k.
RankResult rank_metrics(std::span<const double> logits, std::size_t target, std::size_t k,
                        std::size_t first_item = 0);

struct MetricsReport {
  std::size_t k = 10;
  std::size_t count = 0;
  double recall = 0.0;
  double mrr = 0.0;
  double ndcg = 0.0;
};

/// Pairwise summation, so the order of examples barely matters.
double pairwise_sum(std::span<const double> values);
MetricsReport aggregate(std::span<const RankResult> results, std::size_t k);

void to_json(nlohmann::json& j, const MetricsReport& r);

/// Evaluates a list of examples, one result per example in input order.
using ExampleEvalFn = std::function<std::vector<RankResult>(const std::vector<Example>&)>;

struct SegmentReport {
  std::size_t k = 10;
  MetricsReport overall;
  std::vector<MetricsReport> segments;
  /// Filled when a baseline is supplied: segment metric minus baseline.
  std::vector<MetricsReport> baseline;
  std::vector<double> ndcg_delta;
  std::vector<double> recall_delta;
  std::vector<double> mrr_delta;
};

void to_json(nlohmann::json& j, const SegmentReport& r);

/// Splits `test` into time-ordered segments and evaluates each on its own.
SegmentReport segment_analysis(const std::vector<Example>& test, const ExampleEvalFn& eval, std::size_t k,
                               std::size_t segments = 4);
/// Same, plus the per-segment delta of `eval` over `baseline`.
SegmentReport segment_analysis(const std::vector<Example>& test, const ExampleEvalFn& eval,
                               const ExampleEvalFn& baseline, std::size_t k, std::size_t segments = 4);

struct ThroughputReport {
  double its_per_sec = 0.0;
  std::size_t batch_size = 0;
  bool adaptation = false;
  std::size_t warmup = 0;
  std::size_t reps = 0;
  double median_seconds = 0.0;
  double total_seconds = 0.0;
};

void to_json(nlohmann::json& j, const ThroughputReport& r);

/// Runs warmup + reps iterations, cycling through `batches`, and reports the
/// reciprocal of the median iteration time over the timed reps.
ThroughputReport throughput(const std::function<void(const Batch&)>& fn, const std::vector<Batch>& batches,
                            std::size_t warmup, std::size_t reps, bool adaptation);

/// "example,user,target,rank,recall,rr,ndcg" rows.
void write_ranks_csv(std::ostream& out, const std::vector<Example>& examples, std::span<const RankResult> results);

}  // namespace ssmrec
