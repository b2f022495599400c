#include "ssmrec/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace ssmrec {

RankResult rank_metrics(std::span<const double> logits, std::size_t target, std::size_t k, std::size_t first_item) {
  if (k == 0) throw std::invalid_argument("rank_metrics: k must be at least 1");
  if (target >= logits.size() || target < first_item) throw std::out_of_range("rank_metrics: target out of range");
  const double zt = logits[target];
  std::size_t ahead = 0;
  for (std::size_t i = first_item; i < logits.size(); ++i) {
    if (logits[i] > zt || (logits[i] == zt && i < target)) ++ahead;
  }
  RankResult r;
  r.rank = ahead + 1;
  if (r.rank <= k) {
    r.recall = 1.0;
    r.rr = 1.0 / static_cast<double>(r.rank);
    r.ndcg = 1.0 / std::log2(static_cast<double>(r.rank) + 1.0);
  }
  return r;
}

double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

MetricsReport aggregate(std::span<const RankResult> results, std::size_t k) {
  MetricsReport r;
  r.k = k;
  r.count = results.size();
  if (results.empty()) return r;
  std::vector<double> rec, rr, nd;
  for (const auto& x : results) {
    rec.push_back(x.recall);
    rr.push_back(x.rr);
    nd.push_back(x.ndcg);
  }
  const double n = static_cast<double>(results.size());
  r.recall = pairwise_sum(rec) / n;
  r.mrr = pairwise_sum(rr) / n;
  r.ndcg = pairwise_sum(nd) / n;
  return r;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"k", r.k},
                     {"count", r.count},
                     {"recall_at_k", r.recall},
                     {"mrr_at_k", r.mrr},
                     {"ndcg_at_k", r.ndcg}};
}

void to_json(nlohmann::json& j, const SegmentReport& r) {
  j = nlohmann::json{{"k", r.k}, {"overall", r.overall}, {"segments", r.segments}};
  if (!r.baseline.empty()) {
    j["baseline"] = r.baseline;
    j["ndcg_delta"] = r.ndcg_delta;
    j["recall_delta"] = r.recall_delta;
    j["mrr_delta"] = r.mrr_delta;
  }
}

namespace {

std::vector<MetricsReport> per_segment(const std::vector<std::vector<Example>>& parts, const ExampleEvalFn& eval,
                                       std::size_t k, std::vector<RankResult>& all) {
  std::vector<MetricsReport> out;
  for (const auto& part : parts) {
    auto res = eval(part);
    if (res.size() != part.size()) throw std::logic_error("segment_analysis: evaluator returned wrong count");
    out.push_back(aggregate(res, k));
    all.insert(all.end(), res.begin(), res.end());
  }
  return out;
}

}  // namespace

SegmentReport segment_analysis(const std::vector<Example>& test, const ExampleEvalFn& eval, std::size_t k,
                               std::size_t segments) {
  SegmentReport r;
  r.k = k;
  std::vector<RankResult> all;
  r.segments = per_segment(segment_test_by_time(test, segments), eval, k, all);
  r.overall = aggregate(all, k);
  return r;
}

SegmentReport segment_analysis(const std::vector<Example>& test, const ExampleEvalFn& eval,
                               const ExampleEvalFn& baseline, std::size_t k, std::size_t segments) {
  const auto parts = segment_test_by_time(test, segments);
  SegmentReport r;
  r.k = k;
  std::vector<RankResult> all, base_all;
  r.segments = per_segment(parts, eval, k, all);
  r.baseline = per_segment(parts, baseline, k, base_all);
  r.overall = aggregate(all, k);
  for (std::size_t s = 0; s < parts.size(); ++s) {
    r.ndcg_delta.push_back(r.segments[s].ndcg - r.baseline[s].ndcg);
    r.recall_delta.push_back(r.segments[s].recall - r.baseline[s].recall);
    r.mrr_delta.push_back(r.segments[s].mrr - r.baseline[s].mrr);
  }
  return r;
}

void to_json(nlohmann::json& j, const ThroughputReport& r) {
  j = nlohmann::json{{"its_per_sec", r.its_per_sec}, {"batch_size", r.batch_size},
                     {"adaptation", r.adaptation},   {"warmup", r.warmup},
                     {"reps", r.reps},               {"median_seconds", r.median_seconds},
                     {"total_seconds", r.total_seconds}};
}

ThroughputReport throughput(const std::function<void(const Batch&)>& fn, const std::vector<Batch>& batches,
                            std::size_t warmup, std::size_t reps, bool adaptation) {
  if (reps == 0) throw std::invalid_argument("throughput: reps must be at least 1");
  if (batches.empty()) throw std::invalid_argument("throughput: no batches");
  using clock = std::chrono::steady_clock;
  ThroughputReport r;
  r.adaptation = adaptation;
  r.warmup = warmup;
  r.reps = reps;
  r.batch_size = batches.front().rows;
  std::vector<double> times;
  for (std::size_t i = 0; i < warmup + reps; ++i) {
    const Batch& b = batches[i % batches.size()];
    const auto t0 = clock::now();
    fn(b);
    const double dt = std::chrono::duration<double>(clock::now() - t0).count();
    if (i >= warmup) times.push_back(dt);
  }
  r.total_seconds = pairwise_sum(times);
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  r.median_seconds = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
  r.its_per_sec = r.median_seconds > 0 ? 1.0 / r.median_seconds : std::numeric_limits<double>::infinity();
  return r;
}

void write_ranks_csv(std::ostream& out, const std::vector<Example>& examples, std::span<const RankResult> results) {
  if (examples.size() != results.size()) throw std::invalid_argument("write_ranks_csv: size mismatch");
  out << "example,user,target,rank,recall,rr,ndcg\n";
  out.precision(17);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    out << i << ',' << examples[i].user << ',' << examples[i].target_item << ',' << r.rank << ',' << r.recall << ','
        << r.rr << ',' << r.ndcg << '\n';
  }
}

}  // namespace ssmrec
