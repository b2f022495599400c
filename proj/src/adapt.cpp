#include "ssmrec/adapt.hpp"

#include <chrono>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "ssmrec/optim.hpp"

namespace ssmrec {

void AdaptConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("adapt: learning rate must be non-negative");
  if (!(mu_time >= 0 && mu_state >= 0)) throw std::invalid_argument("adapt: loss weights must be non-negative");
  if (policy == BatchPolicy::kFixedSize && batch_size == 0) throw std::invalid_argument("adapt: batch_size is 0");
}

void to_json(nlohmann::json& j, const AdaptConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"lr", c.lr},
                     {"mu_time", c.mu_time},
                     {"mu_state", c.mu_state},
                     {"use_time", c.use_time},
                     {"use_state", c.use_state},
                     {"policy", c.policy == BatchPolicy::kWholeTestSet ? "whole" : "fixed"},
                     {"batch_size", c.batch_size}};
}

void from_json(const nlohmann::json& j, AdaptConfig& c) {
  const AdaptConfig d;
  c.steps = j.value("steps", d.steps);
  c.lr = j.value("lr", d.lr);
  c.mu_time = j.value("mu_time", d.mu_time);
  c.mu_state = j.value("mu_state", d.mu_state);
  c.use_time = j.value("use_time", d.use_time);
  c.use_state = j.value("use_state", d.use_state);
  const std::string policy = j.value("policy", std::string(d.policy == BatchPolicy::kWholeTestSet ? "whole" : "fixed"));
  if (policy == "whole") {
    c.policy = BatchPolicy::kWholeTestSet;
  } else if (policy == "fixed") {
    c.policy = BatchPolicy::kFixedSize;
  } else {
    throw std::invalid_argument("adapt: unknown batch policy '" + policy + "'");
  }
  c.batch_size = j.value("batch_size", d.batch_size);
}

void to_json(nlohmann::json& j, const AdaptReport& r) {
  j = nlohmann::json{{"batch", r.batch},
                     {"rows", r.rows},
                     {"time_loss", r.time_loss},
                     {"state_loss", r.state_loss},
                     {"pre_logits_checksum", r.pre_logits_checksum},
                     {"post_logits_checksum", r.post_logits_checksum},
                     {"adapt_seconds", r.adapt_seconds},
                     {"predict_seconds", r.predict_seconds},
                     {"restore_seconds", r.restore_seconds},
                     {"restored", r.restored},
                     {"aborted", r.aborted},
                     {"abort_reason", r.abort_reason},
                     {"clamped_steps", r.clamped_steps}};
}

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

// Restores on scope exit so exceptions cannot leak adapted parameters.
class RestoreGuard {
 public:
  RestoreGuard(ModelParams& params, const Snapshot& snap) : params_(params), snap_(snap) {}
  ~RestoreGuard() {
    if (!done_) restore(params_.tensors, snap_);
  }
  void restore_now() {
    restore(params_.tensors, snap_);
    done_ = true;
  }

 private:
  ModelParams& params_;
  const Snapshot& snap_;
  bool done_ = false;
};

}  // namespace

AdaptOutcome adapt_and_predict(const Batch& batch, ModelParams& params, const AdaptConfig& cfg,
                               const LossWeights& weights, const StateLossOptions& state_opts) {
  cfg.validate();
  AdaptOutcome out;
  AdaptReport& rep = out.report;
  rep.rows = batch.rows;
  const Snapshot snap = snapshot(params.tensors);
  RestoreGuard guard(params, snap);

  LossWeights w = weights;
  w.mu_time_test = cfg.use_time ? cfg.mu_time : 0.0;
  w.mu_state_test = cfg.use_state ? cfg.mu_state : 0.0;

  std::mt19937_64 rng(0);  // eval mode never draws
  auto t0 = clock_type::now();
  for (std::size_t step = 0; step < cfg.steps && !rep.aborted; ++step) {
    try {
      ag::VarMap vars = param_vars(params, true);
      ForwardTrace tr = forward_full(batch, vars, params.config, Mode::kEval, rng);
      if (step == 0) rep.pre_logits_checksum = checksum(tr.logits->value.values());
      ag::Var time = time_alignment_loss(tr, batch, w);
      StateAlignResult st = state_alignment_loss(tr, vars, state_opts);
      rep.clamped_steps += st.clamped;
      rep.time_loss.push_back(time->value[0]);
      rep.state_loss.push_back(st.loss->value[0]);
      ag::Var loss = total_loss(ag::constant(Tensor::scalar(0.0)), time, st.loss, w, Phase::kTest);
      if (!std::isfinite(loss->value[0])) throw NumericError("non-finite loss at step " + std::to_string(step));
      sgd_step(params.tensors, ag::grad(loss, vars), cfg.lr);
    } catch (const NumericError& e) {
      rep.aborted = true;
      rep.abort_reason = e.what();
    } catch (const std::domain_error& e) {
      // Diverged parameters, e.g. A pushed to 0 or −∞.
      rep.aborted = true;
      rep.abort_reason = std::string("step ") + std::to_string(step) + ": " + e.what();
    }
  }
  rep.adapt_seconds = seconds_since(t0);

  if (rep.aborted) restore(params.tensors, snap);
  t0 = clock_type::now();
  out.logits = predict_logits(batch, params);
  rep.predict_seconds = seconds_since(t0);
  if (rep.time_loss.empty()) rep.pre_logits_checksum = checksum(out.logits.values());
  rep.post_logits_checksum = checksum(out.logits.values());

  t0 = clock_type::now();
  guard.restore_now();
  rep.restore_seconds = seconds_since(t0);
  rep.restored = params_checksum(params.tensors) == snap.checksum;
  return out;
}

namespace {

std::vector<Batch> batches_for(const std::vector<Example>& examples, BatchOptions opts, std::size_t size) {
  opts.batch_size = std::max<std::size_t>(size, 1);
  return make_batches(examples, opts);
}

void rank_batch(const Batch& b, const Tensor& logits, std::size_t k, std::vector<RankResult>& results) {
  const std::size_t V = logits.dim(1);
  for (std::size_t r = 0; r < b.rows; ++r) {
    std::span<const double> row(logits.data() + r * V, V);
    results[b.example_index[r]] = rank_metrics(row, b.target_item[r], k, 1);
  }
}

}  // namespace

EvalOutcome evaluate_frozen(const std::vector<Example>& examples, const ModelParams& params,
                            const BatchOptions& batching, std::size_t k) {
  EvalOutcome out;
  out.results.resize(examples.size());
  for (const Batch& b : batches_for(examples, batching, batching.batch_size)) {
    rank_batch(b, predict_logits(b, params), k, out.results);
  }
  out.metrics = aggregate(out.results, k);
  return out;
}

EvalOutcome evaluate_with_adaptation(const std::vector<Example>& examples, ModelParams& params,
                                     const AdaptConfig& cfg, const LossWeights& weights,
                                     const StateLossOptions& state_opts, const BatchOptions& batching,
                                     std::size_t k) {
  cfg.validate();
  EvalOutcome out;
  out.results.resize(examples.size());
  const std::size_t size = cfg.policy == BatchPolicy::kWholeTestSet ? examples.size() : cfg.batch_size;
  std::size_t index = 0;
  for (const Batch& b : batches_for(examples, batching, size)) {
    AdaptOutcome a = adapt_and_predict(b, params, cfg, weights, state_opts);
    a.report.batch = index++;
    rank_batch(b, a.logits, k, out.results);
    out.reports.push_back(std::move(a.report));
  }
  out.metrics = aggregate(out.results, k);
  return out;
}

void write_reports_jsonl(std::ostream& out, const std::vector<AdaptReport>& reports) {
  for (const auto& r : reports) out << nlohmann::json(r).dump() << '\n';
}

}  // namespace ssmrec
