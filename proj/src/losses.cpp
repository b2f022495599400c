#include "ssmrec/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ssmrec {

using ag::Var;

void LossWeights::validate() const {
  if (!(mu_time_train >= 0 && mu_state_train >= 0 && mu_time_test >= 0 && mu_state_test >= 0)) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
  if (!(lambda > 0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be positive and finite");
  if (block < 2) throw std::invalid_argument("time-loss block size must be at least 2");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"mu_time_train", w.mu_time_train}, {"mu_state_train", w.mu_state_train},
                     {"mu_time_test", w.mu_time_test},   {"mu_state_test", w.mu_state_test},
                     {"lambda", w.lambda},               {"block", w.block}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  const LossWeights d;
  w.mu_time_train = j.value("mu_time_train", d.mu_time_train);
  w.mu_state_train = j.value("mu_state_train", d.mu_state_train);
  w.mu_time_test = j.value("mu_time_test", d.mu_time_test);
  w.mu_state_test = j.value("mu_state_test", d.mu_state_test);
  w.lambda = j.value("lambda", d.lambda);
  w.block = j.value("block", d.block);
}

void to_json(nlohmann::json& j, const StateLossOptions& o) {
  j = nlohmann::json{{"dilution_power", o.dilution_power},
                     {"backward_q_sign", o.backward_q_sign},
                     {"min_step", o.min_step}};
}

void from_json(const nlohmann::json& j, StateLossOptions& o) {
  const StateLossOptions d;
  o.dilution_power = j.value("dilution_power", d.dilution_power);
  o.backward_q_sign = j.value("backward_q_sign", d.backward_q_sign);
  o.min_step = j.value("min_step", d.min_step);
}

Var rec_loss(const Var& logits, std::span<const std::size_t> targets) {
  return ag::softmax_cross_entropy(logits, targets);
}

Var rec_loss_excluding_padding(const Var& logits, std::span<const std::size_t> targets) {
  const std::size_t V = logits->value.dim(logits->value.rank() - 1);
  std::vector<std::size_t> shifted(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == 0) throw std::invalid_argument("rec_loss: target is the padding item");
    shifted[i] = targets[i] - 1;
  }
  return ag::softmax_cross_entropy(ag::slice_last(logits, 1, V - 1), shifted);
}

// ---------------------------------------------------------------------------
// Time alignment

namespace {

struct Pair {
  std::size_t i, j;  // flat indices
};

std::vector<Pair> block_pairs(std::size_t rows, std::size_t cols, std::span<const std::uint8_t> valid,
                              std::size_t block) {
  if (valid.size() != rows * cols) throw ShapeError("time loss: mask size mismatch");
  if (block < 2) throw std::invalid_argument("time loss: block size must be at least 2");
  std::vector<Pair> pairs;
  std::vector<std::size_t> cols_valid;
  for (std::size_t r = 0; r < rows; ++r) {
    cols_valid.clear();
    for (std::size_t c = 0; c < cols; ++c)
      if (valid[r * cols + c]) cols_valid.push_back(r * cols + c);
    for (std::size_t start = 0; start < cols_valid.size(); start += block) {
      const std::size_t end = std::min(start + block, cols_valid.size());
      for (std::size_t a = start; a < end; ++a)
        for (std::size_t b = a + 1; b < end; ++b) pairs.push_back({cols_valid[a], cols_valid[b]});
    }
  }
  return pairs;
}

}  // namespace

std::size_t time_alignment_pairs(std::size_t rows, std::size_t cols, std::span<const std::uint8_t> valid,
                                 std::size_t block) {
  return block_pairs(rows, cols, valid, block).size();
}

Var time_alignment_loss(const Var& delta_full, std::span<const double> intervals, std::span<const std::uint8_t> valid,
                        double lambda, std::size_t block) {
  if (!(lambda > 0)) throw std::invalid_argument("time loss: lambda must be positive");
  const Tensor& D = delta_full->value;
  if (D.rank() != 2) throw ShapeError("time loss: Δ must be [m, C], got " + shape_str(D.shape()));
  const std::size_t rows = D.dim(0), cols = D.dim(1);
  if (intervals.size() != rows * cols) throw ShapeError("time loss: interval size mismatch");
  auto pairs = std::make_shared<std::vector<Pair>>(block_pairs(rows, cols, valid, block));
  auto scaled = std::make_shared<std::vector<double>>(pairs->size());
  double total = 0.0;
  for (std::size_t p = 0; p < pairs->size(); ++p) {
    const auto [i, j] = (*pairs)[p];
    const double t = (intervals[i] - intervals[j]) / lambda;
    (*scaled)[p] = t;
    total += std::max(0.0, 1.0 - (D[i] - D[j]) * t);
  }
  const double n = static_cast<double>(pairs->size());
  Tensor value = Tensor::scalar(pairs->empty() ? 0.0 : total / n);
  return ag::make_node(std::move(value), {delta_full}, [pairs, scaled, n](ag::Node& self) {
    if (pairs->empty()) return;
    const Var& dv = self.parents[0];
    const Tensor& D = dv->value;
    Tensor& g = dv->grad_buffer();
    const double go = self.grad[0] / n;
    for (std::size_t p = 0; p < pairs->size(); ++p) {
      const auto [i, j] = (*pairs)[p];
      const double t = (*scaled)[p];
      if (1.0 - (D[i] - D[j]) * t > 0.0) {
        g[i] -= go * t;
        g[j] += go * t;
      }
    }
  });
}

Var delta_with_next(const ForwardTrace& trace) {
  const std::size_t m = trace.rows;
  return ag::concat_axis1(trace.transform.delta, ag::reshape(trace.ext.delta_next, Shape{m, 1}));
}

Var time_alignment_loss(const ForwardTrace& trace, const Batch& batch, const LossWeights& w) {
  if (batch.pad_side != PadSide::kLeft) throw std::invalid_argument("time loss: expects left padding");
  return time_alignment_loss(delta_with_next(trace), batch.intervals, batch.interval_mask, w.lambda, w.block);
}

// ---------------------------------------------------------------------------
// State alignment

Var backward_projection(const Var& x_last, const ag::VarMap& vars) {
  return ag::linear(x_last, vars.at("back_proj.weight"), vars.at("back_proj.bias"));
}

StateAlignInputs state_inputs(const ForwardTrace& trace) {
  return {trace.h_final, trace.x_last, trace.ext.x_hat, trace.ext.b_next, trace.ext.delta_next, trace.a};
}

StateAlignResult state_alignment_loss(const StateAlignInputs& in, const ag::VarMap& vars,
                                      const StateLossOptions& opts) {
  if (in.a->value.size() != 1) throw ShapeError("state loss: A must be a scalar");
  if (!(in.a->value[0] < 0.0)) throw std::domain_error("stability violated: A must be negative");
  const std::size_t m = in.delta_next->value.size();
  StateAlignResult r;
  for (double v : in.delta_next->value.values())
    if (v < opts.min_step) ++r.clamped;
  auto& it = r.inter;
  it.delta = ag::clamp_min(in.delta_next, opts.min_step);

  const Var one = ag::constant(Tensor::vector({1.0}));
  const Var neg_a = ag::neg(in.a);
  it.p_bar = ag::div(one, neg_a);
  it.p = ag::mul_scalar(ag::div(ag::constant(Tensor({m}, 1.0)), it.delta), ag::log(it.p_bar));

  const Var abar = ag::exp(ag::mul_scalar(it.delta, in.a));
  it.h_next = ag::add(ag::row_scale(in.h_final, abar),
                      ag::row_scale(ag::outer_product(in.b_next, in.x_hat), it.delta));

  it.q = backward_projection(in.x_last, vars);
  it.q_bar = ag::row_scale(it.q, it.delta);
  Var q_term = ag::outer_product(it.q_bar, in.x_last);
  it.h_back = ag::add(ag::mul_scalar(it.h_next, it.p_bar), ag::scale(q_term, opts.backward_q_sign));
  it.eps = ag::add(it.q, ag::mul_scalar(in.b_next, ag::div(one, in.a)));

  Var norm = ag::frobenius_norm(ag::sub(in.h_final, it.h_back));
  if (opts.dilution_power == 0.0) {
    r.per_row = norm;
  } else if (opts.dilution_power == 2.0) {
    r.per_row = ag::div(norm, ag::mul(it.delta, it.delta));
  } else {
    r.per_row = ag::div(norm, ag::exp(ag::scale(ag::log(it.delta), opts.dilution_power)));
  }
  r.loss = ag::mean(r.per_row);
  return r;
}

StateAlignResult state_alignment_loss(const ForwardTrace& trace, const ag::VarMap& vars,
                                      const StateLossOptions& opts) {
  return state_alignment_loss(state_inputs(trace), vars, opts);
}

namespace {

double norm2(const double* p, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += p[i] * p[i];
  return std::sqrt(s);
}

}  // namespace

std::vector<double> theorem_bound(const StateAlignInputs& in, const StateAlignIntermediates& inter) {
  const double a = in.a->value[0];
  if (a > -1.0) throw std::domain_error("bound precondition violated: A must be at most -1");
  const std::size_t m = inter.delta->value.size();
  const std::size_t d = in.x_last->value.dim(1);
  const std::size_t ds = in.b_next->value.dim(1);
  std::vector<double> out(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double dt = inter.delta->value[r];
    const double h = norm2(in.h_final->value.data() + r * ds * d, ds * d);
    const double x = norm2(in.x_last->value.data() + r * d, d);
    const double e = norm2(inter.eps->value.data() + r * ds, ds);
    const double b = norm2(in.b_next->value.data() + r * ds, ds);
    double gap = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double v = (in.x_last->value[r * d + k] - in.x_hat->value[r * d + k]) / dt;
      gap += v * v;
    }
    out[r] = h / (dt * dt) + x * e / dt + b * std::sqrt(gap) / std::abs(a);
  }
  return out;
}

Var total_loss(const Var& rec, const Var& time, const Var& state, const LossWeights& w, Phase phase) {
  if (phase == Phase::kTrain) {
    return ag::add(rec, ag::add(ag::scale(time, w.mu_time_train), ag::scale(state, w.mu_state_train)));
  }
  return ag::add(ag::scale(time, w.mu_time_test), ag::scale(state, w.mu_state_test));
}

double median_positive_interval(const InteractionDataset& ds) {
  std::vector<double> gaps;
  for (const auto& u : ds.users) {
    const std::size_t n = u.timestamps.size();
    if (n < 3) continue;
    for (std::size_t i = 1; i + 2 < n; ++i) {
      const auto g = u.timestamps[i] - u.timestamps[i - 1];
      if (g > 0) gaps.push_back(static_cast<double>(g));
    }
  }
  if (gaps.empty()) return 1.0;
  const std::size_t mid = gaps.size() / 2;
  std::nth_element(gaps.begin(), gaps.begin() + mid, gaps.end());
  if (gaps.size() % 2 == 1) return gaps[mid];
  const double hi = gaps[mid];
  const double lo = *std::max_element(gaps.begin(), gaps.begin() + mid);
  return 0.5 * (lo + hi);
}

}  // namespace ssmrec
