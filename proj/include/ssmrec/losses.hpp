#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssmrec/autograd.hpp"
#include "ssmrec/ingest.hpp"
#include "ssmrec/model.hpp"

namespace ssmrec {

struct LossWeights {
  double mu_time_train = 0.1;
  double mu_state_train = 1.0;
  double mu_time_test = 1e-2;
  double mu_state_test = 1e-1;
  double lambda = 1.0;     // interval scale, seconds
  std::size_t block = 10;  // time-loss block size
  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

enum class Phase { kTrain, kTest };

struct StateLossOptions {
  /// Exponent of the Δ_{n+1} divisor. 2 is the standard dilution; 0 disables it.
  double dilution_power = 2.0;
  /// Sign in front of Q̄ ⊗ xₙ in the backward state. −1 matches the bound.
  double backward_q_sign = -1.0;
  /// Δ_{n+1} is clamped from below to this value before any division.
  double min_step = 1e-8;
};

void to_json(nlohmann::json& j, const StateLossOptions& o);
void from_json(const nlohmann::json& j, StateLossOptions& o);

/// Mean cross-entropy of logits[m, V] against targets.
ag::Var rec_loss(const ag::Var& logits, std::span<const std::size_t> targets);
/// Cross-entropy with the padding column dropped (targets are never 0).
ag::Var rec_loss_excluding_padding(const ag::Var& logits, std::span<const std::size_t> targets);

/// Blocked pairwise hinge between step sizes and observed intervals.
/// delta_full [m, C]; intervals and valid are m×C row-major. Valid entries of
/// each row are numbered in column order and cut into blocks of `block`; only
/// pairs inside one block count. Σ hinge / (number of valid pairs).
ag::Var time_alignment_loss(const ag::Var& delta_full, std::span<const double> intervals,
                            std::span<const std::uint8_t> valid, double lambda, std::size_t block);

/// Number of pairs the loss above sums over.
std::size_t time_alignment_pairs(std::size_t rows, std::size_t cols, std::span<const std::uint8_t> valid,
                                 std::size_t block);

/// [Δ ‖ Δ_{n+1}] from a trace, aligned with Batch::intervals.
ag::Var delta_with_next(const ForwardTrace& trace);
ag::Var time_alignment_loss(const ForwardTrace& trace, const Batch& batch, const LossWeights& w);

/// Q = W·xₙ + b; no activation.
ag::Var backward_projection(const ag::Var& x_last, const ag::VarMap& vars);

/// Batched intermediates of the state alignment, one leading row per sequence.
struct StateAlignIntermediates {
  ag::Var p;       // ln(−1/A)/Δ_{n+1}, [m]
  ag::Var p_bar;   // 1/(−A), [1]
  ag::Var q;       // [m, ds]
  ag::Var q_bar;   // Δ_{n+1}·Q, [m, ds]
  ag::Var h_next;  // ĥ_{n+1}, [m, ds, d]
  ag::Var h_back;  // ĥₙᵇ, [m, ds, d]
  ag::Var eps;     // Q + A⁻¹B_{n+1}, [m, ds]
  ag::Var delta;   // Δ_{n+1} after clamping, [m]
};

struct StateAlignResult {
  ag::Var loss;     // mean over rows
  ag::Var per_row;  // [m]
  StateAlignIntermediates inter;
  std::size_t clamped = 0;  // rows whose Δ_{n+1} hit the floor
};

/// Inputs of the state alignment, detached from any particular trace.
struct StateAlignInputs {
  ag::Var h_final;     // hₙ [m, ds, d]
  ag::Var x_last;      // xₙ [m, d]
  ag::Var x_hat;       // x̂_{n+1} [m, d]
  ag::Var b_next;      // B_{n+1} [m, ds]
  ag::Var delta_next;  // Δ_{n+1} [m]
  ag::Var a;           // A [1]
};

StateAlignInputs state_inputs(const ForwardTrace& trace);
StateAlignResult state_alignment_loss(const StateAlignInputs& in, const ag::VarMap& vars,
                                      const StateLossOptions& opts = {});
StateAlignResult state_alignment_loss(const ForwardTrace& trace, const ag::VarMap& vars,
                                      const StateLossOptions& opts = {});

/// Upper bound on the per-row state loss (dilution power 2, minus sign):
/// ‖hₙ‖/Δ² + ‖xₙ‖‖ε‖/Δ + |A|⁻¹‖B_{n+1}‖‖xₙ − x̂‖/Δ. Throws when A > −1.
std::vector<double> theorem_bound(const StateAlignInputs& in, const StateAlignIntermediates& inter);

ag::Var total_loss(const ag::Var& rec, const ag::Var& time, const ag::Var& state, const LossWeights& w, Phase phase);

/// Median of the positive gaps inside each user's training prefix (every
/// interaction except the last two). 1 when no positive gap exists.
double median_positive_interval(const InteractionDataset& ds);

}  // namespace ssmrec
