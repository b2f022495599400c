#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ssmrec/tensor.hpp"

// Tape-free reverse-mode differentiation. Every primitive builds a Node that
// owns its forward value and a closure that pushes its output gradient into
// the gradients of its parents. Graphs are single-threaded.
namespace ssmrec::ag {

struct Node;
using Var = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  std::vector<Var> parents;
  BackwardFn backward;
  bool requires_grad = false;
  std::string name;

  const Shape& shape() const { return value.shape(); }
  /// Zero-initialised on first use; only called on nodes that require grad.
  Tensor& grad_buffer();
};

using TensorMap = std::map<std::string, Tensor>;
using GradStore = TensorMap;
using VarMap = std::map<std::string, Var>;
using Mask = std::vector<std::uint8_t>;

Var constant(Tensor value);
Var parameter(Tensor value, std::string name);
/// Escape hatch for fused ops defined outside this module. requires_grad is
/// inherited from the parents; `backward` is dropped when no parent needs it.
Var make_node(Tensor value, std::vector<Var> parents, BackwardFn backward);

// Elementwise. Binary ops require identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
/// x scaled by a one-element var s (gradient flows to both).
Var mul_scalar(const Var& x, const Var& s);
Var add_scalar(const Var& a, double c);
Var exp(const Var& a);
Var log(const Var& a);
Var softplus(const Var& a);
Var silu(const Var& a);
Var relu(const Var& a);
Var clamp_min(const Var& a, double lo);

// Linear algebra.
Var matmul(const Var& a, const Var& b);
/// x[..., in] · Wᵀ + b with W laid out [out, in]; `bias` may be null.
Var linear(const Var& x, const Var& weight, const Var& bias);
/// a[p] ⊗ b[q] -> [p, q], or row-batched a[m, p] ⊗ b[m, q] -> [m, p, q].
Var outer_product(const Var& a, const Var& b);
/// x[m, ...] scaled per leading row by s[m].
Var row_scale(const Var& x, const Var& s);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
/// Per-row Frobenius norm for rank ≥ 2 ([m]); whole-tensor norm otherwise.
Var frobenius_norm(const Var& a);

// Shape plumbing.
Var reshape(const Var& a, Shape shape);
Var slice_last(const Var& a, std::size_t start, std::size_t len);
Var slice_axis1(const Var& a, std::size_t start, std::size_t len);
Var select_axis1(const Var& a, std::size_t index);
Var concat_axis1(const Var& a, const Var& b);
Var gather_rows(const Var& table, std::span<const std::size_t> indices);
/// Rows of x[m, L, ...] where mask[m*L] is set, stacked as [count, ...].
Var masked_select(const Var& x, const Mask& mask);
/// x[m, L, ...] with positions where mask is clear replaced by zero.
Var mask_positions(const Var& x, const Mask& mask);
Var stop_gradient(const Var& a);

// Sequence layers.
/// y[b,t,c] = bias[c] + Σ_j kernel[c,j]·x[b, t-(w-1)+j, c], zero history.
Var depthwise_causal_conv1d(const Var& x, const Var& kernel, const Var& bias);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Inverted dropout; identity when `train` is false or rate is 0.
Var dropout(const Var& x, double rate, bool train, std::mt19937_64& rng);
/// Mean over rows of −log softmax(logits[i])[targets[i]].
Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> targets);

/// One recurrence step h = ā·h_prev + b̄ ⊗ x, batched over the leading row.
/// h_prev [m, ds, d], abar [m], bbar [m, ds], x [m, d].
Var scan_step(const Var& h_prev, const Var& abar, const Var& bbar, const Var& x);

struct ScanResult {
  Var y;      // [m, L, d], y_t = h_tᵀ c_t
  Var final;  // [m, ds, d]
};
/// Full recurrence from a zero state. Masked steps carry the state unchanged.
/// abar [m, L], bbar [m, L, ds], x [m, L, d], c [m, L, ds].
ScanResult sequential_scan(const Var& abar, const Var& bbar, const Var& x, const Var& c, const Mask& mask);

/// Runs reverse accumulation from a scalar node.
void backward(const Var& loss);
/// Backward pass, then collects gradients for `params` by name. Parameters
/// the loss does not reach get zeros of their own shape.
GradStore grad(const Var& loss, const VarMap& params);

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct FiniteDiffOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  std::size_t samples = 20;  // distinct coordinates drawn across all parameters
  std::uint64_t seed = 0;
};

struct FiniteDiffFailure {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct FiniteDiffReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::vector<FiniteDiffFailure> failures;
  bool passed() const { return failures.empty(); }
};

/// Builds a scalar graph from parameter vars.
using GraphFn = std::function<Var(const VarMap&)>;

/// Compares reverse-mode gradients of `f` against central differences
/// (f(θ+εe) − f(θ−εe)) / 2ε on randomly sampled coordinates.
FiniteDiffReport finite_diff_check(const GraphFn& f, const TensorMap& params, const FiniteDiffOptions& opts);

}  // namespace ssmrec::ag
