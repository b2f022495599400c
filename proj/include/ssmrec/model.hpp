#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssmrec/autograd.hpp"
#include "ssmrec/ingest.hpp"

namespace ssmrec {

struct ModelConfig {
  std::size_t num_items = 0;  // |V| including the padding row
  std::size_t d = 64;
  std::size_t d_state = 32;
  std::size_t conv_width = 4;
  std::size_t d_ff = 256;
  std::size_t layers = 1;
  double dropout = 0.2;
  double init_std = 0.02;
  double layer_norm_eps = 1e-12;
  /// Stop gradients at the re-fed output embedding.
  bool detach_extension = true;
  /// Extension conv window uses the real trailing channels (else zeros).
  bool extension_history = true;

  std::size_t conv_channels() const { return d + 2 * d_state; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Every learnable tensor, keyed by name. Per-block tensors are prefixed
/// "block<k>.". The scalar "block<k>.a_log" parameterises A = −exp(a_log).
struct ModelParams {
  ModelConfig config;
  ag::TensorMap tensors;

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);
  std::uint64_t checksum() const;
  double a_value(std::size_t block = 0) const;
};

std::string block_key(std::size_t block, const std::string& leaf);

enum class Mode { kTrain, kEval };

/// Outputs of the transform stage for one block.
struct TransformOut {
  ag::Var conv_input;  // E⁽²⁾ with padded positions zeroed, [m, L, d + 2ds]
  ag::Var x;           // [m, L, d]
  ag::Var b;           // [m, L, ds]
  ag::Var c;           // [m, L, ds]
  ag::Var delta;       // [m, L]
};

struct Discretized {
  ag::Var abar;  // [m, L]
  ag::Var bbar;  // [m, L, ds]
};

struct StepExtension {
  ag::Var x_hat;   // [m, d]
  ag::Var b_next;  // [m, ds]
  ag::Var c_next;  // [m, ds]
  ag::Var delta_next;  // [m]
};

/// Everything the losses and the prediction need. SSM quantities come from
/// the first block, whose input lives in item-embedding space.
struct ForwardTrace {
  std::size_t rows = 0;
  std::size_t width = 0;
  ag::Var embeddings;  // E_S, [m, L, d]
  TransformOut transform;
  ag::Var a;           // scalar A, shape [1]
  Discretized disc;
  ag::Var y;           // [m, L, d]
  ag::Var h_final;     // hₙ, [m, ds, d]
  ag::Var x_last;      // xₙ, [m, d]
  ag::Var output;      // O of the last block, [m, L, d]
  ag::Var o_last;      // oₙ, [m, d]
  ag::Var logits;      // [m, |V|]
  StepExtension ext;
};

/// Parameter leaves for one forward pass. Creating them as `parameter`
/// makes gradients available; `constant` gives a frozen pass.
ag::VarMap param_vars(const ModelParams& params, bool requires_grad);

ag::Var embed(const ag::VarMap& vars, const Batch& batch, const ModelConfig& cfg, Mode mode, std::mt19937_64& rng);
TransformOut transform(const ag::Var& input, const ag::VarMap& vars, std::size_t block, const ModelConfig& cfg,
                       const ag::Mask& mask);
/// ā = exp(Δ·A), b̄ = Δ·B rowwise. Throws when A ≥ 0.
Discretized discretize(const ag::Var& delta, const ag::Var& a, const ag::Var& b);
ag::Var a_from_log(const ag::Var& a_log);
ag::ScanResult scan(const Discretized& disc, const ag::Var& x, const ag::Var& c, const ag::Mask& mask);
/// Block residual + norm around the SSM output, then the position-wise FFN
/// with its own residual + norm.
ag::Var ffn_and_norm(const ag::Var& y, const ag::Var& block_input, const ag::VarMap& vars, std::size_t block,
                     const ModelConfig& cfg, Mode mode, std::mt19937_64& rng);
/// E·oₙ for every item.
ag::Var predict(const ag::Var& o_last, const ag::VarMap& vars);
StepExtension extend_step(const ag::Var& o_last, const TransformOut& history, const ag::VarMap& vars,
                          const ModelConfig& cfg, bool detach);

ForwardTrace forward_full(const Batch& batch, const ag::VarMap& vars, const ModelConfig& cfg, Mode mode,
                          std::mt19937_64& rng);
/// Eval-mode logits only; no gradient bookkeeping.
Tensor predict_logits(const Batch& batch, const ModelParams& params);

// Checkpoint: "T2AR", u32 version, u64 manifest length, JSON manifest, then
// little-endian float64 arrays at the manifest's byte offsets.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace ssmrec
