#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssmrec/autograd.hpp"

namespace ssmrec {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void to_json(nlohmann::json& j, const AdamConfig& c);
void from_json(const nlohmann::json& j, AdamConfig& c);

struct AdamState {
  AdamConfig config;
  ag::TensorMap m;
  ag::TensorMap v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update. Every gradient must be finite, otherwise
/// nothing is modified and NumericError is thrown. Missing gradients count
/// as zero.
void adam_step(ag::TensorMap& params, const ag::GradStore& grads, AdamState& state);

/// θ ← θ − lr·g. Same finiteness contract as adam_step.
void sgd_step(ag::TensorMap& params, const ag::GradStore& grads, double lr);

struct Snapshot {
  ag::TensorMap tensors;
  std::uint64_t checksum = 0;
};

std::uint64_t params_checksum(const ag::TensorMap& params);
Snapshot snapshot(const ag::TensorMap& params);
/// Copies the snapshot back and verifies the checksum. Throws if the
/// parameter set differs in names or shapes.
void restore(ag::TensorMap& params, const Snapshot& snap);

/// Patience-based stopping on a metric where larger is better. A value equal
/// to the best so far does not count as an improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}
  /// Records one evaluation; returns true when training should stop.
  bool update(double metric);
  bool improved_last() const { return improved_last_; }
  double best() const { return best_; }
  std::size_t best_index() const { return best_index_; }
  std::size_t evaluations() const { return count_; }

 private:
  std::size_t patience_;
  std::size_t count_ = 0;
  std::size_t since_best_ = 0;
  std::size_t best_index_ = 0;
  double best_ = 0.0;
  bool improved_last_ = false;
};

/// Replays a metric history; true when the stopper would have stopped.
bool should_stop(const std::vector<double>& history, std::size_t patience);

}  // namespace ssmrec
