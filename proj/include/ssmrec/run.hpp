#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssmrec/adapt.hpp"
#include "ssmrec/eval.hpp"
#include "ssmrec/ingest.hpp"
#include "ssmrec/losses.hpp"
#include "ssmrec/model.hpp"
#include "ssmrec/optim.hpp"

namespace ssmrec {

/// Every problem found while validating a config, reported at once.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct DataConfig {
  /// TSV with user_id, item_id, timestamp columns. Empty means generate.
  std::string path;
  ShiftGeneratorConfig generator;
  std::uint64_t generator_seed = 0;
  /// k-core filter threshold; 0 disables filtering.
  std::size_t min_interactions = 0;
  std::size_t max_len = 50;
};

struct TrainConfig {
  AdamConfig adam;
  std::size_t epochs = 500;
  std::size_t batch_size = 4096;
  std::size_t eval_every = 10;
  std::size_t patience = 3;
  bool use_time = true;
  bool use_state = true;
};

struct RunConfig {
  std::string preset = "main";
  DataConfig data;
  ModelConfig model;  // num_items is filled from the data
  LossWeights loss;
  /// When set, λ is the median positive training interval.
  bool lambda_auto = true;
  StateLossOptions state;
  TrainConfig train;
  AdaptConfig adapt;
  std::size_t k = 10;
  std::size_t segments = 4;
  std::size_t throughput_warmup = 1;
  std::size_t throughput_reps = 5;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::string precision = "f64";

  /// Throws ConfigError listing every violated precondition.
  void validate() const;
};

/// "main" follows the main-text settings, "appendix" the appendix table.
RunConfig preset_config(const std::string& name);

void to_json(nlohmann::json& j, const RunConfig& c);
/// Fields absent from `j` keep the values of the preset named in `j`
/// ("main" when absent).
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

/// Applies "time", "state", "time-test", "state-test", "time-train",
/// "state-train", "both", "both-test", "both-train".
void apply_ablation(RunConfig& cfg, const std::string& flag);

struct PreparedData {
  InteractionDataset dataset;
  SplitDataset split;
  double lambda = 1.0;
};

/// Loads or generates the data, splits it and resolves λ and num_items.
PreparedData prepare_data(RunConfig& cfg);

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double rec = 0.0;
  double time = 0.0;
  double state = 0.0;
  std::optional<double> valid_ndcg;
  bool best = false;
};

void to_json(nlohmann::json& j, const EpochLog& e);

struct TrainResult {
  ModelParams best;
  std::vector<EpochLog> log;
  double best_valid_ndcg = 0.0;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

/// Adam on the train-phase total loss. Validation NDCG@k is computed every
/// eval_every epochs and after the last one; the best parameters are kept.
/// Every epoch is appended to `log_out` as one JSON line when given.
TrainResult train_model(const RunConfig& cfg, const PreparedData& data, std::ostream* log_out = nullptr);

struct EvalReport {
  EvalOutcome outcome;
  SegmentReport segments;
  std::optional<ThroughputReport> throughput;
};

/// Test-split evaluation, frozen or with test-time adaptation. With
/// adaptation the segment report carries the delta over the frozen model.
EvalReport evaluate_run(const RunConfig& cfg, const PreparedData& data, ModelParams& params, bool ttt,
                        bool measure_throughput);

/// Git-style blob SHA-1 of a file, as printed by `git hash-object`.
std::string file_digest(const std::filesystem::path& path);

struct GradcheckEntry {
  std::string loss;
  std::uint64_t seed = 0;
  ag::FiniteDiffReport report;
};

/// Finite-difference checks of the recommendation, time, state and total
/// losses on a tiny model, for each seed in [0, seeds).
std::vector<GradcheckEntry> gradcheck_suite(std::size_t seeds, std::size_t samples, double tol);

// Commands. Each writes its artifacts plus manifest.json into cfg.out_dir.
void cmd_gen(const RunConfig& cfg);
void cmd_train(RunConfig cfg);
void cmd_eval(RunConfig cfg, const std::filesystem::path& checkpoint, bool ttt);
/// Returns false when any check fails.
bool cmd_gradcheck(const RunConfig& cfg);
/// Train + frozen/adapted eval for every (μ1, μ2) train-weight pair.
void cmd_sweep(RunConfig cfg, const std::vector<double>& grid);

}  // namespace ssmrec
