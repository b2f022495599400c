#include "ssmrec/run.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace ssmrec {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join_problems(const std::vector<std::string>& p) {
  std::string s = "invalid configuration:";
  for (const auto& x : p) s += "\n  - " + x;
  return s;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::invalid_argument(join_problems(problems)), problems_(std::move(problems)) {}

// ---------------------------------------------------------------------------
// Config

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  c.model.d = 64;
  c.model.d_state = 32;
  c.model.conv_width = 4;
  c.model.d_ff = 256;
  c.model.layers = 1;
  c.model.dropout = 0.2;
  c.adapt.steps = 1;
  c.adapt.policy = BatchPolicy::kWholeTestSet;
  if (name == "main") {
    c.train.adam.lr = 1e-3;
    c.adapt.lr = 0.005;
    c.adapt.mu_time = 1e-2;
    c.adapt.mu_state = 1e-1;
  } else if (name == "appendix") {
    c.train.adam.lr = 1e-2;
    c.adapt.lr = 0.05;
    c.adapt.mu_time = 1e-3;
    c.adapt.mu_state = 1e-2;
  } else {
    throw ConfigError({"unknown preset '" + name + "' (expected main or appendix)"});
  }
  c.loss.mu_time_test = c.adapt.mu_time;
  c.loss.mu_state_test = c.adapt.mu_state;
  return c;
}

void RunConfig::validate() const {
  std::vector<std::string> p;
  auto guard = [&](auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      p.emplace_back(e.what());
    }
  };
  if (preset != "main" && preset != "appendix") p.push_back("preset must be main or appendix");
  if (!data.path.empty() && !fs::exists(data.path)) p.push_back("data file not found: " + data.path);
  if (data.path.empty()) {
    const auto& g = data.generator;
    if (g.users == 0) p.push_back("generator.users must be positive");
    if (g.items < g.clusters || g.clusters == 0) p.push_back("generator needs 0 < clusters <= items");
    if (g.min_len < 3 || g.min_len > g.max_len) p.push_back("generator needs 3 <= min_len <= max_len");
  }
  if (data.min_interactions != 0 && data.min_interactions < 3) p.push_back("min_interactions must be 0 or >= 3");
  if (data.max_len == 0) p.push_back("data.max_len must be positive");
  guard([&] {
    ModelConfig m = model;
    if (m.num_items == 0) m.num_items = 2;
    m.validate();
  });
  guard([&] { loss.validate(); });
  guard([&] { adapt.validate(); });
  if (!(state.min_step > 0)) p.push_back("state.min_step must be positive");
  if (state.backward_q_sign != 1.0 && state.backward_q_sign != -1.0) p.push_back("state.backward_q_sign must be +1 or -1");
  if (!(train.adam.lr >= 0)) p.push_back("train.adam.lr must be non-negative");
  if (!(train.adam.beta1 >= 0 && train.adam.beta1 < 1 && train.adam.beta2 >= 0 && train.adam.beta2 < 1)) {
    p.push_back("adam betas must lie in [0, 1)");
  }
  if (!(train.adam.eps > 0)) p.push_back("train.adam.eps must be positive");
  if (train.epochs == 0) p.push_back("train.epochs must be positive");
  if (train.batch_size == 0) p.push_back("train.batch_size must be positive");
  if (train.eval_every == 0) p.push_back("train.eval_every must be positive");
  if (train.patience == 0) p.push_back("train.patience must be positive");
  if (k == 0) p.push_back("k must be positive");
  if (segments < 2) p.push_back("segments must be at least 2");
  if (throughput_reps == 0) p.push_back("throughput_reps must be positive");
  if (precision != "f64") p.push_back("precision '" + precision + "' unsupported (only f64)");
  if (!p.empty()) throw ConfigError(std::move(p));
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"preset", c.preset},
           {"data",
            {{"path", c.data.path},
             {"generator", c.data.generator},
             {"generator_seed", c.data.generator_seed},
             {"min_interactions", c.data.min_interactions},
             {"max_len", c.data.max_len}}},
           {"model", c.model},
           {"loss", c.loss},
           {"lambda_auto", c.lambda_auto},
           {"state", c.state},
           {"train",
            {{"adam", c.train.adam},
             {"epochs", c.train.epochs},
             {"batch_size", c.train.batch_size},
             {"eval_every", c.train.eval_every},
             {"patience", c.train.patience},
             {"use_time", c.train.use_time},
             {"use_state", c.train.use_state}}},
           {"adapt", c.adapt},
           {"k", c.k},
           {"segments", c.segments},
           {"throughput_warmup", c.throughput_warmup},
           {"throughput_reps", c.throughput_reps},
           {"seed", c.seed},
           {"out_dir", c.out_dir},
           {"precision", c.precision}};
}

namespace {

RunConfig parse_full(const json& j) {
  RunConfig c;
  c.preset = j.at("preset").get<std::string>();
  const auto& d = j.at("data");
  c.data.path = d.at("path").get<std::string>();
  c.data.generator = d.at("generator").get<ShiftGeneratorConfig>();
  c.data.generator_seed = d.at("generator_seed").get<std::uint64_t>();
  c.data.min_interactions = d.at("min_interactions").get<std::size_t>();
  c.data.max_len = d.at("max_len").get<std::size_t>();
  c.model = j.at("model").get<ModelConfig>();
  c.loss = j.at("loss").get<LossWeights>();
  c.lambda_auto = j.at("lambda_auto").get<bool>();
  c.state = j.at("state").get<StateLossOptions>();
  const auto& t = j.at("train");
  c.train.adam = t.at("adam").get<AdamConfig>();
  c.train.epochs = t.at("epochs").get<std::size_t>();
  c.train.batch_size = t.at("batch_size").get<std::size_t>();
  c.train.eval_every = t.at("eval_every").get<std::size_t>();
  c.train.patience = t.at("patience").get<std::size_t>();
  c.train.use_time = t.at("use_time").get<bool>();
  c.train.use_state = t.at("use_state").get<bool>();
  c.adapt = j.at("adapt").get<AdaptConfig>();
  c.k = j.at("k").get<std::size_t>();
  c.segments = j.at("segments").get<std::size_t>();
  c.throughput_warmup = j.at("throughput_warmup").get<std::size_t>();
  c.throughput_reps = j.at("throughput_reps").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.out_dir = j.at("out_dir").get<std::string>();
  c.precision = j.at("precision").get<std::string>();
  // The adaptation weights are the test-phase weights.
  c.loss.mu_time_test = c.adapt.mu_time;
  c.loss.mu_state_test = c.adapt.mu_state;
  return c;
}

}  // namespace

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError({"config must be a JSON object"});
  json base = preset_config(j.value("preset", std::string("main")));
  base.merge_patch(j);
  try {
    return parse_full(base);
  } catch (const json::exception& e) {
    throw ConfigError({std::string("malformed config: ") + e.what()});
  }
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config " + path.string()});
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError({"config " + path.string() + " is not valid JSON: " + e.what()});
  }
  return config_from_json(j);
}

void apply_ablation(RunConfig& cfg, const std::string& flag) {
  const bool train = flag == "time" || flag == "state" || flag == "both" || flag.ends_with("-train");
  const bool test = flag == "time" || flag == "state" || flag == "both" || flag.ends_with("-test");
  const bool time = flag.starts_with("time") || flag.starts_with("both");
  const bool state = flag.starts_with("state") || flag.starts_with("both");
  static const std::vector<std::string> known = {"time",      "state",      "both",      "time-test", "state-test",
                                                 "both-test", "time-train", "state-train", "both-train"};
  if (std::find(known.begin(), known.end(), flag) == known.end()) {
    throw ConfigError({"unknown ablation '" + flag + "'"});
  }
  if (train && time) cfg.train.use_time = false;
  if (train && state) cfg.train.use_state = false;
  if (test && time) cfg.adapt.use_time = false;
  if (test && state) cfg.adapt.use_state = false;
}

// ---------------------------------------------------------------------------
// Data

PreparedData prepare_data(RunConfig& cfg) {
  PreparedData out;
  if (cfg.data.path.empty()) {
    out.dataset = synth_shift_generate(cfg.data.generator, cfg.data.generator_seed).dataset;
  } else {
    out.dataset = load_tsv(cfg.data.path);
  }
  if (cfg.data.min_interactions > 0) out.dataset = filter_min_interactions(out.dataset, cfg.data.min_interactions);
  out.split = leave_one_out_split(out.dataset);
  if (cfg.lambda_auto) cfg.loss.lambda = median_positive_interval(out.dataset);
  out.lambda = cfg.loss.lambda;
  cfg.model.num_items = out.dataset.num_items();
  return out;
}

// ---------------------------------------------------------------------------
// Training

void to_json(json& j, const EpochLog& e) {
  j = json{{"epoch", e.epoch}, {"loss", e.loss}, {"rec", e.rec}, {"time", e.time}, {"state", e.state}};
  if (e.valid_ndcg) {
    j["valid_ndcg"] = *e.valid_ndcg;
    j["best"] = e.best;
  }
}

namespace {

BatchOptions batching(const RunConfig& cfg, std::size_t batch_size) {
  BatchOptions o;
  o.max_len = cfg.data.max_len;
  o.batch_size = std::max<std::size_t>(batch_size, 1);
  o.pad_side = PadSide::kLeft;
  return o;
}

}  // namespace

TrainResult train_model(const RunConfig& cfg, const PreparedData& data, std::ostream* log_out) {
  cfg.validate();
  if (data.split.train.empty()) throw DataError("no training examples");
  TrainResult result;
  ModelParams params = ModelParams::init(cfg.model, cfg.seed);
  result.best = params;
  AdamState adam{cfg.train.adam, {}, {}, 0};
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  LossWeights w = cfg.loss;
  if (!cfg.train.use_time) w.mu_time_train = 0.0;
  if (!cfg.train.use_state) w.mu_state_train = 0.0;
  const BatchOptions train_opts = batching(cfg, cfg.train.batch_size);
  EarlyStopper stopper(cfg.train.patience);

  std::vector<std::size_t> order(data.split.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Example> shuffled(order.size());
  for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); ++i) shuffled[i] = data.split.train[order[i]];
    EpochLog entry;
    entry.epoch = epoch;
    double rows = 0.0;
    std::size_t batch_index = 0;
    for (const Batch& b : make_batches(shuffled, train_opts)) {
      ag::VarMap vars = param_vars(params, true);
      ForwardTrace tr = forward_full(b, vars, cfg.model, Mode::kTrain, rng);
      ag::Var rec = rec_loss_excluding_padding(tr.logits, b.target_item);
      ag::Var time = time_alignment_loss(tr, b, w);
      ag::Var state = state_alignment_loss(tr, vars, cfg.state).loss;
      ag::Var total = total_loss(rec, time, state, w, Phase::kTrain);
      if (!std::isfinite(total->value[0])) {
        std::ostringstream msg;
        msg << "non-finite training loss at epoch " << epoch << ", batch " << batch_index << " (rec "
            << rec->value[0] << ", time " << time->value[0] << ", state " << state->value[0] << ", A "
            << tr.a->value[0] << ")";
        throw NumericError(msg.str());
      }
      adam_step(params.tensors, ag::grad(total, vars), adam);
      const double n = static_cast<double>(b.rows);
      entry.loss += n * total->value[0];
      entry.rec += n * rec->value[0];
      entry.time += n * time->value[0];
      entry.state += n * state->value[0];
      rows += n;
      ++batch_index;
    }
    entry.loss /= rows;
    entry.rec /= rows;
    entry.time /= rows;
    entry.state /= rows;

    bool stop = false;
    if (epoch % cfg.train.eval_every == 0 || epoch == cfg.train.epochs) {
      const double ndcg = evaluate_frozen(data.split.valid, params, train_opts, cfg.k).metrics.ndcg;
      entry.valid_ndcg = ndcg;
      stop = stopper.update(ndcg);
      if (stopper.improved_last()) {
        entry.best = true;
        result.best = params;
        result.best_valid_ndcg = ndcg;
        result.best_epoch = epoch;
      }
    }
    if (log_out) *log_out << json(entry).dump() << '\n';
    result.log.push_back(entry);
    if (stop) {
      result.early_stopped = epoch < cfg.train.epochs;
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport evaluate_run(const RunConfig& cfg, const PreparedData& data, ModelParams& params, bool ttt,
                        bool measure_throughput) {
  cfg.validate();
  const auto& test = data.split.test;
  const std::size_t size = cfg.adapt.policy == BatchPolicy::kWholeTestSet ? test.size() : cfg.adapt.batch_size;
  const BatchOptions opts = batching(cfg, size);
  auto frozen = [&](const std::vector<Example>& ex) { return evaluate_frozen(ex, params, opts, cfg.k).results; };
  auto adapted = [&](const std::vector<Example>& ex) {
    return evaluate_with_adaptation(ex, params, cfg.adapt, cfg.loss, cfg.state, opts, cfg.k).results;
  };
  EvalReport rep;
  if (ttt) {
    rep.outcome = evaluate_with_adaptation(test, params, cfg.adapt, cfg.loss, cfg.state, opts, cfg.k);
    rep.segments = segment_analysis(test, adapted, frozen, cfg.k, cfg.segments);
  } else {
    rep.outcome = evaluate_frozen(test, params, opts, cfg.k);
    rep.segments = segment_analysis(test, frozen, cfg.k, cfg.segments);
  }
  if (measure_throughput) {
    const auto batches = make_batches(test, batching(cfg, cfg.adapt.batch_size));
    std::function<void(const Batch&)> fn;
    if (ttt) {
      fn = [&](const Batch& b) { adapt_and_predict(b, params, cfg.adapt, cfg.loss, cfg.state); };
    } else {
      fn = [&](const Batch& b) { predict_logits(b, params); };
    }
    rep.throughput = throughput(fn, batches, cfg.throughput_warmup, cfg.throughput_reps, ttt);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient checks

std::vector<GradcheckEntry> gradcheck_suite(std::size_t seeds, std::size_t samples, double tol) {
  std::vector<GradcheckEntry> out;
  static const char* names[] = {"rec", "time", "state", "total"};
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    ModelConfig cfg;
    cfg.num_items = 20;
    cfg.d = 8;
    cfg.d_state = 4;
    cfg.conv_width = 4;
    cfg.d_ff = 16;
    cfg.dropout = 0.0;
    cfg.init_std = 0.3;
    cfg.detach_extension = false;  // a stop-gradient has no finite-difference counterpart
    const ModelParams params = ModelParams::init(cfg, 1000 + seed);

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> item(1, cfg.num_items - 1);
    std::uniform_int_distribution<std::int64_t> gap(1, 500);
    std::uniform_int_distribution<std::size_t> len(4, 6);
    std::vector<Example> ex(4);
    for (auto& e : ex) {
      std::int64_t t = 0;
      const std::size_t n = len(rng);
      for (std::size_t i = 0; i < n; ++i) {
        e.items.push_back(item(rng));
        e.timestamps.push_back(t);
        t += gap(rng);
      }
      e.target_item = item(rng);
      e.target_timestamp = t;
    }
    BatchOptions bo;
    bo.max_len = 6;
    bo.batch_size = ex.size();
    const Batch batch = make_batch(ex, 0, ex.size(), bo);
    LossWeights w;
    w.lambda = 250.0;
    w.block = 3;

    for (int which = 0; which < 4; ++which) {
      auto f = [&, which](const ag::VarMap& vars) {
        std::mt19937_64 r(0);
        ForwardTrace tr = forward_full(batch, vars, cfg, Mode::kEval, r);
        ag::Var rec = rec_loss_excluding_padding(tr.logits, batch.target_item);
        if (which == 0) return rec;
        ag::Var time = time_alignment_loss(tr, batch, w);
        if (which == 1) return time;
        ag::Var state = state_alignment_loss(tr, vars).loss;
        if (which == 2) return state;
        return total_loss(rec, time, state, w, Phase::kTrain);
      };
      ag::FiniteDiffOptions o;
      o.samples = samples;
      o.tol = tol;
      o.seed = seed * 16 + static_cast<std::uint64_t>(which);
      out.push_back({names[which], seed, ag::finite_diff_check(f, params.tensors, o)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  // Same digest as `git hash-object`.
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

namespace {

fs::path out_dir(const RunConfig& cfg) {
  fs::path p(cfg.out_dir);
  fs::create_directories(p);
  return p;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void check_architecture(const ModelConfig& have, const ModelConfig& want) {
  std::vector<std::string> p;
  auto cmp = [&](const char* name, std::size_t a, std::size_t b) {
    if (a != b) p.push_back(std::string("checkpoint ") + name + " = " + std::to_string(a) + " but config has " +
                            std::to_string(b));
  };
  cmp("num_items", have.num_items, want.num_items);
  cmp("d", have.d, want.d);
  cmp("d_state", have.d_state, want.d_state);
  cmp("conv_width", have.conv_width, want.conv_width);
  cmp("d_ff", have.d_ff, want.d_ff);
  cmp("layers", have.layers, want.layers);
  if (!p.empty()) throw ConfigError(std::move(p));
}

}  // namespace

void cmd_gen(const RunConfig& cfg) {
  cfg.validate();
  const fs::path dir = out_dir(cfg);
  GeneratedData g = synth_shift_generate(cfg.data.generator, cfg.data.generator_seed);
  write_tsv(dir / "data.tsv", g.dataset);
  json m{{"command", "gen"},
         {"generator", cfg.data.generator},
         {"seed", cfg.data.generator_seed},
         {"users", g.dataset.users.size()},
         {"items", g.dataset.num_items() - 1},
         {"interactions", g.dataset.num_interactions()},
         {"switch_times", g.switch_times},
         {"data_digest", file_digest(dir / "data.tsv")}};
  write_json(dir / "manifest.json", m);
}

void cmd_train(RunConfig cfg) {
  cfg.validate();
  const fs::path dir = out_dir(cfg);
  PreparedData data = prepare_data(cfg);
  std::ofstream log(dir / "train_log.jsonl");
  TrainResult r = train_model(cfg, data, &log);
  log.close();
  save_checkpoint(dir / "checkpoint.bin", r.best);
  json m{{"command", "train"},
         {"config", cfg},
         {"lambda", data.lambda},
         {"split", split_manifest(data.split)},
         {"best_epoch", r.best_epoch},
         {"best_valid_ndcg", r.best_valid_ndcg},
         {"epochs_run", r.log.size()},
         {"early_stopped", r.early_stopped},
         {"checkpoint", "checkpoint.bin"},
         {"checkpoint_digest", file_digest(dir / "checkpoint.bin")},
         {"train_log_digest", file_digest(dir / "train_log.jsonl")}};
  write_json(dir / "manifest.json", m);
}

void cmd_eval(RunConfig cfg, const fs::path& checkpoint, bool ttt) {
  cfg.validate();
  const fs::path dir = out_dir(cfg);
  PreparedData data = prepare_data(cfg);
  ModelParams params = load_checkpoint(checkpoint);
  check_architecture(params.config, cfg.model);
  const std::uint64_t before = params.checksum();
  EvalReport rep = evaluate_run(cfg, data, params, ttt, true);
  if (params.checksum() != before) throw NumericError("parameters changed during evaluation");

  write_json(dir / "metrics.json", rep.outcome.metrics);
  write_json(dir / "segments.json", rep.segments);
  if (rep.throughput) write_json(dir / "throughput.json", *rep.throughput);
  {
    std::ofstream csv(dir / "ranks.csv");
    write_ranks_csv(csv, data.split.test, rep.outcome.results);
  }
  if (ttt) {
    std::ofstream jl(dir / "adapt_reports.jsonl");
    write_reports_jsonl(jl, rep.outcome.reports);
  }
  json m{{"command", "eval"},
         {"config", cfg},
         {"ttt", ttt},
         {"checkpoint", fs::absolute(checkpoint).string()},
         {"checkpoint_digest", file_digest(checkpoint)},
         {"metrics_digest", file_digest(dir / "metrics.json")},
         {"segments_digest", file_digest(dir / "segments.json")}};
  write_json(dir / "manifest.json", m);
}

bool cmd_gradcheck(const RunConfig& cfg) {
  const fs::path dir = out_dir(cfg);
  const auto entries = gradcheck_suite(5, 20, 1e-4);
  json j = json::array();
  bool ok = true;
  for (const auto& e : entries) {
    ok = ok && e.report.passed();
    j.push_back({{"loss", e.loss},
                 {"seed", e.seed},
                 {"checked", e.report.checked},
                 {"max_rel_error", e.report.max_rel_error},
                 {"passed", e.report.passed()}});
  }
  write_json(dir / "gradcheck.json", json{{"passed", ok}, {"checks", j}});
  return ok;
}

void cmd_sweep(RunConfig cfg, const std::vector<double>& grid) {
  cfg.validate();
  if (grid.empty()) throw ConfigError({"sweep grid is empty"});
  const fs::path dir = out_dir(cfg);
  PreparedData data = prepare_data(cfg);
  std::ofstream csv(dir / "sweep.csv");
  csv << "mu_time_train,mu_state_train,best_epoch,valid_ndcg,frozen_recall,frozen_mrr,frozen_ndcg,"
         "ttt_recall,ttt_mrr,ttt_ndcg\n";
  csv.precision(10);
  for (double mu1 : grid) {
    for (double mu2 : grid) {
      RunConfig c = cfg;
      c.loss.mu_time_train = mu1;
      c.loss.mu_state_train = mu2;
      TrainResult r = train_model(c, data);
      ModelParams p = r.best;
      const auto frozen = evaluate_run(c, data, p, false, false).outcome.metrics;
      const auto adapted = evaluate_run(c, data, p, true, false).outcome.metrics;
      csv << mu1 << ',' << mu2 << ',' << r.best_epoch << ',' << r.best_valid_ndcg << ',' << frozen.recall << ','
          << frozen.mrr << ',' << frozen.ndcg << ',' << adapted.recall << ',' << adapted.mrr << ',' << adapted.ndcg
          << '\n';
    }
  }
  csv.close();
  write_json(dir / "manifest.json", json{{"command", "sweep"},
                                         {"config", cfg},
                                         {"grid", grid},
                                         {"sweep_digest", file_digest(dir / "sweep.csv")}});
}

}  // namespace ssmrec
