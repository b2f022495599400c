// Acceptance suite: one PASS/FAIL line per criterion.
// Usage: ssmrec_acceptance [criterion ...]   (default: all)
#include <malloc.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ssmrec/run.hpp"

using namespace ssmrec;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr std::size_t kGradSeeds = 5;
constexpr std::size_t kGradSamples = 20;
constexpr double kGradBudgetSec = 60.0;
constexpr double kScanTol = 1e-12;
constexpr double kTimeLossTol = 1e-12;
constexpr std::size_t kBoundInstances = 1000;
constexpr double kBoundBudgetSec = 30.0;
// Floating-point slack on the bound comparison, relative to the bound.
constexpr double kBoundRelSlack = 1e-12;
constexpr std::size_t kShiftSeeds = 5;
constexpr double kShiftBudgetSec = 600.0;
constexpr double kRatioLo = 0.3;
constexpr double kRatioHi = 0.8;
constexpr std::size_t kThroughputBatch = 256;
constexpr std::size_t kPermutationBatch = 64;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
  bool soft = false;
};

Tensor uniform(Shape s, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.raw()) v = u(rng);
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

RunConfig desk_config() { return load_config(SSMREC_DESK_CONFIG); }

// ---------------------------------------------------------------------------

Verdict gradients() {
  const auto t0 = Clock::now();
  const auto entries = gradcheck_suite(kGradSeeds, kGradSamples, kGradTol);
  const double secs = seconds_since(t0);
  std::size_t failed = 0, thin = 0;
  double worst = 0;
  std::set<std::string> losses;
  for (const auto& e : entries) {
    losses.insert(e.loss);
    if (!e.report.passed()) ++failed;
    if (e.report.checked < kGradSamples) ++thin;
    worst = std::max(worst, e.report.max_rel_error);
  }
  std::ostringstream d;
  d << entries.size() << " checks over " << losses.size() << " losses, max rel err " << worst << ", " << failed
    << " failing, " << secs << " s";
  return {failed == 0 && thin == 0 && losses.size() == 4 && entries.size() == 4 * kGradSeeds && secs < kGradBudgetSec,
          d.str()};
}

// Unrolled form: h_t = Σ_{j ≤ t, valid} (Π_{j < i ≤ t, valid} ā_i) b̄_j x_jᵀ.
Verdict scan_oracle() {
  std::mt19937_64 rng(11);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + trial % 3, L = 1 + (trial * 37) % 64, ds = 1 + trial % 5, d = 1 + (trial / 3) % 6;
    const std::size_t L_eff = trial < 4 ? 64 : L;
    auto abar = uniform({m, L_eff}, rng, 0.0, 1.0);
    auto bbar = uniform({m, L_eff, ds}, rng, -1, 1);
    auto x = uniform({m, L_eff, d}, rng, -1, 1);
    auto c = uniform({m, L_eff, ds}, rng, -1, 1);
    ag::Mask mask(m * L_eff);
    std::bernoulli_distribution keep(0.85);
    for (auto& v : mask) v = keep(rng);
    auto got = ag::sequential_scan(ag::constant(abar), ag::constant(bbar), ag::constant(x), ag::constant(c), mask);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t t = 0; t < L_eff; ++t) {
        std::vector<double> h(ds * d, 0.0);
        for (std::size_t j = 0; j <= t; ++j) {
          if (!mask[r * L_eff + j]) continue;
          double decay = 1.0;
          for (std::size_t i = j + 1; i <= t; ++i)
            if (mask[r * L_eff + i]) decay *= abar[r * L_eff + i];
          for (std::size_t s = 0; s < ds; ++s)
            for (std::size_t k = 0; k < d; ++k)
              h[s * d + k] += decay * bbar[(r * L_eff + j) * ds + s] * x[(r * L_eff + j) * d + k];
        }
        for (std::size_t k = 0; k < d; ++k) {
          double y = 0;
          for (std::size_t s = 0; s < ds; ++s) y += h[s * d + k] * c[(r * L_eff + t) * ds + s];
          worst = std::max(worst, std::abs(y - got.y->value[(r * L_eff + t) * d + k]));
        }
        if (t + 1 == L_eff)
          for (std::size_t i = 0; i < ds * d; ++i)
            worst = std::max(worst, std::abs(h[i] - got.final->value[r * ds * d + i]));
      }
    }
  }
  std::ostringstream d;
  d << "100 instances up to n=64, max abs err " << worst;
  return {worst <= kScanTol, d.str()};
}

double brute_time_loss(const std::vector<double>& D, const std::vector<double>& T,
                       const std::vector<std::uint8_t>& valid, std::size_t rows, std::size_t cols, double lambda,
                       std::size_t block) {
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<std::size_t> idx;
    for (std::size_t c = 0; c < cols; ++c)
      if (valid[r * cols + c]) idx.push_back(r * cols + c);
    for (std::size_t a = 0; a < idx.size(); ++a)
      for (std::size_t b = a + 1; b < idx.size(); ++b) {
        if (a / block != b / block) continue;
        const std::size_t i = idx[a], j = idx[b];
        total += std::max(0.0, 1.0 - (D[i] - D[j]) * ((T[i] - T[j]) / lambda));
        ++pairs;
      }
  }
  return pairs ? total / static_cast<double>(pairs) : 0.0;
}

Verdict time_loss_oracle() {
  std::mt19937_64 rng(12);
  double worst = 0;
  bool scaling_exact = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = 1 + trial % 4, cols = 2 + trial % 30;
    auto D = uniform({rows, cols}, rng, 0.01, 3.0);
    std::vector<double> T(rows * cols);
    std::vector<std::uint8_t> valid(rows * cols);
    std::uniform_int_distribution<int> gap(0, 5000);
    std::bernoulli_distribution keep(0.8);
    for (std::size_t i = 0; i < T.size(); ++i) {
      T[i] = gap(rng);
      valid[i] = keep(rng);
    }
    const double lambda = 1 + gap(rng);
    for (std::size_t block : {2ul, 3ul, 7ul, cols, cols + 1}) {
      const double got = time_alignment_loss(ag::constant(D), T, valid, lambda, block)->value[0];
      const double want = brute_time_loss(D.raw(), T, valid, rows, cols, lambda, block >= cols ? 1ul << 30 : block);
      worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
    }
    for (double scale : {60.0, 3600.0, 86400.0}) {
      std::vector<double> Ts(T);
      for (auto& t : Ts) t *= scale;
      const double a = time_alignment_loss(ag::constant(D), T, valid, lambda, 5)->value[0];
      const double b = time_alignment_loss(ag::constant(D), Ts, valid, lambda * scale, 5)->value[0];
      scaling_exact = scaling_exact && a == b;
    }
  }
  std::ostringstream d;
  d << "max rel err " << worst << ", lambda scaling " << (scaling_exact ? "bit-exact" : "NOT exact");
  return {worst <= kTimeLossTol && scaling_exact, d.str()};
}

Verdict bound() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> ua(-4.0, -1.0);
  std::size_t violations = 0;
  double tightest = 0;
  for (std::size_t i = 0; i < kBoundInstances; ++i) {
    const std::size_t ds = 1 + i % 8, d = 1 + (i / 8) % 8;
    StateAlignInputs in;
    in.h_final = ag::constant(uniform({1, ds, d}, rng, -1, 1));
    in.x_last = ag::constant(uniform({1, d}, rng, -1, 1));
    in.x_hat = ag::constant(uniform({1, d}, rng, -1, 1));
    in.b_next = ag::constant(uniform({1, ds}, rng, -1, 1));
    in.delta_next = ag::constant(uniform({1}, rng, 0.05, 2.0));
    in.a = ag::constant(Tensor::vector({ua(rng)}));
    ag::VarMap vars;
    vars["back_proj.weight"] = ag::constant(uniform({ds, d}, rng, -1, 1));
    vars["back_proj.bias"] = ag::constant(uniform({ds}, rng, -1, 1));
    auto r = state_alignment_loss(in, vars);
    const double loss = r.per_row->value[0];
    const double b = theorem_bound(in, r.inter)[0];
    if (!(loss <= b * (1 + kBoundRelSlack))) ++violations;
    tightest = std::max(tightest, loss / b);
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << kBoundInstances << " instances, " << violations << " violations, max loss/bound " << tightest << ", " << secs
    << " s";
  return {violations == 0 && secs < kBoundBudgetSec, d.str()};
}

// Shared desk-scale runs: one trained model per seed.
struct DeskRun {
  RunConfig cfg;
  PreparedData data;
  TrainResult train;
};

std::map<std::uint64_t, DeskRun>& desk_runs() {
  static std::map<std::uint64_t, DeskRun> runs;
  return runs;
}

DeskRun& desk_run(std::uint64_t seed) {
  auto& runs = desk_runs();
  auto it = runs.find(seed);
  if (it != runs.end()) return it->second;
  DeskRun r;
  r.cfg = desk_config();
  r.cfg.seed = seed;
  r.cfg.data.generator_seed = seed;
  r.data = prepare_data(r.cfg);
  r.train = train_model(r.cfg, r.data);
  return runs.emplace(seed, std::move(r)).first->second;
}

Verdict hermeticity() {
  DeskRun& run = desk_run(0);
  ModelParams params = run.train.best;
  const auto sum0 = params.checksum();
  const auto& test = run.data.split.test;
  BatchOptions opts;
  opts.max_len = run.cfg.data.max_len;
  opts.batch_size = run.cfg.adapt.batch_size;
  AdaptConfig ac = run.cfg.adapt;
  ac.policy = BatchPolicy::kFixedSize;

  evaluate_with_adaptation(test, params, ac, run.cfg.loss, run.cfg.state, opts, run.cfg.k);
  const bool checksum_ok = params.checksum() == sum0;

  const auto frozen = evaluate_frozen(test, params, opts, run.cfg.k);
  auto same_metrics = [&](const EvalOutcome& o) {
    if (o.results.size() != frozen.results.size()) return false;
    for (std::size_t i = 0; i < o.results.size(); ++i)
      if (o.results[i].rank != frozen.results[i].rank) return false;
    return o.metrics.ndcg == frozen.metrics.ndcg && o.metrics.recall == frozen.metrics.recall &&
           o.metrics.mrr == frozen.metrics.mrr;
  };
  AdaptConfig m0 = ac;
  m0.steps = 0;
  AdaptConfig a0 = ac;
  a0.lr = 0.0;
  const bool m0_ok = same_metrics(evaluate_with_adaptation(test, params, m0, run.cfg.loss, run.cfg.state, opts, run.cfg.k));
  const bool a0_ok = same_metrics(evaluate_with_adaptation(test, params, a0, run.cfg.loss, run.cfg.state, opts, run.cfg.k));

  // Reverse the full batches and leave the partial tail last, so every
  // example keeps its batch mates. Smaller batches give several to reorder.
  const std::size_t bs = kPermutationBatch;
  AdaptConfig pc = ac;
  pc.batch_size = bs;
  BatchOptions popts = opts;
  popts.batch_size = bs;
  const auto in_order = evaluate_with_adaptation(test, params, pc, run.cfg.loss, run.cfg.state, popts, run.cfg.k);
  const std::size_t full = test.size() / bs;
  std::vector<Example> permuted;
  std::vector<std::size_t> origin;
  for (std::size_t b = full; b-- > 0;)
    for (std::size_t i = b * bs; i < (b + 1) * bs; ++i) origin.push_back(i);
  for (std::size_t i = full * bs; i < test.size(); ++i) origin.push_back(i);
  for (std::size_t i : origin) permuted.push_back(test[i]);
  auto p = evaluate_with_adaptation(permuted, params, pc, run.cfg.loss, run.cfg.state, popts, run.cfg.k);
  bool perm_ok = full > 1;
  for (std::size_t i = 0; i < permuted.size(); ++i)
    perm_ok = perm_ok && p.results[i].rank == in_order.results[origin[i]].rank &&
              p.results[i].ndcg == in_order.results[origin[i]].ndcg;
  perm_ok = perm_ok && params.checksum() == sum0;

  std::ostringstream d;
  d << "checksum " << (checksum_ok ? "kept" : "CHANGED") << ", M=0 " << (m0_ok ? "matches" : "DIFFERS") << ", lr=0 "
    << (a0_ok ? "matches" : "DIFFERS") << ", batch permutation " << (perm_ok ? "invariant" : "CHANGES ranks");
  return {checksum_ok && m0_ok && a0_ok && perm_ok, d.str()};
}

struct ShiftStats {
  std::vector<std::array<double, 4>> frozen, adapted;
  double secs = 0;
};

ShiftStats& shift_stats() {
  static ShiftStats s;
  static bool done = false;
  if (done) return s;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 0; seed < kShiftSeeds; ++seed) {
    DeskRun& run = desk_run(seed);
    ModelParams params = run.train.best;
    RunConfig cfg = run.cfg;
    cfg.segments = 4;
    auto rep = evaluate_run(cfg, run.data, params, true, false);
    std::array<double, 4> f{}, a{};
    for (std::size_t i = 0; i < 4; ++i) {
      a[i] = rep.segments.segments[i].ndcg;
      f[i] = rep.segments.baseline[i].ndcg;
    }
    s.frozen.push_back(f);
    s.adapted.push_back(a);
    std::cerr << "  seed " << seed << " frozen";
    for (double v : f) std::cerr << ' ' << v;
    std::cerr << " | adapted";
    for (double v : a) std::cerr << ' ' << v;
    std::cerr << '\n';
  }
  s.secs = seconds_since(t0);
  done = true;
  return s;
}

Verdict shift_direction() {
  const auto& s = shift_stats();
  std::array<double, 4> delta{}, with{}, without{};
  for (std::size_t r = 0; r < s.frozen.size(); ++r)
    for (std::size_t i = 0; i < 4; ++i) {
      with[i] += s.adapted[r][i] / static_cast<double>(s.frozen.size());
      without[i] += s.frozen[r][i] / static_cast<double>(s.frozen.size());
    }
  for (std::size_t i = 0; i < 4; ++i) delta[i] = with[i] - without[i];
  const bool not_worse = with[2] >= without[2] && with[3] >= without[3];
  const double late = delta[2] + delta[3], early = delta[0] + delta[1];
  std::ostringstream d;
  d << "mean delta by segment " << delta[0] << ' ' << delta[1] << ' ' << delta[2] << ' ' << delta[3]
    << "; late " << late << " vs early " << early << ", " << s.secs << " s incl. training";
  return {not_worse && late > early && s.secs < kShiftBudgetSec, d.str()};
}

Verdict degradation() {
  const auto& s = shift_stats();
  std::size_t ok = 0;
  std::ostringstream d;
  d << "segment 1 vs 4:";
  for (const auto& f : s.frozen) {
    if (f[3] < f[0]) ++ok;
    d << ' ' << f[0] << '>' << f[3];
  }
  d << "; " << ok << '/' << s.frozen.size() << " seeds";
  return {ok == s.frozen.size() && ok == kShiftSeeds, d.str()};
}

Verdict throughput_ratio() {
  DeskRun& run = desk_run(0);
  ModelParams params = run.train.best;
  RunConfig cfg = run.cfg;
  cfg.adapt.steps = 1;
  cfg.adapt.batch_size = kThroughputBatch;
  const auto batches = make_batches(run.data.split.test, [&] {
    BatchOptions o;
    o.max_len = cfg.data.max_len;
    o.batch_size = kThroughputBatch;
    return o;
  }());
  const auto with = throughput([&](const Batch& b) { adapt_and_predict(b, params, cfg.adapt, cfg.loss, cfg.state); },
                               batches, 2, 15, true);
  const auto without = throughput([&](const Batch& b) { predict_logits(b, params); }, batches, 2, 15, false);
  const double ratio = with.its_per_sec / without.its_per_sec;
  std::ostringstream d;
  d << "ratio " << ratio << " (" << with.its_per_sec << " vs " << without.its_per_sec << " it/s at batch "
    << kThroughputBatch << ")";
  return {ratio >= kRatioLo && ratio <= kRatioHi, d.str(), true};
}

RankResult brute_rank(const std::vector<double>& z, std::size_t target, std::size_t k) {
  std::vector<std::size_t> order(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b] || (z[a] == z[b] && a < b); });
  RankResult r;
  r.rank = static_cast<std::size_t>(std::find(order.begin(), order.end(), target) - order.begin()) + 1;
  if (r.rank <= k) {
    r.recall = 1;
    r.rr = 1.0 / static_cast<double>(r.rank);
    r.ndcg = 1.0 / std::log2(static_cast<double>(r.rank) + 1.0);
  }
  return r;
}

Verdict metric_oracle() {
  std::mt19937_64 rng(14);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t V = 2 + trial % 80;
    std::vector<double> z(V);
    std::uniform_int_distribution<int> coarse(0, 3);
    std::normal_distribution<double> fine;
    for (auto& v : z) v = trial % 2 ? coarse(rng) : fine(rng);
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, V - 1)(rng);
    const auto got = rank_metrics(z, t, 10);
    const auto want = brute_rank(z, t, 10);
    if (got.rank != want.rank || got.recall != want.recall || got.rr != want.rr || got.ndcg != want.ndcg) ++mismatches;
  }
  const std::vector<double> hand{0.1, 0.9, 0.5, 0.3, 0.7};
  const auto third = rank_metrics(hand, 2, 10);
  std::ostringstream d;
  d << mismatches << " mismatches in 1000; rank-3 ndcg " << third.ndcg;
  return {mismatches == 0 && third.rank == 3 && third.ndcg == 0.5, d.str()};
}

Verdict reproducibility() {
  const fs::path root = fs::temp_directory_path() / "ssmrec_acceptance_repro";
  fs::remove_all(root);
  std::vector<fs::path> dirs{root / "a", root / "b"};
  for (const auto& dir : dirs) {
    RunConfig cfg = desk_config();
    cfg.seed = 7;
    cfg.data.generator_seed = 7;
    cfg.throughput_reps = 1;
    cfg.out_dir = dir.string();
    cmd_train(cfg);
    cmd_eval(cfg, dir / "checkpoint.bin", true);
  }
  std::vector<std::string> differ;
  for (const char* f : {"train_log.jsonl", "checkpoint.bin", "metrics.json", "segments.json", "ranks.csv"})
    if (slurp(dirs[0] / f) != slurp(dirs[1] / f) || slurp(dirs[0] / f).empty()) differ.push_back(f);
  std::ostringstream d;
  d << "checkpoint " << file_digest(dirs[0] / "checkpoint.bin").substr(0, 12) << ", ";
  if (differ.empty()) {
    d << "log, checkpoint and reports identical";
  } else {
    d << "differ:";
    for (const auto& f : differ) d << ' ' << f;
  }
  fs::remove_all(root);
  return {differ.empty(), d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient correctness", gradients},
      {"scan oracle", scan_oracle},
      {"time-loss oracle", time_loss_oracle},
      {"state-loss bound", bound},
      {"adaptation hermeticity", hermeticity},
      {"shift-adaptation direction", shift_direction},
      {"degradation trend", degradation},
      {"throughput ratio", throughput_ratio},
      {"metric oracle", metric_oracle},
      {"reproducibility", reproducibility},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

  int hard_failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Verdict v;
    const auto t0 = Clock::now();
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const char* tag = v.pass ? "PASS" : (v.soft ? "SOFT-FAIL" : "FAIL");
    std::printf("[%2zu] %-9s %-27s %s (%.1f s)\n", i + 1, tag, criteria[i].first.c_str(), v.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
    if (!v.pass && !v.soft) ++hard_failures;
  }
  return hard_failures == 0 ? 0 : 1;
}
