#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "ssmrec/losses.hpp"

using namespace ssmrec;
using namespace ssmrec::ag;

namespace {

Tensor uniform(Shape s, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.raw()) v = u(rng);
  return t;
}

// Pairs (a < b) over the valid columns of each row, with a and b in the same block of ordinals.
double brute_time_loss(const std::vector<double>& D, const std::vector<double>& T, const std::vector<std::uint8_t>& valid,
                       std::size_t rows, std::size_t cols, double lambda, std::size_t block) {
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

struct StateCase {
  StateAlignInputs in;
  VarMap vars;
};

StateCase random_state_case(std::mt19937_64& rng, std::size_t m, std::size_t ds, std::size_t d, double a,
                            double dlo, double dhi) {
  StateCase c;
  c.in.h_final = constant(uniform({m, ds, d}, rng, -1, 1));
  c.in.x_last = constant(uniform({m, d}, rng, -1, 1));
  c.in.x_hat = constant(uniform({m, d}, rng, -1, 1));
  c.in.b_next = constant(uniform({m, ds}, rng, -1, 1));
  c.in.delta_next = constant(uniform({m}, rng, dlo, dhi));
  c.in.a = constant(Tensor::vector({a}));
  c.vars["back_proj.weight"] = constant(uniform({ds, d}, rng, -1, 1));
  c.vars["back_proj.bias"] = constant(uniform({ds}, rng, -1, 1));
  return c;
}

}  // namespace

TEST_CASE("cross-entropy: uniform logits give ln |V|") {
  auto logits = constant(Tensor({3, 20}, 0.7));
  std::vector<std::size_t> t{0, 5, 19};
  CHECK(rec_loss(logits, t)->value[0] == doctest::Approx(std::log(20.0)).epsilon(1e-15));
}

TEST_CASE("cross-entropy vanishes as the target margin grows") {
  double prev = std::numeric_limits<double>::infinity();
  for (double margin : {1.0, 10.0, 100.0, 1000.0}) {
    Tensor z({1, 5}, 0.0);
    z[2] = margin;
    std::vector<std::size_t> t{2};
    const double l = rec_loss(constant(z), t)->value[0];
    CHECK(l <= prev);
    CHECK(l >= 0.0);
    prev = l;
  }
  CHECK(prev == 0.0);
}

TEST_CASE("cross-entropy matches direct summation") {
  std::mt19937_64 rng(2);
  auto z = uniform({5, 9}, rng, -4, 4);
  std::vector<std::size_t> t{1, 8, 3, 3, 0};
  double want = 0;
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < 9; ++i) s += std::exp(z[r * 9 + i]);
    want += -std::log(std::exp(z[r * 9 + t[r]]) / s);
  }
  CHECK(rec_loss(constant(z), t)->value[0] == doctest::Approx(want / 5).epsilon(1e-13));
}

TEST_CASE("padding-excluded cross-entropy ignores column 0") {
  std::mt19937_64 rng(3);
  auto z = uniform({2, 6}, rng, -2, 2);
  std::vector<std::size_t> t{1, 5};
  const double base = rec_loss_excluding_padding(constant(z), t)->value[0];
  Tensor bumped = z;
  bumped[0] = 50.0;
  bumped[6] = -50.0;
  CHECK(rec_loss_excluding_padding(constant(bumped), t)->value[0] == doctest::Approx(base).epsilon(1e-15));
  double want = 0;
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0;
    for (std::size_t i = 1; i < 6; ++i) s += std::exp(z[r * 6 + i]);
    want += std::log(s) - z[r * 6 + t[r]];
  }
  CHECK(base == doctest::Approx(want / 2).epsilon(1e-13));
  std::vector<std::size_t> pad{0, 1};
  CHECK_THROWS(rec_loss_excluding_padding(constant(z), pad));
}

TEST_CASE("time loss: aligned pair with margin gives zero") {
  auto D = constant(Tensor({1, 2}, std::vector<double>{3, 1}));
  std::vector<double> T{30, 10};
  std::vector<std::uint8_t> v{1, 1};
  CHECK(time_alignment_loss(D, T, v, 10.0, 10)->value[0] == 0.0);
}

TEST_CASE("time loss: equal steps give one") {
  auto D = constant(Tensor({1, 2}, std::vector<double>{1, 1}));
  std::vector<double> T{30, 17};
  std::vector<std::uint8_t> v{1, 1};
  CHECK(time_alignment_loss(D, T, v, 10.0, 10)->value[0] == 1.0);
}

TEST_CASE("time loss: blocked and unblocked forms against brute force") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + trial % 4, cols = 3 + trial % 11;
    auto D = uniform({rows, cols}, rng, 0.01, 3.0);
    std::vector<double> T(rows * cols);
    std::vector<std::uint8_t> valid(rows * cols);
    std::uniform_int_distribution<int> gap(0, 1000);
    std::bernoulli_distribution keep(0.8);
    for (std::size_t i = 0; i < T.size(); ++i) {
      T[i] = gap(rng);
      valid[i] = keep(rng);
    }
    const double lambda = 250.0;
    for (std::size_t block : {2u, 3u, 5u, 10u}) {
      const double got = time_alignment_loss(constant(D), T, valid, lambda, block)->value[0];
      CHECK(got == doctest::Approx(brute_time_loss(D.raw(), T, valid, rows, cols, lambda, block)).epsilon(1e-12));
    }
    // A block covering every position is the full pairwise loss.
    const double full = time_alignment_loss(constant(D), T, valid, lambda, cols + 1)->value[0];
    CHECK(full == doctest::Approx(brute_time_loss(D.raw(), T, valid, rows, cols, lambda, 1 << 20)).epsilon(1e-12));
  }
}

TEST_CASE("time loss: scaling T and lambda together is bit-exact") {
  std::mt19937_64 rng(5);
  auto D = uniform({3, 8}, rng, 0.01, 3.0);
  std::vector<double> T(24);
  std::vector<std::uint8_t> valid(24, 1);
  std::uniform_int_distribution<int> gap(0, 100000);
  for (auto& t : T) t = gap(rng);
  for (double c : {3.0, 60.0, 86400.0}) {
    std::vector<double> Tc(T);
    for (auto& t : Tc) t *= c;
    auto a = time_alignment_loss(parameter(D, "d"), T, valid, 977.0, 4);
    auto b = time_alignment_loss(parameter(D, "d"), Tc, valid, 977.0 * c, 4);
    CHECK(a->value[0] == b->value[0]);
  }
}

TEST_CASE("time loss: orderings that agree with margin cost nothing") {
  // Δ increasing with T and (ΔΔ)(ΔT)/λ ≥ 1 on every pair.
  std::vector<double> T{0, 10, 20, 30, 40, 50};
  Tensor D({1, 6});
  for (std::size_t i = 0; i < 6; ++i) D[i] = static_cast<double>(i);
  std::vector<std::uint8_t> v(6, 1);
  CHECK(time_alignment_loss(constant(D), T, v, 10.0, 6)->value[0] == 0.0);
  CHECK(time_alignment_loss(constant(D), T, v, 10.0, 3)->value[0] == 0.0);
}

TEST_CASE("time loss: no valid pairs gives zero loss and zero gradient") {
  auto D = parameter(Tensor({2, 3}, 1.5), "d");
  std::vector<double> T{1, 2, 3, 4, 5, 6};
  std::vector<std::uint8_t> one_each{0, 0, 1, 0, 1, 0};
  auto l = time_alignment_loss(D, T, one_each, 1.0, 10);
  CHECK(l->value[0] == 0.0);
  CHECK(time_alignment_pairs(2, 3, one_each, 10) == 0);
  auto g = grad(l, {{"d", D}});
  for (double x : g.at("d").values()) CHECK(x == 0.0);

  auto empty = parameter(Tensor({0, 3}), "e");
  auto l0 = time_alignment_loss(empty, {}, {}, 1.0, 10);
  CHECK(l0->value[0] == 0.0);
}

TEST_CASE("time loss: masked pairs are excluded") {
  // The masked middle column carries a huge misalignment that must not count.
  Tensor D({1, 3}, std::vector<double>{3, -100, 1});
  std::vector<double> T{30, 0, 10};
  std::vector<std::uint8_t> v{1, 0, 1};
  CHECK(time_alignment_loss(constant(D), T, v, 10.0, 10)->value[0] == 0.0);
  CHECK(time_alignment_pairs(1, 3, v, 10) == 1);
}

TEST_CASE("time loss: gradient matches finite differences") {
  std::mt19937_64 rng(6);
  TensorMap p{{"d", uniform({3, 7}, rng, 0.1, 2.0)}};
  std::vector<double> T(21);
  std::uniform_int_distribution<int> gap(0, 50);
  for (auto& t : T) t = gap(rng);
  std::vector<std::uint8_t> valid(21, 1);
  valid[0] = valid[7] = valid[14] = 0;
  FiniteDiffOptions o;
  o.samples = 21;
  auto rep = finite_diff_check([&](const VarMap& v) { return time_alignment_loss(v.at("d"), T, valid, 25.0, 3); }, p, o);
  CHECK(rep.passed());
}

TEST_CASE("time loss rejects bad lambda and block") {
  auto D = constant(Tensor({1, 2}, 1.0));
  std::vector<double> T{1, 2};
  std::vector<std::uint8_t> v{1, 1};
  CHECK_THROWS(time_alignment_loss(D, T, v, 0.0, 10));
  CHECK_THROWS(time_alignment_loss(D, T, v, 1.0, 1));
}

TEST_CASE("backward projection is affine with no activation") {
  std::mt19937_64 rng(7);
  const std::size_t ds = 3, d = 4;
  auto x = constant(uniform({2, d}, rng, -2, 2));
  VarMap zero{{"back_proj.weight", constant(Tensor({ds, d}))}, {"back_proj.bias", constant(Tensor({ds}))}};
  auto q0 = backward_projection(x, zero);
  for (double v : q0->value.values()) CHECK(v == 0.0);

  Tensor eye({d, d});
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  VarMap id{{"back_proj.weight", constant(eye)}, {"back_proj.bias", constant(Tensor({d}))}};
  CHECK(backward_projection(x, id)->value.raw() == x->value.raw());

  auto W = uniform({ds, d}, rng, -1, 1), b = uniform({ds}, rng, -1, 1);
  VarMap rnd{{"back_proj.weight", constant(W)}, {"back_proj.bias", constant(b)}};
  auto q = backward_projection(x, rnd);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < ds; ++i) {
      double s = b[i];
      for (std::size_t k = 0; k < d; ++k) s += W[i * d + k] * x->value[r * d + k];
      CHECK(q->value[r * ds + i] == doctest::Approx(s).epsilon(1e-14));
    }
}

TEST_CASE("state loss: norm 4 over a step of 2 gives 1") {
  // A = −1 and B = 0, Q = 0: ĥᵇ = e^{−2}·h, so ‖h − ĥᵇ‖ = (1 − e^{−2})‖h‖.
  const std::size_t ds = 2, d = 2;
  const double scale_to_4 = 4.0 / ((1.0 - std::exp(-2.0)) * 2.0);
  StateAlignInputs in;
  in.h_final = constant(Tensor({1, ds, d}, scale_to_4));  // Frobenius norm 2·scale
  in.x_last = constant(Tensor({1, d}, 1.0));
  in.x_hat = constant(Tensor({1, d}, 1.0));
  in.b_next = constant(Tensor({1, ds}, 0.0));
  in.delta_next = constant(Tensor({1}, 2.0));
  in.a = constant(Tensor::vector({-1.0}));
  VarMap vars{{"back_proj.weight", constant(Tensor({ds, d}))}, {"back_proj.bias", constant(Tensor({ds}))}};
  auto r = state_alignment_loss(in, vars);
  CHECK(r.loss->value[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(r.clamped == 0);
}

TEST_CASE("state loss and bound vanish when the backward state reproduces h") {
  // h = 0, x̂ = x and Q = −A⁻¹B: ε = 0 and ĥᵇ = Δ(P̄·B ⊗ x − Q ⊗ x) = 0.
  const std::size_t ds = 3, d = 2;
  const double a = -2.0;
  StateAlignInputs in;
  in.h_final = constant(Tensor({1, ds, d}));
  in.x_last = constant(Tensor({1, d}, std::vector<double>{0.3, -0.7}));
  in.x_hat = in.x_last;
  Tensor B({1, ds}, std::vector<double>{0.5, -1.0, 2.0});
  in.b_next = constant(B);
  in.delta_next = constant(Tensor({1}, 0.4));
  in.a = constant(Tensor::vector({a}));
  Tensor bias({ds});
  for (std::size_t i = 0; i < ds; ++i) bias[i] = -B[i] / a;
  VarMap vars{{"back_proj.weight", constant(Tensor({ds, d}))}, {"back_proj.bias", constant(bias)}};
  auto r = state_alignment_loss(in, vars);
  CHECK(r.loss->value[0] == doctest::Approx(0.0).epsilon(1e-15));
  const auto bound = theorem_bound(in, r.inter);
  CHECK(bound[0] == doctest::Approx(0.0).epsilon(1e-15));
  for (double e : r.inter.eps->value.values()) CHECK(e == doctest::Approx(0.0));
}

TEST_CASE("state loss: A = -1 gives P = 0 and unit P-bar") {
  std::mt19937_64 rng(8);
  auto c = random_state_case(rng, 6, 3, 4, -1.0, 0.05, 5.0);
  auto r = state_alignment_loss(c.in, c.vars);
  CHECK(r.inter.p_bar->value[0] == 1.0);
  for (double p : r.inter.p->value.values()) CHECK(p == 0.0);
}

TEST_CASE("state loss: P-bar times -A is one to the last ulp") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> ua(-50.0, -1e-3);
  for (int i = 0; i < 1000; ++i) {
    const double a = ua(rng);
    auto c = random_state_case(rng, 1, 2, 2, a, 0.01, 3.0);
    auto r = state_alignment_loss(c.in, c.vars);
    const double prod = r.inter.p_bar->value[0] * -a;
    CHECK(std::abs(prod - 1.0) <= std::numeric_limits<double>::epsilon());
    // e^{ΔP} is the same quantity.
    const double dt = r.inter.delta->value[0];
    CHECK(std::exp(dt * r.inter.p->value[0]) == doctest::Approx(r.inter.p_bar->value[0]).epsilon(1e-12));
  }
}

TEST_CASE("state loss: Q-bar is the step times Q") {
  std::mt19937_64 rng(10);
  auto c = random_state_case(rng, 4, 3, 2, -1.5, 0.1, 2.0);
  auto r = state_alignment_loss(c.in, c.vars);
  for (std::size_t row = 0; row < 4; ++row)
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(r.inter.q_bar->value[row * 3 + i] == c.in.delta_next->value[row] * r.inter.q->value[row * 3 + i]);
}

TEST_CASE("state loss: tiny steps are clamped and counted") {
  std::mt19937_64 rng(11);
  auto c = random_state_case(rng, 3, 2, 2, -1.0, 0.5, 1.0);
  c.in.delta_next = constant(Tensor({3}, std::vector<double>{1e-12, 0.5, 0.0}));
  auto r = state_alignment_loss(c.in, c.vars);
  CHECK(r.clamped == 2);
  CHECK(r.inter.delta->value[0] == 1e-8);
  CHECK(r.inter.delta->value[2] == 1e-8);
  CHECK(std::isfinite(r.loss->value[0]));
}

TEST_CASE("state loss: non-negative A is rejected") {
  std::mt19937_64 rng(12);
  auto c = random_state_case(rng, 1, 2, 2, 0.0, 0.5, 1.0);
  CHECK_THROWS_AS(state_alignment_loss(c.in, c.vars), std::domain_error);
}

TEST_CASE("state loss: dilution power 0 is the bare norm") {
  std::mt19937_64 rng(13);
  auto c = random_state_case(rng, 5, 3, 3, -2.0, 0.1, 2.0);
  StateLossOptions bare;
  bare.dilution_power = 0.0;
  auto r2 = state_alignment_loss(c.in, c.vars);
  auto r0 = state_alignment_loss(c.in, c.vars, bare);
  for (std::size_t i = 0; i < 5; ++i) {
    const double dt = c.in.delta_next->value[i];
    CHECK(r2.per_row->value[i] == doctest::Approx(r0.per_row->value[i] / (dt * dt)).epsilon(1e-13));
  }
  StateLossOptions general;
  general.dilution_power = 1.5;
  auto r15 = state_alignment_loss(c.in, c.vars, general);
  for (std::size_t i = 0; i < 5; ++i) {
    const double dt = c.in.delta_next->value[i];
    CHECK(r15.per_row->value[i] == doctest::Approx(r0.per_row->value[i] / std::pow(dt, 1.5)).epsilon(1e-12));
  }
}

TEST_CASE("state loss: direct per-row recomputation") {
  std::mt19937_64 rng(14);
  const std::size_t m = 3, ds = 2, d = 3;
  const double a = -1.7;
  auto c = random_state_case(rng, m, ds, d, a, 0.1, 2.0);
  auto r = state_alignment_loss(c.in, c.vars);
  const auto& H = c.in.h_final->value;
  const auto& X = c.in.x_last->value;
  const auto& XH = c.in.x_hat->value;
  const auto& B = c.in.b_next->value;
  const auto& W = c.vars.at("back_proj.weight")->value;
  const auto& bias = c.vars.at("back_proj.bias")->value;
  double mean = 0;
  for (std::size_t row = 0; row < m; ++row) {
    const double dt = c.in.delta_next->value[row];
    double sq = 0;
    for (std::size_t i = 0; i < ds; ++i) {
      double q = bias[i];
      for (std::size_t k = 0; k < d; ++k) q += W[i * d + k] * X[row * d + k];
      for (std::size_t k = 0; k < d; ++k) {
        const double h = H[(row * ds + i) * d + k];
        const double hn = std::exp(dt * a) * h + dt * B[row * ds + i] * XH[row * d + k];
        const double hb = (-1.0 / a) * hn - dt * q * X[row * d + k];
        sq += (h - hb) * (h - hb);
      }
    }
    const double want = std::sqrt(sq) / (dt * dt);
    CHECK(r.per_row->value[row] == doctest::Approx(want).epsilon(1e-12));
    mean += want / m;
  }
  CHECK(r.loss->value[0] == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("bound dominates the state loss on random instances") {
  std::size_t violations = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(100 + seed);
    std::uniform_real_distribution<double> ua(-4.0, -1.0);
    for (int i = 0; i < 1000; ++i) {
      auto c = random_state_case(rng, 1, 4, 3, ua(rng), 0.05, 2.0);
      auto r = state_alignment_loss(c.in, c.vars);
      const double bound = theorem_bound(c.in, r.inter)[0];
      ++total;
      if (!(r.per_row->value[0] <= bound * (1 + 1e-12))) ++violations;
    }
  }
  CHECK(total == 5000);
  CHECK(violations == 0);
}

TEST_CASE("bound precondition") {
  std::mt19937_64 rng(15);
  auto c = random_state_case(rng, 2, 2, 2, -0.5, 0.1, 1.0);
  auto r = state_alignment_loss(c.in, c.vars);
  CHECK_THROWS_WITH_AS(theorem_bound(c.in, r.inter), doctest::Contains("bound precondition violated"),
                       std::domain_error);
  auto unit = random_state_case(rng, 1, 2, 2, -1.0, 0.5, 0.5);
  auto ru = state_alignment_loss(unit.in, unit.vars);
  // At A = −1 the third coefficient is exactly 1.
  const auto& in = unit.in;
  const double dt = ru.inter.delta->value[0];
  auto n2 = [](const double* p, std::size_t n) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += p[i] * p[i];
    return std::sqrt(s);
  };
  double gap = 0;
  for (std::size_t k = 0; k < 2; ++k) gap += std::pow((in.x_last->value[k] - in.x_hat->value[k]) / dt, 2);
  const double want = n2(in.h_final->value.data(), 4) / (dt * dt) +
                      n2(in.x_last->value.data(), 2) * n2(ru.inter.eps->value.data(), 2) / dt +
                      n2(in.b_next->value.data(), 2) * std::sqrt(gap);
  CHECK(theorem_bound(in, ru.inter)[0] == doctest::Approx(want).epsilon(1e-13));
}

TEST_CASE("total loss by phase") {
  auto rec = constant(Tensor::scalar(2.5));
  auto time = constant(Tensor::scalar(0.75));
  auto state = constant(Tensor::scalar(4.0));
  LossWeights w;
  CHECK(w.mu_time_train == 0.1);
  CHECK(w.mu_state_train == 1.0);
  CHECK(total_loss(rec, time, state, w, Phase::kTrain)->value[0] == doctest::Approx(2.5 + 0.075 + 4.0));
  CHECK(total_loss(rec, time, state, w, Phase::kTest)->value[0] == doctest::Approx(0.01 * 0.75 + 0.1 * 4.0));
  auto other = constant(Tensor::scalar(-123.0));
  CHECK(total_loss(other, time, state, w, Phase::kTest)->value[0] ==
        total_loss(rec, time, state, w, Phase::kTest)->value[0]);
  LossWeights zero = w;
  zero.mu_time_train = zero.mu_state_train = 0;
  CHECK(total_loss(rec, time, state, zero, Phase::kTrain)->value[0] == 2.5);
}

TEST_CASE("loss weight validation") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.lambda = 0;
  CHECK_THROWS(w.validate());
  w = {};
  w.block = 1;
  CHECK_THROWS(w.validate());
  w = {};
  w.mu_state_test = -1;
  CHECK_THROWS(w.validate());
}

TEST_CASE("median positive interval over the training prefix") {
  InteractionDataset ds;
  ds.vocabulary = {"", "a"};
  // Prefix gaps (last two interactions excluded): u0 → 5, 0, 7; u1 → 2.
  ds.users.push_back({"u0", {1, 1, 1, 1, 1, 1}, {0, 5, 5, 12, 1000, 2000}});
  ds.users.push_back({"u1", {1, 1, 1, 1}, {0, 2, 900, 901}});
  CHECK(median_positive_interval(ds) == 5.0);
  ds.users.push_back({"u2", {1, 1, 1, 1}, {0, 9, 900, 901}});
  CHECK(median_positive_interval(ds) == 6.0);
  InteractionDataset flat;
  flat.vocabulary = {"", "a"};
  flat.users.push_back({"u", {1, 1, 1, 1}, {3, 3, 3, 3}});
  CHECK(median_positive_interval(flat) == 1.0);
}
