#include <doctest.h>

#include <cmath>
#include <random>

#include "ssmrec/autograd.hpp"

using namespace ssmrec;
using namespace ssmrec::ag;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.raw()) v = u(rng);
  return t;
}

void expect_gradcheck(const GraphFn& f, const TensorMap& params, std::size_t samples = 30) {
  FiniteDiffOptions o;
  o.samples = samples;
  auto rep = finite_diff_check(f, params, o);
  INFO("max rel error " << rep.max_rel_error);
  for (const auto& fl : rep.failures) MESSAGE(fl.param << "[" << fl.index << "] " << fl.analytic << " vs " << fl.numeric);
  CHECK(rep.passed());
}

}  // namespace

TEST_CASE("softplus at zero") {
  auto x = parameter(Tensor::vector({0.0}), "x");
  auto y = sum(softplus(x));
  CHECK(y->value[0] == doctest::Approx(std::log(2.0)));
  auto g = grad(y, {{"x", x}});
  CHECK(g.at("x")[0] == doctest::Approx(0.5));
}

TEST_CASE("softplus stays finite for large inputs") {
  auto x = constant(Tensor::vector({-800.0, 800.0}));
  auto y = softplus(x);
  CHECK(y->value[0] >= 0.0);
  CHECK(y->value[1] == doctest::Approx(800.0));
}

TEST_CASE("outer product values") {
  auto y = outer_product(constant(Tensor::vector({1, 2})), constant(Tensor::vector({3, 4, 5})));
  CHECK(y->shape() == Shape{2, 3});
  const std::vector<double> want{3, 4, 5, 6, 8, 10};
  CHECK(y->value.raw() == want);
}

TEST_CASE("shape mismatch names the primitive and both shapes") {
  auto a = constant(Tensor({2, 3}));
  auto b = constant(Tensor({3, 2}));
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), ShapeError);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2,3]"), ShapeError);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[3,2]"), ShapeError);
}

TEST_CASE("domain errors for log and div") {
  CHECK_THROWS(log(constant(Tensor::vector({0.0}))));
  CHECK_THROWS(log(constant(Tensor::vector({-1.0}))));
  CHECK_THROWS(div(constant(Tensor::vector({1.0})), constant(Tensor::vector({0.0}))));
}

TEST_CASE("grad of half squared norm is the parameter") {
  std::mt19937_64 rng(1);
  auto p = parameter(random_tensor({5}, rng), "p");
  auto loss = scale(sum(mul(p, p)), 0.5);
  auto g = grad(loss, {{"p", p}});
  for (std::size_t i = 0; i < 5; ++i) CHECK(g.at("p")[i] == doctest::Approx(p->value[i]).epsilon(1e-15));
}

TEST_CASE("stop_gradient blocks flow and unreachable parameters get zeros") {
  auto p = parameter(Tensor::vector({1.0, 2.0}), "p");
  auto q = parameter(Tensor({3}, 1.0), "q");
  auto loss = sum(mul(stop_gradient(p), stop_gradient(p)));
  auto g = grad(loss, {{"p", p}, {"q", q}});
  CHECK(g.at("p")[0] == 0.0);
  CHECK(g.at("p")[1] == 0.0);
  CHECK(g.at("q").shape() == Shape{3});
  CHECK(g.at("q")[2] == 0.0);
}

TEST_CASE("non-scalar loss is rejected") {
  auto p = parameter(Tensor({2}, 1.0), "p");
  CHECK_THROWS(backward(p));
  CHECK_THROWS(grad(p, {{"p", p}}));
}

TEST_CASE("constant inputs never materialise gradients") {
  auto c = constant(Tensor({3}, 2.0));
  auto p = parameter(Tensor({3}, 1.0), "p");
  backward(sum(mul(c, p)));
  CHECK(c->grad.size() == 0);
  CHECK(p->grad.size() == 3);
}

TEST_CASE("scan accumulates with unit decay") {
  // ā = 1 and b̄⊗x = k at every step: h₃ = 3k.
  const std::size_t L = 3, ds = 2, d = 2;
  auto abar = constant(Tensor({1, L}, 1.0));
  auto bbar = constant(Tensor({1, L, ds}, 1.0));
  auto x = constant(Tensor({1, L, d}, 0.5));
  auto c = constant(Tensor({1, L, ds}, 0.0));
  Mask mask(L, 1);
  auto r = sequential_scan(abar, bbar, x, c, mask);
  for (double v : r.final->value.values()) CHECK(v == doctest::Approx(1.5));
}

TEST_CASE("scan hand-worked case") {
  // d = ds = 1, ā = [.5, .5], b̄ = [1, 1], x = [2, 3], c = [1, 1] → h = [2, 4].
  auto abar = constant(Tensor({1, 2}, std::vector<double>{0.5, 0.5}));
  auto bbar = constant(Tensor({1, 2, 1}, std::vector<double>{1, 1}));
  auto x = constant(Tensor({1, 2, 1}, std::vector<double>{2, 3}));
  auto c = constant(Tensor({1, 2, 1}, std::vector<double>{1, 1}));
  auto r = sequential_scan(abar, bbar, x, c, Mask{1, 1});
  CHECK(r.y->value[0] == 2.0);
  CHECK(r.y->value[1] == 4.0);
  CHECK(r.final->value[0] == 4.0);
}

TEST_CASE("scan with every step masked stays at zero") {
  std::mt19937_64 rng(3);
  auto r = sequential_scan(constant(random_tensor({2, 4}, rng, 0.1, 0.9)), constant(random_tensor({2, 4, 3}, rng)),
                           constant(random_tensor({2, 4, 5}, rng)), constant(random_tensor({2, 4, 3}, rng)),
                           Mask(8, 0));
  for (double v : r.final->value.values()) CHECK(v == 0.0);
  for (double v : r.y->value.values()) CHECK(v == 0.0);
}

TEST_CASE("single unmasked step with unit decay gives one outer product") {
  auto abar = constant(Tensor({1, 3}, 1.0));
  auto bbar = constant(Tensor({1, 3, 2}, std::vector<double>{9, 9, 1, 2, 9, 9}));
  auto x = constant(Tensor({1, 3, 2}, std::vector<double>{9, 9, 3, 4, 9, 9}));
  auto c = constant(Tensor({1, 3, 2}, 1.0));
  auto r = sequential_scan(abar, bbar, x, c, Mask{0, 1, 0});
  const std::vector<double> want{3, 4, 6, 8};
  CHECK(r.final->value.raw() == want);
}

TEST_CASE("scan state norm obeys the triangle bound per step") {
  std::mt19937_64 rng(5);
  const std::size_t L = 12, ds = 3, d = 4;
  auto abar = random_tensor({1, L}, rng, 0.01, 0.99);
  auto bbar = random_tensor({1, L, ds}, rng);
  auto x = random_tensor({1, L, d}, rng);
  Var h = constant(Tensor({1, ds, d}));
  for (std::size_t t = 0; t < L; ++t) {
    auto at = constant(Tensor({1}, std::vector<double>{abar[t]}));
    auto bt = constant(Tensor({1, ds}, std::vector<double>(bbar.data() + t * ds, bbar.data() + (t + 1) * ds)));
    auto xt = constant(Tensor({1, d}, std::vector<double>(x.data() + t * d, x.data() + (t + 1) * d)));
    const double prev = frobenius_norm(h)->value[0];
    h = scan_step(h, at, bt, xt);
    const double bound = prev * abar[t] + frobenius_norm(bt)->value[0] * frobenius_norm(xt)->value[0];
    CHECK(frobenius_norm(h)->value[0] <= bound + 1e-12);
  }
}

TEST_CASE("depthwise causal conv with a single step sees only zero history") {
  // Output at t=0 uses only the last kernel tap.
  auto x = constant(Tensor({1, 1, 2}, std::vector<double>{2.0, 3.0}));
  auto k = constant(Tensor({2, 3}, std::vector<double>{10, 20, 1, 10, 20, 2}));
  auto b = constant(Tensor({2}, std::vector<double>{0.5, -0.5}));
  auto y = depthwise_causal_conv1d(x, k, b);
  CHECK(y->value[0] == 2.5);
  CHECK(y->value[1] == 5.5);
}

TEST_CASE("depthwise causal conv matches direct summation") {
  std::mt19937_64 rng(8);
  const std::size_t m = 2, L = 5, C = 3, w = 4;
  auto x = random_tensor({m, L, C}, rng);
  auto k = random_tensor({C, w}, rng);
  auto b = random_tensor({C}, rng);
  auto y = depthwise_causal_conv1d(constant(x), constant(k), constant(b));
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t c = 0; c < C; ++c) {
        double s = b[c];
        for (std::size_t j = 0; j < w; ++j) {
          const long src = static_cast<long>(t) - static_cast<long>(w - 1) + static_cast<long>(j);
          if (src >= 0) s += k[c * w + j] * x[(r * L + src) * C + c];
        }
        CHECK(y->value[(r * L + t) * C + c] == doctest::Approx(s).epsilon(1e-14));
      }
}

TEST_CASE("layer norm rows have zero mean and unit variance before the affine map") {
  std::mt19937_64 rng(4);
  auto x = constant(random_tensor({3, 6}, rng, -5, 5));
  auto y = layer_norm(x, constant(Tensor({6}, 1.0)), constant(Tensor({6}, 0.0)), 1e-12);
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 6; ++i) mean += y->value[r * 6 + i] / 6;
    for (std::size_t i = 0; i < 6; ++i) var += std::pow(y->value[r * 6 + i] - mean, 2) / 6;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("dropout is the identity outside training and scales kept units inside") {
  std::mt19937_64 rng(2);
  auto x = constant(Tensor({1000}, 1.0));
  auto same = dropout(x, 0.5, false, rng);
  CHECK(same->value.raw() == x->value.raw());
  auto d = dropout(x, 0.25, true, rng);
  std::size_t kept = 0;
  for (double v : d->value.values()) {
    CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
    kept += v != 0.0;
  }
  CHECK(kept > 650);
  CHECK(kept < 850);
}

TEST_CASE("cross entropy equals direct log-sum-exp") {
  std::mt19937_64 rng(6);
  auto logits = random_tensor({4, 7}, rng, -3, 3);
  std::vector<std::size_t> t{0, 3, 6, 2};
  auto ce = softmax_cross_entropy(constant(logits), t);
  double want = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double z = 0;
    for (std::size_t i = 0; i < 7; ++i) z += std::exp(logits[r * 7 + i]);
    want += -std::log(std::exp(logits[r * 7 + t[r]]) / z);
  }
  CHECK(ce->value[0] == doctest::Approx(want / 4).epsilon(1e-13));
}

TEST_CASE("masked_select keeps rows in order") {
  auto x = constant(Tensor({1, 3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6}));
  auto y = masked_select(x, Mask{1, 0, 1});
  CHECK(y->shape() == Shape{2, 2});
  const std::vector<double> want{1, 2, 5, 6};
  CHECK(y->value.raw() == want);
}

TEST_CASE("gather_rows rejects out-of-range indices") {
  auto table = constant(Tensor({3, 2}));
  std::vector<std::size_t> idx{0, 3};
  CHECK_THROWS_AS(gather_rows(table, idx), std::out_of_range);
}

TEST_CASE("finite differences agree on a linear function") {
  std::mt19937_64 rng(1);
  TensorMap params{{"w", random_tensor({6}, rng)}};
  const Tensor coef = random_tensor({6}, rng);
  auto f = [&](const VarMap& v) { return sum(mul(v.at("w"), constant(coef))); };
  FiniteDiffOptions o;
  o.samples = 6;
  auto rep = finite_diff_check(f, params, o);
  CHECK(rep.passed());
  CHECK(rep.checked == 6);
  CHECK(rep.max_rel_error < 1e-8);
}

TEST_CASE("finite differences flag a wrong gradient") {
  TensorMap params{{"w", Tensor({2}, 1.0)}};
  auto f = [](const VarMap& v) {
    // Value is 2·Σw but the reported gradient is 1 per coordinate.
    Var w = v.at("w");
    Tensor val = Tensor::scalar(2.0 * (w->value[0] + w->value[1]));
    return make_node(val, {w}, [](Node& self) {
      auto& g = self.parents[0]->grad_buffer();
      g[0] += self.grad[0];
      g[1] += self.grad[0];
    });
  };
  auto rep = finite_diff_check(f, params, {});
  CHECK_FALSE(rep.passed());
}

TEST_CASE("every primitive passes finite differences") {
  std::mt19937_64 rng(11);
  TensorMap p{{"a", random_tensor({2, 3, 4}, rng)},
              {"b", random_tensor({2, 3, 4}, rng, 0.5, 2.0)},
              {"w", random_tensor({5, 4}, rng)},
              {"bias", random_tensor({5}, rng)},
              {"k", random_tensor({4, 3}, rng)},
              {"kb", random_tensor({4}, rng)},
              {"g", random_tensor({4}, rng, 0.5, 1.5)},
              {"beta", random_tensor({4}, rng)},
              {"s", random_tensor({2}, rng, 0.5, 1.5)},
              {"one", random_tensor({1}, rng)}};
  const Mask mask{0, 1, 1, 1, 1, 1};

  SUBCASE("elementwise") {
    expect_gradcheck([](const VarMap& v) {
      auto a = v.at("a"), b = v.at("b");
      return sum(add(mul(silu(a), softplus(b)), sub(div(exp(scale(a, 0.3)), b), log(b))));
    }, p);
  }
  SUBCASE("linear, layer norm, conv") {
    expect_gradcheck([&](const VarMap& v) {
      auto h = depthwise_causal_conv1d(v.at("a"), v.at("k"), v.at("kb"));
      auto n = layer_norm(h, v.at("g"), v.at("beta"), 1e-12);
      auto y = linear(mask_positions(n, mask), v.at("w"), v.at("bias"));
      return mean(mul(y, y));
    }, p);
  }
  SUBCASE("shape plumbing and norms") {
    expect_gradcheck([&](const VarMap& v) {
      auto a = v.at("a");
      auto cat = concat_axis1(slice_axis1(a, 1, 2), slice_axis1(a, 0, 1));
      auto r = row_scale(slice_last(cat, 1, 3), v.at("s"));
      auto col = select_axis1(a, 2);
      auto sel = masked_select(a, mask);
      return add(add(sum(frobenius_norm(r)), sum(mul(col, col))), add(mean(sel), sum(mul_scalar(sel, v.at("one")))));
    }, p);
  }
  SUBCASE("matmul, outer product, cross entropy") {
    expect_gradcheck([](const VarMap& v) {
      auto m = matmul(reshape(v.at("a"), {6, 4}), reshape(v.at("k"), {4, 3}));
      auto o = outer_product(reshape(slice_last(v.at("w"), 0, 2), {5, 2}), reshape(slice_last(v.at("w"), 2, 2), {5, 2}));
      std::vector<std::size_t> t{0, 2, 1, 1, 0, 2};
      return add(softmax_cross_entropy(m, t), sum(relu(o)));
    }, p);
  }
  SUBCASE("scan") {
    expect_gradcheck([&](const VarMap& v) {
      auto abar = exp(scale(softplus(reshape(slice_last(v.at("a"), 0, 1), {2, 3})), -1.0));
      auto bbar = slice_last(v.at("b"), 0, 2);
      auto x = slice_last(v.at("a"), 1, 3);
      auto c = slice_last(v.at("a"), 2, 2);
      auto r = sequential_scan(abar, bbar, x, c, mask);
      return add(sum(mul(r.y, r.y)), sum(r.final));
    }, p);
  }
}

TEST_CASE("identical graphs give bit-identical gradients") {
  std::mt19937_64 rng(12);
  TensorMap p{{"w", random_tensor({5, 4}, rng)}, {"x", random_tensor({3, 4}, rng)}};
  auto run = [&] {
    VarMap v;
    for (auto& [k, t] : p) v.emplace(k, parameter(t, k));
    auto loss = sum(silu(linear(v.at("x"), v.at("w"), nullptr)));
    return grad(loss, v);
  };
  auto a = run(), b = run();
  CHECK(a.at("w").raw() == b.at("w").raw());
  CHECK(a.at("x").raw() == b.at("x").raw());
}
