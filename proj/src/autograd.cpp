#include "ssmrec/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include <Eigen/Dense>

namespace ssmrec::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_same(const std::string& op, const Var& a, const Var& b) {
  if (a->shape() != b->shape()) shape_fail(op, a->shape(), b->shape());
}

void require_rank(const std::string& op, const Var& a, std::size_t rank) {
  if (a->value.rank() != rank) {
    throw ShapeError(op + ": expected rank " + std::to_string(rank) + ", got shape " + shape_str(a->shape()));
  }
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_value(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// Elementwise unary op with derivative computed from (input, output).
template <typename F, typename D>
Var unary(const Var& a, F f, D df) {
  Tensor out(a->shape());
  const auto& in = a->value;
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_node(std::move(out), {a}, [df](Node& self) {
    const Var& p = self.parents[0];
    Tensor& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p->value[i], self.value[i]);
  });
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape());
  return grad;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var parameter(Tensor value, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->name = std::move(name);
  return n;
}

Var make_node(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p && p->requires_grad; });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return n;
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same("add", a, b);
  Tensor out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (const Var& p : self.parents) {
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same("sub", a, b);
  Tensor out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      const Var& p = self.parents[k];
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same("mul", a, b);
  Tensor out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const Var& pa = self.parents[0];
    const Var& pb = self.parents[1];
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same("div", a, b);
  Tensor out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b->value[i] == 0.0) throw std::domain_error("div: zero denominator at index " + std::to_string(i));
    out[i] = a->value[i] / b->value[i];
  }
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const Var& pa = self.parents[0];
    const Var& pb = self.parents[1];
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb->value[i];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / pb->value[i];
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var mul_scalar(const Var& x, const Var& s) {
  if (s->value.size() != 1) shape_fail("mul_scalar", x->shape(), s->shape());
  const double sv = s->value[0];
  Tensor out(x->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->value[i] * sv;
  return make_node(std::move(out), {x, s}, [](Node& self) {
    const Var& px = self.parents[0];
    const Var& ps = self.parents[1];
    if (px->requires_grad) {
      Tensor& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ps->value[0];
    }
    if (ps->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px->value[i];
      ps->grad_buffer()[0] += acc;
    }
  });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  for (std::size_t i = 0; i < a->value.size(); ++i) {
    if (!(a->value[i] > 0.0)) throw std::domain_error("log: non-positive input at index " + std::to_string(i));
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var softplus(const Var& a) {
  return unary(a, softplus_value, [](double x, double) { return sigmoid(x); });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x * sigmoid(x); },
      [](double x, double) {
        const double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var clamp_min(const Var& a, double lo) {
  return unary(
      a, [lo](double x) { return x < lo ? lo : x; }, [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  if (b->value.dim(0) != k) shape_fail("matmul", a->shape(), b->shape());
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  Tensor out(Shape{m, n});
  MatMap(out.data(), M, N).noalias() = CMatMap(a->value.data(), M, K) * CMatMap(b->value.data(), K, N);
  return make_node(std::move(out), {a, b}, [M, K, N](Node& self) {
    const Var& pa = self.parents[0];
    const Var& pb = self.parents[1];
    CMatMap g(self.grad.data(), M, N);
    if (pa->requires_grad) {
      MatMap(pa->grad_buffer().data(), M, K).noalias() += g * CMatMap(pb->value.data(), K, N).transpose();
    }
    if (pb->requires_grad) {
      MatMap(pb->grad_buffer().data(), K, N).noalias() += CMatMap(pa->value.data(), M, K).transpose() * g;
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank("linear", weight, 2);
  const std::size_t out_dim = weight->value.dim(0), in_dim = weight->value.dim(1);
  if (x->value.rank() == 0 || x->shape().back() != in_dim) shape_fail("linear", x->shape(), weight->shape());
  if (bias && bias->shape() != Shape{out_dim}) shape_fail("linear", weight->shape(), bias->shape());
  const auto rows = static_cast<Eigen::Index>(x->value.size() / in_dim);
  const auto I = static_cast<Eigen::Index>(in_dim), O = static_cast<Eigen::Index>(out_dim);
  Shape out_shape = x->shape();
  out_shape.back() = out_dim;
  Tensor out(out_shape);
  {
    MatMap o(out.data(), rows, O);
    o.noalias() = CMatMap(x->value.data(), rows, I) * CMatMap(weight->value.data(), O, I).transpose();
    if (bias) o.rowwise() += CVecMap(bias->value.data(), O).transpose();
  }
  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(bias);
  return make_node(std::move(out), std::move(parents), [rows, I, O](Node& self) {
    const Var& px = self.parents[0];
    const Var& pw = self.parents[1];
    CMatMap g(self.grad.data(), rows, O);
    if (px->requires_grad) {
      MatMap(px->grad_buffer().data(), rows, I).noalias() += g * CMatMap(pw->value.data(), O, I);
    }
    if (pw->requires_grad) {
      MatMap(pw->grad_buffer().data(), O, I).noalias() += g.transpose() * CMatMap(px->value.data(), rows, I);
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      VecMap(self.parents[2]->grad_buffer().data(), O) += g.colwise().sum().transpose();
    }
  });
}

Var outer_product(const Var& a, const Var& b) {
  const bool batched = a->value.rank() == 2;
  if (batched) {
    if (b->value.rank() != 2 || a->value.dim(0) != b->value.dim(0)) shape_fail("outer_product", a->shape(), b->shape());
  } else if (a->value.rank() != 1 || b->value.rank() != 1) {
    shape_fail("outer_product", a->shape(), b->shape());
  }
  const std::size_t m = batched ? a->value.dim(0) : 1;
  const std::size_t p = a->value.size() / m, q = b->value.size() / m;
  Tensor out(batched ? Shape{m, p, q} : Shape{p, q});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) out[(r * p + i) * q + j] = a->value[r * p + i] * b->value[r * q + j];
  return make_node(std::move(out), {a, b}, [m, p, q](Node& self) {
    const Var& pa = self.parents[0];
    const Var& pb = self.parents[1];
    if (pa->requires_grad) {
      Tensor& ga = pa->grad_buffer();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t i = 0; i < p; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < q; ++j) s += self.grad[(r * p + i) * q + j] * pb->value[r * q + j];
          ga[r * p + i] += s;
        }
    }
    if (pb->requires_grad) {
      Tensor& gb = pb->grad_buffer();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t i = 0; i < p; ++i) {
          const double av = pa->value[r * p + i];
          for (std::size_t j = 0; j < q; ++j) gb[r * q + j] += self.grad[(r * p + i) * q + j] * av;
        }
    }
  });
}

Var row_scale(const Var& x, const Var& s) {
  const std::size_t m = x->value.rows();
  if (s->value.size() != m || x->value.rank() == 0) shape_fail("row_scale", x->shape(), s->shape());
  const std::size_t rs = x->value.size() / m;
  Tensor out(x->shape());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t i = 0; i < rs; ++i) out[r * rs + i] = x->value[r * rs + i] * s->value[r];
  return make_node(std::move(out), {x, s}, [m, rs](Node& self) {
    const Var& px = self.parents[0];
    const Var& ps = self.parents[1];
    if (px->requires_grad) {
      Tensor& gx = px->grad_buffer();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t i = 0; i < rs; ++i) gx[r * rs + i] += self.grad[r * rs + i] * ps->value[r];
    }
    if (ps->requires_grad) {
      Tensor& gs = ps->grad_buffer();
      for (std::size_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (std::size_t i = 0; i < rs; ++i) acc += self.grad[r * rs + i] * px->value[r * rs + i];
        gs[r] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a->value.values()) s += v;
  return make_node(Tensor::scalar(s), {a}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const double go = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

Var mean(const Var& a) {
  if (a->value.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a->value.size()));
}

Var frobenius_norm(const Var& a) {
  const bool per_row = a->value.rank() >= 2;
  const std::size_t m = per_row ? a->value.dim(0) : 1;
  const std::size_t rs = a->value.size() / std::max<std::size_t>(m, 1);
  Tensor out(per_row ? Shape{m} : Shape{});
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < rs; ++i) s += a->value[r * rs + i] * a->value[r * rs + i];
    out[r] = std::sqrt(s);
  }
  return make_node(std::move(out), {a}, [m, rs](Node& self) {
    const Var& p = self.parents[0];
    Tensor& g = p->grad_buffer();
    for (std::size_t r = 0; r < m; ++r) {
      const double nrm = self.value[r];
      if (nrm == 0.0) continue;  // subgradient 0 at the origin
      const double coef = self.grad[r] / nrm;
      for (std::size_t i = 0; i < rs; ++i) g[r * rs + i] += coef * p->value[r * rs + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing

Var reshape(const Var& a, Shape shape) {
  Tensor out = a->value.reshaped(std::move(shape));
  return make_node(std::move(out), {a}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var slice_last(const Var& a, std::size_t start, std::size_t len) {
  if (a->value.rank() == 0) throw ShapeError("slice_last: scalar input");
  const std::size_t last = a->shape().back();
  if (start + len > last) {
    throw ShapeError("slice_last: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") outside " + shape_str(a->shape()));
  }
  const std::size_t rows = a->value.size() / last;
  Shape s = a->shape();
  s.back() = len;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < len; ++i) out[r * len + i] = a->value[r * last + start + i];
  return make_node(std::move(out), {a}, [rows, last, start, len](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < len; ++i) g[r * last + start + i] += self.grad[r * len + i];
  });
}

Var slice_axis1(const Var& a, std::size_t start, std::size_t len) {
  if (a->value.rank() < 2) throw ShapeError("slice_axis1: need rank ≥ 2, got " + shape_str(a->shape()));
  const std::size_t m = a->value.dim(0), L = a->value.dim(1);
  if (start + len > L) throw ShapeError("slice_axis1: range outside " + shape_str(a->shape()));
  const std::size_t inner = a->value.size() / (m * L);
  Shape s = a->shape();
  s[1] = len;
  Tensor out(s);
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(a->value.data() + (r * L + start) * inner, len * inner, out.data() + r * len * inner);
  return make_node(std::move(out), {a}, [m, L, start, len, inner](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t i = 0; i < len * inner; ++i) g[(r * L + start) * inner + i] += self.grad[r * len * inner + i];
  });
}

Var select_axis1(const Var& a, std::size_t index) {
  Var sl = slice_axis1(a, index, 1);
  Shape s = a->shape();
  s.erase(s.begin() + 1);
  return reshape(sl, s);
}

Var concat_axis1(const Var& a, const Var& b) {
  if (a->value.rank() < 2 || b->value.rank() != a->value.rank() || a->value.dim(0) != b->value.dim(0)) {
    shape_fail("concat_axis1", a->shape(), b->shape());
  }
  for (std::size_t k = 2; k < a->value.rank(); ++k)
    if (a->value.dim(k) != b->value.dim(k)) shape_fail("concat_axis1", a->shape(), b->shape());
  const std::size_t m = a->value.dim(0), La = a->value.dim(1), Lb = b->value.dim(1);
  const std::size_t inner = La ? a->value.size() / (m * La) : b->value.size() / (m * Lb);
  Shape s = a->shape();
  s[1] = La + Lb;
  Tensor out(s);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(a->value.data() + r * La * inner, La * inner, out.data() + r * (La + Lb) * inner);
    std::copy_n(b->value.data() + r * Lb * inner, Lb * inner, out.data() + (r * (La + Lb) + La) * inner);
  }
  return make_node(std::move(out), {a, b}, [m, La, Lb, inner](Node& self) {
    const Var& pa = self.parents[0];
    const Var& pb = self.parents[1];
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buffer();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t i = 0; i < La * inner; ++i) g[r * La * inner + i] += self.grad[r * (La + Lb) * inner + i];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t i = 0; i < Lb * inner; ++i)
          g[r * Lb * inner + i] += self.grad[(r * (La + Lb) + La) * inner + i];
    }
  });
}

Var gather_rows(const Var& table, std::span<const std::size_t> indices) {
  require_rank("gather_rows", table, 2);
  const std::size_t V = table->value.dim(0), d = table->value.dim(1);
  Tensor out(Shape{indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= V) {
      throw std::out_of_range("gather_rows: index " + std::to_string(indices[i]) + " outside table of " +
                              std::to_string(V) + " rows");
    }
    std::copy_n(table->value.data() + indices[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_node(std::move(out), {table}, [idx = std::move(idx), d](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t k = 0; k < d; ++k) g[idx[i] * d + k] += self.grad[i * d + k];
  });
}

Var masked_select(const Var& x, const Mask& mask) {
  if (x->value.rank() < 2) throw ShapeError("masked_select: need rank ≥ 2, got " + shape_str(x->shape()));
  const std::size_t positions = x->value.dim(0) * x->value.dim(1);
  if (mask.size() != positions) {
    throw ShapeError("masked_select: mask of " + std::to_string(mask.size()) + " entries for " + shape_str(x->shape()));
  }
  const std::size_t inner = x->value.size() / std::max<std::size_t>(positions, 1);
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < positions; ++i)
    if (mask[i]) picked.push_back(i);
  Shape s(x->shape().begin() + 1, x->shape().end());
  s[0] = picked.size();
  Tensor out(s);
  for (std::size_t k = 0; k < picked.size(); ++k)
    std::copy_n(x->value.data() + picked[k] * inner, inner, out.data() + k * inner);
  return make_node(std::move(out), {x}, [picked = std::move(picked), inner](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t k = 0; k < picked.size(); ++k)
      for (std::size_t i = 0; i < inner; ++i) g[picked[k] * inner + i] += self.grad[k * inner + i];
  });
}

Var mask_positions(const Var& x, const Mask& mask) {
  if (x->value.rank() < 2) throw ShapeError("mask_positions: need rank ≥ 2, got " + shape_str(x->shape()));
  const std::size_t positions = x->value.dim(0) * x->value.dim(1);
  if (mask.size() != positions) {
    throw ShapeError("mask_positions: mask of " + std::to_string(mask.size()) + " entries for " +
                     shape_str(x->shape()));
  }
  const std::size_t inner = x->value.size() / std::max<std::size_t>(positions, 1);
  Tensor out(x->shape());
  for (std::size_t p = 0; p < positions; ++p)
    if (mask[p]) std::copy_n(x->value.data() + p * inner, inner, out.data() + p * inner);
  return make_node(std::move(out), {x}, [mask, inner](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < mask.size(); ++p)
      if (mask[p])
        for (std::size_t i = 0; i < inner; ++i) g[p * inner + i] += self.grad[p * inner + i];
  });
}

Var stop_gradient(const Var& a) { return constant(a->value); }

// ---------------------------------------------------------------------------
// Sequence layers

Var depthwise_causal_conv1d(const Var& x, const Var& kernel, const Var& bias) {
  require_rank("depthwise_causal_conv1d", x, 3);
  require_rank("depthwise_causal_conv1d", kernel, 2);
  const std::size_t m = x->value.dim(0), L = x->value.dim(1), C = x->value.dim(2);
  const std::size_t w = kernel->value.dim(1);
  if (L == 0) throw ShapeError("depthwise_causal_conv1d: input has no timesteps");
  if (kernel->value.dim(0) != C || w == 0) shape_fail("depthwise_causal_conv1d", x->shape(), kernel->shape());
  if (bias->shape() != Shape{C}) shape_fail("depthwise_causal_conv1d", kernel->shape(), bias->shape());
  Tensor out(x->shape());
  const double* K = kernel->value.data();
  for (std::size_t b = 0; b < m; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      double* o = out.data() + (b * L + t) * C;
      for (std::size_t c = 0; c < C; ++c) o[c] = bias->value[c];
      for (std::size_t j = 0; j < w; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(w - 1);
        if (src < 0) continue;
        const double* xi = x->value.data() + (b * L + static_cast<std::size_t>(src)) * C;
        for (std::size_t c = 0; c < C; ++c) o[c] += K[c * w + j] * xi[c];
      }
    }
  return make_node(std::move(out), {x, kernel, bias}, [m, L, C, w](Node& self) {
    const Var& px = self.parents[0];
    const Var& pk = self.parents[1];
    const Var& pb = self.parents[2];
    Tensor* gx = px->requires_grad ? &px->grad_buffer() : nullptr;
    Tensor* gk = pk->requires_grad ? &pk->grad_buffer() : nullptr;
    Tensor* gb = pb->requires_grad ? &pb->grad_buffer() : nullptr;
    for (std::size_t b = 0; b < m; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const double* g = self.grad.data() + (b * L + t) * C;
        if (gb)
          for (std::size_t c = 0; c < C; ++c) (*gb)[c] += g[c];
        for (std::size_t j = 0; j < w; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(w - 1);
          if (src < 0) continue;
          const std::size_t off = (b * L + static_cast<std::size_t>(src)) * C;
          for (std::size_t c = 0; c < C; ++c) {
            if (gx) (*gx)[off + c] += g[c] * pk->value[c * w + j];
            if (gk) (*gk)[c * w + j] += g[c] * px->value[off + c];
          }
        }
      }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  if (x->value.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t D = x->shape().back();
  if (gamma->shape() != Shape{D}) shape_fail("layer_norm", x->shape(), gamma->shape());
  if (beta->shape() != Shape{D}) shape_fail("layer_norm", x->shape(), beta->shape());
  const std::size_t rows = x->value.size() / D;
  Tensor out(x->shape());
  Tensor xhat(x->shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x->value.data() + r * D;
    double mu = 0.0;
    for (std::size_t i = 0; i < D; ++i) mu += xr[i];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t i = 0; i < D; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(D);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < D; ++i) {
      xhat[r * D + i] = (xr[i] - mu) * inv_std[r];
      out[r * D + i] = gamma->value[i] * xhat[r * D + i] + beta->value[i];
    }
  }
  return make_node(std::move(out), {x, gamma, beta},
                   [rows, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                     const Var& px = self.parents[0];
                     const Var& pg = self.parents[1];
                     const Var& pb = self.parents[2];
                     if (pg->requires_grad) {
                       Tensor& gg = pg->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t i = 0; i < D; ++i) gg[i] += self.grad[r * D + i] * xhat[r * D + i];
                     }
                     if (pb->requires_grad) {
                       Tensor& gb = pb->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t i = 0; i < D; ++i) gb[i] += self.grad[r * D + i];
                     }
                     if (px->requires_grad) {
                       Tensor& gx = px->grad_buffer();
                       std::vector<double> dxhat(D);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t i = 0; i < D; ++i) {
                           dxhat[i] = self.grad[r * D + i] * pg->value[i];
                           s1 += dxhat[i];
                           s2 += dxhat[i] * xhat[r * D + i];
                         }
                         const double Dd = static_cast<double>(D);
                         for (std::size_t i = 0; i < D; ++i)
                           gx[r * D + i] += inv_std[r] / Dd * (Dd * dxhat[i] - s1 - xhat[r * D + i] * s2);
                       }
                     }
                   });
}

Var dropout(const Var& x, double rate, bool train, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!train || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  Tensor factor(x->shape());
  for (std::size_t i = 0; i < factor.size(); ++i) factor[i] = keep(rng) ? s : 0.0;
  return mul(x, constant(std::move(factor)));
}

Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> targets) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t m = logits->value.dim(0), V = logits->value.dim(1);
  if (targets.size() != m) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits->shape()));
  }
  Tensor probs(logits->shape());
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] >= V) throw std::out_of_range("softmax_cross_entropy: target outside vocabulary");
    const double* z = logits->value.data() + r * V;
    const double zmax = *std::max_element(z, z + V);
    double se = 0.0;
    for (std::size_t i = 0; i < V; ++i) se += std::exp(z[i] - zmax);
    const double lse = zmax + std::log(se);
    for (std::size_t i = 0; i < V; ++i) probs[r * V + i] = std::exp(z[i] - lse);
    total += lse - z[targets[r]];
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_node(Tensor::scalar(total / static_cast<double>(m)), {logits},
                   [m, V, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                     Tensor& g = self.parents[0]->grad_buffer();
                     const double c = self.grad[0] / static_cast<double>(m);
                     for (std::size_t r = 0; r < m; ++r) {
                       for (std::size_t i = 0; i < V; ++i) g[r * V + i] += c * probs[r * V + i];
                       g[r * V + tgt[r]] -= c;
                     }
                   });
}

Var scan_step(const Var& h_prev, const Var& abar, const Var& bbar, const Var& x) {
  require_rank("scan_step", h_prev, 3);
  const std::size_t m = h_prev->value.dim(0), ds = h_prev->value.dim(1), d = h_prev->value.dim(2);
  if (abar->value.size() != m) shape_fail("scan_step", h_prev->shape(), abar->shape());
  if (bbar->shape() != Shape{m, ds}) shape_fail("scan_step", h_prev->shape(), bbar->shape());
  if (x->shape() != Shape{m, d}) shape_fail("scan_step", h_prev->shape(), x->shape());
  Tensor out(h_prev->shape());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t s = 0; s < ds; ++s)
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t i = (r * ds + s) * d + k;
        out[i] = abar->value[r] * h_prev->value[i] + bbar->value[r * ds + s] * x->value[r * d + k];
      }
  return make_node(std::move(out), {h_prev, abar, bbar, x}, [m, ds, d](Node& self) {
    const Var& ph = self.parents[0];
    const Var& pa = self.parents[1];
    const Var& pb = self.parents[2];
    const Var& px = self.parents[3];
    Tensor* gh = ph->requires_grad ? &ph->grad_buffer() : nullptr;
    Tensor* ga = pa->requires_grad ? &pa->grad_buffer() : nullptr;
    Tensor* gb = pb->requires_grad ? &pb->grad_buffer() : nullptr;
    Tensor* gx = px->requires_grad ? &px->grad_buffer() : nullptr;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t s = 0; s < ds; ++s)
        for (std::size_t k = 0; k < d; ++k) {
          const std::size_t i = (r * ds + s) * d + k;
          const double g = self.grad[i];
          if (gh) (*gh)[i] += g * pa->value[r];
          if (ga) (*ga)[r] += g * ph->value[i];
          if (gb) (*gb)[r * ds + s] += g * px->value[r * d + k];
          if (gx) (*gx)[r * d + k] += g * pb->value[r * ds + s];
        }
  });
}

ScanResult sequential_scan(const Var& abar, const Var& bbar, const Var& x, const Var& c, const Mask& mask) {
  require_rank("sequential_scan", abar, 2);
  require_rank("sequential_scan", bbar, 3);
  require_rank("sequential_scan", x, 3);
  const std::size_t m = abar->value.dim(0), L = abar->value.dim(1);
  const std::size_t ds = bbar->value.dim(2), d = x->value.dim(2);
  if (bbar->value.dim(0) != m || bbar->value.dim(1) != L) shape_fail("sequential_scan", abar->shape(), bbar->shape());
  if (x->value.dim(0) != m || x->value.dim(1) != L) shape_fail("sequential_scan", abar->shape(), x->shape());
  if (c->shape() != bbar->shape()) shape_fail("sequential_scan", bbar->shape(), c->shape());
  if (mask.size() != m * L) {
    throw ShapeError("sequential_scan: mask of " + std::to_string(mask.size()) + " entries for " +
                     shape_str(abar->shape()));
  }

  // Packed output per row: [y (L·d) | h_final (ds·d)].
  const std::size_t row = L * d + ds * d;
  Tensor packed(Shape{m, row});
  std::vector<double> h(ds * d);
  for (std::size_t r = 0; r < m; ++r) {
    std::fill(h.begin(), h.end(), 0.0);
    double* out = packed.data() + r * row;
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t p = r * L + t;
      if (mask[p]) {
        const double a = abar->value[p];
        const double* bt = bbar->value.data() + p * ds;
        const double* xt = x->value.data() + p * d;
        for (std::size_t s = 0; s < ds; ++s)
          for (std::size_t k = 0; k < d; ++k) h[s * d + k] = a * h[s * d + k] + bt[s] * xt[k];
      }
      const double* ct = c->value.data() + p * ds;
      double* yt = out + t * d;
      for (std::size_t s = 0; s < ds; ++s)
        for (std::size_t k = 0; k < d; ++k) yt[k] += h[s * d + k] * ct[s];
    }
    std::copy(h.begin(), h.end(), out + L * d);
  }

  Var core = make_node(std::move(packed), {abar, bbar, x, c}, [m, L, ds, d, row, mask](Node& self) {
    const Var& pa = self.parents[0];
    const Var& pb = self.parents[1];
    const Var& px = self.parents[2];
    const Var& pc = self.parents[3];
    Tensor* ga = pa->requires_grad ? &pa->grad_buffer() : nullptr;
    Tensor* gb = pb->requires_grad ? &pb->grad_buffer() : nullptr;
    Tensor* gx = px->requires_grad ? &px->grad_buffer() : nullptr;
    Tensor* gc = pc->requires_grad ? &pc->grad_buffer() : nullptr;
    // States are recomputed one row at a time instead of kept from forward.
    std::vector<double> states((L + 1) * ds * d);
    std::vector<double> dh(ds * d);
    const std::size_t sd = ds * d;
    for (std::size_t r = 0; r < m; ++r) {
      std::fill(states.begin(), states.begin() + sd, 0.0);
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t p = r * L + t;
        const double* prev = states.data() + t * sd;
        double* cur = states.data() + (t + 1) * sd;
        if (mask[p]) {
          const double a = pa->value[p];
          const double* bt = pb->value.data() + p * ds;
          const double* xt = px->value.data() + p * d;
          for (std::size_t s = 0; s < ds; ++s)
            for (std::size_t k = 0; k < d; ++k) cur[s * d + k] = a * prev[s * d + k] + bt[s] * xt[k];
        } else {
          std::copy_n(prev, sd, cur);
        }
      }
      const double* gout = self.grad.data() + r * row;
      std::copy_n(gout + L * d, sd, dh.begin());
      for (std::size_t t = L; t-- > 0;) {
        const std::size_t p = r * L + t;
        const double* cur = states.data() + (t + 1) * sd;
        const double* prev = states.data() + t * sd;
        const double* dy = gout + t * d;
        const double* ct = pc->value.data() + p * ds;
        for (std::size_t s = 0; s < ds; ++s) {
          double dc = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            dh[s * d + k] += ct[s] * dy[k];
            dc += cur[s * d + k] * dy[k];
          }
          if (gc) (*gc)[p * ds + s] += dc;
        }
        if (!mask[p]) continue;
        const double a = pa->value[p];
        const double* bt = pb->value.data() + p * ds;
        const double* xt = px->value.data() + p * d;
        if (ga) {
          double acc = 0.0;
          for (std::size_t i = 0; i < sd; ++i) acc += dh[i] * prev[i];
          (*ga)[p] += acc;
        }
        for (std::size_t s = 0; s < ds; ++s) {
          double db = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            db += dh[s * d + k] * xt[k];
            if (gx) (*gx)[p * d + k] += dh[s * d + k] * bt[s];
          }
          if (gb) (*gb)[p * ds + s] += db;
        }
        for (std::size_t i = 0; i < sd; ++i) dh[i] *= a;
      }
    }
  });

  ScanResult res;
  res.y = reshape(slice_last(core, 0, L * d), Shape{m, L, d});
  res.final = reshape(slice_last(core, L * d, ds * d), Shape{m, ds, d});
  return res;
}

// ---------------------------------------------------------------------------
// Reverse pass

void backward(const Var& loss) {
  if (loss->value.size() != 1) {
    throw ShapeError("grad: loss must be scalar, got shape " + shape_str(loss->shape()));
  }
  if (!loss->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad = Tensor();
  loss->grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

GradStore grad(const Var& loss, const VarMap& params) {
  for (const auto& [name, p] : params) p->grad = Tensor();
  backward(loss);
  GradStore out;
  for (const auto& [name, p] : params) {
    if (p->grad.size() == p->value.size() && p->grad.shape() == p->value.shape()) {
      out.emplace(name, p->grad);
    } else {
      out.emplace(name, Tensor(p->shape()));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

FiniteDiffReport finite_diff_check(const GraphFn& f, const TensorMap& params, const FiniteDiffOptions& opts) {
  VarMap vars;
  for (const auto& [name, t] : params) vars.emplace(name, parameter(t, name));
  const GradStore analytic = grad(f(vars), vars);

  auto evaluate = [&](const TensorMap& values) {
    VarMap cvars;
    for (const auto& [name, t] : values) cvars.emplace(name, constant(t));
    return f(cvars)->value.item();
  };

  std::vector<std::pair<std::string, std::size_t>> coords;
  std::size_t total = 0;
  for (const auto& [name, t] : params) total += t.size();
  std::mt19937_64 rng(opts.seed);
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(opts.samples, total));
  for (std::size_t flat : order) {
    for (const auto& [name, t] : params) {
      if (flat < t.size()) {
        coords.emplace_back(name, flat);
        break;
      }
      flat -= t.size();
    }
  }

  FiniteDiffReport report;
  TensorMap work = params;
  for (const auto& [name, idx] : coords) {
    double& slot = work.at(name)[idx];
    const double orig = slot;
    slot = orig + opts.eps;
    const double fp = evaluate(work);
    slot = orig - opts.eps;
    const double fm = evaluate(work);
    slot = orig;
    const double numeric = (fp - fm) / (2.0 * opts.eps);
    const double a = analytic.at(name)[idx];
    const double rel = std::abs(a - numeric) / std::max(std::abs(a), opts.eps);
    ++report.checked;
    report.max_rel_error = std::max(report.max_rel_error, rel);
    if (!(rel <= opts.tol)) report.failures.push_back({name, idx, a, numeric, rel});
  }
  return report;
}

}  // namespace ssmrec::ag
