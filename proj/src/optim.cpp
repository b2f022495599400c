#include "ssmrec/optim.hpp"

#include <cmath>

namespace ssmrec {

void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = nlohmann::json{{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, AdamConfig& c) {
  const AdamConfig d;
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
}

namespace {

void check_grads(const ag::TensorMap& params, const ag::GradStore& grads) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("gradient for unknown parameter '" + name + "'");
    if (g.shape() != it->second.shape()) {
      throw ShapeError("gradient shape " + shape_str(g.shape()) + " for '" + name + "' of shape " +
                       shape_str(it->second.shape()));
    }
    if (!g.all_finite()) throw NumericError("non-finite gradient for '" + name + "'");
  }
}

}  // namespace

void adam_step(ag::TensorMap& params, const ag::GradStore& grads, AdamState& state) {
  check_grads(params, grads);
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto [mit, fresh_m] = state.m.try_emplace(name, Tensor(p.shape()));
    auto [vit, fresh_v] = state.v.try_emplace(name, Tensor(p.shape()));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    auto git = grads.find(name);
    const double* g = git == grads.end() ? nullptr : git->second.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g ? g[i] : 0.0;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void sgd_step(ag::TensorMap& params, const ag::GradStore& grads, double lr) {
  check_grads(params, grads);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
  }
}

std::uint64_t params_checksum(const ag::TensorMap& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : params) h = checksum(t.values(), h);
  return h;
}

Snapshot snapshot(const ag::TensorMap& params) { return Snapshot{params, params_checksum(params)}; }

void restore(ag::TensorMap& params, const Snapshot& snap) {
  if (params.size() != snap.tensors.size()) throw std::invalid_argument("restore: parameter count differs");
  for (const auto& [name, t] : snap.tensors) {
    auto it = params.find(name);
    if (it == params.end() || it->second.shape() != t.shape()) {
      throw std::invalid_argument("restore: architecture mismatch at '" + name + "'");
    }
  }
  for (const auto& [name, t] : snap.tensors) {
    Tensor& dst = params.at(name);
    std::copy(t.data(), t.data() + t.size(), dst.data());
  }
  if (params_checksum(params) != snap.checksum) throw std::runtime_error("restore: checksum mismatch");
}

bool EarlyStopper::update(double metric) {
  if (count_ == 0 || metric > best_) {
    best_ = metric;
    best_index_ = count_;
    since_best_ = 0;
    improved_last_ = true;
  } else {
    ++since_best_;
    improved_last_ = false;
  }
  ++count_;
  return since_best_ >= patience_;
}

bool should_stop(const std::vector<double>& history, std::size_t patience) {
  EarlyStopper s(patience);
  for (double v : history)
    if (s.update(v)) return true;
  return false;
}

}  // namespace ssmrec
