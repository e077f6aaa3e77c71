#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "attrloc/tensor.hpp"

namespace attrloc {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
};

/// Moment buffers for one parameter list. Weight decay is the L2 form: the
/// decay term is added to the gradient before the moment updates.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
  bool initialized = false;

  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : config(cfg) {}

  void init(const std::vector<BasicTensor<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.numel(), T{0});
      v.emplace_back(p.numel(), T{0});
    }
    step = 0;
    initialized = true;
  }
};

template <typename T>
void adam_step(std::vector<BasicTensor<T>>& params, AdamState<T>& state) {
  if (!state.initialized) throw ContractError("adam_step: optimizer state was never initialized");
  if (state.m.size() != params.size()) throw ContractError("adam_step: parameter list changed since init");
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (!p.requires_grad()) continue;
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.numel()) throw DimensionError("adam_step: moment buffer does not match " + shape_str(p.shape()));
    auto grad = p.grad();
    auto data = p.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = (grad.empty() ? 0.0 : static_cast<double>(grad[i])) + c.weight_decay * data[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      data[i] = static_cast<T>(data[i] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

}  // namespace attrloc
