#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "attrloc/ops.hpp"

namespace attrloc {

struct GradCheckOptions {
  double tolerance = 1e-3;
  double step = 1e-4;        // central-difference half-width
  double denom_floor = 1e-6;  // keeps the relative error defined for near-zero gradients
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  std::string name;
  std::vector<double> max_rel_error;  // one entry per input
  double worst = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Compares reverse-mode gradients of `fn(inputs)` against central finite
/// differences. A non-scalar output is reduced with fixed random weights so
/// every output element participates in the check.
template <typename T, typename Fn>
GradCheckReport grad_check(std::string name, Fn&& fn, std::vector<BasicTensor<T>> inputs,
                           const GradCheckOptions& opt = {}) {
  std::size_t total = 0;
  for (auto& in : inputs) {
    if (!in.all_finite()) throw NumericError("grad_check(" + name + "): non-finite input");
    in.set_requires_grad(true);
    in.clear_grad();
    total += in.numel();
  }
  if (total > 10000) throw ContractError("grad_check(" + name + "): inputs exceed 10^4 elements");

  std::vector<T> weights;
  auto projected = [&](const BasicTensor<T>& out) {
    if (!out.all_finite()) throw NumericError("grad_check(" + name + "): non-finite forward output");
    if (weights.empty()) {
      std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
      std::uniform_real_distribution<double> u(0.5, 1.5);
      std::bernoulli_distribution sign(0.5);
      weights.resize(out.numel());
      for (auto& w : weights) w = static_cast<T>(sign(rng) ? u(rng) : -u(rng));
    }
    return BasicTensor<T>(out.shape(), weights);
  };

  BasicTape<T> tape;
  {
    TapeScope<T> scope(tape);
    auto out = fn(inputs);
    auto loss = sum(mul(out, projected(out)));
    tape.backward(loss);
  }

  auto evaluate = [&]() {
    NoGradScope<T> off;
    auto out = fn(inputs);
    if (!out.all_finite()) throw NumericError("grad_check(" + name + "): non-finite forward output");
    double acc = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) acc += static_cast<double>(out[i]) * weights[i];
    return acc;
  };

  GradCheckReport report{name, {}, 0.0, opt.tolerance, true};
  for (auto& in : inputs) {
    std::vector<T> analytic(in.numel(), T{0});
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    double worst = 0.0;
    for (std::size_t i = 0; i < in.numel(); ++i) {
      const T saved = in[i];
      in[i] = static_cast<T>(saved + opt.step);
      const double fp = evaluate();
      in[i] = static_cast<T>(saved - opt.step);
      const double fm = evaluate();
      in[i] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.denom_floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    report.max_rel_error.push_back(worst);
    report.worst = std::max(report.worst, worst);
  }
  report.passed = report.worst <= opt.tolerance;
  return report;
}

}  // namespace attrloc
