#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "attrloc/alm.hpp"
#include "attrloc/gradcheck.hpp"
#include "attrloc/loss.hpp"
#include "attrloc/network.hpp"
#include "attrloc/sampler.hpp"

namespace attrloc {

namespace detail {

using GcFn = std::function<Tensor64(std::vector<Tensor64>&)>;

struct GcCase {
  std::string name;
  std::function<std::vector<Tensor64>(Rng&)> make_inputs;
  GcFn fn;
};

inline Tensor64 gc_uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor64 t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Values kept at least `margin` away from zero so ReLU kinks sit outside the
// finite-difference stencil.
inline Tensor64 gc_away_from_zero(Shape shape, Rng& rng, double margin = 0.05) {
  auto t = gc_uniform(std::move(shape), rng);
  for (auto& v : t.data()) v = v >= 0 ? v + margin : v - margin;
  return t;
}

// Distinct values on a 0.01 spacing, shuffled: max-pool windows never tie.
inline Tensor64 gc_distinct(Shape shape, Rng& rng) {
  Tensor64 t(std::move(shape));
  std::vector<double> vals(t.numel());
  std::iota(vals.begin(), vals.end(), 0.0);
  std::shuffle(vals.begin(), vals.end(), rng);
  std::uniform_real_distribution<double> jitter(0.0, 0.002);
  for (std::size_t i = 0; i < vals.size(); ++i) t[i] = 0.01 * vals[i] - 0.005 * double(vals.size()) + jitter(rng);
  return t;
}

// Sampling grid whose pixel coordinates stay 0.1 away from integers, some
// of them outside the map to exercise the zero padding.
inline Tensor64 gc_grid(std::size_t n, std::size_t ho, std::size_t wo, std::size_t h, std::size_t w, Rng& rng) {
  std::uniform_int_distribution<int> cell_x(-1, static_cast<int>(w) - 1), cell_y(-1, static_cast<int>(h) - 1);
  std::uniform_real_distribution<double> frac(0.1, 0.9);
  Tensor64 g(Shape{n, ho, wo, 2});
  for (std::size_t p = 0; p < n * ho * wo; ++p) {
    const double px = cell_x(rng) + frac(rng), py = cell_y(rng) + frac(rng);
    g[2 * p] = 2.0 * px / double(w - 1) - 1.0;
    g[2 * p + 1] = 2.0 * py / double(h - 1) - 1.0;
  }
  return g;
}

// Sigmoid whose backward is 10% too large: the negative control.
inline Tensor64 broken_sigmoid(Tensor64 x) {
  auto* tape = recording_tape<double>({&x});
  auto out = make_output<double>(x.shape(), tape);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = sigmoid_scalar(x[i]);
  if (tape)
    tape->record("broken_sigmoid", {x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 1.1 * g[i] * out[i] * (1.0 - out[i]);
    });
  return out;
}

inline LabelMatrix gc_labels(std::size_t n, std::size_t m, Rng& rng) {
  std::bernoulli_distribution b(0.4);
  LabelMatrix y(n, std::vector<int>(m));
  for (auto& row : y)
    for (auto& v : row) v = b(rng);
  return y;
}

inline std::vector<GcCase> gradcheck_cases(std::uint64_t seed, bool include_broken) {
  std::vector<GcCase> cases;
  auto add_case = [&](std::string name, std::function<std::vector<Tensor64>(Rng&)> make, GcFn fn) {
    cases.push_back({std::move(name), std::move(make), std::move(fn)});
  };
  using V = std::vector<Tensor64>;

  add_case("add", [](Rng& r) { return V{gc_uniform({2, 3}, r), gc_uniform({2, 3}, r)}; },
           [](V& in) { return add(in[0], in[1]); });
  add_case("mul", [](Rng& r) { return V{gc_uniform({2, 3}, r), gc_uniform({2, 3}, r)}; },
           [](V& in) { return mul(in[0], in[1]); });
  add_case("scale", [](Rng& r) { return V{gc_uniform({3, 2}, r)}; }, [](V& in) { return scale(in[0], -1.7); });
  add_case("sum", [](Rng& r) { return V{gc_uniform({2, 2, 2}, r)}; }, [](V& in) { return sum(in[0]); });
  add_case("mean", [](Rng& r) { return V{gc_uniform({5}, r)}; }, [](V& in) { return mean(in[0]); });
  add_case("relu", [](Rng& r) { return V{gc_away_from_zero({3, 4}, r)}; }, [](V& in) { return relu(in[0]); });
  add_case("sigmoid", [](Rng& r) { return V{gc_uniform({3, 4}, r, -4, 4)}; }, [](V& in) { return sigmoid(in[0]); });
  add_case("tanh", [](Rng& r) { return V{gc_uniform({3, 4}, r, -2, 2)}; }, [](V& in) { return tanh(in[0]); });
  add_case("flatten", [](Rng& r) { return V{gc_uniform({2, 2, 3, 1}, r)}; }, [](V& in) { return flatten(in[0]); });
  add_case("concat_channels", [](Rng& r) { return V{gc_uniform({2, 2, 2, 3}, r), gc_uniform({2, 3, 2, 3}, r)}; },
           [](V& in) { return concat_channels(in[0], in[1]); });
  add_case("slice_channels", [](Rng& r) { return V{gc_uniform({2, 4, 2, 2}, r)}; },
           [](V& in) { return slice_channels(in[0], 1, 3); });
  add_case("concat_columns", [](Rng& r) { return V{gc_uniform({3, 1}, r), gc_uniform({3, 2}, r)}; },
           [](V& in) { return concat_columns<double>({in[0], in[1]}); });
  add_case("dense", [](Rng& r) { return V{gc_uniform({3, 4}, r), gc_uniform({4, 2}, r), gc_uniform({2}, r)}; },
           [](V& in) { return dense(in[0], in[1], in[2]); });
  add_case("conv2d",
           [](Rng& r) { return V{gc_uniform({2, 2, 5, 4}, r), gc_uniform({3, 2, 3, 3}, r), gc_uniform({3}, r)}; },
           [](V& in) { return conv2d(in[0], in[1], in[2], 1, 1); });
  add_case("conv2d_stride2",
           [](Rng& r) { return V{gc_uniform({2, 2, 6, 5}, r), gc_uniform({2, 2, 3, 3}, r), gc_uniform({2}, r)}; },
           [](V& in) { return conv2d(in[0], in[1], in[2], 2, 1); });
  add_case("batchnorm2d_train",
           [](Rng& r) { return V{gc_uniform({3, 2, 2, 2}, r), gc_uniform({2}, r, 0.5, 1.5), gc_uniform({2}, r)}; },
           [](V& in) {
             BatchNormStats<double> stats(2);
             return batchnorm2d(in[0], in[1], in[2], stats, Mode::train);
           });
  add_case("batchnorm2d_eval",
           [](Rng& r) { return V{gc_uniform({2, 2, 2, 2}, r), gc_uniform({2}, r, 0.5, 1.5), gc_uniform({2}, r)}; },
           [](V& in) {
             BatchNormStats<double> stats(2);
             stats.running_mean = {0.2, -0.1};
             stats.running_var = {0.8, 1.3};
             return batchnorm2d(in[0], in[1], in[2], stats, Mode::eval);
           });
  add_case("max_pool2x2", [](Rng& r) { return V{gc_distinct({2, 2, 4, 4}, r)}; },
           [](V& in) { return pool2d(in[0], Pool::max2x2); });
  add_case("global_avg_pool", [](Rng& r) { return V{gc_uniform({2, 3, 3, 2}, r)}; },
           [](V& in) { return global_avg_pool(in[0]); });
  add_case("upsample_nearest2x", [](Rng& r) { return V{gc_uniform({1, 2, 2, 3}, r)}; },
           [](V& in) { return upsample_nearest2x(in[0]); });
  add_case("mul_channels", [](Rng& r) { return V{gc_uniform({2, 3, 2, 2}, r), gc_uniform({2, 3}, r)}; },
           [](V& in) { return mul_channels(in[0], in[1]); });
  add_case("mul_spatial", [](Rng& r) { return V{gc_uniform({2, 3, 2, 2}, r), gc_uniform({2, 1, 2, 2}, r)}; },
           [](V& in) { return mul_spatial(in[0], in[1]); });
  add_case("channel_mean", [](Rng& r) { return V{gc_uniform({2, 3, 2, 2}, r)}; },
           [](V& in) { return channel_mean(in[0]); });
  add_case("constrain_params", [](Rng& r) { return V{gc_uniform({3, 4}, r, -3, 3)}; },
           [](V& in) { return constrain_params(in[0]); });
  add_case("affine_grid",
           [](Rng& r) { return V{gc_uniform({2, 4}, r)}; },
           [](V& in) { return affine_grid(in[0], 3, 4); });
  add_case("grid_sample",
           [](Rng& r) { return V{gc_uniform({2, 2, 4, 5}, r), gc_grid(2, 3, 3, 4, 5, r)}; },
           [](V& in) { return grid_sample(in[0], in[1]); });
  add_case("weighted_bce",
           [](Rng& r) { return V{gc_uniform({4, 3}, r, -3, 3)}; },
           [seed](V& in) {
             Rng r(seed + 17);
             const auto y = gc_labels(4, 3, r);
             return weighted_bce(in[0], y, compute_priors(y));
           });
  add_case("channel_gate",
           [](Rng& r) {
             return V{gc_uniform({2, 16, 3, 2}, r), gc_away_from_zero({16, 1}, r, 0.1), gc_uniform({1}, r, 0.2, 0.5),
                      gc_uniform({1, 16}, r), gc_uniform({16}, r)};
           },
           [](V& in) {
             ChannelGate<double> gate;
             gate.squeeze.weight = in[1];
             gate.squeeze.bias = in[2];
             gate.excite.weight = in[3];
             gate.excite.bias = in[4];
             return channel_reweight(in[0], gate);
           });
  add_case("attention_readout",
           [](Rng& r) { return V{gc_uniform({2, 3, 2, 2}, r), gc_uniform({2, 1, 2, 2}, r), gc_uniform({3, 1}, r)}; },
           [](V& in) {
             Linear<double> cls;
             cls.weight = in[2];
             cls.bias = Tensor64(Shape{1}, 0.1);
             return attention_readout(in[0], in[1], cls);
           });
  // Whole ALM unit followed by the weighted BCE; the inputs are the features
  // and the raw transform head, so the gradient reaching the box parameters
  // is checked end to end.
  add_case("alm_composite_loss",
           [](Rng& r) {
             return V{gc_uniform({3, 16, 4, 3}, r, 0.0, 1.0), gc_uniform({16, 4}, r, -0.3, 0.3),
                      Tensor64(Shape{4}, std::vector<double>{1.0, 0.8, 0.1, -0.2})};
           },
           [seed](V& in) {
             Rng init(seed + 29);
             AlmUnit<double> unit(0, 1, 16, 16, true, init);
             unit.loc.weight = in[1];
             unit.loc.bias = in[2];
             Rng lr(seed + 31);
             const auto y = gc_labels(3, 1, lr);
             AttributePriors priors{{0.4}, {std::exp(-0.4)}};
             return weighted_bce(alm_forward(in[0], unit).logit, y, priors);
           });
  if (include_broken)
    add_case("broken_sigmoid", [](Rng& r) { return V{gc_uniform({3, 4}, r, -2, 2)}; },
             [](V& in) { return broken_sigmoid(in[0]); });
  return cases;
}

}  // namespace detail

struct GradCheckSuiteResult {
  std::string op;
  std::vector<GradCheckReport> runs;  // one per seed
  double worst = 0;
  bool passed = true;
};

/// Every differentiable primitive plus the composite ALM path, once per seed.
inline std::vector<GradCheckSuiteResult> run_gradcheck_suite(const std::vector<std::uint64_t>& seeds,
                                                            bool include_broken = false, const GradCheckOptions& base = {}) {
  std::vector<GradCheckSuiteResult> results;
  bool first = true;
  for (auto seed : seeds) {
    auto cases = detail::gradcheck_cases(seed, include_broken);
    if (first) {
      for (const auto& c : cases) results.push_back({c.name, {}, 0.0, true});
      first = false;
    }
    for (std::size_t k = 0; k < cases.size(); ++k) {
      Rng rng(seed * 1000003ULL + k);
      auto inputs = cases[k].make_inputs(rng);
      GradCheckOptions opt = base;
      opt.seed = seed;
      auto rep = grad_check<double>(cases[k].name, cases[k].fn, inputs, opt);
      results[k].worst = std::max(results[k].worst, rep.worst);
      results[k].passed = results[k].passed && rep.passed;
      results[k].runs.push_back(std::move(rep));
    }
  }
  return results;
}

}  // namespace attrloc
