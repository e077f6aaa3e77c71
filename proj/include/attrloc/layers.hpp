#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "attrloc/ops.hpp"

namespace attrloc {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

// BatchNorm running statistics exposed as named tensors for checkpointing.
template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values;
};

using Rng = std::mt19937_64;

template <typename T>
std::vector<T> normal_values(std::size_t count, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(count);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

template <typename T>
std::vector<T> uniform_values(std::size_t count, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(count);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

/// Fully connected layer, weight stored (in, out).
template <typename T>
struct Linear {
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = BasicTensor<T>::parameter({in, out}, uniform_values<T>(in * out, bound, rng));
    bias = BasicTensor<T>::parameter({out}, uniform_values<T>(out, bound, rng));
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  BasicTensor<T> operator()(BasicTensor<T> x) const { return dense(std::move(x), weight, bias); }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

/// Square-kernel convolution with bias, He-normal initialized.
template <typename T>
struct Conv {
  BasicTensor<T> weight;
  BasicTensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv() = default;
  Conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    const double fan_in = static_cast<double>(in * kernel * kernel);
    weight = BasicTensor<T>::parameter({out, in, kernel, kernel},
                                       normal_values<T>(out * in * kernel * kernel, std::sqrt(2.0 / fan_in), rng));
    bias = BasicTensor<T>::parameter({out}, std::vector<T>(out, T{0}));
  }

  BasicTensor<T> operator()(BasicTensor<T> x) const { return conv2d(std::move(x), weight, bias, stride, padding); }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct BatchNorm {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  BatchNormStats<T> stats;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(BasicTensor<T>::parameter({channels}, std::vector<T>(channels, T{1}))),
        beta(BasicTensor<T>::parameter({channels}, std::vector<T>(channels, T{0}))),
        stats(channels) {}

  BasicTensor<T> operator()(BasicTensor<T> x, Mode mode) { return batchnorm2d(std::move(x), gamma, beta, stats, mode); }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
  void collect_buffers(std::vector<NamedBuffer<T>>& out, const std::string& prefix) {
    out.push_back({prefix + ".running_mean", &stats.running_mean});
    out.push_back({prefix + ".running_var", &stats.running_var});
  }
};

/// conv3x3 -> BN -> ReLU
template <typename T>
struct ConvBnRelu {
  Conv<T> conv;
  BatchNorm<T> bn;

  ConvBnRelu() = default;
  ConvBnRelu(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
      : conv(in, out, 3, stride, 1, rng), bn(out) {}

  BasicTensor<T> operator()(BasicTensor<T> x, Mode mode) { return relu(bn(conv(std::move(x)), mode)); }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    conv.collect(out, prefix + ".conv");
    bn.collect(out, prefix + ".bn");
  }
  void collect_buffers(std::vector<NamedBuffer<T>>& out, const std::string& prefix) {
    bn.collect_buffers(out, prefix + ".bn");
  }
};

template <typename T>
std::size_t count_elements(const NamedTensors<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace attrloc
