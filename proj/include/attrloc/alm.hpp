#pragma once

#include <string>
#include <vector>

#include "attrloc/layers.hpp"
#include "attrloc/sampler.hpp"

namespace attrloc {

/// Squeeze-and-excitation style gate: pooled (N,C) -> relu(dense C->C/r) ->
/// sigmoid(dense C/r->C).
template <typename T>
struct ChannelGate {
  std::size_t reduction = 16;
  Linear<T> squeeze;
  Linear<T> excite;

  ChannelGate() = default;
  ChannelGate(std::size_t channels, std::size_t reduction_, Rng& rng)
      : reduction(reduction_),
        squeeze(channels, hidden_width(channels, reduction_), rng),
        excite(hidden_width(channels, reduction_), channels, rng) {}

  static std::size_t hidden_width(std::size_t channels, std::size_t reduction) {
    if (reduction == 0 || channels % reduction != 0)
      throw ContractError("ChannelGate: reduction " + std::to_string(reduction) + " does not divide " +
                          std::to_string(channels) + " channels");
    return channels / reduction;
  }

  std::size_t channels() const { return squeeze.in_features(); }

  BasicTensor<T> operator()(BasicTensor<T> pooled) const { return sigmoid(excite(relu(squeeze(std::move(pooled))))); }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    squeeze.collect(out, prefix + ".squeeze");
    excite.collect(out, prefix + ".excite");
  }
};

/// y = x * g + x, g broadcast over space.
template <typename T>
BasicTensor<T> apply_channel_gate(BasicTensor<T> x, BasicTensor<T> gate_values) {
  return add(mul_channels(x, std::move(gate_values)), x);
}

template <typename T>
BasicTensor<T> channel_reweight(BasicTensor<T> x, const ChannelGate<T>& gate) {
  if (x.rank() != 4 || x.dim(1) != gate.channels())
    throw DimensionError("channel_reweight: input " + shape_str(x.shape()) + " does not have " +
                         std::to_string(gate.channels()) + " channels");
  auto pooled = flatten(global_avg_pool(x));
  return apply_channel_gate(x, gate(pooled));
}

template <typename T>
struct TransformEstimate {
  BasicTensor<T> raw;    // (N,4) before squashing
  BasicTensor<T> theta;  // (N,4) = (sx, sy, tx, ty)
};

/// GAP -> dense C->4 -> (sigmoid, sigmoid, tanh, tanh).
template <typename T>
TransformEstimate<T> estimate_transform(BasicTensor<T> x, const Linear<T>& loc_head) {
  auto raw = loc_head(flatten(global_avg_pool(std::move(x))));
  auto theta = constrain_params(raw);
  return {raw, theta};
}

/// One attribute at one pyramid level.
template <typename T>
struct AlmUnit {
  std::size_t attribute = 0;
  std::size_t level = 0;
  bool use_gate = true;
  ChannelGate<T> gate;
  Linear<T> loc;
  Linear<T> classifier;
  std::size_t sample_h = 0;  // 0: match the input map
  std::size_t sample_w = 0;

  struct Output {
    BasicTensor<T> logit;  // (N,1)
    TransformEstimate<T> transform;
  };

  AlmUnit() = default;
  AlmUnit(std::size_t attribute_, std::size_t level_, std::size_t channels, std::size_t reduction, bool use_gate_,
          Rng& rng)
      : attribute(attribute_), level(level_), use_gate(use_gate_),
        gate(use_gate_ ? ChannelGate<T>(channels, reduction, rng) : ChannelGate<T>()),
        loc(channels, 4, rng), classifier(channels, 1, rng) {
    // start from a centered box of ~88% extent
    std::fill(loc.weight.data().begin(), loc.weight.data().end(), T{0});
    loc.bias[0] = T{2};
    loc.bias[1] = T{2};
    loc.bias[2] = T{0};
    loc.bias[3] = T{0};
  }

  std::size_t channels() const { return loc.in_features(); }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    if (use_gate) gate.collect(out, prefix + ".gate");
    loc.collect(out, prefix + ".loc");
    classifier.collect(out, prefix + ".cls");
  }
};

template <typename T>
typename AlmUnit<T>::Output alm_forward(BasicTensor<T> x, const AlmUnit<T>& unit) {
  if (x.rank() != 4 || x.dim(1) != unit.channels())
    throw DimensionError("alm_forward: input " + shape_str(x.shape()) + " does not have " +
                         std::to_string(unit.channels()) + " channels");
  auto y = unit.use_gate ? channel_reweight(x, unit.gate) : x;
  auto transform = estimate_transform(y, unit.loc);
  const std::size_t oh = unit.sample_h ? unit.sample_h : x.dim(2);
  const std::size_t ow = unit.sample_w ? unit.sample_w : x.dim(3);
  auto region = grid_sample(y, affine_grid(transform.theta, oh, ow));
  auto logit = unit.classifier(flatten(global_avg_pool(region)));
  return {logit, transform};
}

/// Weight-only count of gate + loc head, plus what that figure leaves out.
struct AlmParamCount {
  std::size_t gate_weights = 0;  // 2 C^2 / r
  std::size_t loc_weights = 0;   // 4 C
  std::size_t core = 0;          // gate_weights + loc_weights
  std::size_t biases = 0;        // gate + loc biases
  std::size_t classifier = 0;    // C weights + 1 bias
  std::size_t total = 0;
};

inline AlmParamCount alm_param_count(std::size_t channels, std::size_t reduction) {
  if (reduction == 0 || channels % reduction != 0)
    throw ContractError("alm_param_count: reduction " + std::to_string(reduction) + " does not divide " +
                        std::to_string(channels));
  AlmParamCount c;
  const std::size_t hidden = channels / reduction;
  c.gate_weights = 2 * channels * hidden;
  c.loc_weights = 4 * channels;
  c.core = c.gate_weights + c.loc_weights;
  c.biases = hidden + channels + 4;
  c.classifier = channels + 1;
  c.total = c.core + c.biases + c.classifier;
  return c;
}

/// Same breakdown, obtained by walking the unit's tensors.
template <typename T>
AlmParamCount walk_param_count(const AlmUnit<T>& unit) {
  AlmParamCount c;
  if (unit.use_gate) {
    c.gate_weights = unit.gate.squeeze.weight.numel() + unit.gate.excite.weight.numel();
    c.biases += unit.gate.squeeze.bias.numel() + unit.gate.excite.bias.numel();
  }
  c.loc_weights = unit.loc.weight.numel();
  c.biases += unit.loc.bias.numel();
  c.core = c.gate_weights + c.loc_weights;
  c.classifier = unit.classifier.weight.numel() + unit.classifier.bias.numel();
  c.total = c.core + c.biases + c.classifier;
  return c;
}

}  // namespace attrloc
