#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "attrloc/ops.hpp"

namespace attrloc {

using LabelMatrix = std::vector<std::vector<int>>;

/// a_m = positive ratio of attribute m over the training labels;
/// gamma_m = exp(-a_m).
struct AttributePriors {
  std::vector<double> positive_ratio;
  std::vector<double> weights;

  std::size_t size() const { return weights.size(); }
};

inline AttributePriors compute_priors(const LabelMatrix& labels) {
  if (labels.empty()) throw ContractError("compute_priors: empty label set");
  const std::size_t m = labels.front().size();
  AttributePriors p;
  p.positive_ratio.assign(m, 0.0);
  for (const auto& row : labels) {
    if (row.size() != m) throw DimensionError("compute_priors: ragged label matrix");
    for (std::size_t j = 0; j < m; ++j) p.positive_ratio[j] += row[j] ? 1.0 : 0.0;
  }
  for (auto& a : p.positive_ratio) a /= static_cast<double>(labels.size());
  for (double a : p.positive_ratio) p.weights.push_back(std::exp(-a));
  return p;
}

enum class BceWeighting {
  both_terms,     // gamma_m scales the positive and negative terms alike
  positive_only,  // gamma_m scales only the positive term
};

/// Mean over the batch of -(1/M) sum_m gamma_m [y log s(z) + (1-y) log(1-s(z))],
/// evaluated as gamma * (max(z,0) - z*y + log1p(exp(-|z|))).
template <typename T>
BasicTensor<T> weighted_bce(BasicTensor<T> logits, const LabelMatrix& labels, const AttributePriors& priors,
                            BceWeighting weighting = BceWeighting::both_terms) {
  detail::require_rank(logits, 2, "weighted_bce", "logits");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  if (labels.size() != n || priors.size() != m)
    throw DimensionError("weighted_bce: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " label rows and " + std::to_string(priors.size()) + " priors");
  for (const auto& row : labels) {
    if (row.size() != m) throw DimensionError("weighted_bce: label row width mismatch");
    for (int y : row)
      if (y != 0 && y != 1) throw ContractError("weighted_bce: labels must be 0 or 1, got " + std::to_string(y));
  }
  auto* tape = detail::recording_tape<T>({&logits});
  auto out = detail::make_output<T>(Shape{1}, tape);
  const double norm = 1.0 / static_cast<double>(n * m);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double z = logits[i * m + j];
      const double y = labels[i][j];
      const double softplus_neg = std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z)));  // -log s(z)
      const double softplus_pos = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));   // -log(1 - s(z))
      const double g = priors.weights[j];
      const double pos_w = g, neg_w = weighting == BceWeighting::both_terms ? g : 1.0;
      total += y > 0 ? pos_w * softplus_neg : neg_w * softplus_pos;
    }
  out[0] = static_cast<T>(total * norm);
  if (tape)
    tape->record("weighted_bce", {logits}, out, [logits, out, labels, priors, weighting, n, m, norm]() mutable {
      const double go = out.grad()[0];
      auto gl = logits.grad_mut();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double z = logits[i * m + j];
          const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
          const double y = labels[i][j];
          const double g = priors.weights[j];
          const double pos_w = g, neg_w = weighting == BceWeighting::both_terms ? g : 1.0;
          // d/dz [pos_w*y*softplus(-z) + neg_w*(1-y)*softplus(z)]
          const double d = -pos_w * y * (1.0 - s) + neg_w * (1.0 - y) * s;
          gl[i * m + j] += static_cast<T>(go * d * norm);
        }
    });
  return out;
}

/// Deep supervision: L = sum_i L_i.
template <typename T>
BasicTensor<T> total_loss(const std::vector<BasicTensor<T>>& branch_losses) {
  if (branch_losses.empty()) throw ContractError("total_loss: no branch losses");
  auto acc = branch_losses.front();
  for (std::size_t i = 1; i < branch_losses.size(); ++i) acc = add(acc, branch_losses[i]);
  return acc;
}

}  // namespace attrloc
