#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrloc/loss.hpp"
#include "attrloc/sampler.hpp"

namespace attrloc {

using ScoreMatrix = std::vector<std::vector<double>>;

struct AttributeRates {
  std::string name;
  std::size_t tp = 0, p = 0, tn = 0, n = 0;
  double positive_accuracy() const { return static_cast<double>(tp) / static_cast<double>(p); }
  double negative_accuracy() const { return static_cast<double>(tn) / static_cast<double>(n); }
  double mean_accuracy() const { return 0.5 * (positive_accuracy() + negative_accuracy()); }
};

struct MetricsReport {
  double mA = 0, accuracy = 0, precision = 0, recall = 0, f1 = 0;
  std::size_t examples = 0, attributes = 0;
  std::vector<AttributeRates> per_attribute;
};

namespace detail {
inline void check_pair(const ScoreMatrix& scores, const LabelMatrix& labels, const char* op) {
  if (scores.size() != labels.size() || scores.empty())
    throw DimensionError(std::string(op) + ": " + std::to_string(scores.size()) + " score rows vs " +
                         std::to_string(labels.size()) + " label rows");
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i].size() != labels[i].size() || scores[i].size() != scores.front().size())
      throw DimensionError(std::string(op) + ": row " + std::to_string(i) + " width mismatch");
}
}  // namespace detail

/// Label-based mean accuracy, (1/2M) sum_i (TP_i/P_i + TN_i/N_i). A score
/// counts as positive when >= threshold.
inline std::pair<double, std::vector<AttributeRates>> label_based_mA(const ScoreMatrix& scores, const LabelMatrix& labels,
                                                                    double threshold = 0.5,
                                                                    const std::vector<std::string>& names = {}) {
  detail::check_pair(scores, labels, "label_based_mA");
  const std::size_t m = labels.front().size();
  std::vector<AttributeRates> rates(m);
  for (std::size_t j = 0; j < m; ++j) rates[j].name = j < names.size() ? names[j] : "attr" + std::to_string(j);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const bool pred = scores[i][j] >= threshold;
      if (labels[i][j]) {
        ++rates[j].p;
        rates[j].tp += pred;
      } else {
        ++rates[j].n;
        rates[j].tn += !pred;
      }
    }
  double acc = 0.0;
  for (const auto& r : rates) {
    if (r.p == 0 || r.n == 0)
      throw ContractError("label_based_mA: attribute '" + r.name + "' has no " + (r.p == 0 ? "positive" : "negative") +
                          " examples; its rate is undefined");
    acc += r.positive_accuracy() + r.negative_accuracy();
  }
  return {acc / (2.0 * static_cast<double>(m)), rates};
}

struct InstanceMetrics {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

/// Example-based metrics averaged over examples. An empty denominator scores
/// 1 when both sets are empty and 0 otherwise; F1 is taken from the averaged
/// precision and recall.
inline InstanceMetrics instance_metrics(const ScoreMatrix& scores, const LabelMatrix& labels, double threshold = 0.5) {
  detail::check_pair(scores, labels, "instance_metrics");
  InstanceMetrics r;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t inter = 0, uni = 0, pred = 0, truth = 0;
    for (std::size_t j = 0; j < labels[i].size(); ++j) {
      const bool p = scores[i][j] >= threshold, y = labels[i][j] != 0;
      inter += p && y;
      uni += p || y;
      pred += p;
      truth += y;
    }
    const bool both_empty = pred == 0 && truth == 0;
    r.accuracy += uni ? double(inter) / double(uni) : 1.0;
    r.precision += pred ? double(inter) / double(pred) : (both_empty ? 1.0 : 0.0);
    r.recall += truth ? double(inter) / double(truth) : (both_empty ? 1.0 : 0.0);
  }
  const double n = static_cast<double>(labels.size());
  r.accuracy /= n;
  r.precision /= n;
  r.recall /= n;
  r.f1 = r.precision + r.recall > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

inline MetricsReport evaluate_metrics(const ScoreMatrix& scores, const LabelMatrix& labels, double threshold = 0.5,
                                      const std::vector<std::string>& names = {}) {
  MetricsReport rep;
  auto [ma, rates] = label_based_mA(scores, labels, threshold, names);
  auto inst = instance_metrics(scores, labels, threshold);
  rep.mA = ma;
  rep.per_attribute = std::move(rates);
  rep.accuracy = inst.accuracy;
  rep.precision = inst.precision;
  rep.recall = inst.recall;
  rep.f1 = inst.f1;
  rep.examples = labels.size();
  rep.attributes = labels.front().size();
  return rep;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& a : r.per_attribute)
    per.push_back({{"name", a.name},
                   {"tp", a.tp},
                   {"p", a.p},
                   {"tn", a.tn},
                   {"n", a.n},
                   {"positive_accuracy", a.positive_accuracy()},
                   {"negative_accuracy", a.negative_accuracy()},
                   {"mA", a.mean_accuracy()}});
  return {{"mA", r.mA},           {"accuracy", r.accuracy}, {"precision", r.precision},
          {"recall", r.recall},   {"f1", r.f1},             {"examples", r.examples},
          {"attributes", r.attributes}, {"per_attribute", per}};
}

inline double box_iou(const ImageBox& a, const ImageBox& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace attrloc
