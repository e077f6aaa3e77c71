#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrloc/adam.hpp"
#include "attrloc/config.hpp"
#include "attrloc/loss.hpp"
#include "attrloc/metrics.hpp"
#include "attrloc/network.hpp"
#include "attrloc/synth.hpp"

namespace attrloc {

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  std::vector<std::string> branches;
  std::vector<double> branch_losses;
  double total = 0;
  double wall_seconds = 0;
  std::size_t steps = 0;

  nlohmann::json to_json() const {
    nlohmann::json losses = nlohmann::json::object();
    for (std::size_t i = 0; i < branches.size(); ++i) losses[branches[i]] = branch_losses[i];
    return {{"epoch", epoch}, {"lr", lr}, {"losses", losses}, {"total", total}, {"steps", steps}, {"wall_time", wall_seconds}};
  }
};

struct TrainOutcome {
  Model<float> model;
  AttributePriors priors;
  std::vector<EpochRecord> epochs;
  double final_loss = 0;
};

namespace detail {

template <typename T>
bool finite_values(const BasicTensor<T>& t) {
  return t.defined() && t.all_finite();
}

/// Name of the first non-finite tensor, walking parameters in forward order,
/// then activations, then branch outputs.
template <typename T>
std::string first_non_finite(const Model<T>& model, const ForwardResult<T>* fwd, const std::vector<BasicTensor<T>>& losses) {
  for (const auto& [name, t] : model.named_parameters())
    if (!finite_values(t)) return "parameter " + name;
  if (fwd) {
    for (std::size_t i = 0; i < kNumLevels; ++i)
      if (!finite_values(fwd->backbone.phi[i])) return "backbone feature phi" + std::to_string(i + 1);
    for (std::size_t i = 0; i < kNumLevels; ++i)
      if (!finite_values(fwd->pyramid.X[i])) return "pyramid feature X" + std::to_string(i + 1);
    const auto logits = fwd->branch_logits();
    const auto names = fwd->branch_names();
    for (std::size_t b = 0; b < logits.size(); ++b)
      if (!finite_values(logits[b])) return names[b] + " logits";
    for (std::size_t b = 0; b < losses.size() && b < names.size(); ++b)
      if (!finite_values(losses[b])) return names[b] + " loss";
  }
  return "total loss";
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace detail

/// Deep-supervised training: every branch's logits get the weighted BCE and
/// the optimized objective is their sum. Writes one JSON line per epoch to
/// `log` when given.
inline TrainOutcome train_model(const RunConfig& cfg, const Dataset& train, std::ostream* log = nullptr) {
  cfg.validate();
  if (train.attributes.size() != cfg.model.num_attributes())
    throw ContractError("train: dataset has " + std::to_string(train.attributes.size()) + " attributes, model expects " +
                        std::to_string(cfg.model.num_attributes()));
  if (train.height != cfg.model.image_h || train.width != cfg.model.image_w)
    throw DimensionError("train: dataset images are " + std::to_string(train.height) + "x" + std::to_string(train.width) +
                         ", model expects " + std::to_string(cfg.model.image_h) + "x" + std::to_string(cfg.model.image_w));
  TrainOutcome out{Model<float>(cfg.model, cfg.seed), compute_priors(train.labels()), {}, 0.0};
  auto& model = out.model;
  auto params = model.parameters();
  AdamState<float> adam(cfg.optimizer.adam(cfg.optimizer.lr));
  adam.init(params);

  for (std::size_t epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    adam.config.lr = cfg.optimizer.lr_at(epoch);
    std::mt19937_64 aug_rng(detail::mix_seed(cfg.seed, 2 * epoch + 1));
    const auto batches = minibatches(train.samples.size(), cfg.optimizer.batch_size, detail::mix_seed(cfg.seed, 2 * epoch));

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = adam.config.lr;
    std::size_t seen = 0;
    for (const auto& batch : batches) {
      if (batch.size() < 2) continue;  // batch norm needs two samples
      std::vector<SynthSample> augmented;
      augmented.reserve(batch.size());
      for (auto idx : batch)
        augmented.push_back(mirror_augment(train.samples[idx], train.height, train.width, cfg.data.mirror_prob, aug_rng));
      std::vector<const SynthSample*> ptrs;
      LabelMatrix labels;
      for (const auto& s : augmented) {
        ptrs.push_back(&s);
        labels.push_back(s.labels);
      }
      const auto images = make_image_batch(ptrs, train.height, train.width);

      Tape tape;
      TapeScope<float> scope(tape);
      std::optional<ForwardResult<float>> fwd_slot;
      try {
        fwd_slot.emplace(model.forward(images, Mode::train));
      } catch (const NumericError& e) {
        throw NumericError("non-finite forward pass at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(rec.steps + 1) + ": first non-finite tensor is " +
                           detail::first_non_finite<float>(model, nullptr, {}) + " (" + e.what() + ")");
      }
      auto& fwd = *fwd_slot;
      std::vector<Tensor> losses;
      for (const auto& logits : fwd.branch_logits()) losses.push_back(weighted_bce(logits, labels, out.priors, cfg.bce_weighting));
      auto total = total_loss(losses);
      if (!std::isfinite(total.item()))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(rec.steps + 1) +
                           ": first non-finite tensor is " + detail::first_non_finite(model, &fwd, losses));
      model.zero_grad();
      tape.backward(total);
      for (const auto& [name, p] : model.named_parameters())
        if (p.has_grad())
          for (float g : p.grad())
            if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter " + name);
      adam_step(params, adam);

      if (rec.branches.empty()) {
        rec.branches = fwd.branch_names();
        rec.branch_losses.assign(losses.size(), 0.0);
      }
      for (std::size_t b = 0; b < losses.size(); ++b) rec.branch_losses[b] += losses[b].item() * double(batch.size());
      rec.total += total.item() * double(batch.size());
      seen += batch.size();
      ++rec.steps;
    }
    if (seen) {
      for (auto& l : rec.branch_losses) l /= double(seen);
      rec.total /= double(seen);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.final_loss = rec.total;
    if (log) *log << rec.to_json().dump() << '\n' << std::flush;
    out.epochs.push_back(std::move(rec));
  }
  return out;
}

// -------------------- evaluation --------------------

struct EvalOutput {
  std::vector<std::string> branch_names;
  std::vector<Matrix> branch_logits;  // (N, M) per branch
  Matrix fused;
  // thetas[level][attribute][sample], empty for disabled levels
  std::array<std::vector<std::vector<BoxTransform>>, kNumLevels> thetas;
};

template <typename T>
EvalOutput run_inference(Model<T>& model, const Dataset& data, std::size_t batch_size = 64) {
  if (data.attributes.size() != model.config.num_attributes())
    throw ContractError("eval: dataset has " + std::to_string(data.attributes.size()) + " attributes, checkpoint expects " +
                        std::to_string(model.config.num_attributes()));
  if (data.height != model.config.image_h || data.width != model.config.image_w)
    throw DimensionError("eval: dataset images do not match the model input size");
  NoGradScope<T> no_grad;
  EvalOutput out;
  const std::size_t n = data.samples.size(), m = model.config.num_attributes();
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<const SynthSample*> ptrs;
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) ptrs.push_back(&data.samples[i]);
    auto images = make_image_batch(ptrs, data.height, data.width);
    BasicTensor<T> batch(images.shape());
    for (std::size_t i = 0; i < images.numel(); ++i) batch[i] = static_cast<T>(images[i]);
    auto fwd = model.forward(batch, Mode::eval);
    auto logits = fwd.branch_logits();
    if (out.branch_names.empty()) {
      out.branch_names = fwd.branch_names();
      out.branch_logits.resize(logits.size());
      for (std::size_t l = 0; l < kNumLevels; ++l)
        if (!fwd.thetas[l].empty()) out.thetas[l].assign(m, {});
    }
    for (std::size_t b = 0; b < logits.size(); ++b)
      for (auto& row : to_matrix(logits[b])) out.branch_logits[b].push_back(std::move(row));
    for (std::size_t l = 0; l < kNumLevels; ++l)
      for (std::size_t a = 0; a < fwd.thetas[l].size(); ++a)
        for (const auto& t : to_box_transforms(fwd.thetas[l][a])) out.thetas[l][a].push_back(t);
  }
  out.fused = fuse_rows(out.branch_logits, model.config.fusion);
  return out;
}

inline ScoreMatrix sigmoid_scores(const Matrix& logits) {
  ScoreMatrix s = logits;
  for (auto& row : s)
    for (auto& v : row) v = sigmoid_scalar(v);
  return s;
}

struct EvalReport {
  MetricsReport fused;
  std::vector<std::pair<std::string, MetricsReport>> branches;

  nlohmann::json to_json() const {
    nlohmann::json j = attrloc::to_json(fused);
    nlohmann::json b = nlohmann::json::object();
    for (const auto& [name, rep] : branches) b[name] = attrloc::to_json(rep);
    j["branches"] = b;
    return j;
  }
};

inline EvalReport evaluate_outputs(const EvalOutput& out, const Dataset& data, double threshold = 0.5) {
  EvalReport r;
  const auto labels = data.labels();
  r.fused = evaluate_metrics(sigmoid_scores(out.fused), labels, threshold, data.attributes);
  for (std::size_t b = 0; b < out.branch_names.size(); ++b)
    r.branches.emplace_back(out.branch_names[b],
                            evaluate_metrics(sigmoid_scores(out.branch_logits[b]), labels, threshold, data.attributes));
  return r;
}

// -------------------- localization --------------------

inline ImageBox predicted_image_box(const BoxTransform& t, const ModelConfig& cfg, std::size_t level) {
  const auto sizes = cfg.level_sizes();
  return feature_box_to_image_box(t, kLevelStrides[level], sizes[level].first, sizes[level].second, cfg.image_h,
                                  cfg.image_w);
}

inline std::optional<std::size_t> finest_level(const EvalOutput& out) {
  for (std::size_t l = 0; l < kNumLevels; ++l)
    if (!out.thetas[l].empty()) return l;
  return std::nullopt;
}

struct LocalizationReport {
  std::size_t level = 0;  // 0-based
  std::vector<std::string> attributes;
  std::vector<double> mean_iou;  // per concrete attribute
  std::vector<std::size_t> count;
  double mean = 0;  // average of the per-attribute means
};

inline LocalizationReport localization_report(const EvalOutput& out, const Dataset& data, const ModelConfig& cfg,
                                              std::optional<std::size_t> level = std::nullopt) {
  if (!level) level = finest_level(out);
  if (!level || out.thetas[*level].empty()) throw ContractError("localization: no ALM level available");
  LocalizationReport r;
  r.level = *level;
  std::size_t used = 0;
  for (std::size_t a = 0; a < data.attributes.size(); ++a) {
    if (!data.concrete[a]) continue;
    double acc = 0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
      const auto& gt = data.samples[i].boxes[a];
      if (!gt) continue;
      acc += box_iou(predicted_image_box(out.thetas[*level][a][i], cfg, *level), *gt);
      ++cnt;
    }
    r.attributes.push_back(data.attributes[a]);
    r.mean_iou.push_back(cnt ? acc / double(cnt) : 0.0);
    r.count.push_back(cnt);
    if (cnt) {
      r.mean += r.mean_iou.back();
      ++used;
    }
  }
  if (used) r.mean /= double(used);
  return r;
}

/// Monte-Carlo mean IoU between ground-truth boxes and boxes drawn from a
/// transform distribution, averaged per attribute like localization_report.
template <typename Draw>
double monte_carlo_box_iou(const Dataset& data, const ModelConfig& cfg, std::size_t level, std::size_t draws,
                           std::uint64_t seed, Draw&& draw) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<const ImageBox*>> gts;
  for (std::size_t a = 0; a < data.attributes.size(); ++a) {
    if (!data.concrete[a]) continue;
    std::vector<const ImageBox*> boxes;
    for (const auto& s : data.samples)
      if (s.boxes[a]) boxes.push_back(&*s.boxes[a]);
    if (!boxes.empty()) gts.push_back(std::move(boxes));
  }
  if (gts.empty()) throw ContractError("monte_carlo_box_iou: dataset has no ground-truth boxes");
  double total = 0;
  for (const auto& boxes : gts) {
    std::uniform_int_distribution<std::size_t> pick(0, boxes.size() - 1);
    double acc = 0;
    for (std::size_t k = 0; k < draws; ++k) {
      const BoxTransform t = draw(rng);
      acc += box_iou(predicted_image_box(t, cfg, level), *boxes[pick(rng)]);
    }
    total += acc / double(draws);
  }
  return total / double(gts.size());
}

/// Transform uniformly spread over its constrained range.
inline BoxTransform random_transform(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> s(0.0, 1.0), t(-1.0, 1.0);
  BoxTransform b;
  b.sx = s(rng);
  b.sy = s(rng);
  b.tx = t(rng);
  b.ty = t(rng);
  return b;
}

}  // namespace attrloc
