#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrloc/alm.hpp"
#include "attrloc/layers.hpp"

namespace attrloc {

inline constexpr std::size_t kNumLevels = 3;
inline constexpr std::array<std::size_t, kNumLevels> kLevelStrides{8, 16, 32};

// Lateral-only keeps X_i = f(phi_i) with no top-down input.
enum class TopDown { lateral_only, addition, concatenation };
enum class Fusion { maximum, averaging };
enum class BranchKind { alm, attention };

NLOHMANN_JSON_SERIALIZE_ENUM(TopDown, {{TopDown::lateral_only, "lateral_only"},
                                       {TopDown::addition, "addition"},
                                       {TopDown::concatenation, "concatenation"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Fusion, {{Fusion::maximum, "maximum"}, {Fusion::averaging, "averaging"}})
NLOHMANN_JSON_SERIALIZE_ENUM(BranchKind, {{BranchKind::alm, "alm"}, {BranchKind::attention, "attention"}})

struct ModelConfig {
  std::vector<std::string> attributes{"a0", "a1", "a2", "a3", "a4", "a5"};
  std::size_t image_h = 64;
  std::size_t image_w = 32;
  std::size_t stem_width = 8;
  std::array<std::size_t, kNumLevels> stage_widths{16, 32, 64};
  std::size_t convs_per_stage = 2;
  std::size_t lateral_width = 16;  // d
  std::vector<int> alm_levels{1, 2, 3};
  TopDown topdown = TopDown::concatenation;
  bool channel_attention = true;
  Fusion fusion = Fusion::maximum;
  bool alms_enabled = true;
  BranchKind branch = BranchKind::alm;
  std::size_t reduction = 16;
  std::size_t sample_h = 0;  // 0: sampled region keeps the level's resolution
  std::size_t sample_w = 0;

  std::size_t num_attributes() const { return attributes.size(); }

  bool level_enabled(int level) const {
    return alms_enabled && std::find(alm_levels.begin(), alm_levels.end(), level) != alm_levels.end();
  }

  /// Widths of X_1, X_2, X_3.
  std::array<std::size_t, kNumLevels> pyramid_widths() const {
    const std::size_t d = lateral_width;
    if (topdown == TopDown::concatenation) return {3 * d, 2 * d, d};
    return {d, d, d};
  }

  std::array<std::pair<std::size_t, std::size_t>, kNumLevels> level_sizes() const {
    std::array<std::pair<std::size_t, std::size_t>, kNumLevels> s;
    for (std::size_t i = 0; i < kNumLevels; ++i) s[i] = {image_h / kLevelStrides[i], image_w / kLevelStrides[i]};
    return s;
  }

  void validate() const {
    if (attributes.empty()) throw ContractError("model config: at least one attribute is required");
    if (image_h % 32 || image_w % 32 || image_h == 0 || image_w == 0)
      throw DimensionError("model config: input size " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                           " is not divisible by 32");
    if (lateral_width == 0 || stem_width == 0) throw ContractError("model config: widths must be positive");
    for (int l : alm_levels)
      if (l < 1 || l > 3) throw ContractError("model config: ALM level " + std::to_string(l) + " not in {1,2,3}");
    if (alms_enabled && alm_levels.empty()) throw ContractError("model config: ALMs enabled but no levels listed");
    if (branch == BranchKind::alm && channel_attention)
      for (int l : alm_levels) {
        const std::size_t c = pyramid_widths()[l - 1];
        if (reduction == 0 || c % reduction)
          throw ContractError("model config: reduction " + std::to_string(reduction) + " does not divide level " +
                              std::to_string(l) + " width " + std::to_string(c));
      }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"attributes", c.attributes},
                     {"image_h", c.image_h},
                     {"image_w", c.image_w},
                     {"stem_width", c.stem_width},
                     {"stage_widths", c.stage_widths},
                     {"convs_per_stage", c.convs_per_stage},
                     {"lateral_width", c.lateral_width},
                     {"alm_levels", c.alm_levels},
                     {"topdown", c.topdown},
                     {"channel_attention", c.channel_attention},
                     {"fusion", c.fusion},
                     {"alms_enabled", c.alms_enabled},
                     {"branch", c.branch},
                     {"reduction", c.reduction},
                     {"sample_h", c.sample_h},
                     {"sample_w", c.sample_w}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.attributes = j.value("attributes", d.attributes);
  c.image_h = j.value("image_h", d.image_h);
  c.image_w = j.value("image_w", d.image_w);
  c.stem_width = j.value("stem_width", d.stem_width);
  c.stage_widths = j.value("stage_widths", d.stage_widths);
  c.convs_per_stage = j.value("convs_per_stage", d.convs_per_stage);
  c.lateral_width = j.value("lateral_width", d.lateral_width);
  c.alm_levels = j.value("alm_levels", d.alm_levels);
  c.topdown = j.value("topdown", d.topdown);
  c.channel_attention = j.value("channel_attention", d.channel_attention);
  c.fusion = j.value("fusion", d.fusion);
  c.alms_enabled = j.value("alms_enabled", d.alms_enabled);
  c.branch = j.value("branch", d.branch);
  c.reduction = j.value("reduction", d.reduction);
  c.sample_h = j.value("sample_h", d.sample_h);
  c.sample_w = j.value("sample_w", d.sample_w);
}

// -------------------- backbone --------------------

template <typename T>
struct BackboneOutputs {
  std::array<BasicTensor<T>, kNumLevels> phi;  // strides 8, 16, 32
};

/// Stride-4 stem (strided conv + pool) followed by three
/// (conv3x3-BN-ReLU x k, max-pool) stages.
template <typename T>
struct Backbone {
  ConvBnRelu<T> stem;
  std::array<std::vector<ConvBnRelu<T>>, kNumLevels> stages;

  Backbone() = default;
  Backbone(const ModelConfig& cfg, Rng& rng) : stem(3, cfg.stem_width, 2, rng) {
    std::size_t in = cfg.stem_width;
    for (std::size_t s = 0; s < kNumLevels; ++s)
      for (std::size_t k = 0; k < cfg.convs_per_stage; ++k) {
        stages[s].emplace_back(in, cfg.stage_widths[s], 1, rng);
        in = cfg.stage_widths[s];
      }
  }

  BackboneOutputs<T> operator()(BasicTensor<T> image, Mode mode) {
    if (image.rank() != 4 || image.dim(1) != 3)
      throw DimensionError("backbone: expected (N,3,H,W) image batch, got " + shape_str(image.shape()));
    if (image.dim(2) % 32 || image.dim(3) % 32)
      throw DimensionError("backbone: input " + shape_str(image.shape()) + " has H or W not divisible by 32");
    BackboneOutputs<T> out;
    auto x = pool2d(stem(std::move(image), mode), Pool::max2x2);
    for (std::size_t s = 0; s < kNumLevels; ++s) {
      for (auto& block : stages[s]) x = block(x, mode);
      x = pool2d(x, Pool::max2x2);
      out.phi[s] = x;
    }
    return out;
  }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    stem.collect(out, prefix + ".stem");
    for (std::size_t s = 0; s < kNumLevels; ++s)
      for (std::size_t k = 0; k < stages[s].size(); ++k)
        stages[s][k].collect(out, prefix + ".stage" + std::to_string(s + 1) + "." + std::to_string(k));
  }
  void collect_buffers(std::vector<NamedBuffer<T>>& out, const std::string& prefix) {
    stem.collect_buffers(out, prefix + ".stem");
    for (std::size_t s = 0; s < kNumLevels; ++s)
      for (std::size_t k = 0; k < stages[s].size(); ++k)
        stages[s][k].collect_buffers(out, prefix + ".stage" + std::to_string(s + 1) + "." + std::to_string(k));
  }
};

// -------------------- pyramid --------------------

template <typename T>
struct PyramidFeatures {
  std::array<BasicTensor<T>, kNumLevels> lateral;  // f(phi_i)
  std::array<BasicTensor<T>, kNumLevels> X;
};

template <typename T>
struct Pyramid {
  std::array<Conv<T>, kNumLevels> lateral;  // 1x1 reductions to d

  Pyramid() = default;
  Pyramid(const ModelConfig& cfg, Rng& rng) {
    for (std::size_t i = 0; i < kNumLevels; ++i) lateral[i] = Conv<T>(cfg.stage_widths[i], cfg.lateral_width, 1, 1, 0, rng);
  }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < kNumLevels; ++i) lateral[i].collect(out, prefix + ".lateral" + std::to_string(i + 1));
  }
};

/// X_3 = f(phi_3); X_i = combine(f(phi_i), up2x(X_{i+1})) for i = 2, 1.
template <typename T>
PyramidFeatures<T> pyramid_combine(const BackboneOutputs<T>& b, const Pyramid<T>& pyr, TopDown mode) {
  PyramidFeatures<T> p;
  for (std::size_t i = 0; i < kNumLevels; ++i) p.lateral[i] = pyr.lateral[i](b.phi[i]);
  p.X[2] = p.lateral[2];
  for (int i = 1; i >= 0; --i) {
    if (mode == TopDown::lateral_only) {
      p.X[i] = p.lateral[i];
      continue;
    }
    auto up = upsample_nearest2x(p.X[i + 1]);
    if (mode == TopDown::concatenation) {
      p.X[i] = concat_channels(p.lateral[i], up);
    } else {
      if (up.shape() != p.lateral[i].shape())
        throw DimensionError("pyramid addition: lateral " + shape_str(p.lateral[i].shape()) +
                             " and top-down " + shape_str(up.shape()) + " differ");
      p.X[i] = add(p.lateral[i], up);
    }
  }
  return p;
}

// -------------------- attention-mask baseline --------------------

/// Per-(attribute, level) spatial mask: channel average -> conv3x3 -> BN ->
/// ReLU; prediction = dense(GAP(S * X)).
template <typename T>
struct AttentionUnit {
  std::size_t attribute = 0;
  std::size_t level = 0;
  Conv<T> mask_conv;
  BatchNorm<T> mask_bn;
  Linear<T> classifier;

  AttentionUnit() = default;
  AttentionUnit(std::size_t attribute_, std::size_t level_, std::size_t channels, Rng& rng)
      : attribute(attribute_), level(level_), mask_conv(1, 1, 3, 1, 1, rng), mask_bn(1), classifier(channels, 1, rng) {}

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    mask_conv.collect(out, prefix + ".mask_conv");
    mask_bn.collect(out, prefix + ".mask_bn");
    classifier.collect(out, prefix + ".cls");
  }
  void collect_buffers(std::vector<NamedBuffer<T>>& out, const std::string& prefix) {
    mask_bn.collect_buffers(out, prefix + ".mask_bn");
  }
};

template <typename T>
BasicTensor<T> attention_mask(BasicTensor<T> x, AttentionUnit<T>& unit, Mode mode) {
  return relu(unit.mask_bn(unit.mask_conv(channel_mean(std::move(x))), mode));
}

template <typename T>
BasicTensor<T> attention_readout(BasicTensor<T> x, BasicTensor<T> mask, const Linear<T>& classifier) {
  return classifier(flatten(global_avg_pool(mul_spatial(std::move(x), std::move(mask)))));
}

template <typename T>
BasicTensor<T> attention_baseline_forward(BasicTensor<T> x, AttentionUnit<T>& unit, Mode mode) {
  auto mask = attention_mask(x, unit, mode);
  return attention_readout(x, mask, unit.classifier);
}

// -------------------- fusion --------------------

using Matrix = std::vector<std::vector<double>>;

inline std::vector<double> fuse_predictions(const std::vector<std::vector<double>>& vectors, Fusion mode) {
  if (vectors.empty()) throw ContractError("fuse_predictions: empty list of prediction vectors");
  const std::size_t m = vectors.front().size();
  for (const auto& v : vectors)
    if (v.size() != m) throw DimensionError("fuse_predictions: vectors of unequal length");
  std::vector<double> out(vectors.front());
  for (std::size_t k = 1; k < vectors.size(); ++k)
    for (std::size_t j = 0; j < m; ++j) out[j] = mode == Fusion::maximum ? std::max(out[j], vectors[k][j]) : out[j] + vectors[k][j];
  if (mode == Fusion::averaging)
    for (auto& v : out) v /= static_cast<double>(vectors.size());
  return out;
}

/// Row-wise fusion of several (N, M) logit matrices.
inline Matrix fuse_rows(const std::vector<Matrix>& branches, Fusion mode) {
  if (branches.empty()) throw ContractError("fuse_rows: no branches");
  Matrix out(branches.front().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::vector<std::vector<double>> rows;
    for (const auto& b : branches) rows.push_back(b.at(i));
    out[i] = fuse_predictions(rows, mode);
  }
  return out;
}

template <typename T>
Matrix to_matrix(const BasicTensor<T>& t) {
  Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = static_cast<double>(t[i * t.dim(1) + j]);
  return m;
}

/// Logits per branch plus the fused vector, in plain numbers.
struct PredictionSet {
  std::array<std::optional<Matrix>, kNumLevels> levels;
  Matrix global;
  Matrix fused;

  std::vector<Matrix> branches() const {
    std::vector<Matrix> out;
    for (const auto& l : levels)
      if (l) out.push_back(*l);
    out.push_back(global);
    return out;
  }
};

// -------------------- model --------------------

template <typename T>
struct ForwardResult {
  BackboneOutputs<T> backbone;
  PyramidFeatures<T> pyramid;
  std::array<std::optional<BasicTensor<T>>, kNumLevels> level_logits;  // (N, M) each
  BasicTensor<T> global_logits;                                         // (N, M)
  std::array<std::vector<BasicTensor<T>>, kNumLevels> thetas;           // per attribute (N, 4)

  /// Enabled branch logits, finest level first, global last.
  std::vector<BasicTensor<T>> branch_logits() const {
    std::vector<BasicTensor<T>> out;
    for (const auto& l : level_logits)
      if (l) out.push_back(*l);
    out.push_back(global_logits);
    return out;
  }

  std::vector<std::string> branch_names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < kNumLevels; ++i)
      if (level_logits[i]) out.push_back("level" + std::to_string(i + 1));
    out.push_back("global");
    return out;
  }

  PredictionSet predictions(Fusion mode) const {
    PredictionSet p;
    for (std::size_t i = 0; i < kNumLevels; ++i)
      if (level_logits[i]) p.levels[i] = to_matrix(*level_logits[i]);
    p.global = to_matrix(global_logits);
    p.fused = fuse_rows(p.branches(), mode);
    return p;
  }
};

struct LevelParamRow {
  int level = 0;
  std::size_t channels = 0;
  std::size_t units = 0;
  std::size_t core_formula = 0;  // 2C^2/r + 4C per unit (C^2/8 + 4C at r = 16)
  std::size_t core_walked = 0;   // per unit, from the constructed tensors
};

struct ParamBreakdown {
  std::size_t backbone = 0;
  std::size_t laterals = 0;
  std::size_t alm_core = 0;
  std::size_t alm_biases = 0;
  std::size_t alm_classifiers = 0;
  std::size_t attention = 0;
  std::size_t global_head = 0;
  std::size_t total = 0;
  std::size_t walked_total = 0;
  std::vector<LevelParamRow> levels;
};

template <typename T>
class Model {
 public:
  ModelConfig config;
  Backbone<T> backbone;
  Pyramid<T> pyramid;
  std::array<std::vector<AlmUnit<T>>, kNumLevels> alms;
  std::array<std::vector<AttentionUnit<T>>, kNumLevels> attention;
  Linear<T> global_head;

  Model(ModelConfig cfg, std::uint64_t seed) : config(std::move(cfg)) {
    config.validate();
    Rng rng(seed);
    backbone = Backbone<T>(config, rng);
    pyramid = Pyramid<T>(config, rng);
    global_head = Linear<T>(config.stage_widths[2], config.num_attributes(), rng);
    const auto widths = config.pyramid_widths();
    for (int level = 1; level <= 3; ++level) {
      if (!config.level_enabled(level)) continue;
      const std::size_t c = widths[level - 1];
      for (std::size_t m = 0; m < config.num_attributes(); ++m) {
        if (config.branch == BranchKind::alm) {
          AlmUnit<T> u(m, level, c, config.reduction, config.channel_attention, rng);
          u.sample_h = config.sample_h;
          u.sample_w = config.sample_w;
          alms[level - 1].push_back(std::move(u));
        } else {
          attention[level - 1].emplace_back(m, level, c, rng);
        }
      }
    }
  }

  ForwardResult<T> forward(BasicTensor<T> images, Mode mode) {
    if (images.rank() != 4 || images.dim(2) != config.image_h || images.dim(3) != config.image_w)
      throw DimensionError("model: batch " + shape_str(images.shape()) + " does not match configured input " +
                           std::to_string(config.image_h) + "x" + std::to_string(config.image_w));
    ForwardResult<T> r;
    r.backbone = backbone(std::move(images), mode);
    r.pyramid = pyramid_combine(r.backbone, pyramid, config.topdown);
    for (std::size_t i = 0; i < kNumLevels; ++i) {
      std::vector<BasicTensor<T>> cols;
      for (auto& u : alms[i]) {
        auto out = alm_forward(r.pyramid.X[i], u);
        cols.push_back(out.logit);
        r.thetas[i].push_back(out.transform.theta);
      }
      for (auto& u : attention[i]) cols.push_back(attention_baseline_forward(r.pyramid.X[i], u, mode));
      if (!cols.empty()) r.level_logits[i] = concat_columns(cols);
    }
    r.global_logits = global_head(flatten(global_avg_pool(r.backbone.phi[2])));
    return r;
  }

  NamedTensors<T> named_parameters() const {
    NamedTensors<T> out;
    backbone.collect(out, "backbone");
    pyramid.collect(out, "pyramid");
    for (std::size_t i = 0; i < kNumLevels; ++i) {
      for (const auto& u : alms[i])
        u.collect(out, "alm.level" + std::to_string(i + 1) + ".attr" + std::to_string(u.attribute));
      for (const auto& u : attention[i])
        u.collect(out, "attention.level" + std::to_string(i + 1) + ".attr" + std::to_string(u.attribute));
    }
    global_head.collect(out, "global");
    return out;
  }

  std::vector<NamedBuffer<T>> named_buffers() {
    std::vector<NamedBuffer<T>> out;
    backbone.collect_buffers(out, "backbone");
    for (std::size_t i = 0; i < kNumLevels; ++i)
      for (auto& u : attention[i])
        u.collect_buffers(out, "attention.level" + std::to_string(i + 1) + ".attr" + std::to_string(u.attribute));
    return out;
  }

  std::vector<BasicTensor<T>> parameters() const {
    std::vector<BasicTensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

  ParamBreakdown param_breakdown() const {
    ParamBreakdown b;
    NamedTensors<T> tmp;
    backbone.collect(tmp, "b");
    b.backbone = count_elements(tmp);
    tmp.clear();
    pyramid.collect(tmp, "p");
    b.laterals = count_elements(tmp);
    const auto widths = config.pyramid_widths();
    for (std::size_t i = 0; i < kNumLevels; ++i) {
      for (const auto& u : alms[i]) {
        auto c = walk_param_count(u);
        b.alm_core += c.core;
        b.alm_biases += c.biases;
        b.alm_classifiers += c.classifier;
      }
      for (const auto& u : attention[i]) {
        tmp.clear();
        u.collect(tmp, "a");
        b.attention += count_elements(tmp);
      }
      if (!alms[i].empty()) {
        LevelParamRow row;
        row.level = static_cast<int>(i + 1);
        row.channels = widths[i];
        row.units = alms[i].size();
        row.core_formula = config.channel_attention ? alm_param_count(widths[i], config.reduction).core : 4 * widths[i];
        row.core_walked = walk_param_count(alms[i].front()).core;
        b.levels.push_back(row);
      }
    }
    b.global_head = global_head.weight.numel() + global_head.bias.numel();
    b.total = b.backbone + b.laterals + b.alm_core + b.alm_biases + b.alm_classifiers + b.attention + b.global_head;
    b.walked_total = count_elements(named_parameters());
    return b;
  }
};

}  // namespace attrloc
