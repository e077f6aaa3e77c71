#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrloc/adam.hpp"
#include "attrloc/loss.hpp"
#include "attrloc/network.hpp"
#include "attrloc/synth.hpp"

namespace attrloc {

NLOHMANN_JSON_SERIALIZE_ENUM(BceWeighting, {{BceWeighting::both_terms, "both_terms"},
                                            {BceWeighting::positive_only, "positive_only"}})

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double lr_decay = 0.1;
  std::size_t lr_decay_every = 10;

  AdamConfig adam(double current_lr) const { return {current_lr, beta1, beta2, eps, weight_decay}; }
  double lr_at(std::size_t epoch) const {
    return lr * std::pow(lr_decay, static_cast<double>(lr_decay_every ? epoch / lr_decay_every : 0));
  }

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, lr, beta1, beta2, eps, weight_decay, batch_size, epochs,
                                                lr_decay, lr_decay_every)

/// Either a synthetic spec (generated on the fly) or dataset directories.
struct DataConfig {
  SynthSpec synth = default_synth_spec();
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  std::string train_dir;
  std::string test_dir;
  double mirror_prob = 0.5;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, synth, train_size, test_size, train_dir, test_dir, mirror_prob)

struct RunConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  DataConfig data;
  BceWeighting bce_weighting = BceWeighting::both_terms;
  double threshold = 0.5;
  std::size_t eval_batch = 64;
  std::uint64_t seed = 1;
  std::string out_dir = "run";

  void validate() const {
    model.validate();
    if (optimizer.batch_size < 1) throw ContractError("config: optimizer.batch_size must be >= 1");
    if (!(optimizer.lr > 0)) throw ContractError("config: optimizer.lr must be positive");
    if (data.mirror_prob < 0 || data.mirror_prob > 1) throw ContractError("config: data.mirror_prob must lie in [0,1]");
    if (eval_batch < 1) throw ContractError("config: eval_batch must be >= 1");
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, model, optimizer, data, bce_weighting, threshold, eval_batch,
                                                seed, out_dir)

/// Synthetic defaults: model attributes follow the generator's names.
inline RunConfig default_run_config() {
  RunConfig c;
  c.model.attributes.clear();
  for (const auto& a : c.data.synth.attributes) c.model.attributes.push_back(a.name);
  return c;
}

/// Applies "key=value" overrides. Keys are dotted paths into the JSON form
/// ("optimizer.lr", "model.alm_levels"); values parse as JSON, falling back
/// to a plain string.
inline nlohmann::json apply_overrides(nlohmann::json j, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    auto eq = o.find('=');
    std::string key = o.substr(0, eq);
    while (!key.empty() && key.front() == '-') key.erase(key.begin());
    if (eq == std::string::npos || key.empty()) throw ContractError("override '" + o + "' is not of the form key=value");
    const std::string text = o.substr(eq + 1);
    std::string pointer;
    std::size_t start = 0;
    while (true) {
      auto dot = key.find('.', start);
      pointer += "/" + key.substr(start, dot - start);
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    const nlohmann::json::json_pointer ptr(pointer);
    if (!j.contains(ptr)) throw ContractError("unknown config key '" + key + "'");
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
      value = text;
    }
    j[ptr] = value;
  }
  return j;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  try {
    auto c = j.get<RunConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
}

/// Defaults, then the optional file, then overrides.
inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json j = default_run_config();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw ContractError("cannot open config " + path);
    nlohmann::json file;
    try {
      file = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
      throw ContractError("config " + path + ": " + e.what());
    }
    j.merge_patch(file);
  }
  return parse_run_config(apply_overrides(std::move(j), overrides));
}

}  // namespace attrloc
