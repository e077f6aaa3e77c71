// attrloc command-line harness: gen-data, train, eval, visualize, gradcheck,
// param-count. Exit codes: 0 ok, 1 validation failure, 2 numeric failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "attrloc/checkpoint.hpp"
#include "attrloc/config.hpp"
#include "attrloc/gradcheck_suite.hpp"
#include "attrloc/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace attrloc;

namespace {

constexpr std::size_t kTestIndexOffset = 1000000;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;

  RunConfig load() const { return load_run_config(config_path, overrides); }
};

Dataset train_split(const RunConfig& cfg) {
  if (!cfg.data.train_dir.empty()) return read_dataset(cfg.data.train_dir);
  return generate_dataset(cfg.data.synth, cfg.data.train_size, 0);
}

Dataset test_split(const RunConfig& cfg) {
  if (!cfg.data.test_dir.empty()) return read_dataset(cfg.data.test_dir);
  return generate_dataset(cfg.data.synth, cfg.data.test_size, kTestIndexOffset);
}

fs::path checkpoint_path(const RunConfig& cfg, const std::string& given) {
  return given.empty() ? fs::path(cfg.out_dir) / "model.almc" : fs::path(given);
}

void emit(const json& j) { std::cout << j.dump() << '\n' << std::flush; }

int cmd_gen_data(const Common& common, const std::string& out) {
  const auto cfg = common.load();
  const fs::path root = out.empty() ? fs::path(cfg.out_dir) / "data" : fs::path(out);
  auto train = generate_dataset(cfg.data.synth, cfg.data.train_size, 0);
  write_dataset(train, root / "train");
  auto test = generate_dataset(cfg.data.synth, cfg.data.test_size, kTestIndexOffset);
  write_dataset(test, root / "test");
  emit({{"event", "gen-data"}, {"train", (root / "train").string()}, {"train_size", train.samples.size()},
        {"test", (root / "test").string()}, {"test_size", test.samples.size()}});
  return 0;
}

int cmd_train(const Common& common) {
  const auto cfg = common.load();
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  {
    std::ofstream cf(out / "config.json");
    if (!cf) throw ContractError("cannot write to output directory " + out.string());
    cf << json(cfg).dump(2) << '\n';
  }
  const auto data = train_split(cfg);

  // epoch lines go both to the log file and to stdout
  std::ofstream log_file(out / "train_log.jsonl");
  struct Tee : std::stringbuf {
    std::ostream* a;
    std::ostream* b;
    int sync() override {
      *a << str() << std::flush;
      *b << str() << std::flush;
      str("");
      return 0;
    }
  } tee;
  tee.a = &log_file;
  tee.b = &std::cout;
  std::ostream log(&tee);

  auto result = train_model(cfg, data, &log);
  json extra{{"priors", result.priors.positive_ratio}, {"final_loss", result.final_loss}, {"run_config", cfg}};
  save_checkpoint(result.model, out / "model.almc", extra);
  emit({{"event", "checkpoint"}, {"path", (out / "model.almc").string()}, {"final_loss", result.final_loss}});
  return 0;
}

json localization_json(const EvalOutput& out, const Dataset& data, const ModelConfig& cfg) {
  json levels = json::array();
  bool any_box = false;
  for (const auto& s : data.samples)
    for (const auto& b : s.boxes) any_box = any_box || b.has_value();
  if (!any_box) return levels;
  for (std::size_t l = 0; l < kNumLevels; ++l) {
    if (out.thetas[l].empty()) continue;
    auto rep = localization_report(out, data, cfg, l);
    json per = json::object();
    for (std::size_t a = 0; a < rep.attributes.size(); ++a)
      per[rep.attributes[a]] = {{"mean_iou", rep.mean_iou[a]}, {"count", rep.count[a]}};
    levels.push_back({{"level", l + 1}, {"mean_iou", rep.mean}, {"per_attribute", per}});
  }
  return levels;
}

int cmd_eval(const Common& common, const std::string& ckpt, const std::string& fusion, const std::string& report) {
  const auto cfg = common.load();
  auto loaded = load_checkpoint<float>(checkpoint_path(cfg, ckpt));
  auto& model = loaded.model;
  if (fusion == "maximum")
    model.config.fusion = Fusion::maximum;
  else if (fusion == "averaging")
    model.config.fusion = Fusion::averaging;
  else if (!fusion.empty())
    throw ContractError("--fusion must be 'maximum' or 'averaging', got '" + fusion + "'");
  const auto data = test_split(cfg);
  const auto out = run_inference(model, data, cfg.eval_batch);
  auto rep = evaluate_outputs(out, data, cfg.threshold).to_json();
  rep["fusion"] = model.config.fusion;
  rep["localization"] = localization_json(out, data, model.config);
  if (!report.empty()) {
    std::ofstream os(report);
    if (!os) throw ContractError("cannot write report " + report);
    os << rep.dump(2) << '\n';
  }
  emit(rep);
  return 0;
}

// ---- visualize ----

struct Canvas {
  std::size_t h, w;
  std::vector<float> chw;

  void rect(const ImageBox& b, std::array<float, 3> color, std::size_t scale) {
    auto clamp_px = [](double v, std::size_t hi) {
      return static_cast<long>(std::clamp(std::lround(v), 0L, static_cast<long>(hi) - 1));
    };
    const long x0 = clamp_px(b.x0 * scale, w), x1 = clamp_px(b.x1 * scale, w);
    const long y0 = clamp_px(b.y0 * scale, h), y1 = clamp_px(b.y1 * scale, h);
    auto put = [&](long x, long y) {
      for (std::size_t c = 0; c < 3; ++c) chw[(c * h + std::size_t(y)) * w + std::size_t(x)] = color[c];
    };
    for (long x = x0; x <= x1; ++x) {
      put(x, y0);
      put(x, y1);
    }
    for (long y = y0; y <= y1; ++y) {
      put(x0, y);
      put(x1, y);
    }
  }
};

Canvas upscale(const SynthSample& s, std::size_t h, std::size_t w, std::size_t scale) {
  Canvas c{h * scale, w * scale, std::vector<float>(3 * h * w * scale * scale)};
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t y = 0; y < c.h; ++y)
      for (std::size_t x = 0; x < c.w; ++x) c.chw[(ch * c.h + y) * c.w + x] = s.image[(ch * h + y / scale) * w + x / scale];
  return c;
}

json box_json(const ImageBox& b) { return {{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}}; }

int cmd_visualize(const Common& common, const std::string& ckpt, bool untrained, std::vector<std::string> names,
                  std::size_t count, const std::string& out_dir, std::size_t scale) {
  const auto cfg = common.load();
  std::optional<Model<float>> model;
  if (untrained)
    model.emplace(cfg.model, cfg.seed);
  else
    model.emplace(std::move(load_checkpoint<float>(checkpoint_path(cfg, ckpt)).model));
  const auto& attrs = model->config.attributes;

  std::vector<std::size_t> chosen;
  if (names.empty())
    for (std::size_t a = 0; a < attrs.size(); ++a) chosen.push_back(a);
  for (const auto& n : names) {
    auto it = std::find(attrs.begin(), attrs.end(), n);
    if (it == attrs.end()) {
      std::string valid;
      for (const auto& a : attrs) valid += (valid.empty() ? "" : ", ") + a;
      throw ContractError("unknown attribute '" + n + "'; valid attributes: " + valid);
    }
    chosen.push_back(static_cast<std::size_t>(it - attrs.begin()));
  }

  auto data = test_split(cfg);
  if (count < data.samples.size()) data.samples.resize(count);
  const auto out = run_inference(*model, data, cfg.eval_batch);

  const fs::path dir = out_dir.empty() ? fs::path(cfg.out_dir) / "visualize" : fs::path(out_dir);
  fs::create_directories(dir);
  const std::array<std::array<float, 3>, kNumLevels> colors{{{1.f, 0.f, 0.f}, {0.f, 1.f, 0.f}, {0.f, 0.3f, 1.f}}};
  json samples = json::array();
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    json per_attr = json::object();
    for (auto a : chosen) {
      auto canvas = upscale(data.samples[i], data.height, data.width, scale);
      json entry{{"label", data.samples[i].labels[a]}};
      const auto& gt = data.samples[i].boxes[a];
      if (gt) {
        canvas.rect(*gt, {1.f, 1.f, 1.f}, scale);
        entry["ground_truth"] = box_json(*gt);
      }
      json levels = json::object();
      for (std::size_t l = 0; l < kNumLevels; ++l) {
        if (out.thetas[l].empty()) continue;
        const auto& t = out.thetas[l][a][i];
        const auto box = predicted_image_box(t, model->config, l);
        canvas.rect(box, colors[l], scale);
        json lv{{"box", box_json(box)}, {"transform", {t.sx, t.sy, t.tx, t.ty}}};
        if (gt) lv["iou"] = box_iou(box, *gt);
        levels["level" + std::to_string(l + 1)] = lv;
      }
      entry["levels"] = levels;
      std::ostringstream name;
      name << std::setw(6) << std::setfill('0') << i << "_" << attrs[a] << ".png";
      detail::write_png(dir / name.str(), canvas.chw, canvas.h, canvas.w);
      entry["image"] = name.str();
      per_attr[attrs[a]] = entry;
    }
    samples.push_back({{"index", i}, {"attributes", per_attr}});
  }
  json doc{{"image_h", data.height}, {"image_w", data.width}, {"samples", samples}};
  std::ofstream(dir / "boxes.json") << doc.dump(2) << '\n';
  emit({{"event", "visualize"}, {"dir", dir.string()}, {"samples", data.samples.size()}, {"attributes", chosen.size()}});
  return 0;
}

// ---- gradcheck / param-count ----

int cmd_gradcheck(std::uint64_t seed, std::size_t seeds, bool corrupt, double tolerance) {
  if (seeds < 1) throw ContractError("gradcheck: --seeds must be >= 1");
  std::vector<std::uint64_t> list;
  for (std::size_t k = 0; k < seeds; ++k) list.push_back(seed + k);
  GradCheckOptions opt;
  opt.tolerance = tolerance;
  const auto start = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(list, corrupt, opt);
  bool ok = true;
  for (const auto& r : results) {
    emit({{"op", r.op}, {"runs", r.runs.size()}, {"max_rel_error", r.worst}, {"passed", r.passed}});
    ok = ok && r.passed;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  emit({{"event", "gradcheck"}, {"ops", results.size()}, {"seeds", list}, {"tolerance", tolerance}, {"passed", ok},
        {"seconds", secs}});
  return ok ? 0 : 2;
}

int cmd_param_count(const Common& common, bool as_json) {
  const auto cfg = common.load();
  Model<float> model(cfg.model, cfg.seed);
  const auto b = model.param_breakdown();
  json levels = json::array();
  for (const auto& row : b.levels)
    levels.push_back({{"level", row.level},
                      {"channels", row.channels},
                      {"units", row.units},
                      {"core_per_unit", row.core_walked},
                      {"formula_per_unit", row.core_formula}});
  json j{{"backbone", b.backbone},     {"laterals", b.laterals},     {"alm_core", b.alm_core},
         {"alm_biases", b.alm_biases}, {"alm_classifiers", b.alm_classifiers}, {"attention", b.attention},
         {"global_head", b.global_head}, {"total", b.total},          {"walked_total", b.walked_total},
         {"levels", levels}};
  if (as_json) {
    emit(j);
    return 0;
  }
  std::cout << "component          params\n";
  for (const char* k : {"backbone", "laterals", "alm_core", "alm_biases", "alm_classifiers", "attention", "global_head",
                        "total", "walked_total"})
    std::cout << std::left << std::setw(18) << k << ' ' << j[k].get<std::size_t>() << '\n';
  std::cout << "\nlevel  C     units  core/unit  C^2/8+4C\n";
  for (const auto& row : b.levels)
    std::cout << std::left << std::setw(6) << row.level << ' ' << std::setw(5) << row.channels << ' ' << std::setw(6)
              << row.units << ' ' << std::setw(10) << row.core_walked << ' ' << row.core_formula << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-specific localization toolkit"};
  app.require_subcommand(1);
  Common common;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON run config");
    sub->allow_extras();
  };

  std::string data_out;
  auto* gen = app.add_subcommand("gen-data", "write synthetic train/test datasets");
  add_common(gen);
  gen->add_option("--out", data_out, "output root (default <out_dir>/data)");

  auto* train = app.add_subcommand("train", "train with deep supervision");
  add_common(train);

  std::string ckpt, fusion, report;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", ckpt, "checkpoint (default <out_dir>/model.almc)");
  eval->add_option("--fusion", fusion, "override fusion: maximum | averaging");
  eval->add_option("--report", report, "also write the report to this file");

  bool untrained = false;
  std::vector<std::string> vis_attrs;
  std::size_t vis_count = 8, vis_scale = 4;
  std::string vis_out;
  auto* vis = app.add_subcommand("visualize", "draw per-level attribute boxes");
  add_common(vis);
  vis->add_option("--checkpoint", ckpt, "checkpoint (default <out_dir>/model.almc)");
  vis->add_flag("--untrained", untrained, "use a freshly initialized model");
  vis->add_option("--attributes", vis_attrs, "attribute names (default all)")->delimiter(',');
  vis->add_option("--samples", vis_count, "number of test samples");
  vis->add_option("--scale", vis_scale, "overlay upscaling factor")->check(CLI::Range(1, 16));
  vis->add_option("--out", vis_out, "output directory (default <out_dir>/visualize)");

  std::uint64_t gc_seed = 1;
  std::size_t gc_seeds = 5;
  bool gc_corrupt = false;
  double gc_tol = 1e-3;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gc->add_option("--seed", gc_seed, "first seed");
  gc->add_option("--seeds", gc_seeds, "number of seeds per op");
  gc->add_flag("--corrupt", gc_corrupt, "add an op with a deliberately wrong backward");
  gc->add_option("--tolerance", gc_tol, "max relative error");

  bool pc_json = false;
  auto* pc = app.add_subcommand("param-count", "parameter breakdown for a config");
  add_common(pc);
  pc->add_flag("--json", pc_json, "print JSON instead of a table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    for (auto* sub : {gen, train, eval, vis, pc})
      if (sub->parsed()) common.overrides = sub->remaining();
    if (gen->parsed()) return cmd_gen_data(common, data_out);
    if (train->parsed()) return cmd_train(common);
    if (eval->parsed()) return cmd_eval(common, ckpt, fusion, report);
    if (vis->parsed()) return cmd_visualize(common, ckpt, untrained, vis_attrs, vis_count, vis_out, vis_scale);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_seeds, gc_corrupt, gc_tol);
    if (pc->parsed()) return cmd_param_count(common, pc_json);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {  // contract, dimension and spec errors
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
