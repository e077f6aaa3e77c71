#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrloc/loss.hpp"
#include "attrloc/sampler.hpp"
#include "attrloc/tensor.hpp"

namespace attrloc {

// Horizontal bands: head = top 25% of rows, torso = next 45%, legs = last 30%.
enum class Zone { head, torso, legs, full };
// Concrete attributes draw a glyph inside their zone; abstract ones change a
// global image statistic and carry no box.
enum class AttributeKind { concrete, abstract };

NLOHMANN_JSON_SERIALIZE_ENUM(Zone, {{Zone::head, "head"}, {Zone::torso, "torso"}, {Zone::legs, "legs"}, {Zone::full, "full"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AttributeKind, {{AttributeKind::concrete, "concrete"}, {AttributeKind::abstract, "abstract"}})

struct AttributeDef {
  std::string name;
  AttributeKind kind = AttributeKind::concrete;
  int pattern = 0;
  Zone zone = Zone::full;
  double prevalence = 0.5;
  int jitter = 4;  // pixels, around the zone center
  int size_min = 8;
  int size_max = 12;
  double anchor_x = 0.5;  // horizontal center, as a fraction of the width

  friend bool operator==(const AttributeDef&, const AttributeDef&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AttributeDef, name, kind, pattern, zone, prevalence, jitter, size_min,
                                                size_max, anchor_x)

struct SynthSpec {
  std::size_t height = 64;
  std::size_t width = 32;
  std::vector<AttributeDef> attributes;
  double noise = 0.06;
  double occluder_prob = 0.0;
  // Chance that a concrete attribute's glyph is also drawn, unlabelled, in
  // another zone.
  double decoy_prob = 0.0;
  std::uint64_t seed = 7;

  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthSpec, height, width, attributes, noise, occluder_prob, decoy_prob, seed)

/// Six attributes: four zone-anchored glyphs and two global tints. Decoys
/// make the zone part of each concrete attribute's definition.
inline SynthSpec default_synth_spec(std::uint64_t seed = 7) {
  SynthSpec s;
  s.seed = seed;
  s.decoy_prob = 0.5;
  s.attributes = {
      {"hat", AttributeKind::concrete, 0, Zone::head, 0.30, 3, 13, 16, 0.5},
      {"logo", AttributeKind::concrete, 1, Zone::torso, 0.40, 2, 11, 14, 0.3},
      {"stripes", AttributeKind::concrete, 2, Zone::torso, 0.25, 2, 11, 14, 0.7},
      {"boots", AttributeKind::concrete, 3, Zone::legs, 0.35, 3, 14, 18, 0.5},
      {"warm", AttributeKind::abstract, 0, Zone::full, 0.50, 0, 0, 0, 0.5},
      {"cool", AttributeKind::abstract, 1, Zone::full, 0.20, 0, 0, 0, 0.5},
  };
  return s;
}

struct SynthSample {
  std::vector<float> image;  // 3 x H x W, values in [0, 1]
  std::vector<int> labels;
  std::vector<std::optional<ImageBox>> boxes;  // set for positive concrete attributes
};

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::string> attributes;
  std::vector<bool> concrete;
  std::optional<SynthSpec> spec;
  std::vector<SynthSample> samples;

  LabelMatrix labels() const {
    LabelMatrix out;
    for (const auto& s : samples) out.push_back(s.labels);
    return out;
  }
};

/// Row band [y0, y1) of a zone, in pixels.
inline std::pair<double, double> zone_rows(Zone z, std::size_t height) {
  const double h = static_cast<double>(height);
  switch (z) {
    case Zone::head: return {0.0, 0.25 * h};
    case Zone::torso: return {0.25 * h, 0.70 * h};
    case Zone::legs: return {0.70 * h, h};
    case Zone::full: return {0.0, h};
  }
  return {0.0, h};
}

namespace detail {

inline std::array<float, 3> glyph_color(int pattern) {
  static constexpr std::array<std::array<float, 3>, 6> colors{{{0.92f, 0.15f, 0.15f},
                                                                {0.15f, 0.85f, 0.20f},
                                                                {0.15f, 0.25f, 0.95f},
                                                                {0.95f, 0.85f, 0.10f},
                                                                {0.90f, 0.20f, 0.85f},
                                                                {0.10f, 0.85f, 0.90f}}};
  return colors[static_cast<std::size_t>(pattern) % colors.size()];
}

// Whether pixel (u, v) inside a w x h glyph is painted.
inline bool glyph_mask(int pattern, int u, int v, int w, int h) {
  switch (pattern % 6) {
    case 0: return true;                                               // solid
    case 1: return u < 2 || v < 2 || u >= w - 2 || v >= h - 2;         // outline
    case 2: return (v / 2) % 2 == 0;                                   // horizontal stripes
    case 3: return ((u / 2) + (v / 2)) % 2 == 0;                       // checker
    case 4: return std::abs(2 * u - (w - 1)) <= 2 || std::abs(2 * v - (h - 1)) <= 2;  // plus
    default: return std::abs(u * h - v * w) <= std::max(w, h);         // diagonal
  }
}

inline void validate_spec(const SynthSpec& spec) {
  if (spec.height == 0 || spec.width == 0) throw SpecError("synth spec: image size must be positive");
  if (spec.attributes.empty()) throw SpecError("synth spec: no attributes");
  if (spec.occluder_prob < 0 || spec.occluder_prob > 1 || spec.decoy_prob < 0 || spec.decoy_prob > 1)
    throw SpecError("synth spec: occluder_prob and decoy_prob must lie in [0,1]");
  for (const auto& a : spec.attributes) {
    if (!(a.prevalence > 0.0 && a.prevalence < 1.0))
      throw SpecError("synth spec: prevalence of '" + a.name + "' must lie in (0,1)");
    if (a.kind == AttributeKind::abstract) continue;
    if (a.anchor_x < 0 || a.anchor_x > 1) throw SpecError("synth spec: anchor_x of '" + a.name + "' must lie in [0,1]");
    const auto [r0, r1] = zone_rows(a.zone, spec.height);
    const int rows = static_cast<int>(std::floor(r1)) - static_cast<int>(std::ceil(r0));
    if (a.size_min < 1 || a.size_max < a.size_min)
      throw SpecError("synth spec: bad glyph size range for '" + a.name + "'");
    if (a.size_max > rows || a.size_max > static_cast<int>(spec.width))
      throw SpecError("synth spec: glyph of '" + a.name + "' (up to " + std::to_string(a.size_max) +
                      " px) does not fit its zone (" + std::to_string(rows) + " rows x " + std::to_string(spec.width) +
                      " cols)");
  }
}

}  // namespace detail

/// One sample, fully determined by (spec, index).
inline SynthSample generate_sample(const SynthSpec& spec, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const std::size_t H = spec.height, W = spec.width, M = spec.attributes.size();
  SynthSample s;
  s.labels.assign(M, 0);
  s.boxes.assign(M, std::nullopt);
  for (std::size_t m = 0; m < M; ++m) s.labels[m] = unit(rng) < spec.attributes[m].prevalence ? 1 : 0;

  // background: per-image base color, vertical gradient, pixel noise
  std::array<double, 3> base;
  const double gray = 0.35 + 0.2 * unit(rng);
  for (auto& b : base) b = gray + 0.08 * (unit(rng) - 0.5);
  const double slope = 0.15 * (unit(rng) - 0.5);
  for (std::size_t m = 0; m < M; ++m) {
    const auto& a = spec.attributes[m];
    if (a.kind != AttributeKind::abstract || !s.labels[m]) continue;
    switch (a.pattern % 3) {
      case 0: base[0] += 0.18; break;  // warm
      case 1: base[2] += 0.18; break;  // cool
      default:
        for (auto& b : base) b -= 0.15;  // dark
    }
  }
  s.image.resize(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double v = base[c] + slope * (double(y) / double(H) - 0.5) + spec.noise * gauss(rng);
        s.image[(c * H + y) * W + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }

  auto draw_glyph = [&](const AttributeDef& a, Zone zone) {
    const auto [r0, r1] = zone_rows(zone, H);
    const int zy0 = static_cast<int>(std::ceil(r0)), zy1 = static_cast<int>(std::floor(r1));
    std::uniform_int_distribution<int> size(a.size_min, a.size_max);
    const int gw = size(rng), gh = size(rng);
    std::uniform_int_distribution<int> jit(-a.jitter, a.jitter);
    const int cx = static_cast<int>(std::lround(a.anchor_x * double(W))) + jit(rng), cy = (zy0 + zy1) / 2 + jit(rng);
    const int x0 = std::clamp(cx - gw / 2, 0, static_cast<int>(W) - gw);
    const int y0 = std::clamp(cy - gh / 2, zy0, zy1 - gh);
    const auto color = detail::glyph_color(a.pattern);
    for (int v = 0; v < gh; ++v)
      for (int u = 0; u < gw; ++u) {
        if (!detail::glyph_mask(a.pattern, u, v, gw, gh)) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          const double px = color[c] + 0.5 * spec.noise * gauss(rng);
          s.image[(c * H + std::size_t(y0 + v)) * W + std::size_t(x0 + u)] = static_cast<float>(std::clamp(px, 0.0, 1.0));
        }
      }
    return ImageBox{double(x0), double(y0), double(x0 + gw), double(y0 + gh)};
  };

  // decoys first, so real glyphs paint over them
  if (spec.decoy_prob > 0)
    for (const auto& a : spec.attributes) {
      if (a.kind != AttributeKind::concrete || unit(rng) >= spec.decoy_prob) continue;
      std::vector<Zone> others;
      for (Zone z : {Zone::head, Zone::torso, Zone::legs}) {
        const auto [r0, r1] = zone_rows(z, H);
        if (z != a.zone && static_cast<int>(std::floor(r1)) - static_cast<int>(std::ceil(r0)) >= a.size_max)
          others.push_back(z);
      }
      if (others.empty()) continue;
      std::uniform_int_distribution<std::size_t> pick(0, others.size() - 1);
      draw_glyph(a, others[pick(rng)]);
    }

  for (std::size_t m = 0; m < M; ++m) {
    const auto& a = spec.attributes[m];
    if (a.kind == AttributeKind::concrete && s.labels[m]) s.boxes[m] = draw_glyph(a, a.zone);
  }

  if (spec.occluder_prob > 0 && unit(rng) < spec.occluder_prob) {
    std::uniform_int_distribution<int> ow(4, static_cast<int>(W) / 2), oh(4, static_cast<int>(H) / 4);
    const int w = ow(rng), h = oh(rng);
    std::uniform_int_distribution<int> ox(0, static_cast<int>(W) - w), oy(0, static_cast<int>(H) - h);
    const int x0 = ox(rng), y0 = oy(rng);
    const float shade = static_cast<float>(0.2 + 0.6 * unit(rng));
    for (std::size_t c = 0; c < 3; ++c)
      for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) s.image[(c * H + std::size_t(y)) * W + std::size_t(x)] = shade;
  }
  return s;
}

inline Dataset generate_dataset(const SynthSpec& spec, std::size_t n, std::size_t first_index = 0) {
  if (n < 1) throw ContractError("generate_dataset: n must be >= 1");
  detail::validate_spec(spec);
  Dataset d;
  d.height = spec.height;
  d.width = spec.width;
  d.spec = spec;
  for (const auto& a : spec.attributes) {
    d.attributes.push_back(a.name);
    d.concrete.push_back(a.kind == AttributeKind::concrete);
  }
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.samples.push_back(generate_sample(spec, first_index + i));
  return d;
}

// -------------------- augmentation / batching --------------------

inline SynthSample mirror_sample(SynthSample s, std::size_t height, std::size_t width) {
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < height; ++y) {
      auto row = s.image.begin() + static_cast<std::ptrdiff_t>((c * height + y) * width);
      std::reverse(row, row + static_cast<std::ptrdiff_t>(width));
    }
  const double w = static_cast<double>(width);
  for (auto& b : s.boxes)
    if (b) *b = ImageBox{w - b->x1, b->y0, w - b->x0, b->y1};
  return s;
}

/// Horizontal flip with probability p; labels are untouched.
template <typename Urng>
SynthSample mirror_augment(SynthSample s, std::size_t height, std::size_t width, double p, Urng& rng) {
  if (p <= 0.0) return s;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < p) return mirror_sample(std::move(s), height, width);
  return s;
}

/// Seeded permutation of [0, n) cut into batches; the last one may be short.
inline std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw ContractError("minibatches: batch size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  return out;
}

inline Tensor make_image_batch(const std::vector<const SynthSample*>& samples, std::size_t height, std::size_t width) {
  Tensor t(Shape{samples.size(), 3, height, width});
  const std::size_t per = 3 * height * width;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->image.size() != per) throw DimensionError("make_image_batch: image size mismatch");
    std::copy(samples[i]->image.begin(), samples[i]->image.end(), t.ptr() + i * per);
  }
  return t;
}

// -------------------- on-disk layout --------------------

namespace detail {

inline void write_png(const std::filesystem::path& path, const std::vector<float>& chw, std::size_t h, std::size_t w) {
  std::vector<std::uint8_t> rgb(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(chw[(c * h + y) * w + x]), 0.0, 1.0);
        rgb[(y * w + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw std::runtime_error("cannot write " + path.string() + ": " + img.message);
}

inline std::vector<float> read_png(const std::filesystem::path& path, std::size_t& h, std::size_t& w) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw ParseError("cannot read " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, rgb.data(), 0, nullptr))
    throw ParseError("cannot decode " + path.string() + ": " + img.message);
  h = img.height;
  w = img.width;
  std::vector<float> chw(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) chw[(c * h + y) * w + x] = rgb[(y * w + x) * 3 + c] / 255.0f;
  return chw;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string format_coord(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

/// images/NNNNNN.png, labels.csv, spec.json (when the dataset has a spec).
inline void write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream csv(dir / "labels.csv");
  if (!csv) throw std::runtime_error("cannot write " + (dir / "labels.csv").string());
  csv << "filename";
  for (const auto& a : d.attributes) csv << ',' << a;
  for (std::size_t m = 0; m < d.attributes.size(); ++m)
    if (d.concrete[m])
      for (const char* k : {"_x0", "_y0", "_x1", "_y1"}) csv << ',' << d.attributes[m] << k;
  csv << '\n';
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << i << ".png";
    const auto& s = d.samples[i];
    detail::write_png(dir / name.str(), s.image, d.height, d.width);
    csv << name.str();
    for (int y : s.labels) csv << ',' << y;
    for (std::size_t m = 0; m < d.attributes.size(); ++m) {
      if (!d.concrete[m]) continue;
      if (s.boxes[m])
        csv << ',' << detail::format_coord(s.boxes[m]->x0) << ',' << detail::format_coord(s.boxes[m]->y0) << ','
            << detail::format_coord(s.boxes[m]->x1) << ',' << detail::format_coord(s.boxes[m]->y1);
      else
        csv << ",,,,";
    }
    csv << '\n';
  }
  if (d.spec) {
    std::ofstream js(dir / "spec.json");
    js << nlohmann::json(*d.spec).dump(2) << '\n';
  }
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path csv_path = dir / "labels.csv";
  std::ifstream csv(csv_path);
  if (!csv) throw ParseError("cannot open " + csv_path.string());
  Dataset d;
  std::string line;
  if (!std::getline(csv, line)) throw ParseError(csv_path.string() + ":1: missing header");
  const auto header = detail::split_csv(line);
  if (header.empty() || header[0] != "filename") throw ParseError(csv_path.string() + ":1: first column must be 'filename'");
  std::size_t col = 1;
  auto ends_with = [](const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  };
  while (col < header.size() && !ends_with(header[col], "_x0")) d.attributes.push_back(header[col++]);
  d.concrete.assign(d.attributes.size(), false);
  std::vector<std::size_t> box_attr;
  while (col < header.size()) {
    if (col + 3 >= header.size() || !ends_with(header[col], "_x0"))
      throw ParseError(csv_path.string() + ":1: malformed box columns at column " + std::to_string(col + 1));
    const std::string name = header[col].substr(0, header[col].size() - 3);
    auto it = std::find(d.attributes.begin(), d.attributes.end(), name);
    if (it == d.attributes.end()) throw ParseError(csv_path.string() + ":1: box columns for unknown attribute " + name);
    const auto m = static_cast<std::size_t>(it - d.attributes.begin());
    d.concrete[m] = true;
    box_attr.push_back(m);
    col += 4;
  }
  const std::size_t expected = 1 + d.attributes.size() + 4 * box_attr.size();
  std::size_t lineno = 1;
  while (std::getline(csv, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    const std::string where = csv_path.string() + ":" + std::to_string(lineno) + ": ";
    if (cells.size() != expected)
      throw ParseError(where + "expected " + std::to_string(expected) + " columns, got " + std::to_string(cells.size()));
    SynthSample s;
    std::size_t h = 0, w = 0;
    s.image = detail::read_png(dir / cells[0], h, w);
    if (d.samples.empty()) {
      d.height = h;
      d.width = w;
    } else if (h != d.height || w != d.width) {
      throw ParseError(where + "image size " + std::to_string(h) + "x" + std::to_string(w) + " differs from the first image");
    }
    for (std::size_t m = 0; m < d.attributes.size(); ++m) {
      const auto& c = cells[1 + m];
      if (c != "0" && c != "1") throw ParseError(where + "label '" + c + "' for " + d.attributes[m] + " is not 0/1");
      s.labels.push_back(c == "1");
    }
    s.boxes.assign(d.attributes.size(), std::nullopt);
    for (std::size_t k = 0; k < box_attr.size(); ++k) {
      const std::size_t base = 1 + d.attributes.size() + 4 * k;
      std::array<double, 4> v{};
      std::size_t filled = 0;
      for (std::size_t q = 0; q < 4; ++q) {
        if (cells[base + q].empty()) continue;
        try {
          v[q] = std::stod(cells[base + q]);
        } catch (const std::exception&) {
          throw ParseError(where + "bad box coordinate '" + cells[base + q] + "'");
        }
        ++filled;
      }
      if (filled == 4)
        s.boxes[box_attr[k]] = ImageBox{v[0], v[1], v[2], v[3]};
      else if (filled != 0)
        throw ParseError(where + "partial box for " + d.attributes[box_attr[k]]);
    }
    d.samples.push_back(std::move(s));
  }
  if (fs::exists(dir / "spec.json")) {
    std::ifstream js(dir / "spec.json");
    try {
      d.spec = nlohmann::json::parse(js).get<SynthSpec>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("spec.json: " + std::string(e.what()));
    }
  }
  return d;
}

}  // namespace attrloc
