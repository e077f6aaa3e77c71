#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "attrloc/synth.hpp"

using namespace attrloc;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("attrloc_test_synth_" + name);
  fs::remove_all(p);
  return p;
}

SynthSpec single_attribute_spec(double prevalence, Zone zone = Zone::head) {
  SynthSpec s;
  s.attributes = {{"x", AttributeKind::concrete, 0, zone, prevalence, 3, 8, 12, 0.5}};
  return s;
}

}  // namespace

TEST(Generate, DeterministicForSeed) {
  auto spec = default_synth_spec(7);
  auto a = generate_dataset(spec, 100), b = generate_dataset(spec, 100);
  ASSERT_EQ(a.samples.size(), 100u);
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_EQ(a.samples[i].labels, b.samples[i].labels);
    for (std::size_t m = 0; m < spec.attributes.size(); ++m) {
      ASSERT_EQ(a.samples[i].boxes[m].has_value(), b.samples[i].boxes[m].has_value());
      if (a.samples[i].boxes[m]) {
        EXPECT_EQ(a.samples[i].boxes[m]->x0, b.samples[i].boxes[m]->x0);
      }
    }
  }
}

TEST(Generate, IndexedSamplesIndependentOfBatching) {
  auto spec = default_synth_spec(7);
  auto whole = generate_dataset(spec, 20);
  auto tail = generate_dataset(spec, 5, 15);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(whole.samples[15 + i].image, tail.samples[i].image);
}

TEST(Generate, DifferentSeedsDiffer) {
  auto a = generate_dataset(default_synth_spec(7), 5), b = generate_dataset(default_synth_spec(8), 5);
  EXPECT_NE(a.samples[0].image, b.samples[0].image);
}

TEST(Generate, PrevalenceConcentrates) {
  auto d = generate_dataset(single_attribute_spec(0.3), 10000);
  double pos = 0;
  for (const auto& s : d.samples) pos += s.labels[0];
  EXPECT_NEAR(pos / 10000, 0.3, 0.02);
}

TEST(Generate, LowPrevalenceSupported) {
  auto d = generate_dataset(single_attribute_spec(0.01), 2000);
  double pos = 0;
  for (const auto& s : d.samples) pos += s.labels[0];
  EXPECT_GT(pos, 0);
  EXPECT_LT(pos / 2000, 0.03);
}

TEST(Generate, HeadBoxesStayInTopQuarter) {
  auto d = generate_dataset(single_attribute_spec(0.5), 500);
  for (const auto& s : d.samples)
    if (s.boxes[0]) {
      EXPECT_LE(s.boxes[0]->y1, 0.25 * 64);
    }
}

TEST(Generate, BoxesPresentExactlyForPositiveConcreteLabels) {
  auto spec = default_synth_spec(3);
  spec.occluder_prob = 0.5;
  auto d = generate_dataset(spec, 300);
  for (const auto& s : d.samples)
    for (std::size_t m = 0; m < spec.attributes.size(); ++m) {
      const bool concrete = spec.attributes[m].kind == AttributeKind::concrete;
      EXPECT_EQ(s.boxes[m].has_value(), concrete && s.labels[m] == 1);
    }
}

TEST(Generate, EveryBoxInsideItsZone) {
  auto spec = default_synth_spec(11);
  auto d = generate_dataset(spec, 1000);
  for (const auto& s : d.samples)
    for (std::size_t m = 0; m < spec.attributes.size(); ++m) {
      if (!s.boxes[m]) continue;
      const auto [r0, r1] = zone_rows(spec.attributes[m].zone, spec.height);
      const auto& b = *s.boxes[m];
      EXPECT_GE(b.y0, r0);
      EXPECT_LE(b.y1, r1);
      EXPECT_GE(b.x0, 0);
      EXPECT_LE(b.x1, double(spec.width));
      EXPECT_GT(b.area(), 0);
    }
}

TEST(Generate, PixelsInUnitRange) {
  auto spec = default_synth_spec(5);
  spec.noise = 0.5;
  auto d = generate_dataset(spec, 20);
  for (const auto& s : d.samples)
    for (float v : s.image) {
      EXPECT_GE(v, 0.f);
      EXPECT_LE(v, 1.f);
    }
}

TEST(Generate, ZoneBands) {
  EXPECT_EQ(zone_rows(Zone::head, 64), (std::pair<double, double>{0, 16}));
  EXPECT_EQ(zone_rows(Zone::torso, 100), (std::pair<double, double>{25, 70}));
  EXPECT_EQ(zone_rows(Zone::legs, 100), (std::pair<double, double>{70, 100}));
}

TEST(Generate, OversizedGlyphRejected) {
  auto spec = single_attribute_spec(0.5);
  spec.attributes[0].size_min = 10;
  spec.attributes[0].size_max = 20;  // head band of a 64-row image has 16 rows
  EXPECT_THROW(generate_dataset(spec, 1), SpecError);
}

TEST(Generate, BadSpecsRejected) {
  EXPECT_THROW(generate_dataset(single_attribute_spec(0.0), 1), SpecError);
  EXPECT_THROW(generate_dataset(single_attribute_spec(1.0), 1), SpecError);
  EXPECT_THROW(generate_dataset(SynthSpec{}, 1), SpecError);
  EXPECT_THROW(generate_dataset(single_attribute_spec(0.5), 0), ContractError);
}

TEST(Generate, SpecJsonRoundTrip) {
  auto spec = default_synth_spec(9);
  nlohmann::json j = spec;
  EXPECT_EQ(j.get<SynthSpec>(), spec);
  EXPECT_EQ(j["attributes"][0]["zone"], "head");
}

TEST(DiskFormat, RoundTrip) {
  auto dir = scratch_dir("roundtrip");
  auto d = generate_dataset(default_synth_spec(7), 25);
  write_dataset(d, dir);
  EXPECT_TRUE(fs::exists(dir / "images" / "000000.png"));
  EXPECT_TRUE(fs::exists(dir / "spec.json"));
  auto r = read_dataset(dir);
  EXPECT_EQ(r.attributes, d.attributes);
  EXPECT_EQ(r.concrete, d.concrete);
  EXPECT_EQ(r.labels(), d.labels());
  EXPECT_EQ(r.height, d.height);
  EXPECT_EQ(r.width, d.width);
  ASSERT_TRUE(r.spec.has_value());
  EXPECT_EQ(*r.spec, *d.spec);
  double worst = 0;
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    for (std::size_t k = 0; k < d.samples[i].image.size(); ++k)
      worst = std::max(worst, double(std::abs(r.samples[i].image[k] - d.samples[i].image[k])));
    for (std::size_t m = 0; m < d.attributes.size(); ++m) {
      ASSERT_EQ(r.samples[i].boxes[m].has_value(), d.samples[i].boxes[m].has_value());
      if (d.samples[i].boxes[m]) {
        EXPECT_NEAR(r.samples[i].boxes[m]->x1, d.samples[i].boxes[m]->x1, 1e-9);
      }
    }
  }
  EXPECT_LE(worst, 1.0 / 255.0);
  fs::remove_all(dir);
}

TEST(DiskFormat, MissingColumnReportsLine) {
  auto dir = scratch_dir("missing");
  write_dataset(generate_dataset(default_synth_spec(7), 4), dir);
  std::vector<std::string> lines;
  {
    std::ifstream in(dir / "labels.csv");
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  lines[3] = lines[3].substr(0, lines[3].rfind(','));
  {
    std::ofstream out(dir / "labels.csv");
    for (const auto& l : lines) out << l << '\n';
  }
  try {
    read_dataset(dir);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("labels.csv:4:"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(DiskFormat, BadLabelReportsLine) {
  auto dir = scratch_dir("badlabel");
  write_dataset(generate_dataset(single_attribute_spec(0.5), 3), dir);
  std::vector<std::string> lines;
  {
    std::ifstream in(dir / "labels.csv");
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  auto c = lines[2].find(',');
  lines[2][c + 1] = '7';
  {
    std::ofstream out(dir / "labels.csv");
    for (const auto& l : lines) out << l << '\n';
  }
  EXPECT_THROW(read_dataset(dir), ParseError);
  fs::remove_all(dir);
}

TEST(Mirror, ZeroProbabilityIsIdentity) {
  auto d = generate_dataset(default_synth_spec(7), 3);
  std::mt19937_64 rng(1);
  for (const auto& s : d.samples) EXPECT_EQ(mirror_augment(s, 64, 32, 0.0, rng).image, s.image);
}

TEST(Mirror, DoubleFlipRestores) {
  auto d = generate_dataset(default_synth_spec(7), 3);
  for (const auto& s : d.samples) {
    auto twice = mirror_sample(mirror_sample(s, 64, 32), 64, 32);
    EXPECT_EQ(twice.image, s.image);
    EXPECT_EQ(twice.labels, s.labels);
  }
}

TEST(Mirror, BoxReflection) {
  auto d = generate_dataset(default_synth_spec(7), 20);
  std::mt19937_64 rng(2);
  for (const auto& s : d.samples) {
    auto f = mirror_augment(s, 64, 32, 1.0, rng);
    EXPECT_EQ(f.labels, s.labels);
    for (std::size_t m = 0; m < s.boxes.size(); ++m)
      if (s.boxes[m]) {
        EXPECT_DOUBLE_EQ(f.boxes[m]->x0, 32 - s.boxes[m]->x1);
        EXPECT_DOUBLE_EQ(f.boxes[m]->x1, 32 - s.boxes[m]->x0);
        EXPECT_DOUBLE_EQ(f.boxes[m]->y0, s.boxes[m]->y0);
      }
    // first row of the red channel is reversed
    for (std::size_t x = 0; x < 32; ++x) EXPECT_EQ(f.image[x], s.image[31 - x]);
  }
}

TEST(Minibatches, SizesWithPartialTail) {
  auto b = minibatches(10, 4, 1);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 4u);
  EXPECT_EQ(b[1].size(), 4u);
  EXPECT_EQ(b[2].size(), 2u);
}

TEST(Minibatches, SeededOrder) {
  EXPECT_EQ(minibatches(50, 8, 3), minibatches(50, 8, 3));
  EXPECT_NE(minibatches(50, 8, 3), minibatches(50, 8, 4));
}

TEST(Minibatches, UnionIsPermutation) {
  std::multiset<std::size_t> seen;
  for (const auto& b : minibatches(37, 5, 9))
    for (auto i : b) seen.insert(i);
  ASSERT_EQ(seen.size(), 37u);
  std::size_t expect = 0;
  for (auto i : seen) EXPECT_EQ(i, expect++);
  EXPECT_THROW(minibatches(5, 0, 1), ContractError);
}

TEST(ImageBatch, LaysOutSamplesContiguously) {
  auto d = generate_dataset(default_synth_spec(7), 2);
  auto t = make_image_batch({&d.samples[1], &d.samples[0]}, 64, 32);
  ASSERT_EQ(t.shape(), (Shape{2, 3, 64, 32}));
  EXPECT_EQ(t[0], d.samples[1].image[0]);
  EXPECT_EQ(t[3 * 64 * 32], d.samples[0].image[0]);
}
