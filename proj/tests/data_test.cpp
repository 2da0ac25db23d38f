#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "famseg/dataset.hpp"
#include "famseg/image_io.hpp"
#include "famseg/phantom.hpp"
#include "famseg/rng.hpp"
#include "oracles.hpp"

using namespace famseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("famseg_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool is_fg(std::uint8_t v) { return v != 0; }

// Audit over 1000 generated samples, shared by the property tests below.
const std::vector<SegmentationSample>& audit_set() {
  static const std::vector<SegmentationSample> s = generate(PhantomSpec{}, 1000, 2024);
  return s;
}

}  // namespace

TEST(data_synth, generation_is_seed_deterministic) {
  const PhantomSpec spec;
  const auto a = generate(spec, 12, 99);
  const auto b = generate(spec, 12, 99);
  const auto c = generate(spec, 12, 100);
  bool any_diff = false;
  for (int i = 0; i < 12; ++i) {
    EXPECT_EQ(a[i].mask, b[i].mask);
    EXPECT_TRUE(std::equal(a[i].image.data().begin(), a[i].image.data().end(), b[i].image.data().begin()));
    any_diff = any_diff || !(a[i].mask == c[i].mask);
  }
  EXPECT_TRUE(any_diff);
}

TEST(data_synth, per_sample_seed_splitting) {
  const PhantomSpec spec;
  const auto all = generate(spec, 5, 31);
  for (int i = 0; i < 5; ++i) {
    const auto one = generate_one(spec, derive_seed(31, i));
    EXPECT_EQ(one.mask, all[i].mask);
    EXPECT_EQ(one.meta->seed, all[i].meta->seed);
  }
}

TEST(data_synth, noiseless_foreground_is_brighter_by_margin) {
  PhantomSpec spec;
  spec.noise_min = spec.noise_max = 0.0;
  const auto samples = generate(spec, 200, 5);
  for (const auto& s : samples) {
    double fg_min = 1.0, bg_max = 0.0;
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < s.mask.labels.size(); ++i) {
        const double v = s.image.data()[c * s.mask.labels.size() + i];
        if (is_fg(s.mask.labels[i])) {
          fg_min = std::min(fg_min, v);
        } else {
          bg_max = std::max(bg_max, v);
        }
      }
    EXPECT_GE(fg_min - bg_max, 0.3) << "seed " << s.meta->seed;
  }
}

TEST(data_synth, foreground_fraction_audit) {
  for (const auto& s : audit_set()) {
    const auto fg = std::count_if(s.mask.labels.begin(), s.mask.labels.end(), is_fg);
    const double frac = static_cast<double>(fg) / s.mask.labels.size();
    EXPECT_GE(frac, 0.005);
    EXPECT_LE(frac, 0.25);
  }
}

TEST(data_synth, class_balance_audit) {
  const auto counts = class_pixel_counts(audit_set());
  ASSERT_EQ(counts.size(), 3u);
  for (auto c : counts) EXPECT_GT(c, 0u);
  EXPECT_GE(static_cast<double>(counts[2]), 3.0 * static_cast<double>(counts[1]));
}

TEST(data_synth, masks_are_reachable_from_meta) {
  for (const auto& s : audit_set()) {
    ASSERT_TRUE(s.meta.has_value());
    EXPECT_EQ(rasterize(*s.meta), s.mask);
  }
}

TEST(data_synth, value_ranges_and_frame) {
  for (const auto& s : audit_set()) {
    for (double v : s.image.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
      ASSERT_EQ(std::round(v * 255.0), v * 255.0);
    }
    const int n = s.mask.height;
    bool any = false;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        const auto v = s.mask.at(r, c);
        ASSERT_LE(v, 2);
        any = any || v != 0;
        if (r == 0 || c == 0 || r == n - 1 || c == n - 1) {
          EXPECT_EQ(v, 0) << "structure touches the frame";
        }
      }
    EXPECT_TRUE(any);
    EXPECT_NE(s.meta->mix, ClassMix::kNone);
  }
}

TEST(data_synth, class_mix_matches_mask) {
  for (const auto& s : audit_set()) {
    const bool fl = std::count(s.mask.labels.begin(), s.mask.labels.end(), 1) > 0;
    const bool fb = std::count(s.mask.labels.begin(), s.mask.labels.end(), 2) > 0;
    switch (s.meta->mix) {
      case ClassMix::kFemurOnly: EXPECT_TRUE(fl && !fb); break;
      case ClassMix::kCraniumOnly: EXPECT_TRUE(fb && !fl); break;
      case ClassMix::kBoth: EXPECT_TRUE(fl && fb); break;
      case ClassMix::kNone: ADD_FAILURE(); break;
    }
  }
}

TEST(data_synth, femur_drawn_over_cranium) {
  PhantomMeta m;
  m.image_size = 64;
  m.mix = ClassMix::kBoth;
  m.femur = FemurShape{32, 32, 20, 4, 0.0};
  m.cranium = CraniumShape{32, 32, 12, 12, 3, 0.0};
  const Mask mask = rasterize(m);
  // (32, 42) lies on both the bar and the shell.
  EXPECT_EQ(mask.at(32, 41), 1);
  EXPECT_EQ(mask.at(22, 32), 2);
  EXPECT_EQ(mask.at(32, 32), 1);
  EXPECT_EQ(mask.at(5, 5), 0);
}

TEST(data_synth, background_sample_has_no_structures) {
  const auto s = generate_background(PhantomSpec{}, 17);
  EXPECT_TRUE(std::all_of(s.mask.labels.begin(), s.mask.labels.end(), [](auto v) { return v == 0; }));
}

TEST(data_synth, impossible_specs_rejected) {
  PhantomSpec spec;
  spec.image_size = 48;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = PhantomSpec{};
  spec.femur_length_max = 80;
  EXPECT_THROW(generate(spec, 1, 1), ConfigError);
  spec = PhantomSpec{};
  spec.cranium_axis_max = 40;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = PhantomSpec{};
  spec.cranium_thickness_max = 12;
  EXPECT_THROW(spec.validate(), ConfigError);
  EXPECT_THROW(generate(PhantomSpec{}, 0, 1), ConfigError);
}

TEST(data_synth, mask_png_round_trip) {
  const auto dir = scratch("mask");
  Rng rng(3);
  const Mask m = oracle::random_mask(37, 23, 3, rng);
  save_mask_png((dir / "m.png").string(), m);
  EXPECT_EQ(load_mask_png((dir / "m.png").string(), 3), m);
}

TEST(data_synth, mask_value_out_of_range) {
  const auto dir = scratch("range");
  Mask m{4, 4, std::vector<std::uint8_t>(16, 0)};
  m.labels[5] = 7;
  save_mask_png((dir / "m.png").string(), m);
  try {
    load_mask_png((dir / "m.png").string(), 3);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("7"), std::string::npos);
  }
}

TEST(data_synth, image_png_round_trip_and_size_check) {
  const auto dir = scratch("image");
  const auto s = generate_one(PhantomSpec{}, 77);
  save_image_png((dir / "i.png").string(), s.image);
  save_mask_png((dir / "m.png").string(), s.mask);
  const auto back = load_png_pair((dir / "i.png").string(), (dir / "m.png").string(), 3);
  EXPECT_TRUE(std::equal(back.image.data().begin(), back.image.data().end(), s.image.data().begin()));
  EXPECT_EQ(back.mask, s.mask);

  save_mask_png((dir / "small.png").string(), Mask{32, 32, std::vector<std::uint8_t>(32 * 32, 0)});
  EXPECT_THROW(load_png_pair((dir / "i.png").string(), (dir / "small.png").string(), 3), DataError);
  EXPECT_THROW(load_mask_png((dir / "i.png").string(), 3), DataError);
  EXPECT_THROW(load_image_png((dir / "missing.png").string()), DataError);

  // A grayscale file loads as three identical channels.
  const Tensor gray = load_image_png((dir / "m.png").string());
  ASSERT_EQ(gray.shape(), (Shape{3, 64, 64}));
  for (int i = 0; i < 64 * 64; ++i) {
    EXPECT_EQ(gray.data()[i], s.mask.labels[i] / 255.0);
    EXPECT_EQ(gray.data()[i], gray.data()[2 * 64 * 64 + i]);
  }
}

TEST(data_synth, palette_colors) {
  EXPECT_EQ(palette_color(0), (std::array<std::uint8_t, 3>{0, 0, 0}));
  EXPECT_EQ(palette_color(1), (std::array<std::uint8_t, 3>{255, 0, 0}));
  EXPECT_EQ(palette_color(2), (std::array<std::uint8_t, 3>{0, 255, 0}));
  const auto dir = scratch("palette");
  const Mask m{1, 3, {0, 1, 2}};
  save_palette_png((dir / "p.png").string(), m);
  const Tensor rgb = load_image_png((dir / "p.png").string());
  EXPECT_EQ(rgb.data()[0 * 3 + 1], 1.0);  // red channel of the FL pixel
  EXPECT_EQ(rgb.data()[1 * 3 + 1], 0.0);
  EXPECT_EQ(rgb.data()[1 * 3 + 2], 1.0);  // green channel of the FB pixel
}

TEST(data_synth, split_sizes_and_cover) {
  const auto s = split(100, {0.8, 0.1, 0.1}, 5);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.val.size(), 10u);
  EXPECT_EQ(s.test.size(), 10u);
  std::set<int> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(*all.begin(), 0);
  EXPECT_EQ(*all.rbegin(), 99);
  const auto t = split(100, {0.8, 0.1, 0.1}, 5);
  EXPECT_EQ(s.train, t.train);
  EXPECT_EQ(s.val, t.val);
  EXPECT_NE(split(100, {0.8, 0.1, 0.1}, 6).val, s.val);
}

TEST(data_synth, split_errors) {
  EXPECT_THROW(split(3, {0.8, 0.1, 0.1}, 1), DataError);
  EXPECT_THROW(split(100, {0.8, 0.3, 0.1}, 1), ConfigError);
}

TEST(data_synth, dataset_directory_round_trip) {
  const auto dir = scratch("dataset");
  const auto samples = generate(PhantomSpec{}, 10, 8);
  const auto idx = split(10, {0.8, 0.1, 0.1}, 4);
  write_dataset(dir.string(), samples, idx);
  const auto manifest = read_manifest(dir.string());
  EXPECT_EQ(manifest.size(), 10u);
  EXPECT_TRUE(fs::exists(dir / "meta.jsonl"));
  const Dataset d = load_dataset(dir.string(), 3);
  ASSERT_EQ(d.samples.size(), 10u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(d.samples[i].mask, samples[i].mask);
  EXPECT_EQ(d.subset("train").size(), 8u);
  EXPECT_EQ(d.subset("val").size(), 1u);

  std::ofstream(dir / kManifestName, std::ios::app) << "images/000000.png\tmasks/000000.png\tholdout\n";
  EXPECT_THROW(read_manifest(dir.string()), DataError);
  EXPECT_THROW(read_manifest((dir / "nowhere").string()), DataError);
}
