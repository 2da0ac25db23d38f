#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "famseg/decoder.hpp"
#include "famseg/tensor.hpp"

namespace famseg {

enum class ClassMix { kFemurOnly, kCraniumOnly, kBoth, kNone };

/// Oriented bar, class 1.
struct FemurShape {
  double cx = 0, cy = 0;
  double length = 0, thickness = 0;
  double angle = 0;  // radians
};

/// Elliptical shell, class 2. a/b are the outer semi-axes.
struct CraniumShape {
  double cx = 0, cy = 0;
  double a = 0, b = 0;
  double thickness = 0;
  double angle = 0;
};

struct PhantomMeta {
  std::uint64_t seed = 0;
  int image_size = 0;
  ClassMix mix = ClassMix::kBoth;
  std::optional<FemurShape> femur;
  std::optional<CraniumShape> cranium;
  double background = 0;
  double contrast = 0;
  double noise = 0;
};

struct PhantomSpec {
  int image_size = 64;
  double femur_length_min = 8, femur_length_max = 24;
  double femur_thickness_min = 2, femur_thickness_max = 4;
  double cranium_axis_min = 10, cranium_axis_max = 24;
  double cranium_thickness_min = 2, cranium_thickness_max = 3;
  double noise_min = 0.05, noise_max = 0.2;
  double background_min = 0.1, background_max = 0.2;
  double contrast_min = 0.7, contrast_max = 0.9;
  double foreground_min = 0.005, foreground_max = 0.25;
  int max_attempts = 1000;

  void validate() const;
};

struct SegmentationSample {
  Tensor image;  // [3,H,W], values k/255
  Mask mask;
  std::optional<PhantomMeta> meta;
};

/// Class map of the generating geometry, sampled at pixel centers. FL is
/// drawn over FB.
Mask rasterize(const PhantomMeta& meta);

/// Sample i is drawn from its own stream seeded with derive_seed(seed, i).
std::vector<SegmentationSample> generate(const PhantomSpec& spec, int n, std::uint64_t seed);
SegmentationSample generate_one(const PhantomSpec& spec, std::uint64_t sample_seed);
/// Noise and background only, no structures.
SegmentationSample generate_background(const PhantomSpec& spec, std::uint64_t sample_seed);

/// Pixel count per class over a set of masks.
std::vector<std::uint64_t> class_pixel_counts(const std::vector<SegmentationSample>& samples, int num_classes = 3);

}  // namespace famseg
