#include "famseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "famseg/rng.hpp"

namespace famseg {

namespace {

constexpr double kRayleighMean = 1.2533141373155003;  // sqrt(pi/2)
constexpr double kRayleighStd = 0.6551363775620336;   // sqrt((4-pi)/2)

bool in_femur(const FemurShape& f, double x, double y) {
  const double dx = x - f.cx, dy = y - f.cy;
  const double c = std::cos(f.angle), s = std::sin(f.angle);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  return std::abs(u) <= f.length / 2 && std::abs(v) <= f.thickness / 2;
}

bool in_cranium(const CraniumShape& e, double x, double y) {
  const double dx = x - e.cx, dy = y - e.cy;
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  const double outer = (u * u) / (e.a * e.a) + (v * v) / (e.b * e.b);
  const double ia = e.a - e.thickness, ib = e.b - e.thickness;
  const double inner = (u * u) / (ia * ia) + (v * v) / (ib * ib);
  return outer <= 1.0 && inner > 1.0;
}

// Center drawn so the shape's bounding box keeps one pixel of border.
void place(Rng& rng, int size, double half_w, double half_h, double& cx, double& cy) {
  cx = rng.uniform(1.0 + half_w, size - 1.0 - half_w);
  cy = rng.uniform(1.0 + half_h, size - 1.0 - half_h);
}

FemurShape draw_femur(const PhantomSpec& spec, Rng& rng) {
  FemurShape f;
  f.length = rng.uniform(spec.femur_length_min, spec.femur_length_max);
  f.thickness = rng.uniform(spec.femur_thickness_min, spec.femur_thickness_max);
  f.angle = rng.uniform(0.0, std::numbers::pi);
  const double c = std::abs(std::cos(f.angle)), s = std::abs(std::sin(f.angle));
  place(rng, spec.image_size, f.length / 2 * c + f.thickness / 2 * s, f.length / 2 * s + f.thickness / 2 * c, f.cx,
        f.cy);
  return f;
}

CraniumShape draw_cranium(const PhantomSpec& spec, Rng& rng) {
  CraniumShape e;
  e.a = rng.uniform(spec.cranium_axis_min, spec.cranium_axis_max);
  e.b = rng.uniform(spec.cranium_axis_min, spec.cranium_axis_max);
  e.thickness = rng.uniform(spec.cranium_thickness_min, spec.cranium_thickness_max);
  e.angle = rng.uniform(0.0, std::numbers::pi);
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  place(rng, spec.image_size, std::sqrt(e.a * e.a * c * c + e.b * e.b * s * s),
        std::sqrt(e.a * e.a * s * s + e.b * e.b * c * c), e.cx, e.cy);
  return e;
}

Tensor render(const Mask& mask, const PhantomMeta& meta, Rng& rng) {
  const int h = mask.height, w = mask.width;
  std::vector<double> fg(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = mask.labels[i] != 0 ? 1.0 : 0.0;
  std::vector<double> gray(fg.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double blur = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) blur += fg[static_cast<std::size_t>(yy) * w + xx];
        }
      }
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      double v = meta.background + meta.contrast * (0.7 * fg[i] + 0.3 * blur / 9.0);
      if (meta.noise > 0.0) {
        const double speckle = (rng.rayleigh() - kRayleighMean) / kRayleighStd;
        v = v * (1.0 + meta.noise * speckle) + 0.5 * meta.noise * rng.normal();
      }
      v = std::clamp(v, 0.0, 1.0);
      gray[i] = std::round(v * 255.0) / 255.0;
    }
  }
  std::vector<double> rgb;
  rgb.reserve(3 * gray.size());
  for (int c = 0; c < 3; ++c) rgb.insert(rgb.end(), gray.begin(), gray.end());
  return Tensor::from({3, h, w}, std::move(rgb));
}

PhantomMeta draw_appearance(const PhantomSpec& spec, Rng& rng, std::uint64_t seed) {
  PhantomMeta meta;
  meta.seed = seed;
  meta.image_size = spec.image_size;
  meta.background = rng.uniform(spec.background_min, spec.background_max);
  meta.contrast = rng.uniform(spec.contrast_min, spec.contrast_max);
  meta.noise = rng.uniform(spec.noise_min, spec.noise_max);
  return meta;
}

}  // namespace

void PhantomSpec::validate() const {
  if (image_size < 32 || image_size % 32 != 0) {
    throw ConfigError("phantom: image_size must be a positive multiple of 32, got " + std::to_string(image_size));
  }
  auto range = [](const char* what, double lo, double hi) {
    if (!(lo >= 0) || hi < lo) throw ConfigError(std::string("phantom: bad range for ") + what);
  };
  range("femur_length", femur_length_min, femur_length_max);
  range("femur_thickness", femur_thickness_min, femur_thickness_max);
  range("cranium_axis", cranium_axis_min, cranium_axis_max);
  range("cranium_thickness", cranium_thickness_min, cranium_thickness_max);
  range("noise", noise_min, noise_max);
  range("background", background_min, background_max);
  range("contrast", contrast_min, contrast_max);
  range("foreground", foreground_min, foreground_max);
  if (femur_thickness_min <= 0 || femur_length_min <= 0) throw ConfigError("phantom: femur must have positive size");
  if (cranium_thickness_min <= 0 || cranium_thickness_max >= cranium_axis_min) {
    throw ConfigError("phantom: cranium shell thickness must be positive and below the smallest semi-axis");
  }
  const double usable = image_size - 2.0;
  if (std::hypot(femur_length_max, femur_thickness_max) >= usable) {
    throw ConfigError("phantom: femur_length_max does not fit a " + std::to_string(image_size) + " px frame");
  }
  if (2.0 * cranium_axis_max >= usable) {
    throw ConfigError("phantom: cranium_axis_max does not fit a " + std::to_string(image_size) + " px frame");
  }
  if (foreground_max > 1.0) throw ConfigError("phantom: foreground_max above 1");
  if (max_attempts < 1) throw ConfigError("phantom: max_attempts must be positive");
}

Mask rasterize(const PhantomMeta& meta) {
  const int n = meta.image_size;
  Mask m{n, n, std::vector<std::uint8_t>(static_cast<std::size_t>(n) * n, 0)};
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      std::uint8_t label = 0;
      if (meta.cranium && in_cranium(*meta.cranium, px, py)) label = 2;
      if (meta.femur && in_femur(*meta.femur, px, py)) label = 1;
      m.labels[static_cast<std::size_t>(y) * n + x] = label;
    }
  }
  return m;
}

SegmentationSample generate_one(const PhantomSpec& spec, std::uint64_t sample_seed) {
  spec.validate();
  Rng rng(sample_seed);
  const double total = static_cast<double>(spec.image_size) * spec.image_size;
  for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
    PhantomMeta meta = draw_appearance(spec, rng, sample_seed);
    meta.mix = static_cast<ClassMix>(rng.uniform_int(0, 2));
    if (meta.mix != ClassMix::kFemurOnly) meta.cranium = draw_cranium(spec, rng);
    if (meta.mix != ClassMix::kCraniumOnly) meta.femur = draw_femur(spec, rng);
    Mask mask = rasterize(meta);
    std::size_t counts[3] = {0, 0, 0};
    for (auto v : mask.labels) ++counts[v];
    const double frac = (counts[1] + counts[2]) / total;
    if (frac < spec.foreground_min || frac > spec.foreground_max) continue;
    if (meta.femur && counts[1] == 0) continue;
    if (meta.cranium && counts[2] == 0) continue;
    Tensor image = render(mask, meta, rng);
    return {image, std::move(mask), meta};
  }
  throw ConfigError("phantom: no admissible sample after " + std::to_string(spec.max_attempts) +
                    " attempts; widen the foreground bounds or shape ranges");
}

SegmentationSample generate_background(const PhantomSpec& spec, std::uint64_t sample_seed) {
  spec.validate();
  Rng rng(sample_seed);
  PhantomMeta meta = draw_appearance(spec, rng, sample_seed);
  meta.mix = ClassMix::kNone;
  Mask mask = rasterize(meta);
  Tensor image = render(mask, meta, rng);
  return {image, std::move(mask), meta};
}

std::vector<SegmentationSample> generate(const PhantomSpec& spec, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("phantom: need at least one sample, got " + std::to_string(n));
  std::vector<SegmentationSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(generate_one(spec, derive_seed(seed, static_cast<std::uint64_t>(i))));
  return out;
}

std::vector<std::uint64_t> class_pixel_counts(const std::vector<SegmentationSample>& samples, int num_classes) {
  std::vector<std::uint64_t> counts(num_classes, 0);
  for (const auto& s : samples) {
    for (auto v : s.mask.labels) {
      if (v >= num_classes) throw DataError("mask value " + std::to_string(v) + " out of range");
      ++counts[v];
    }
  }
  return counts;
}

}  // namespace famseg
