#include "famseg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>

namespace famseg {

namespace {

struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

RawImage read_png(const std::string& path, bool gray) {
  if (!std::filesystem::exists(path)) throw DataError("no such file: " + path);
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError("cannot read PNG " + path + ": " + img.message);
  }
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  RawImage out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = gray ? 1 : 3;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode PNG " + path + ": " + img.message);
  }
  return out;
}

void write_png(const std::string& path, const RawImage& raw) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(raw.width);
  img.height = static_cast<png_uint_32>(raw.height);
  img.format = raw.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, raw.pixels.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path + ": " + img.message);
  }
}

// PNG_FORMAT_GRAY read of an RGB file applies a luminance conversion; keep
// gray files exact by checking the colour type first.
bool file_is_gray(const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError("cannot read PNG " + path + ": " + img.message);
  }
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png_image_free(&img);
  return gray;
}

}  // namespace

Tensor load_image_png(const std::string& path) {
  if (!std::filesystem::exists(path)) throw DataError("no such file: " + path);
  const bool gray = file_is_gray(path);
  RawImage raw = read_png(path, gray);
  const std::size_t plane = static_cast<std::size_t>(raw.width) * raw.height;
  std::vector<double> v(3 * plane);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::uint8_t p = gray ? raw.pixels[i] : raw.pixels[3 * i + c];
      v[c * plane + i] = p / 255.0;
    }
  }
  return Tensor::from({3, raw.height, raw.width}, std::move(v));
}

void save_image_png(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("save_image_png: expected [3,H,W], got " + shape_str(image.shape()));
  }
  RawImage raw{image.dim(2), image.dim(1), 3, {}};
  const std::size_t plane = static_cast<std::size_t>(raw.width) * raw.height;
  raw.pixels.resize(3 * plane);
  const auto d = image.data();
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(d[c * plane + i], 0.0, 1.0);
      raw.pixels[3 * i + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  write_png(path, raw);
}

Mask load_mask_png(const std::string& path, int num_classes) {
  if (!std::filesystem::exists(path)) throw DataError("no such file: " + path);
  if (!file_is_gray(path)) throw DataError("mask " + path + " is not single-channel");
  RawImage raw = read_png(path, true);
  Mask m{raw.height, raw.width, std::move(raw.pixels)};
  for (auto v : m.labels) {
    if (v >= num_classes) {
      throw DataError("mask " + path + " holds class " + std::to_string(v) + " but num_classes is " +
                      std::to_string(num_classes));
    }
  }
  return m;
}

void save_mask_png(const std::string& path, const Mask& mask) {
  if (mask.labels.size() != static_cast<std::size_t>(mask.height) * mask.width) {
    throw ShapeError("save_mask_png: label count does not match " + std::to_string(mask.height) + "x" +
                     std::to_string(mask.width));
  }
  write_png(path, RawImage{mask.width, mask.height, 1, mask.labels});
}

std::array<std::uint8_t, 3> palette_color(int label) {
  switch (label) {
    case 0: return {0, 0, 0};
    case 1: return {255, 0, 0};
    case 2: return {0, 255, 0};
    case 3: return {0, 0, 255};
    default: return {255, 255, 0};
  }
}

void save_palette_png(const std::string& path, const Mask& mask) {
  RawImage raw{mask.width, mask.height, 3, {}};
  raw.pixels.resize(3 * mask.labels.size());
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    const auto c = palette_color(mask.labels[i]);
    std::copy(c.begin(), c.end(), raw.pixels.begin() + 3 * i);
  }
  write_png(path, raw);
}

SegmentationSample load_png_pair(const std::string& image_path, const std::string& mask_path, int num_classes) {
  Tensor image = load_image_png(image_path);
  Mask mask = load_mask_png(mask_path, num_classes);
  if (image.dim(1) != mask.height || image.dim(2) != mask.width) {
    throw DataError("image " + image_path + " is " + std::to_string(image.dim(2)) + "x" +
                    std::to_string(image.dim(1)) + " but mask " + mask_path + " is " + std::to_string(mask.width) +
                    "x" + std::to_string(mask.height));
  }
  return {image, std::move(mask), std::nullopt};
}

}  // namespace famseg
