#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "famseg/phantom.hpp"

namespace famseg {

/// 8-bit PNG I/O. Images are [3,H,W] tensors in [0,1]; grayscale files are
/// replicated to three channels on load.
Tensor load_image_png(const std::string& path);
void save_image_png(const std::string& path, const Tensor& image);

/// Masks are single-channel PNGs holding class indices.
Mask load_mask_png(const std::string& path, int num_classes);
void save_mask_png(const std::string& path, const Mask& mask);

/// RGB rendering: BG black, FL red, FB green.
void save_palette_png(const std::string& path, const Mask& mask);
std::array<std::uint8_t, 3> palette_color(int label);

SegmentationSample load_png_pair(const std::string& image_path, const std::string& mask_path, int num_classes);

}  // namespace famseg
