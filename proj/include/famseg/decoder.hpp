#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "famseg/params.hpp"

namespace famseg {

/// Feature-aware upsampler: channel compressor -> kernel reorganizer ->
/// softmax kernel normalization -> content-aware reassembly.
struct FamSpec {
  int c_in = 0;
  int c_compressed = 0;  // 0: max(8, c_in / 4), capped at c_in
  int k_up = 5;
  int k_enc = 3;
  int scale = 2;

  int resolved_compressed() const;
  void validate() const;
};

struct FamParams {
  Tensor compress_weight;  // [Cd,C,1,1]
  Tensor compress_bias;    // [Cd]
  Tensor encode_weight;    // [scale^2 * k_up^2, Cd, k_enc, k_enc]
  Tensor encode_bias;      // [scale^2 * k_up^2]

  static FamParams create(ParamStore& store, const std::string& name, const FamSpec& spec, Rng& rng);
};

/// Normalized reassembly kernels [N, k_up^2, scale*H, scale*W]; tap t of the
/// kernel at output (i,j) weighs input (i/scale + t/k_up - k_up/2,
/// j/scale + t%k_up - k_up/2).
Tensor fam_kernels(const Tensor& x, const FamSpec& spec, const FamParams& p);

Tensor fam_upsample(const Tensor& x, const FamSpec& spec, const FamParams& p);

struct DecoderConfig {
  std::vector<int> fuse_stages{2, 3, 4};  // 1-indexed encoder stages
  int refine_channels = 32;
  int num_classes = 3;
  bool fusion = true;  // off: decode from the deepest fused stage only
  int k_up = 5;
  int k_enc = 3;

  void validate() const;
};

class Decoder {
 public:
  Decoder(const DecoderConfig& cfg, const std::vector<int>& stage_channels, ParamStore& store, Rng& rng);

  /// stages: encoder features at strides 4, 8, 16, 32. Returns class logits
  /// at full image resolution.
  Tensor forward(const std::vector<Tensor>& stages) const;

  const DecoderConfig& config() const { return cfg_; }
  /// Stage indices (1-based) whose features reach the logits.
  std::vector<int> consumed_stages() const;

 private:
  struct Level {
    FamSpec fam_spec;
    FamParams fam;
    std::optional<int> skip_stage;  // 1-based
    std::optional<Conv> skip_proj;
    std::optional<ConvNormAct> refine;
  };

  DecoderConfig cfg_;
  int deepest_ = 4;
  Conv input_proj_;
  std::vector<Level> levels_;
  Conv classifier_;
};

struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;  // row-major

  std::uint8_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
  bool operator==(const Mask&) const = default;
};

/// Per-pixel argmax over the class axis of [N,C,H,W] logits; ties go to the
/// lowest class index.
std::vector<Mask> predict_mask(const Tensor& logits);

}  // namespace famseg
