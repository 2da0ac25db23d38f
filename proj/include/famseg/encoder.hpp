#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "famseg/mamba.hpp"
#include "famseg/params.hpp"

namespace famseg {

// ---------------------------------------------------------------------------
// Multi-branch strip block

struct StripBlockSpec {
  int channels = 32;
  std::vector<int> branch_kernels{7};
  bool use_stem_5x5 = true;

  void validate() const;
};

struct StripBlockParams {
  Tensor stem;                     // [C,1,5,5] depthwise
  std::vector<Tensor> horizontal;  // per branch [C,1,1,k]
  std::vector<Tensor> vertical;    // per branch [C,1,k,1]
  Tensor mix_weight;               // [C,C,1,1]
  Tensor mix_bias;                 // [C]

  static StripBlockParams create(ParamStore& store, const std::string& name, const StripBlockSpec& spec,
                                 Rng& rng);
};

/// 5x5 depthwise stem, then per branch a horizontal and a vertical strip pass
/// run side by side on the stem output; the branch outputs are added to the
/// stem output and mixed by a 1x1 convolution. Linear in x.
Tensor strip_block_forward(const Tensor& x, const StripBlockSpec& spec, const StripBlockParams& p);

struct StripCost {
  std::int64_t standard;  // K * Ho * Wo * K
  std::int64_t strip;     // 2 * Ho * Wo * K
};

StripCost strip_param_count(std::int64_t k, std::int64_t ho, std::int64_t wo);

// ---------------------------------------------------------------------------
// Aggregated depth convolution

struct AggregationParams {
  Tensor dw_weight;   // [sum C_i,1,3,3]
  Tensor dw_bias;     // [sum C_i]
  Tensor mix_weight;  // [C_out,sum C_i,1,1]
  Tensor mix_bias;    // [C_out]

  static AggregationParams create(ParamStore& store, const std::string& name, const std::vector<int>& in_channels,
                                  int out_channels, Rng& rng);
};

/// Nearest-resamples every feature to the smallest map, concatenates along
/// channels, then depthwise 3x3 and 1x1 mixing.
Tensor aggregated_depth_conv(const std::vector<Tensor>& features, const AggregationParams& p);

// ---------------------------------------------------------------------------
// Hamburger (matrix-decomposition) enhancement

struct HamburgerSpec {
  bool enabled = true;
  int rank = 2;
  int iters = 6;
};

struct HamburgerParams {
  Tensor out_weight;  // [C,C,1,1]
  Tensor out_bias;    // [C]

  static HamburgerParams create(ParamStore& store, const std::string& name, int channels, Rng& rng);
};

/// Fixed initial factors of the multiplicative-update NMF. Same values for
/// every call so the enhancement is a deterministic function of its input.
Tensor nmf_initial_bases(int batch, int rows, int rank);
Tensor nmf_initial_coefficients(int batch, int rank, int cols);

/// Multiplicative-update NMF of a non-negative [B,M,N] tensor; returns the
/// rank-r reconstruction. `residuals`, when given, receives the Frobenius
/// residual after every update step. Fully differentiable.
Tensor nmf_reconstruct(const Tensor& x, int rank, int iters, std::vector<double>* residuals = nullptr);

/// out = 1x1 conv(x + NMF reconstruction of relu(x)), identity when disabled.
/// The rank is capped at min(C, H*W) - 1; below 1 the NMF term is dropped.
Tensor hamburger_enhance(const Tensor& x, const HamburgerSpec& spec, const HamburgerParams* p,
                         std::vector<double>* residuals = nullptr);

// ---------------------------------------------------------------------------
// Residual blocks

enum class BlockKind { kConvolution, kBottle };

struct ResidualBlockSpec {
  int in_channels = 0;
  int mid_channels = 0;
  int out_channels = 0;
  BlockKind kind = BlockKind::kBottle;
  int stride = 1;
  ShortcutFilter shortcut_filter = ShortcutFilter::kIdentity;
  MambaSpec mamba;

  void validate() const;
};

struct ResidualBlockParams {
  ConvNormAct reduce;   // 1x1
  ConvNormAct spatial;  // 3x3, block stride
  ConvNormAct expand;   // 1x1, no activation
  std::optional<Conv> projection;       // convolution block side branch
  std::optional<MambaParams> mamba;     // bottle block filter

  static ResidualBlockParams create(ParamStore& store, const std::string& name, const ResidualBlockSpec& spec,
                                    Rng& rng);
};

Tensor residual_block_forward(const Tensor& x, const ResidualBlockSpec& spec, const ResidualBlockParams& p);

// ---------------------------------------------------------------------------
// Encoder

struct EncoderConfig {
  std::vector<int> stage_channels{32, 64, 160, 256};
  std::vector<int> stage_depths{2, 2, 2, 2};
  std::vector<int> branch_kernels{7};
  /// Stages (1-indexed, from the shallow end) built from strip blocks; the
  /// rest use a convolution block followed by bottle blocks.
  int strip_stages = 2;
  int fuse_last_n = 3;
  int mlp_ratio = 2;
  HamburgerSpec hamburger;
  bool mamba = true;
  MambaSpec mamba_spec;

  void validate() const;
};

/// Pre-norm residual unit wrapping a strip block, followed by a pointwise MLP.
struct StripUnit {
  GroupNorm norm1;
  StripBlockParams block;
  GroupNorm norm2;
  Conv fc1;
  Conv fc2;
  StripBlockSpec spec;

  Tensor operator()(const Tensor& x) const;
};

class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, int in_channels, ParamStore& store, Rng& rng);

  /// Returns the four stage features at strides 4, 8, 16 and 32.
  std::vector<Tensor> forward(const Tensor& image) const;

  const EncoderConfig& config() const { return cfg_; }

  struct Stage {
    std::optional<ConvNormAct> downsample;  // strip stages
    std::vector<StripUnit> strip_units;
    std::vector<std::pair<ResidualBlockSpec, ResidualBlockParams>> residual_blocks;
  };
  const std::vector<Stage>& stages() const { return stages_; }

 private:
  EncoderConfig cfg_;
  ConvNormAct stem1_;
  ConvNormAct stem2_;
  std::vector<Stage> stages_;
  AggregationParams aggregation_;
  std::optional<HamburgerParams> hamburger_;
};

}  // namespace famseg
