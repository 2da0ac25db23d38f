#pragma once

#include <string>
#include <vector>

#include "famseg/params.hpp"
#include "famseg/tensor.hpp"

namespace famseg {

enum class ScanDirection { kLeftToRight, kRightToLeft, kTopToBottom, kBottomToTop };

std::string to_string(ScanDirection d);
ScanDirection parse_scan_direction(const std::string& s);

struct ScanDirections {
  std::vector<ScanDirection> directions{ScanDirection::kLeftToRight, ScanDirection::kRightToLeft,
                                        ScanDirection::kTopToBottom, ScanDirection::kBottomToTop};
};

/// Flat (row * width + col) positions in the order a direction visits them.
/// Horizontal directions walk row-major, vertical ones column-major.
std::vector<std::size_t> scan_order(int height, int width, ScanDirection d);

/// Per-token inputs of the scalar-decay-per-head recurrence
///   h_t = a_t * h_{t-1} + B_t x_t^T,   y_t = C_t^T h_t + D x_t,   h_0 = 0.
/// Shapes for a batch of sequences of length L with `heads` heads and state
/// size N: decay [Bt,L,heads], input_map [Bt,L,N], readout [Bt,L,N],
/// skip [heads]. The channel width d of x must be a multiple of heads; head h
/// owns channels [h*d/heads, (h+1)*d/heads).
struct SSMParams {
  Tensor decay;
  Tensor input_map;
  Tensor readout;
  Tensor skip;
};

/// Linear-time sequential scan. x is [Bt,L,d] (or [L,d] with SSMParams
/// shaped without the leading batch axis).
Tensor selective_scan(const Tensor& x, const SSMParams& p);

struct MambaSpec {
  int state_dim = 16;
  int heads = 0;  // 0: channels / 16, at least 1
  ScanDirections scan;

  int resolved_heads(int channels) const;
};

/// Learned maps producing SSMParams from each token, plus the 1x1 output
/// projection applied after the direction merge.
struct MambaParams {
  Tensor decay_weight;    // [heads,C,1,1]
  Tensor decay_bias;      // [heads]
  Tensor input_weight;    // [N,C,1,1]
  Tensor readout_weight;  // [N,C,1,1]
  Tensor skip;            // [heads]
  Tensor proj_weight;     // [C,C,1,1]
  Tensor proj_bias;       // [C]

  static MambaParams create(ParamStore& store, const std::string& name, int channels, const MambaSpec& spec,
                            Rng& rng);
};

/// x: [N,C,H,W]. Runs one scan per direction with shared parameters, merges
/// by mean and applies the output projection.
Tensor mamba_filter_2d(const Tensor& x, const ScanDirections& dirs, const MambaParams& p);

enum class ShortcutFilter { kIdentity, kMamba };

Tensor bottle_shortcut(const Tensor& x, ShortcutFilter flag, const MambaParams* p, const ScanDirections& dirs);

}  // namespace famseg
