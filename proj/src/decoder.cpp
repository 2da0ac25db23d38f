#include "famseg/decoder.hpp"

#include <algorithm>

namespace famseg {

int FamSpec::resolved_compressed() const {
  if (c_compressed > 0) return c_compressed;
  return std::min(c_in, std::max(8, c_in / 4));
}

void FamSpec::validate() const {
  if (c_in <= 0) throw ConfigError("fam: input channels must be positive");
  if (k_up < 1 || k_up % 2 == 0) throw ConfigError("fam: k_up must be odd, got " + std::to_string(k_up));
  if (k_enc < 1 || k_enc % 2 == 0) throw ConfigError("fam: k_enc must be odd, got " + std::to_string(k_enc));
  if (resolved_compressed() > c_in) {
    throw ConfigError("fam: compressed channels " + std::to_string(resolved_compressed()) + " exceed input " +
                      std::to_string(c_in));
  }
  if (scale < 2) throw ConfigError("fam: scale must be at least 2");
}

FamParams FamParams::create(ParamStore& store, const std::string& name, const FamSpec& spec, Rng& rng) {
  spec.validate();
  const int cd = spec.resolved_compressed();
  const int taps = spec.scale * spec.scale * spec.k_up * spec.k_up;
  FamParams p;
  p.compress_weight = store.add_conv_weight(name + ".compress.weight", {cd, spec.c_in, 1, 1}, rng);
  p.compress_bias = store.add_constant(name + ".compress.bias", {cd}, 0.0);
  p.encode_weight = store.add_conv_weight(name + ".encode.weight", {taps, cd, spec.k_enc, spec.k_enc}, rng, 0.1);
  p.encode_bias = store.add_constant(name + ".encode.bias", {taps}, 0.0);
  return p;
}

Tensor fam_kernels(const Tensor& x, const FamSpec& spec, const FamParams& p) {
  spec.validate();
  if (x.rank() != 4 || x.dim(1) != spec.c_in) {
    throw ShapeError("fam: expected " + std::to_string(spec.c_in) + " input channels, got " +
                     shape_str(x.shape()));
  }
  const Tensor compressed = conv2d(x, p.compress_weight, p.compress_bias, {});
  const Tensor logits = conv2d(compressed, p.encode_weight, p.encode_bias,
                               Conv2dOptions::same(spec.k_enc, spec.k_enc));
  return softmax(pixel_shuffle(logits, spec.scale), 1);
}

Tensor fam_upsample(const Tensor& x, const FamSpec& spec, const FamParams& p) {
  return reassemble(x, fam_kernels(x, spec, p), spec.k_up, spec.scale);
}

void DecoderConfig::validate() const {
  if (fuse_stages.empty()) throw ConfigError("decoder: fuse_stages is empty");
  if (!std::is_sorted(fuse_stages.begin(), fuse_stages.end()) ||
      std::adjacent_find(fuse_stages.begin(), fuse_stages.end()) != fuse_stages.end()) {
    throw ConfigError("decoder: fuse_stages must be strictly ascending");
  }
  if (fuse_stages.front() < 1 || fuse_stages.back() > 4) throw ConfigError("decoder: fuse_stages must lie in 1..4");
  if (num_classes < 2) throw ConfigError("decoder: num_classes must be at least 2");
  if (refine_channels < 1) throw ConfigError("decoder: refine_channels must be positive");
}

Decoder::Decoder(const DecoderConfig& cfg, const std::vector<int>& stage_channels, ParamStore& store, Rng& rng)
    : cfg_(cfg) {
  cfg_.validate();
  if (stage_channels.size() < static_cast<std::size_t>(cfg_.fuse_stages.back())) {
    throw ConfigError("decoder: encoder has fewer stages than fuse_stages requires");
  }
  deepest_ = cfg_.fuse_stages.back();
  const int d = cfg_.refine_channels;
  input_proj_ = Conv::create(store, "decoder.input_proj", stage_channels[deepest_ - 1], d, 1, 1, rng);
  int stride = 1 << (deepest_ + 1);
  int level = 0;
  while (stride > 1) {
    stride /= 2;
    const std::string name = "decoder.level" + std::to_string(level++);
    Level lv;
    lv.fam_spec = FamSpec{d, 0, cfg_.k_up, cfg_.k_enc, 2};
    lv.fam = FamParams::create(store, name + ".fam", lv.fam_spec, rng);
    if (stride >= 4) {
      const int stage = [&] {
        int s = 0;
        while ((1 << (s + 2)) < stride) ++s;
        return s + 1;
      }();
      const bool fused = std::find(cfg_.fuse_stages.begin(), cfg_.fuse_stages.end(), stage) != cfg_.fuse_stages.end();
      if (cfg_.fusion && fused) {
        lv.skip_stage = stage;
        lv.skip_proj = Conv::create(store, name + ".skip", stage_channels[stage - 1], d, 1, 1, rng);
      }
      lv.refine = ConvNormAct::create(store, name + ".refine", d, d, 3, rng);
    }
    levels_.push_back(std::move(lv));
  }
  classifier_ = Conv::create(store, "decoder.classifier", d, cfg_.num_classes, 1, 1, rng);
}

std::vector<int> Decoder::consumed_stages() const {
  std::vector<int> out{deepest_};
  for (const auto& lv : levels_) {
    if (lv.skip_stage) out.push_back(*lv.skip_stage);
  }
  std::sort(out.begin(), out.end());
  return out;
}

Tensor Decoder::forward(const std::vector<Tensor>& stages) const {
  if (stages.size() < static_cast<std::size_t>(deepest_)) {
    throw ShapeError("decoder: got " + std::to_string(stages.size()) + " stages, needs " + std::to_string(deepest_));
  }
  Tensor x = input_proj_(stages[deepest_ - 1]);
  for (const auto& lv : levels_) {
    x = fam_upsample(x, lv.fam_spec, lv.fam);
    if (lv.skip_stage) {
      const Tensor& skip = stages[*lv.skip_stage - 1];
      if (skip.dim(2) != x.dim(2) || skip.dim(3) != x.dim(3)) {
        throw ShapeError("decoder: stage " + std::to_string(*lv.skip_stage) + " of shape " +
                         shape_str(skip.shape()) + " does not match upsampled map " + shape_str(x.shape()));
      }
      x = add(x, (*lv.skip_proj)(skip));
    }
    if (lv.refine) x = (*lv.refine)(x);
  }
  return classifier_(x);
}

std::vector<Mask> predict_mask(const Tensor& logits) {
  if (logits.rank() != 4) throw ShapeError("predict_mask: expected [N,C,H,W], got " + shape_str(logits.shape()));
  const int n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto d = logits.data();
  std::vector<Mask> out;
  for (int b = 0; b < n; ++b) {
    Mask m{h, w, std::vector<std::uint8_t>(plane, 0)};
    for (std::size_t i = 0; i < plane; ++i) {
      int best = 0;
      double best_v = d[(static_cast<std::size_t>(b) * c) * plane + i];
      for (int k = 1; k < c; ++k) {
        const double v = d[(static_cast<std::size_t>(b) * c + k) * plane + i];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      m.labels[i] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace famseg
