#include "famseg/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace famseg {

void StripBlockSpec::validate() const {
  if (channels <= 0) throw ConfigError("strip block: channels must be positive");
  if (branch_kernels.empty()) throw ConfigError("strip block: at least one branch kernel is required");
  for (int k : branch_kernels) {
    if (k < 1 || k % 2 == 0) throw ConfigError("strip block: branch kernel " + std::to_string(k) + " is not odd");
  }
}

StripBlockParams StripBlockParams::create(ParamStore& store, const std::string& name, const StripBlockSpec& spec,
                                          Rng& rng) {
  spec.validate();
  const int c = spec.channels;
  StripBlockParams p;
  if (spec.use_stem_5x5) p.stem = store.add_conv_weight(name + ".stem", {c, 1, 5, 5}, rng, 0.5);
  for (int k : spec.branch_kernels) {
    const std::string tag = name + ".k" + std::to_string(k);
    p.horizontal.push_back(store.add_conv_weight(tag + ".horizontal", {c, 1, 1, k}, rng, 0.5));
    p.vertical.push_back(store.add_conv_weight(tag + ".vertical", {c, 1, k, 1}, rng, 0.5));
  }
  p.mix_weight = store.add_conv_weight(name + ".mix.weight", {c, c, 1, 1}, rng);
  p.mix_bias = store.add_constant(name + ".mix.bias", {c}, 0.0);
  return p;
}

Tensor strip_block_forward(const Tensor& x, const StripBlockSpec& spec, const StripBlockParams& p) {
  spec.validate();
  if (x.rank() != 4 || x.dim(1) != spec.channels) {
    throw ShapeError("strip block: expected " + std::to_string(spec.channels) + " channels, got " +
                     shape_str(x.shape()));
  }
  const int c = spec.channels;
  const Tensor stem = spec.use_stem_5x5 ? conv2d(x, p.stem, Conv2dOptions::same(5, 5, 1, c)) : x;
  std::vector<Tensor> parts{stem};
  for (std::size_t b = 0; b < spec.branch_kernels.size(); ++b) {
    const int k = spec.branch_kernels[b];
    parts.push_back(strip_conv(stem, p.horizontal[b], StripAxis::kHorizontal, k));
    parts.push_back(strip_conv(stem, p.vertical[b], StripAxis::kVertical, k));
  }
  return conv2d(add_n(parts), p.mix_weight, p.mix_bias, {});
}

StripCost strip_param_count(std::int64_t k, std::int64_t ho, std::int64_t wo) {
  return {k * ho * wo * k, 2 * ho * wo * k};
}

AggregationParams AggregationParams::create(ParamStore& store, const std::string& name,
                                            const std::vector<int>& in_channels, int out_channels, Rng& rng) {
  int total = 0;
  for (int c : in_channels) total += c;
  AggregationParams p;
  p.dw_weight = store.add_conv_weight(name + ".dw.weight", {total, 1, 3, 3}, rng, 0.5);
  p.dw_bias = store.add_constant(name + ".dw.bias", {total}, 0.0);
  p.mix_weight = store.add_conv_weight(name + ".mix.weight", {out_channels, total, 1, 1}, rng);
  p.mix_bias = store.add_constant(name + ".mix.bias", {out_channels}, 0.0);
  return p;
}

Tensor aggregated_depth_conv(const std::vector<Tensor>& features, const AggregationParams& p) {
  if (features.empty()) throw ShapeError("aggregated_depth_conv: empty feature list");
  int h = features.front().dim(2), w = features.front().dim(3);
  for (const auto& f : features) {
    h = std::min(h, f.dim(2));
    w = std::min(w, f.dim(3));
  }
  std::vector<Tensor> resized;
  for (const auto& f : features) {
    resized.push_back(f.dim(2) == h && f.dim(3) == w ? f : nearest_resize(f, h, w));
  }
  const Tensor cat = resized.size() == 1 ? resized.front() : concat(resized, 1);
  if (cat.dim(1) != p.dw_weight.dim(0)) {
    throw ShapeError("aggregated_depth_conv: features carry " + std::to_string(cat.dim(1)) +
                     " channels, parameters expect " + std::to_string(p.dw_weight.dim(0)));
  }
  const Tensor dw = conv2d(cat, p.dw_weight, p.dw_bias, Conv2dOptions::same(3, 3, 1, cat.dim(1)));
  return conv2d(dw, p.mix_weight, p.mix_bias, {});
}

HamburgerParams HamburgerParams::create(ParamStore& store, const std::string& name, int channels, Rng& rng) {
  HamburgerParams p;
  p.out_weight = store.add_conv_weight(name + ".out.weight", {channels, channels, 1, 1}, rng, 0.5);
  p.out_bias = store.add_constant(name + ".out.bias", {channels}, 0.0);
  return p;
}

namespace {
constexpr double kNmfEps = 1e-8;

Tensor fixed_uniform(Shape shape, std::uint64_t salt) {
  Rng rng(0x6A09E667F3BCC909ULL ^ salt);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(0.5, 1.5);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor transpose12(const Tensor& t) { return permute(t, {0, 2, 1}); }
}  // namespace

Tensor nmf_initial_bases(int batch, int rows, int rank) {
  // One fixed pattern per (rows, rank), repeated across the batch.
  Tensor one = fixed_uniform({rows, rank}, 1);
  std::vector<double> v;
  for (int b = 0; b < batch; ++b) v.insert(v.end(), one.data().begin(), one.data().end());
  return Tensor::from({batch, rows, rank}, std::move(v));
}

Tensor nmf_initial_coefficients(int batch, int rank, int cols) {
  Tensor one = fixed_uniform({rank, cols}, 2);
  std::vector<double> v;
  for (int b = 0; b < batch; ++b) v.insert(v.end(), one.data().begin(), one.data().end());
  return Tensor::from({batch, rank, cols}, std::move(v));
}

Tensor nmf_reconstruct(const Tensor& x, int rank, int iters, std::vector<double>* residuals) {
  if (x.rank() != 3) throw ShapeError("nmf: expected [B,M,N], got " + shape_str(x.shape()));
  if (rank <= 0) throw ConfigError("nmf: rank must be positive, got " + std::to_string(rank));
  if (iters < 1) throw ConfigError("nmf: at least one update step is required");
  const int b = x.dim(0), m = x.dim(1), n = x.dim(2);
  if (rank >= std::min(m, n)) {
    throw ConfigError("nmf: rank " + std::to_string(rank) + " must be below min(" + std::to_string(m) + ", " +
                      std::to_string(n) + ")");
  }
  for (double v : x.data()) {
    if (v < 0.0) throw DataError("nmf: input must be non-negative");
  }
  Tensor bases = nmf_initial_bases(b, m, rank);
  Tensor coef = nmf_initial_coefficients(b, rank, n);
  Tensor recon;
  for (int it = 0; it < iters; ++it) {
    const Tensor bt = transpose12(bases);
    coef = div(mul(coef, matmul(bt, x)), add_scalar(matmul(matmul(bt, bases), coef), kNmfEps));
    const Tensor ct = transpose12(coef);
    bases = div(mul(bases, matmul(x, ct)), add_scalar(matmul(bases, matmul(coef, ct)), kNmfEps));
    recon = matmul(bases, coef);
    if (residuals != nullptr) {
      double r = 0.0;
      const auto xd = x.data();
      const auto rd = recon.data();
      for (std::size_t i = 0; i < xd.size(); ++i) r += (xd[i] - rd[i]) * (xd[i] - rd[i]);
      residuals->push_back(std::sqrt(r));
    }
  }
  return recon;
}

Tensor hamburger_enhance(const Tensor& x, const HamburgerSpec& spec, const HamburgerParams* p,
                         std::vector<double>* residuals) {
  if (!spec.enabled) return x;
  if (spec.rank <= 0) throw ConfigError("hamburger: rank must be positive");
  if (p == nullptr) throw ConfigError("hamburger: enabled without parameters");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  // Small maps (e.g. the 1x1 stride-32 map of a 32 px input) cap the rank.
  const int rank = std::min(spec.rank, std::min(c, h * w) - 1);
  if (rank < 1) return conv2d(x, p->out_weight, p->out_bias, {});
  const Tensor flat = reshape(relu(x), {n, c, h * w});
  const Tensor recon = reshape(nmf_reconstruct(flat, rank, spec.iters, residuals), {n, c, h, w});
  return conv2d(add(x, recon), p->out_weight, p->out_bias, {});
}

void ResidualBlockSpec::validate() const {
  if (in_channels <= 0 || mid_channels <= 0 || out_channels <= 0) {
    throw ConfigError("residual block: channel counts must be positive");
  }
  if (kind == BlockKind::kConvolution) {
    if (stride != 2) throw ConfigError("residual block: convolution block requires stride 2");
    if (shortcut_filter != ShortcutFilter::kIdentity) {
      throw ConfigError("residual block: convolution block uses a projection shortcut, not a filter");
    }
  } else {
    if (stride != 1) throw ConfigError("residual block: bottle block requires stride 1");
    if (in_channels != out_channels) throw ConfigError("residual block: bottle block must keep channel count");
  }
}

ResidualBlockParams ResidualBlockParams::create(ParamStore& store, const std::string& name,
                                                const ResidualBlockSpec& spec, Rng& rng) {
  spec.validate();
  ResidualBlockParams p;
  p.reduce = ConvNormAct::create(store, name + ".reduce", spec.in_channels, spec.mid_channels, 1, rng);
  p.spatial = ConvNormAct::create(store, name + ".spatial", spec.mid_channels, spec.mid_channels, 3, rng,
                                  spec.stride);
  p.expand = ConvNormAct::create(store, name + ".expand", spec.mid_channels, spec.out_channels, 1, rng, 1, false);
  if (spec.kind == BlockKind::kConvolution) {
    p.projection = Conv::create(store, name + ".projection", spec.in_channels, spec.out_channels, 1, 1, rng, 2);
  } else if (spec.shortcut_filter == ShortcutFilter::kMamba) {
    p.mamba = MambaParams::create(store, name + ".mamba", spec.out_channels, spec.mamba, rng);
  }
  return p;
}

Tensor residual_block_forward(const Tensor& x, const ResidualBlockSpec& spec, const ResidualBlockParams& p) {
  spec.validate();
  if (x.rank() != 4 || x.dim(1) != spec.in_channels) {
    throw ShapeError("residual block: expected " + std::to_string(spec.in_channels) + " input channels, got " +
                     shape_str(x.shape()));
  }
  const Tensor main = p.expand(p.spatial(p.reduce(x)));
  Tensor side;
  if (spec.kind == BlockKind::kConvolution) {
    side = (*p.projection)(x);
  } else {
    side = bottle_shortcut(x, spec.shortcut_filter, p.mamba ? &*p.mamba : nullptr, spec.mamba.scan);
  }
  return add(main, side);
}

void EncoderConfig::validate() const {
  if (stage_channels.size() != 4 || stage_depths.size() != 4) {
    throw ConfigError("encoder: exactly four stages are required");
  }
  for (int c : stage_channels) {
    if (c <= 0) throw ConfigError("encoder: stage channels must be positive");
  }
  for (int d : stage_depths) {
    if (d < 1) throw ConfigError("encoder: stage depths must be at least 1");
  }
  if (strip_stages < 0 || strip_stages > 4) throw ConfigError("encoder: strip_stages must be within 0..4");
  if (fuse_last_n < 1 || fuse_last_n > 4) throw ConfigError("encoder: fuse_last_n must be within 1..4");
  if (mlp_ratio < 1) throw ConfigError("encoder: mlp_ratio must be at least 1");
  StripBlockSpec{stage_channels[0], branch_kernels, true}.validate();
  if (hamburger.enabled && hamburger.rank <= 0) throw ConfigError("encoder: hamburger rank must be positive");
  if (hamburger.iters < 1) throw ConfigError("encoder: hamburger iterations must be at least 1");
  if (mamba && mamba_spec.scan.directions.empty()) throw ConfigError("encoder: empty scan direction set");
}

Tensor StripUnit::operator()(const Tensor& x) const {
  const Tensor y = add(x, strip_block_forward(gelu(norm1(x)), spec, block));
  return add(y, fc2(gelu(fc1(norm2(y)))));
}

Encoder::Encoder(const EncoderConfig& cfg, int in_channels, ParamStore& store, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto& ch = cfg_.stage_channels;
  const int stem_mid = std::max(8, ch[0] / 2);
  stem1_ = ConvNormAct::create(store, "encoder.stem1", in_channels, stem_mid, 3, rng, 2);
  stem2_ = ConvNormAct::create(store, "encoder.stem2", stem_mid, ch[0], 3, rng, 2);
  for (int s = 0; s < 4; ++s) {
    const std::string prefix = "encoder.stage" + std::to_string(s + 1);
    Stage stage;
    const int in = s == 0 ? ch[0] : ch[s - 1];
    if (s < cfg_.strip_stages) {
      if (s > 0) stage.downsample = ConvNormAct::create(store, prefix + ".down", in, ch[s], 3, rng, 2, false);
      for (int d = 0; d < cfg_.stage_depths[s]; ++d) {
        const std::string un = prefix + ".unit" + std::to_string(d);
        StripUnit u;
        u.spec = StripBlockSpec{ch[s], cfg_.branch_kernels, true};
        u.norm1 = GroupNorm::create(store, un + ".norm1", ch[s]);
        u.block = StripBlockParams::create(store, un + ".strip", u.spec, rng);
        u.norm2 = GroupNorm::create(store, un + ".norm2", ch[s]);
        u.fc1 = Conv::create(store, un + ".fc1", ch[s], ch[s] * cfg_.mlp_ratio, 1, 1, rng);
        u.fc2 = Conv::create(store, un + ".fc2", ch[s] * cfg_.mlp_ratio, ch[s], 1, 1, rng);
        stage.strip_units.push_back(std::move(u));
      }
    } else {
      // The stem already brings stage 1 to stride 4, so a residual first stage
      // keeps its resolution through a stride-1 bottle block.
      const int mid = std::max(8, ch[s] / 4);
      for (int d = 0; d < cfg_.stage_depths[s]; ++d) {
        ResidualBlockSpec spec;
        spec.mid_channels = mid;
        spec.out_channels = ch[s];
        spec.mamba = cfg_.mamba_spec;
        if (d == 0 && s > 0) {
          spec.in_channels = in;
          spec.kind = BlockKind::kConvolution;
          spec.stride = 2;
        } else {
          spec.in_channels = ch[s];
          spec.kind = BlockKind::kBottle;
          spec.stride = 1;
          spec.shortcut_filter = cfg_.mamba ? ShortcutFilter::kMamba : ShortcutFilter::kIdentity;
        }
        if (d == 0 && s == 0 && in != ch[s]) throw ConfigError("encoder: invalid first-stage layout");
        auto params = ResidualBlockParams::create(store, prefix + ".block" + std::to_string(d), spec, rng);
        stage.residual_blocks.emplace_back(spec, std::move(params));
      }
    }
    stages_.push_back(std::move(stage));
  }
  std::vector<int> fused(ch.end() - cfg_.fuse_last_n, ch.end());
  aggregation_ = AggregationParams::create(store, "encoder.aggregate", fused, ch[3], rng);
  if (cfg_.hamburger.enabled) hamburger_ = HamburgerParams::create(store, "encoder.hamburger", ch[3], rng);
}

std::vector<Tensor> Encoder::forward(const Tensor& image) const {
  if (image.rank() != 4) throw ShapeError("encoder: expected NCHW image, got " + shape_str(image.shape()));
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0) {
    throw ShapeError("encoder: image size " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                     " is not divisible by 32");
  }
  Tensor x = stem2_(stem1_(image));
  std::vector<Tensor> feats;
  for (const auto& stage : stages_) {
    if (stage.downsample) x = (*stage.downsample)(x);
    for (const auto& u : stage.strip_units) x = u(x);
    for (const auto& [spec, params] : stage.residual_blocks) x = residual_block_forward(x, spec, params);
    feats.push_back(x);
  }
  std::vector<Tensor> fused(feats.end() - cfg_.fuse_last_n, feats.end());
  feats.back() =
      hamburger_enhance(aggregated_depth_conv(fused, aggregation_), cfg_.hamburger, hamburger_ ? &*hamburger_ : nullptr);
  return feats;
}

}  // namespace famseg
