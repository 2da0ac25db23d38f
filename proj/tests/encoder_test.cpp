#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "famseg/encoder.hpp"
#include "famseg/model.hpp"
#include "oracles.hpp"

using namespace famseg;
using oracle::max_abs_diff;
using oracle::random_tensor;

namespace {

void fill(Tensor t, double v) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), v); }

std::vector<double> as_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

// Stem, per-branch strip passes and the mix written with the loop oracle.
Tensor strip_block_oracle(const Tensor& x, const StripBlockSpec& spec, const StripBlockParams& p) {
  const int c = spec.channels;
  const Tensor stem = oracle::conv2d(x, p.stem, {}, 1, 1, 2, 2, c);
  std::vector<double> acc = as_vec(stem.data());
  for (std::size_t b = 0; b < spec.branch_kernels.size(); ++b) {
    const int k = spec.branch_kernels[b];
    const Tensor h = oracle::conv2d(stem, p.horizontal[b], {}, 1, 1, 0, k / 2, c);
    const Tensor v = oracle::conv2d(stem, p.vertical[b], {}, 1, 1, k / 2, 0, c);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += h.data()[i] + v.data()[i];
  }
  return oracle::conv2d(Tensor::from(x.shape(), acc), p.mix_weight, as_vec(p.mix_bias.data()), 1, 1, 0, 0, 1);
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.encoder.stage_channels = {8, 8, 16, 16};
  cfg.encoder.stage_depths = {1, 1, 2, 2};
  cfg.encoder.mamba_spec.state_dim = 4;
  cfg.decoder.refine_channels = 8;
  return cfg;
}

}  // namespace

TEST(encoder_blocks, strip_block_zero_weights_give_zero) {
  Rng rng(1);
  ParamStore store;
  const StripBlockSpec spec{4, {7}, true};
  auto p = StripBlockParams::create(store, "s", spec, rng);
  for (const auto& [name, t] : store.entries()) fill(t, 0.0);
  std::fill(p.mix_weight.mutable_data().begin(), p.mix_weight.mutable_data().end(), 0.0);
  for (int c = 0; c < 4; ++c) p.mix_weight.mutable_data()[c * 4 + c] = 1.0;
  const Tensor y = strip_block_forward(random_tensor({1, 4, 8, 8}, rng), spec, p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(encoder_blocks, strip_block_matches_composition_oracle) {
  Rng rng(2);
  for (const std::vector<int>& kernels : {std::vector<int>{7}, std::vector<int>{3, 7, 11}}) {
    ParamStore store;
    const StripBlockSpec spec{3, kernels, true};
    const auto p = StripBlockParams::create(store, "s", spec, rng);
    fill(p.mix_bias, 0.25);
    const Tensor x = random_tensor({2, 3, 12, 12}, rng);
    EXPECT_LE(max_abs_diff(strip_block_forward(x, spec, p), strip_block_oracle(x, spec, p)), 1e-12);
  }
}

TEST(encoder_blocks, strip_block_impulse_gives_cross) {
  Rng rng(3);
  ParamStore store;
  const StripBlockSpec spec{1, {7}, true};
  auto p = StripBlockParams::create(store, "s", spec, rng);
  // Delta stem and unit mix isolate the two strip passes.
  fill(p.stem, 0.0);
  p.stem.mutable_data()[12] = 1.0;
  fill(p.mix_weight, 1.0);
  fill(p.horizontal[0], 1.0);
  fill(p.vertical[0], 1.0);
  std::vector<double> img(15 * 15, 0.0);
  img[7 * 15 + 7] = 1.0;
  const Tensor y = strip_block_forward(Tensor::from({1, 1, 15, 15}, img), spec, p);
  for (int r = 0; r < 15; ++r)
    for (int c = 0; c < 15; ++c) {
      const bool on_row = r == 7 && std::abs(c - 7) <= 3;
      const bool on_col = c == 7 && std::abs(r - 7) <= 3;
      const double want = (r == 7 && c == 7) ? 3.0 : (on_row || on_col ? 1.0 : 0.0);
      EXPECT_EQ(y.data()[r * 15 + c], want) << r << "," << c;
    }
}

TEST(encoder_blocks, strip_block_preserves_shape_and_is_linear) {
  Rng rng(4);
  ParamStore store;
  const StripBlockSpec spec{32, {7}, true};
  const auto p = StripBlockParams::create(store, "s", spec, rng);
  const Tensor x = random_tensor({1, 32, 16, 16}, rng);
  const Tensor y = strip_block_forward(x, spec, p);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_LE(max_abs_diff(strip_block_forward(scale(x, -2.5), spec, p), scale(y, -2.5)), 1e-10);
}

TEST(encoder_blocks, strip_block_rejects_bad_specs) {
  EXPECT_THROW((StripBlockSpec{4, {6}, true}.validate()), ConfigError);
  EXPECT_THROW((StripBlockSpec{0, {7}, true}.validate()), ConfigError);
  Rng rng(5);
  ParamStore store;
  const StripBlockSpec spec{4, {7}, true};
  const auto p = StripBlockParams::create(store, "s", spec, rng);
  EXPECT_THROW(strip_block_forward(Tensor::zeros({1, 3, 8, 8}), spec, p), ShapeError);
}

TEST(encoder_blocks, strip_param_count_values) {
  EXPECT_EQ(strip_param_count(7, 1, 1).standard, 49);
  EXPECT_EQ(strip_param_count(7, 1, 1).strip, 14);
  EXPECT_EQ(strip_param_count(3, 1, 1).standard, 9);
  EXPECT_EQ(strip_param_count(3, 1, 1).strip, 6);
  EXPECT_EQ(strip_param_count(7, 8, 8).standard, 3136);
  EXPECT_EQ(strip_param_count(7, 8, 8).strip, 896);
  for (std::int64_t k = 3; k <= 31; k += 2) {
    for (std::int64_t s : {1, 4, 16}) {
      const auto c = strip_param_count(k, s, s);
      EXPECT_LT(c.strip, c.standard);
      EXPECT_EQ(c.strip * k, 2 * c.standard);
    }
  }
}

TEST(encoder_blocks, aggregation_shapes_and_degenerate_case) {
  Rng rng(6);
  ParamStore store;
  const auto p = AggregationParams::create(store, "a", {160, 256}, 256, rng);
  const Tensor y = aggregated_depth_conv({random_tensor({1, 160, 8, 8}, rng), random_tensor({1, 256, 4, 4}, rng)}, p);
  EXPECT_EQ(y.shape(), (Shape{1, 256, 4, 4}));
  EXPECT_THROW(aggregated_depth_conv({}, p), ShapeError);

  ParamStore s1;
  const auto q = AggregationParams::create(s1, "q", {4}, 5, rng);
  const Tensor x = random_tensor({1, 4, 6, 6}, rng);
  const Tensor dw = oracle::conv2d(x, q.dw_weight, as_vec(q.dw_bias.data()), 1, 1, 1, 1, 4);
  const Tensor want = oracle::conv2d(dw, q.mix_weight, as_vec(q.mix_bias.data()), 1, 1, 0, 0, 1);
  EXPECT_LE(max_abs_diff(aggregated_depth_conv({x}, q), want), 1e-12);
}

TEST(encoder_blocks, aggregation_of_identical_features_folds) {
  Rng rng(7);
  ParamStore s2;
  auto two = AggregationParams::create(s2, "two", {3, 3}, 4, rng);
  // Same depthwise kernels on both copies, so the mix weights can be folded.
  for (int c = 0; c < 3; ++c) {
    for (int t = 0; t < 9; ++t) two.dw_weight.mutable_data()[(3 + c) * 9 + t] = two.dw_weight.data()[c * 9 + t];
    two.dw_bias.mutable_data()[3 + c] = two.dw_bias.data()[c];
  }
  const Tensor x = random_tensor({1, 3, 5, 5}, rng);
  const Tensor got = aggregated_depth_conv({x, x}, two);

  std::vector<double> folded(4 * 3);
  for (int o = 0; o < 4; ++o)
    for (int c = 0; c < 3; ++c) folded[o * 3 + c] = two.mix_weight.data()[o * 6 + c] + two.mix_weight.data()[o * 6 + 3 + c];
  const Tensor dw_w = Tensor::from({3, 1, 3, 3}, std::vector<double>(two.dw_weight.data().begin(),
                                                                      two.dw_weight.data().begin() + 27));
  const std::vector<double> dw_b(two.dw_bias.data().begin(), two.dw_bias.data().begin() + 3);
  const Tensor dw = oracle::conv2d(x, dw_w, dw_b, 1, 1, 1, 1, 3);
  const Tensor want = oracle::conv2d(dw, Tensor::from({4, 3, 1, 1}, folded), as_vec(two.mix_bias.data()), 1, 1, 0, 0, 1);
  EXPECT_LE(max_abs_diff(got, want), 1e-12);
}

TEST(encoder_blocks, nmf_rank_one_is_recovered) {
  Rng rng(8);
  std::vector<double> u(6), v(10), x;
  for (auto& e : u) e = rng.uniform(0.1, 1.0);
  for (auto& e : v) e = rng.uniform(0.1, 1.0);
  for (double a : u)
    for (double b : v) x.push_back(a * b);
  double norm = 0.0;
  for (double e : x) norm += e * e;
  norm = std::sqrt(norm);
  std::vector<double> residuals;
  nmf_reconstruct(Tensor::from({1, 6, 10}, x), 1, 20, &residuals);
  ASSERT_EQ(residuals.size(), 20u);
  EXPECT_LE(residuals.back(), 1e-3 * norm);
}

TEST(encoder_blocks, nmf_residual_is_non_increasing) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({2, 8, 12}, rng, 0.0, 2.0);
    std::vector<double> residuals;
    nmf_reconstruct(x, rng.uniform_int(1, 4), 15, &residuals);
    for (std::size_t i = 1; i < residuals.size(); ++i) {
      EXPECT_LE(residuals[i], residuals[i - 1] * (1.0 + 1e-12)) << trial << " step " << i;
    }
  }
}

TEST(encoder_blocks, hamburger_toggle_and_errors) {
  Rng rng(10);
  ParamStore store;
  const auto p = HamburgerParams::create(store, "h", 4, rng);
  const Tensor x = random_tensor({1, 4, 4, 4}, rng);
  const Tensor off = hamburger_enhance(x, {false, 2, 6}, &p);
  EXPECT_TRUE(off.same_storage(x));
  EXPECT_THROW(hamburger_enhance(x, {true, 0, 6}, &p), ConfigError);
  EXPECT_THROW(nmf_reconstruct(Tensor::full({1, 4, 4}, 1.0), 0, 3), ConfigError);
  EXPECT_EQ(hamburger_enhance(x, {true, 2, 6}, &p).shape(), x.shape());
  // A single pixel admits no factorization: only the output projection remains.
  const Tensor px = random_tensor({2, 4, 1, 1}, rng);
  EXPECT_EQ(as_vec(hamburger_enhance(px, {true, 2, 6}, &p).data()),
            as_vec(conv2d(px, p.out_weight, p.out_bias, {}).data()));
}

TEST(encoder_blocks, residual_block_zero_main_path_is_shortcut) {
  Rng rng(11);
  ParamStore store;
  ResidualBlockSpec spec;
  spec.in_channels = spec.out_channels = 8;
  spec.mid_channels = 4;
  auto p = ResidualBlockParams::create(store, "b", spec, rng);
  fill(p.expand.conv.weight, 0.0);
  fill(p.expand.norm.beta, 0.0);  // the 1x1 before a norm carries no bias
  Tape tape;
  const Tensor x = random_tensor({1, 8, 6, 6}, rng, -1, 1, true);
  const Tensor y = residual_block_forward(x, spec, p);
  EXPECT_EQ(as_vec(y.data()), as_vec(x.data()));
  backward(sum(y));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(encoder_blocks, convolution_block_halves_resolution) {
  Rng rng(12);
  ParamStore store;
  ResidualBlockSpec spec;
  spec.in_channels = 64;
  spec.mid_channels = 32;
  spec.out_channels = 128;
  spec.kind = BlockKind::kConvolution;
  spec.stride = 2;
  const auto p = ResidualBlockParams::create(store, "c", spec, rng);
  EXPECT_EQ(residual_block_forward(random_tensor({1, 64, 16, 16}, rng), spec, p).shape(), (Shape{1, 128, 8, 8}));
  spec.stride = 1;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec.kind = BlockKind::kBottle;
  spec.stride = 2;
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(encoder_blocks, shortcut_gradient_survives_dead_main_path) {
  Rng rng(13);
  ParamStore store;
  ResidualBlockSpec spec;
  spec.in_channels = 8;
  spec.mid_channels = 4;
  spec.out_channels = 16;
  spec.kind = BlockKind::kConvolution;
  spec.stride = 2;
  auto p = ResidualBlockParams::create(store, "c", spec, rng);
  for (Tensor t : {p.reduce.conv.weight, p.spatial.conv.weight, p.expand.conv.weight}) fill(t, 0.0);
  Tape tape;
  const Tensor x = random_tensor({1, 8, 6, 6}, rng, -1, 1, true);
  backward(sum(residual_block_forward(x, spec, p)));
  double total = 0.0;
  for (double g : x.grad()) total += std::abs(g);
  EXPECT_GT(total, 0.0);
}

TEST(encoder_blocks, encoder_stage_shapes) {
  ModelConfig cfg;
  FamSegModel model(cfg, 3);
  Rng rng(14);
  const auto feats = model.encode(random_tensor({1, 3, 64, 64}, rng, 0, 1));
  ASSERT_EQ(feats.size(), 4u);
  EXPECT_EQ(feats[0].shape(), (Shape{1, 32, 16, 16}));
  EXPECT_EQ(feats[1].shape(), (Shape{1, 64, 8, 8}));
  EXPECT_EQ(feats[2].shape(), (Shape{1, 160, 4, 4}));
  EXPECT_EQ(feats[3].shape(), (Shape{1, 256, 2, 2}));
  EXPECT_THROW(model.encode(Tensor::zeros({1, 3, 48, 64})), ShapeError);
}

TEST(encoder_blocks, stage_strides_for_other_sizes) {
  FamSegModel model(tiny_config(), 3);
  Rng rng(15);
  for (auto [h, w] : {std::pair{32, 32}, std::pair{96, 64}, std::pair{32, 128}}) {
    const auto feats = model.encode(random_tensor({1, 3, h, w}, rng, 0, 1));
    for (int s = 0; s < 4; ++s) {
      EXPECT_EQ(feats[s].dim(2), h >> (s + 2));
      EXPECT_EQ(feats[s].dim(3), w >> (s + 2));
    }
  }
}

TEST(encoder_blocks, encoder_is_deterministic_and_mamba_toggle_is_live) {
  ModelConfig on = tiny_config();
  ModelConfig off = tiny_config();
  off.encoder.mamba = false;
  FamSegModel a(on, 21), b(on, 21), c(off, 21);
  Rng rng(16);
  const Tensor x = random_tensor({1, 3, 64, 64}, rng, 0, 1);
  const auto fa = a.encode(x), fb = b.encode(x), fc = c.encode(x);
  for (int s = 0; s < 4; ++s) EXPECT_EQ(as_vec(fa[s].data()), as_vec(fb[s].data()));
  EXPECT_GT(max_abs_diff(fa[3], fc[3]), 0.0);

  bool any_mamba = false;
  for (const auto& [name, t] : a.params().entries()) any_mamba = any_mamba || name.find(".mamba.") != std::string::npos;
  EXPECT_TRUE(any_mamba);
  for (const auto& [name, t] : c.params().entries()) EXPECT_EQ(name.find(".mamba."), std::string::npos) << name;
}

TEST(encoder_blocks, config_validation) {
  EncoderConfig cfg;
  cfg.stage_depths = {2, 2, 2};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = EncoderConfig{};
  cfg.fuse_last_n = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
