#include "famseg/gradcheck_suites.hpp"

#include <chrono>

#include "famseg/loss.hpp"
#include "famseg/model.hpp"

namespace famseg {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Scalar probe of a non-scalar output: sum(y * w) with fixed random w.
Tensor project(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

GradcheckReport check_store(const std::function<Tensor()>& loss, const Tensor& input, const ParamStore& store,
                            const GradcheckOptions& opt) {
  std::vector<Tensor> inputs{input};
  std::vector<std::string> names{"input"};
  for (const auto& [name, t] : store.entries()) {
    inputs.push_back(t);
    names.push_back(name);
  }
  return gradcheck(loss, inputs, names, opt);
}

GradcheckReport strip_suite(const GradcheckOptions& opt) {
  Rng rng(11);
  ParamStore store;
  const StripBlockSpec spec{4, {3, 7}, true};
  const auto p = StripBlockParams::create(store, "strip", spec, rng);
  const Tensor x = random_tensor({1, 4, 8, 8}, rng);
  const Tensor w = random_tensor({1, 4, 8, 8}, rng, -1.0, 1.0, false);
  return check_store([&] { return project(strip_block_forward(x, spec, p), w); }, x, store, opt);
}

GradcheckReport mamba_suite(const GradcheckOptions& opt) {
  Rng rng(12);
  ParamStore store;
  ResidualBlockSpec spec;
  spec.in_channels = 16;
  spec.mid_channels = 8;
  spec.out_channels = 16;
  spec.kind = BlockKind::kBottle;
  spec.shortcut_filter = ShortcutFilter::kMamba;
  spec.mamba.state_dim = 4;
  const auto p = ResidualBlockParams::create(store, "bottle", spec, rng);
  const Tensor x = random_tensor({1, 16, 4, 4}, rng);
  const Tensor w = random_tensor({1, 16, 4, 4}, rng, -1.0, 1.0, false);
  return check_store([&] { return project(residual_block_forward(x, spec, p), w); }, x, store, opt);
}

GradcheckReport fam_suite(const GradcheckOptions& opt) {
  Rng rng(13);
  ParamStore store;
  const FamSpec spec{8, 0, 5, 3, 2};
  const auto p = FamParams::create(store, "fam", spec, rng);
  const Tensor x = random_tensor({1, 8, 4, 4}, rng);
  const Tensor w = random_tensor({1, 8, 8, 8}, rng, -1.0, 1.0, false);
  return check_store([&] { return project(fam_upsample(x, spec, p), w); }, x, store, opt);
}

GradcheckReport hamburger_suite(const GradcheckOptions& opt) {
  Rng rng(14);
  ParamStore store;
  const HamburgerSpec spec{true, 2, 6};
  const auto p = HamburgerParams::create(store, "hamburger", 8, rng);
  const Tensor x = random_tensor({1, 8, 4, 4}, rng, -0.5, 1.5);
  const Tensor w = random_tensor({1, 8, 4, 4}, rng, -1.0, 1.0, false);
  return check_store([&] { return project(hamburger_enhance(x, spec, &p), w); }, x, store, opt);
}

GradcheckReport full_suite(const GradcheckOptions& opt) {
  ModelConfig cfg;
  cfg.encoder.stage_channels = {8, 8, 16, 16};
  cfg.encoder.stage_depths = {1, 1, 2, 2};
  cfg.encoder.branch_kernels = {3, 7};
  cfg.encoder.mamba_spec.state_dim = 4;
  cfg.decoder.refine_channels = 8;
  FamSegModel model(cfg, 15);
  Rng rng(16);
  const Tensor x = random_tensor({1, 3, 64, 64}, rng, 0.0, 1.0);
  Mask gt{64, 64, std::vector<std::uint8_t>(64 * 64)};
  for (auto& v : gt.labels) v = static_cast<std::uint8_t>(rng.uniform_int(0, cfg.decoder.num_classes - 1));
  GradcheckOptions o = opt;
  if (o.max_per_tensor == 0) o.max_per_tensor = 2;
  return check_store([&] { return cross_entropy(model.forward(x), {gt}); }, x, model.params(), o);
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names{"strip", "mamba", "fam", "hamburger", "full"};
  return names;
}

SuiteResult run_gradcheck_suite(const std::string& module, const GradcheckOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.module = module;
  if (module == "strip") {
    r.report = strip_suite(opt);
  } else if (module == "mamba") {
    r.report = mamba_suite(opt);
  } else if (module == "fam") {
    r.report = fam_suite(opt);
  } else if (module == "hamburger") {
    r.report = hamburger_suite(opt);
  } else if (module == "full") {
    r.report = full_suite(opt);
  } else {
    throw ConfigError("unknown gradcheck module '" + module + "'");
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace famseg
