#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "famseg/optim.hpp"
#include "famseg/rng.hpp"

using namespace famseg;

namespace {

// f(theta) = 1/2 sum h_i (theta_i - c_i)^2, one "batch" = one full gradient.
class Bowl : public Objective {
 public:
  Bowl(int dim, int steps_per_epoch) : steps_(steps_per_epoch) {
    std::vector<double> start(dim);
    for (int i = 0; i < dim; ++i) {
      h_.push_back(std::pow(10.0, -1.0 + 2.0 * i / (dim - 1)));
      c_.push_back(std::cos(1.0 + i));
      start[i] = 2.0 * std::sin(3.0 * i);
    }
    theta_ = Tensor::from({dim}, start, true);
  }

  std::vector<Tensor> parameters() override { return {theta_}; }
  int batches_per_epoch() const override { return steps_; }
  double loss_and_grad(int, int) override {
    auto g = theta_.mutable_grad();
    for (std::size_t i = 0; i < h_.size(); ++i) g[i] = h_[i] * (theta_.data()[i] - c_[i]);
    return loss();
  }
  double validate() override { return loss(); }

  double loss() const {
    double f = 0.0;
    for (std::size_t i = 0; i < h_.size(); ++i) f += 0.5 * h_[i] * std::pow(theta_.data()[i] - c_[i], 2);
    return f;
  }
  Tensor theta_;

 private:
  int steps_;
  std::vector<double> h_, c_;
};

class Poison : public Bowl {
 public:
  explicit Poison(int bad_epoch) : Bowl(3, 2), bad_(bad_epoch) {}
  double loss_and_grad(int epoch, int batch) override {
    const double l = Bowl::loss_and_grad(epoch, batch);
    return epoch == bad_ && batch == 1 ? std::numeric_limits<double>::quiet_NaN() : l;
  }

 private:
  int bad_;
};

// Bowl settings for the three-run comparison, chosen before measuring.
constexpr int kBowlDim = 10;
constexpr int kBowlSteps = 10;
constexpr double kBowlLr = 0.1;

const std::vector<Phase> kAlternation{{OptimizerKind::kAdamW, 15, DecayKind::kCosine},
                                      {OptimizerKind::kSgd, 5, DecayKind::kCosine}};
const std::vector<Phase> kAdamW20{{OptimizerKind::kAdamW, 20, DecayKind::kCosine}};
const std::vector<Phase> kSgd20{{OptimizerKind::kSgd, 20, DecayKind::kCosine}};

double run_bowl(const std::vector<Phase>& phases, double lr = kBowlLr, int steps = kBowlSteps) {
  Schedule s;
  s.phases = phases;
  s.hyper.weight_decay = 0.0;
  Bowl bowl(kBowlDim, steps);
  alternate_train(s, {lr, lr / 100.0}, bowl);
  return bowl.loss();
}

}  // namespace

TEST(optim_schedule, sgd_plain_step) {
  std::vector<double> theta{1.0};
  MomentState s;
  sgd_step(theta, std::vector<double>{2.0}, s, 0.1, 0.0);
  EXPECT_EQ(theta[0], 1.0 - 0.1 * 2.0);
  EXPECT_NEAR(theta[0], 0.8, 1e-15);
  sgd_step(theta, std::vector<double>{0.0}, s, 0.1, 0.0);
  EXPECT_EQ(theta[0], 1.0 - 0.1 * 2.0);
}

TEST(optim_schedule, sgd_geometric_decay_on_half_square) {
  std::vector<double> theta{1.0};
  MomentState s;
  for (int k = 1; k <= 20; ++k) {
    sgd_step(theta, std::vector<double>{theta[0]}, s, 0.1, 0.0);
    EXPECT_NEAR(theta[0], std::pow(0.9, k), 1e-12) << k;
  }
}

TEST(optim_schedule, sgd_momentum_buffer) {
  std::vector<double> theta{1.0};
  MomentState s;
  sgd_step(theta, std::vector<double>{1.0}, s, 0.1, 0.9);
  sgd_step(theta, std::vector<double>{1.0}, s, 0.1, 0.9);
  EXPECT_NEAR(theta[0], 1.0 - 0.1 * 1.0 - 0.1 * 1.9, 1e-15);
  EXPECT_NEAR(s.m[0], 1.9, 1e-15);
  EXPECT_THROW(sgd_step(theta, std::vector<double>{1.0, 2.0}, s, 0.1, 0.0), ShapeError);
}

TEST(optim_schedule, adam_first_step) {
  std::vector<double> theta{0.5};
  MomentState s;
  const OptimizerHyper h;
  adam_step(theta, std::vector<double>{1.0}, s, 0.001, h);
  EXPECT_EQ(s.t, 1);
  EXPECT_NEAR(theta[0], 0.5 - 0.001 / (1.0 + 1e-8), 1e-16);
}

TEST(optim_schedule, adam_zero_gradient_never_moves) {
  std::vector<double> theta{0.3, -2.0};
  MomentState s;
  for (int i = 0; i < 50; ++i) adam_step(theta, std::vector<double>{0.0, 0.0}, s, 0.1, {});
  EXPECT_EQ(theta, (std::vector<double>{0.3, -2.0}));
}

TEST(optim_schedule, adam_constant_gradient_step_tends_to_lr) {
  std::vector<double> theta{0.0};
  MomentState s;
  double prev = 0.0, delta = 0.0;
  for (int i = 0; i < 100; ++i) {
    adam_step(theta, std::vector<double>{3.0}, s, 0.01, {});
    delta = prev - theta[0];
    prev = theta[0];
  }
  EXPECT_NEAR(delta, 0.01, 1e-9);
}

TEST(optim_schedule, adam_step_is_bounded) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> theta(8, 0.0);
    MomentState s;
    const double lr = rng.uniform(1e-4, 1e-1);
    for (int step = 0; step < 50; ++step) {
      std::vector<double> g(8);
      for (auto& v : g) v = rng.normal() * std::pow(10.0, rng.uniform(-4, 4));
      const auto before = theta;
      adam_step(theta, g, s, lr, {});
      for (int i = 0; i < 8; ++i) EXPECT_LE(std::abs(theta[i] - before[i]), 10.0 * lr);
    }
  }
}

TEST(optim_schedule, adamw_pure_decay) {
  OptimizerHyper h;
  h.weight_decay = 0.01;
  std::vector<double> theta{1.0};
  MomentState s;
  adamw_step(theta, std::vector<double>{0.0}, s, 0.1, h);
  EXPECT_NEAR(theta[0], 0.999, 1e-15);
  for (int k = 2; k <= 50; ++k) {
    adamw_step(theta, std::vector<double>{0.0}, s, 0.1, h);
    EXPECT_NEAR(theta[0], std::pow(1.0 - 0.1 * 0.01, k), 1e-12) << k;
  }
}

TEST(optim_schedule, adamw_without_decay_is_adam) {
  OptimizerHyper h;
  h.weight_decay = 0.0;
  Rng rng(2);
  std::vector<double> a{0.4, -1.2, 3.0}, b = a;
  MomentState sa, sb;
  for (int i = 0; i < 30; ++i) {
    std::vector<double> g{rng.normal(), rng.normal(), rng.normal()};
    adam_step(a, g, sa, 0.05, h);
    adamw_step(b, g, sb, 0.05, h);
  }
  EXPECT_EQ(a, b);
}

TEST(optim_schedule, adamw_is_not_adam_with_l2) {
  // Two parameters whose gradients differ by four orders of magnitude: Adam
  // normalizes the L2 term away on the steep one, AdamW does not.
  const double lambda = 0.1, lr = 0.01;
  OptimizerHyper hw;
  hw.weight_decay = lambda;
  OptimizerHyper h0;
  h0.weight_decay = 0.0;
  std::vector<double> w{1.0, 1.0}, a{1.0, 1.0};
  MomentState sw, sa;
  const double scale[2] = {100.0, 0.01};
  for (int step = 0; step < 10; ++step) {
    std::vector<double> gw(2), ga(2);
    for (int i = 0; i < 2; ++i) {
      gw[i] = scale[i] * w[i];
      ga[i] = scale[i] * a[i] + lambda * a[i];
    }
    adamw_step(w, gw, sw, lr, hw);
    adam_step(a, ga, sa, lr, h0);
  }
  const double gap = std::max(std::abs(w[0] - a[0]), std::abs(w[1] - a[1]));
  EXPECT_GE(gap, 1e-6);
}

TEST(optim_schedule, lr_fit_constants_and_clamps) {
  const LrRange r = lr_fit(64, 0.01, 0.0001, 0.001, 0.0001);
  EXPECT_DOUBLE_EQ(r.init_lr, 0.001);
  EXPECT_DOUBLE_EQ(r.min_lr, 0.00001);
  EXPECT_EQ(lr_fit(6400, 0.01, 0.0001, 0.001, 0.0001).init_lr, 0.001);
  EXPECT_EQ(lr_fit(1, 1e-6, 1e-8, 0.001, 0.0001).init_lr, 0.0001);
  EXPECT_EQ(lr_fit(1, 1e-6, 1e-8, 0.001, 0.0001).min_lr, 0.0001 / 100.0);
  EXPECT_THROW(lr_fit(0, 0.01, 0.0001, 0.001, 0.0001), ConfigError);
}

TEST(optim_schedule, lr_fit_monotone_in_batch_size) {
  LrRange prev{0.0, 0.0};
  for (int i = 0; i < 20; ++i) {
    const int batch = 1 + 7 * i;
    const LrRange r = lr_fit(batch, 0.01, 0.0001, 0.001, 0.0001);
    EXPECT_GE(r.init_lr, prev.init_lr);
    EXPECT_GE(r.min_lr, prev.min_lr);
    EXPECT_GE(r.init_lr, 0.0001);
    EXPECT_LE(r.init_lr, 0.001);
    prev = r;
  }
}

TEST(optim_schedule, decay_shapes) {
  EXPECT_EQ(decay_lr(DecayKind::kCosine, 0, 20, 0.1, 0.001), 0.1);
  EXPECT_NEAR(decay_lr(DecayKind::kCosine, 10, 20, 0.1, 0.001), (0.1 + 0.001) / 2, 1e-15);
  EXPECT_EQ(decay_lr(DecayKind::kStep, 11, 20, 0.1, 0.001), 0.1);
  EXPECT_DOUBLE_EQ(decay_lr(DecayKind::kStep, 12, 20, 0.1, 0.001), 0.01);
  EXPECT_DOUBLE_EQ(decay_lr(DecayKind::kStep, 17, 20, 0.1, 0.001), 0.001);
  EXPECT_EQ(decay_lr(DecayKind::kAdadelta, 7, 20, 0.1, 0.001), 0.1);
  EXPECT_THROW(decay_lr(DecayKind::kCosine, 20, 20, 0.1, 0.001), ConfigError);
  EXPECT_THROW(decay_lr(DecayKind::kCosine, -1, 20, 0.1, 0.001), ConfigError);
}

TEST(optim_schedule, adadelta_rate_is_scale_free) {
  // The RMS-ratio rule makes the step nearly independent of the gradient scale.
  std::vector<double> steps[2];
  for (int run = 0; run < 2; ++run) {
    Optimizer opt(OptimizerKind::kSgd, DecayKind::kAdadelta, [] {
      OptimizerHyper h;
      h.momentum = 0.0;
      h.rate_eps = 1e-6;
      return h;
    }());
    const Tensor t = Tensor::from({1}, {0.0}, true);
    for (int i = 0; i < 5; ++i) {
      t.impl()->grad.assign(1, run == 0 ? 1.0 : 1000.0);
      const double before = t.data()[0];
      opt.step({t}, 123.0);
      steps[run].push_back(before - t.data()[0]);
    }
  }
  // Equal up to eps / E[g^2], about 2e-5 of the step here.
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(steps[0][i] / steps[1][i], 1.0, 1e-4);
  // First step: sqrt(eps) / sqrt((1 - rho) g^2 + eps) * g with rho = .95
  EXPECT_NEAR(steps[0][0], std::sqrt(1e-6) / std::sqrt(0.05 + 1e-6), 1e-15);
}

TEST(optim_schedule, optimizer_state_round_trip) {
  Optimizer a(OptimizerKind::kAdamW, DecayKind::kCosine, {});
  const Tensor t = Tensor::from({3}, {1, 2, 3}, true);
  t.impl()->grad = {0.1, -0.2, 0.3};
  a.step({t}, 0.01);
  a.step({t}, 0.01);
  Optimizer b(OptimizerKind::kAdamW, DecayKind::kCosine, {});
  b.import_state(a.steps(), a.export_state());
  const Tensor u = t.clone();
  u.impl()->grad = t.impl()->grad;
  a.step({t}, 0.01);
  b.step({u}, 0.01);
  EXPECT_EQ(std::vector<double>(t.data().begin(), t.data().end()), std::vector<double>(u.data().begin(), u.data().end()));
  EXPECT_THROW(b.import_state(1, {{"slot0.m", {}}}), IncompatibleError);
}

TEST(optim_schedule, alternation_flips_at_configured_epoch) {
  Schedule s;  // adamw 15 + sgd 5
  Bowl bowl(4, 3);
  std::vector<double> at_switch;
  AlternateOptions opt;
  opt.on_epoch_end = [&](const EpochRecord& rec, const Optimizer&) {
    if (rec.epoch == 14) at_switch.assign(bowl.theta_.data().begin(), bowl.theta_.data().end());
  };
  const auto log = alternate_train(s, {0.01, 0.0001}, bowl, opt);
  ASSERT_EQ(log.size(), 20u);
  for (const auto& r : log) {
    EXPECT_EQ(r.optimizer, r.epoch < 15 ? OptimizerKind::kAdamW : OptimizerKind::kSgd) << r.epoch;
    EXPECT_EQ(r.phase, r.epoch < 15 ? 0 : 1);
  }
  EXPECT_EQ(log[15].lr, 0.01);  // the incoming phase starts from the top of its schedule
  EXPECT_EQ(log[0].lr, 0.01);
  ASSERT_EQ(at_switch.size(), 4u);
}

TEST(optim_schedule, phase_switch_keeps_parameters) {
  Schedule s;
  s.phases = {{OptimizerKind::kAdamW, 2, DecayKind::kCosine}, {OptimizerKind::kSgd, 1, DecayKind::kCosine}};
  Bowl bowl(4, 2);
  std::vector<double> end_of_phase0, start_of_phase1;
  AlternateOptions opt;
  opt.on_epoch_end = [&](const EpochRecord& rec, const Optimizer& o) {
    if (rec.epoch == 1) end_of_phase0.assign(bowl.theta_.data().begin(), bowl.theta_.data().end());
    if (rec.epoch == 2) {
      EXPECT_EQ(o.steps(), 2);  // fresh state: only this phase's steps
    }
  };
  alternate_train(s, {0.01, 0.001}, bowl, opt);
  // Replay phase 1 by hand from the saved parameters.
  start_of_phase1 = end_of_phase0;
  MomentState m;
  for (int b = 0; b < 2; ++b) {
    std::vector<double> g(4);
    Bowl probe(4, 1);
    std::copy(start_of_phase1.begin(), start_of_phase1.end(), probe.theta_.mutable_data().begin());
    probe.loss_and_grad(0, 0);
    std::copy(probe.theta_.grad().begin(), probe.theta_.grad().end(), g.begin());
    sgd_step(start_of_phase1, g, m, decay_lr(DecayKind::kCosine, 0, 1, 0.01, 0.001), 0.9);
  }
  EXPECT_EQ(start_of_phase1, std::vector<double>(bowl.theta_.data().begin(), bowl.theta_.data().end()));
}

TEST(optim_schedule, single_phase_is_plain_training) {
  Schedule s;
  s.phases = {{OptimizerKind::kSgd, 3, DecayKind::kStep}};
  s.hyper.momentum = 0.0;
  Bowl a(5, 4), b(5, 4);
  alternate_train(s, {0.05, 0.005}, a);
  MomentState m;
  std::vector<double> theta(b.theta_.data().begin(), b.theta_.data().end());
  for (int e = 0; e < 3; ++e) {
    const double lr = decay_lr(DecayKind::kStep, e, 3, 0.05, 0.005);
    for (int k = 0; k < 4; ++k) {
      std::copy(theta.begin(), theta.end(), b.theta_.mutable_data().begin());
      b.loss_and_grad(e, k);
      sgd_step(theta, b.theta_.grad(), m, lr, 0.0);
    }
  }
  EXPECT_EQ(theta, std::vector<double>(a.theta_.data().begin(), a.theta_.data().end()));
}

TEST(optim_schedule, divergence_names_epoch_and_phase) {
  Schedule s;
  s.phases = {{OptimizerKind::kAdamW, 2, DecayKind::kCosine}, {OptimizerKind::kSgd, 2, DecayKind::kCosine}};
  Poison obj(2);
  try {
    alternate_train(s, {0.01, 0.001}, obj);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("phase 1"), std::string::npos) << msg;
  }
}

TEST(optim_schedule, unknown_names_rejected) {
  EXPECT_THROW(parse_optimizer("lbfgs"), ConfigError);
  EXPECT_THROW(parse_decay("linear"), ConfigError);
  EXPECT_EQ(parse_decay("cos"), DecayKind::kCosine);
  Schedule s;
  s.phases.clear();
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(optim_schedule, alternation_on_quadratic_bowl) {
  const double alt = run_bowl(kAlternation);
  const double adamw = run_bowl(kAdamW20);
  const double sgd = run_bowl(kSgd20);
  RecordProperty("alternation", std::to_string(alt));
  RecordProperty("adamw", std::to_string(adamw));
  RecordProperty("sgd", std::to_string(sgd));
  EXPECT_LE(alt, 1.05 * std::min(adamw, sgd)) << "alt " << alt << " adamw " << adamw << " sgd " << sgd;
}

TEST(optim_schedule, alternation_never_trails_adamw_on_bowl_sweep) {
  for (double lr : {0.01, 0.03, 0.1, 0.3}) {
    for (int steps : {5, 10, 20, 50}) {
      const double alt = run_bowl(kAlternation, lr, steps);
      const double adamw = run_bowl(kAdamW20, lr, steps);
      EXPECT_LE(alt, 1.05 * adamw + 1e-30) << "lr " << lr << " steps " << steps;
    }
  }
}
