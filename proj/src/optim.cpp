#include "famseg/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace famseg {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kAdam: return "adam";
    case OptimizerKind::kAdamW: return "adamw";
  }
  return "?";
}

std::string to_string(DecayKind kind) {
  switch (kind) {
    case DecayKind::kStep: return "step";
    case DecayKind::kCosine: return "cosine";
    case DecayKind::kAdadelta: return "adadelta";
  }
  return "?";
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "adamw") return OptimizerKind::kAdamW;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd, adam or adamw)");
}

DecayKind parse_decay(const std::string& s) {
  if (s == "step") return DecayKind::kStep;
  if (s == "cosine" || s == "cos") return DecayKind::kCosine;
  if (s == "adadelta") return DecayKind::kAdadelta;
  throw ConfigError("unknown decay '" + s + "' (expected step, cosine or adadelta)");
}

void MomentState::ensure(std::size_t n) {
  if (m.size() != n) m.assign(n, 0.0);
  if (v.size() != n) v.assign(n, 0.0);
}

namespace {

void check_sizes(const char* op, std::span<double> theta, std::span<const double> grad) {
  if (theta.size() != grad.size()) {
    throw ShapeError(std::string(op) + ": parameter has " + std::to_string(theta.size()) + " elements, gradient " +
                     std::to_string(grad.size()));
  }
}

// Writes the Adam direction m_hat / (sqrt(v_hat) + eps) into `dir`.
void adam_direction(std::span<const double> grad, MomentState& s, const OptimizerHyper& h, std::span<double> dir) {
  s.ensure(grad.size());
  ++s.t;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double g = grad[i];
    s.m[i] = h.beta1 * s.m[i] + (1.0 - h.beta1) * g;
    s.v[i] = h.beta2 * s.v[i] + (1.0 - h.beta2) * g * g;
    dir[i] = (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + h.eps);
  }
}

}  // namespace

void sgd_step(std::span<double> theta, std::span<const double> grad, MomentState& s, double lr, double momentum) {
  check_sizes("sgd_step", theta, grad);
  ++s.t;
  if (momentum == 0.0) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = theta[i] - lr * grad[i];
    return;
  }
  if (s.m.size() != theta.size()) s.m.assign(theta.size(), 0.0);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    s.m[i] = momentum * s.m[i] + grad[i];
    theta[i] -= lr * s.m[i];
  }
}

void adam_step(std::span<double> theta, std::span<const double> grad, MomentState& s, double lr,
               const OptimizerHyper& h) {
  check_sizes("adam_step", theta, grad);
  std::vector<double> dir(theta.size());
  adam_direction(grad, s, h, dir);
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * dir[i];
}

void adamw_step(std::span<double> theta, std::span<const double> grad, MomentState& s, double lr,
                const OptimizerHyper& h) {
  check_sizes("adamw_step", theta, grad);
  std::vector<double> dir(theta.size());
  adam_direction(grad, s, h, dir);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    theta[i] = theta[i] - lr * dir[i] - lr * h.weight_decay * theta[i];
  }
}

LrRange lr_fit(int batch_size, double init_lr, double min_lr, double lr_limit_max, double lr_limit_min) {
  if (batch_size <= 0 || init_lr <= 0 || min_lr <= 0 || lr_limit_max <= 0 || lr_limit_min <= 0) {
    throw ConfigError("lr_fit: all inputs must be positive");
  }
  const double scale = batch_size / 64.0;
  LrRange r;
  r.init_lr = std::min(std::max(scale * init_lr, lr_limit_min), lr_limit_max);
  r.min_lr = std::min(std::max(scale * min_lr, lr_limit_min / 100.0), lr_limit_max / 100.0);
  return r;
}

double decay_lr(DecayKind kind, int epoch, int total_epochs, double lr_max, double lr_min) {
  if (total_epochs < 1 || epoch < 0 || epoch >= total_epochs) {
    throw ConfigError("decay_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total_epochs) +
                      ")");
  }
  switch (kind) {
    case DecayKind::kCosine:
      return lr_min + 0.5 * (lr_max - lr_min) *
                          (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(total_epochs)));
    case DecayKind::kStep: {
      double lr = lr_max;
      if (epoch >= 0.6 * total_epochs) lr *= 0.1;
      if (epoch >= 0.85 * total_epochs) lr *= 0.1;
      return lr;
    }
    case DecayKind::kAdadelta:
      return lr_max;
  }
  return lr_max;
}

Optimizer::Optimizer(OptimizerKind kind, DecayKind decay, const OptimizerHyper& hyper)
    : kind_(kind), decay_(decay), hyper_(hyper) {}

void Optimizer::reset() {
  slots_.clear();
  steps_ = 0;
}

void Optimizer::apply_rate(Slot& slot, std::span<double> direction) {
  const std::size_t n = direction.size();
  if (slot.rate_dir.size() != n) {
    slot.rate_dir.assign(n, 0.0);
    slot.rate_upd.assign(n, 0.0);
  }
  const double rho = hyper_.rho, eps = hyper_.rate_eps;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = direction[i];
    slot.rate_dir[i] = rho * slot.rate_dir[i] + (1.0 - rho) * d * d;
    const double u = std::sqrt(slot.rate_upd[i] + eps) / std::sqrt(slot.rate_dir[i] + eps) * d;
    slot.rate_upd[i] = rho * slot.rate_upd[i] + (1.0 - rho) * u * u;
    direction[i] = u;
  }
}

void Optimizer::step(const std::vector<Tensor>& params, double lr) {
  if (slots_.empty()) slots_.resize(params.size());
  if (slots_.size() != params.size()) {
    throw ShapeError("optimizer: built for " + std::to_string(slots_.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  ++steps_;
  std::vector<double> zeros;
  std::vector<double> dir;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p];
    auto theta = t.mutable_data();
    std::span<const double> grad = t.grad();
    if (!t.has_grad()) {
      zeros.assign(theta.size(), 0.0);
      grad = zeros;
    }
    Slot& slot = slots_[p];
    if (decay_ != DecayKind::kAdadelta) {
      switch (kind_) {
        case OptimizerKind::kSgd: sgd_step(theta, grad, slot.moments, lr, hyper_.momentum); break;
        case OptimizerKind::kAdam: adam_step(theta, grad, slot.moments, lr, hyper_); break;
        case OptimizerKind::kAdamW: adamw_step(theta, grad, slot.moments, lr, hyper_); break;
      }
      continue;
    }
    // Rate-rescaled direction; the scalar rate only drives weight decay.
    dir.resize(theta.size());
    if (kind_ == OptimizerKind::kSgd) {
      MomentState& s = slot.moments;
      ++s.t;
      if (hyper_.momentum == 0.0) {
        std::copy(grad.begin(), grad.end(), dir.begin());
      } else {
        if (s.m.size() != theta.size()) s.m.assign(theta.size(), 0.0);
        for (std::size_t i = 0; i < theta.size(); ++i) dir[i] = s.m[i] = hyper_.momentum * s.m[i] + grad[i];
      }
    } else {
      adam_direction(grad, slot.moments, hyper_, dir);
    }
    apply_rate(slot, dir);
    const double decay = kind_ == OptimizerKind::kAdamW ? lr * hyper_.weight_decay : 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = theta[i] - dir[i] - decay * theta[i];
  }
}

std::vector<std::pair<std::string, std::vector<double>>> Optimizer::export_state() const {
  std::vector<std::pair<std::string, std::vector<double>>> out;
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    const std::string p = "slot" + std::to_string(i) + ".";
    const Slot& s = slots_[i];
    out.emplace_back(p + "m", s.moments.m);
    out.emplace_back(p + "v", s.moments.v);
    out.emplace_back(p + "t", std::vector<double>{static_cast<double>(s.moments.t)});
    out.emplace_back(p + "rate_dir", s.rate_dir);
    out.emplace_back(p + "rate_upd", s.rate_upd);
  }
  return out;
}

void Optimizer::import_state(std::int64_t steps,
                             const std::vector<std::pair<std::string, std::vector<double>>>& buffers) {
  if (buffers.size() % 5 != 0) throw IncompatibleError("optimizer state: malformed buffer list");
  slots_.assign(buffers.size() / 5, Slot{});
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    const std::string p = "slot" + std::to_string(i) + ".";
    const auto* b = &buffers[5 * i];
    if (b[0].first != p + "m" || b[1].first != p + "v" || b[2].first != p + "t" || b[3].first != p + "rate_dir" ||
        b[4].first != p + "rate_upd" || b[2].second.size() != 1) {
      throw IncompatibleError("optimizer state: unexpected buffer '" + b[0].first + "'");
    }
    slots_[i].moments.m = b[0].second;
    slots_[i].moments.v = b[1].second;
    slots_[i].moments.t = static_cast<std::int64_t>(b[2].second[0]);
    slots_[i].rate_dir = b[3].second;
    slots_[i].rate_upd = b[4].second;
  }
  steps_ = steps;
}

void Schedule::validate() const {
  if (phases.empty()) throw ConfigError("schedule: no phases");
  for (const auto& p : phases) {
    if (p.epochs < 1) throw ConfigError("schedule: every phase needs at least one epoch");
  }
  if (!(min_lr > 0) || init_lr < min_lr) throw ConfigError("schedule: need init_lr >= min_lr > 0");
  if (!(lr_limit_min > 0) || lr_limit_max < lr_limit_min) {
    throw ConfigError("schedule: need lr_limit_max >= lr_limit_min > 0");
  }
  if (batch_size < 1) throw ConfigError("schedule: batch_size must be positive");
}

int Schedule::total_epochs() const {
  int n = 0;
  for (const auto& p : phases) n += p.epochs;
  return n;
}

std::pair<int, int> Schedule::locate(int epoch) const {
  int begin = 0;
  for (std::size_t i = 0; i < phases.size(); ++i) {
    if (epoch < begin + phases[i].epochs) return {static_cast<int>(i), epoch - begin};
    begin += phases[i].epochs;
  }
  throw ConfigError("schedule: epoch " + std::to_string(epoch) + " beyond the last phase");
}

double Objective::validate() { return std::numeric_limits<double>::quiet_NaN(); }

std::vector<EpochRecord> alternate_train(const Schedule& schedule, const LrRange& range, Objective& objective,
                                         const AlternateOptions& opt) {
  schedule.validate();
  const int total = schedule.total_epochs();
  if (opt.start_epoch < 0 || opt.start_epoch > total) {
    throw ConfigError("alternate_train: start epoch " + std::to_string(opt.start_epoch) + " out of range");
  }
  const std::vector<Tensor> params = objective.parameters();
  const int batches = objective.batches_per_epoch();
  if (batches < 1) throw ConfigError("alternate_train: objective has no batches");

  std::vector<EpochRecord> log;
  int current_phase = -1;
  Optimizer optimizer(schedule.phases.front().optimizer, schedule.phases.front().decay, schedule.hyper);
  const int end = opt.end_epoch > 0 ? std::min(opt.end_epoch, total) : total;
  for (int epoch = opt.start_epoch; epoch < end; ++epoch) {
    const auto [phase_index, local] = schedule.locate(epoch);
    const Phase& phase = schedule.phases[phase_index];
    if (phase_index != current_phase) {
      optimizer = Optimizer(phase.optimizer, phase.decay, schedule.hyper);
      if (epoch == opt.start_epoch && local > 0 && opt.resume_from) optimizer = *opt.resume_from;
      current_phase = phase_index;
    }
    const double lr = decay_lr(phase.decay, local, phase.epochs, range.init_lr, range.min_lr);
    double loss_sum = 0.0;
    for (int b = 0; b < batches; ++b) {
      for (auto p : params) p.zero_grad();
      const double loss = objective.loss_and_grad(epoch, b);
      if (!std::isfinite(loss)) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " (phase " +
                           std::to_string(phase_index) + ", " + to_string(phase.optimizer) + "), batch " +
                           std::to_string(b));
      }
      loss_sum += loss;
      optimizer.step(params, lr);
    }
    EpochRecord rec{epoch, phase_index, phase.optimizer, lr, loss_sum / batches, objective.validate()};
    log.push_back(rec);
    if (opt.on_epoch_end) opt.on_epoch_end(rec, optimizer);
  }
  return log;
}

}  // namespace famseg
