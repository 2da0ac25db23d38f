#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "famseg/tensor.hpp"

namespace famseg {

enum class OptimizerKind { kSgd, kAdam, kAdamW };
enum class DecayKind { kStep, kCosine, kAdadelta };

std::string to_string(OptimizerKind kind);
std::string to_string(DecayKind kind);
OptimizerKind parse_optimizer(const std::string& s);
DecayKind parse_decay(const std::string& s);

struct OptimizerHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // AdamW only
  double momentum = 0.9;       // SGD only; 0 is plain gradient descent
  double rho = 0.95;           // adadelta-style rate
  double rate_eps = 1e-6;
};

/// Moments of one parameter tensor. SGD keeps its velocity in `m`.
struct MomentState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t t = 0;

  void ensure(std::size_t n);
};

/// b <- mu*b + g; theta <- theta - lr*b. With mu == 0 the buffer is untouched.
void sgd_step(std::span<double> theta, std::span<const double> grad, MomentState& s, double lr, double momentum);
void adam_step(std::span<double> theta, std::span<const double> grad, MomentState& s, double lr,
               const OptimizerHyper& h);
/// Adam update followed by the decoupled term - lr*lambda*theta, where theta
/// is the value before the step.
void adamw_step(std::span<double> theta, std::span<const double> grad, MomentState& s, double lr,
                const OptimizerHyper& h);

struct LrRange {
  double init_lr = 0.0;
  double min_lr = 0.0;
};

/// Batch-size scaled learning rates; the floor of the minimum rate uses the
/// limits divided by 100.
LrRange lr_fit(int batch_size, double init_lr, double min_lr, double lr_limit_max, double lr_limit_min);

/// Learning rate of `epoch` within a phase of `total_epochs`. kAdadelta holds
/// lr_max; its per-parameter rate lives in the optimizer.
double decay_lr(DecayKind kind, int epoch, int total_epochs, double lr_max, double lr_min);

/// Optimizer over an ordered parameter list. With kAdadelta decay each
/// update direction d is rescaled per element by
/// sqrt(E[u^2] + eps) / sqrt(E[d^2] + eps), the accumulators decaying with rho.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, DecayKind decay, const OptimizerHyper& hyper);

  void step(const std::vector<Tensor>& params, double lr);
  void reset();

  OptimizerKind kind() const { return kind_; }
  DecayKind decay() const { return decay_; }
  const OptimizerHyper& hyper() const { return hyper_; }
  std::int64_t steps() const { return steps_; }

  /// Flat named buffers for checkpointing ("slot<i>.m" etc).
  std::vector<std::pair<std::string, std::vector<double>>> export_state() const;
  void import_state(std::int64_t steps, const std::vector<std::pair<std::string, std::vector<double>>>& buffers);

 private:
  struct Slot {
    MomentState moments;
    std::vector<double> rate_dir;  // E[d^2]
    std::vector<double> rate_upd;  // E[u^2]
  };
  void apply_rate(Slot& slot, std::span<double> direction);

  OptimizerKind kind_;
  DecayKind decay_;
  OptimizerHyper hyper_;
  std::vector<Slot> slots_;
  std::int64_t steps_ = 0;
};

struct Phase {
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  int epochs = 1;
  DecayKind decay = DecayKind::kCosine;
};

struct Schedule {
  std::vector<Phase> phases{{OptimizerKind::kAdamW, 15, DecayKind::kCosine},
                            {OptimizerKind::kSgd, 5, DecayKind::kCosine}};
  double init_lr = 0.01;
  double min_lr = 0.0001;
  double lr_limit_max = 0.001;
  double lr_limit_min = 0.0001;
  int batch_size = 8;
  OptimizerHyper hyper;

  void validate() const;
  int total_epochs() const;
  /// Phase index and epoch-within-phase of a global epoch.
  std::pair<int, int> locate(int epoch) const;
};

/// What alternate_train drives. Gradients are accumulated into the tensors
/// returned by parameters(); the trainer zeroes them before each batch.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::vector<Tensor> parameters() = 0;
  virtual int batches_per_epoch() const = 0;
  /// Forward + backward for one batch; returns the batch loss.
  virtual double loss_and_grad(int epoch, int batch) = 0;
  /// Validation score after an epoch; NaN when there is none.
  virtual double validate();
};

struct EpochRecord {
  int epoch = 0;
  int phase = 0;
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_metric = 0.0;
};

struct AlternateOptions {
  int start_epoch = 0;
  /// Stop before this epoch; 0 runs the whole schedule. Phase lengths and
  /// their decay horizons are unaffected.
  int end_epoch = 0;
  /// Optimizer state to continue from when start_epoch is mid-phase.
  const Optimizer* resume_from = nullptr;
  std::function<void(const EpochRecord&, const Optimizer&)> on_epoch_end;
};

/// Runs the phases in order. Optimizer state starts fresh at every phase
/// switch and each phase decays from range.init_lr to range.min_lr over its
/// own epochs. Throws NumericError naming the epoch and phase when the loss
/// stops being finite.
std::vector<EpochRecord> alternate_train(const Schedule& schedule, const LrRange& range, Objective& objective,
                                         const AlternateOptions& opt = {});

}  // namespace famseg
