#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace famseg {

using Shape = std::vector<int>;

/// Base of every error raised by the library. The CLI maps the subclasses
/// onto its exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class IncompatibleError : public Error {
 public:
  using Error::Error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
};
}  // namespace detail

/// Dense NCHW-or-whatever array of doubles. Copies share storage; use
/// clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int axis) const;
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  /// Allocates a zero gradient buffer if none exists.
  std::span<double> mutable_grad();
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;
  /// Same values, fresh storage, never tracked.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Receives the gradient of the recorded output and accumulates into the
/// recorded inputs.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

/// Ordered record of differentiable operations. Constructing a Tape makes it
/// the active tape of the calling thread until it is destroyed; operations
/// executed while no tape is active are not recorded.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

  /// Reverse traversal from a scalar loss. A consumed tape must be reset()
  /// before it can be used again.
  void backward(const Tensor& loss);
  void reset();

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  Tape* previous_ = nullptr;
};

/// Runs backward on the active tape.
void backward(const Tensor& loss);

/// Suspends recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

namespace detail {
/// Builds an op result, checks it is finite and records it when any input is
/// tracked and a tape is active. `make_backward` is only invoked when the op
/// is recorded.
Tensor finish_op(const char* op, Shape shape, std::vector<double> values,
                 std::vector<Tensor> inputs,
                 const std::function<BackwardFn(const Tensor& out)>& make_backward);

bool any_requires_grad(const std::vector<Tensor>& inputs);
void check_finite(const char* op, std::span<const double> values);
}  // namespace detail

}  // namespace famseg
