#include "famseg/tensor.hpp"

#include <cmath>
#include <sstream>

namespace famseg {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

int Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>(*impl_);
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const { return from(impl_->shape, impl_->data, false); }

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  if (consumed_) throw Error("recording onto a consumed tape; call reset() first");
  entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw Error("backward called twice on the same tape without reset()");
  if (!loss.defined() || loss.numel() != 1) throw ShapeError("backward needs a scalar loss");
  if (entries_.empty()) throw Error("backward on an empty tape");

  Tensor root = loss;
  auto g = root.mutable_grad();
  g[0] += 1.0;

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->fn(it->output.grad());
  }
  // Inputs the loss does not reach still get an (all-zero) gradient.
  for (auto& e : entries_) {
    for (auto& in : e.inputs) {
      if (in.requires_grad()) in.mutable_grad();
    }
  }
  consumed_ = true;
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw Error("backward without an active tape");
  tape->backward(loss);
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

namespace detail {

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

void check_finite(const char* op, std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string("non-finite value produced by ") + op + " at flat index " +
                         std::to_string(i));
    }
  }
}

Tensor finish_op(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                 const std::function<BackwardFn(const Tensor& out)>& make_backward) {
  check_finite(op, values);
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  Tape* tape = Tape::active();
  if (tape != nullptr && any_requires_grad(inputs)) {
    out.set_requires_grad(true);
    tape->record(inputs, out, make_backward(out));
  }
  return out;
}

}  // namespace detail
}  // namespace famseg
