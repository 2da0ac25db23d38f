#include "famseg/gradcheck.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <numeric>

#include "famseg/ops.hpp"
#include "famseg/rng.hpp"

namespace famseg {

namespace {

double eval_loss(const std::function<Tensor()>& loss_fn) {
  NoGradGuard guard;
  return loss_fn().item();
}

std::vector<std::size_t> pick_indices(std::size_t n, std::size_t max_count, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (max_count == 0 || max_count >= n) return idx;
  // partial Fisher-Yates
  for (std::size_t i = 0; i < max_count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.next() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(max_count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradcheckReport gradcheck(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& inputs,
                          const std::vector<std::string>& names, const GradcheckOptions& opt) {
  const double first = eval_loss(loss_fn);
  const double second = eval_loss(loss_fn);
  if (std::memcmp(&first, &second, sizeof(double)) != 0) {
    throw Error("gradcheck: function is not deterministic (two forward passes differ)");
  }

  std::vector<Tensor> xs = inputs;
  std::vector<bool> saved_flags;
  for (auto& x : xs) {
    saved_flags.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
    for (auto& x : xs) {
      analytic.emplace_back(x.grad().begin(), x.grad().end());
      x.zero_grad();
    }
  }

  GradcheckReport report;
  Rng rng(opt.seed);
  for (std::size_t t = 0; t < xs.size(); ++t) {
    auto data = xs[t].mutable_data();
    for (std::size_t i : pick_indices(data.size(), opt.max_per_tensor, rng)) {
      const double orig = data[i];
      data[i] = orig + opt.h;
      const double up = eval_loss(loss_fn);
      data[i] = orig - opt.h;
      const double down = eval_loss(loss_fn);
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.h);
      const double a = analytic[t][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.floor});
      ++report.checked;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.worst.empty()) {
        report.max_rel_error = std::max(rel, report.max_rel_error);
        report.worst = (t < names.size() ? names[t] : "input" + std::to_string(t)) + "[" + std::to_string(i) + "]";
      }
    }
  }
  for (std::size_t t = 0; t < xs.size(); ++t) xs[t].set_requires_grad(saved_flags[t]);
  report.passed = report.max_rel_error <= opt.tol;
  return report;
}

GradcheckReport gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                          const GradcheckOptions& opt) {
  Tensor projection;
  {
    NoGradGuard guard;
    const Tensor probe = f(x);
    Rng rng(opt.seed ^ 0xA5A5A5A5ULL);
    std::vector<double> w(probe.numel());
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    projection = Tensor::from(probe.shape(), std::move(w));
  }
  auto loss_fn = [&]() { return sum(mul(f(x), projection)); };
  return gradcheck(loss_fn, {x}, {"x"}, opt);
}

}  // namespace famseg
