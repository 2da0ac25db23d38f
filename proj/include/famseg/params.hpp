#pragma once

#include <string>
#include <utility>
#include <vector>

#include "famseg/ops.hpp"
#include "famseg/rng.hpp"
#include "famseg/tensor.hpp"

namespace famseg {

/// Ordered, named collection of trainable tensors. Registration order is the
/// checkpoint order and the order optimizers walk.
class ParamStore {
 public:
  Tensor add_normal(const std::string& name, Shape shape, double stddev, Rng& rng);
  Tensor add_constant(const std::string& name, Shape shape, double value);
  /// He-normal init with fan_in = product of all dims but the first.
  Tensor add_conv_weight(const std::string& name, Shape shape, Rng& rng, double gain = 1.0);

  bool contains(const std::string& name) const;
  Tensor get(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  std::size_t total_numel() const;
  void zero_grad();

 private:
  Tensor insert(const std::string& name, Tensor t);
  std::vector<std::pair<std::string, Tensor>> entries_;
};

/// Largest divisor of `channels` not above `max_groups`.
int norm_groups(int channels, int max_groups = 8);

struct Conv {
  Tensor weight;
  Tensor bias;  // may be undefined
  Conv2dOptions opt;

  static Conv create(ParamStore& store, const std::string& name, int in, int out, int kh, int kw, Rng& rng,
                     int stride = 1, int groups = 1, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, opt); }
};

struct GroupNorm {
  Tensor gamma;
  Tensor beta;
  int groups = 1;

  static GroupNorm create(ParamStore& store, const std::string& name, int channels);
  Tensor operator()(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }
};

/// conv -> group norm -> optional GELU
struct ConvNormAct {
  Conv conv;
  GroupNorm norm;
  bool act = true;

  static ConvNormAct create(ParamStore& store, const std::string& name, int in, int out, int k, Rng& rng,
                            int stride = 1, bool act = true);
  Tensor operator()(const Tensor& x) const;
};

}  // namespace famseg
