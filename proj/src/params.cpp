#include "famseg/params.hpp"

#include <cmath>

namespace famseg {

Tensor ParamStore::insert(const std::string& name, Tensor t) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  t.set_requires_grad(true);
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return insert(name, Tensor::from(std::move(shape), std::move(v)));
}

Tensor ParamStore::add_constant(const std::string& name, Shape shape, double value) {
  return insert(name, Tensor::full(std::move(shape), value));
}

Tensor ParamStore::add_conv_weight(const std::string& name, Shape shape, Rng& rng, double gain) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= static_cast<std::size_t>(shape[i]);
  return add_normal(name, std::move(shape), gain * std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return true;
  }
  return false;
}

Tensor ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw ConfigError("unknown parameter " + name);
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [n, t] : entries_) out.push_back(t);
  return out;
}

std::size_t ParamStore::total_numel() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [n, t] : entries_) t.zero_grad();
}

int norm_groups(int channels, int max_groups) {
  for (int g = std::min(max_groups, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

Conv Conv::create(ParamStore& store, const std::string& name, int in, int out, int kh, int kw, Rng& rng,
                  int stride, int groups, bool with_bias) {
  Conv c;
  c.weight = store.add_conv_weight(name + ".weight", {out, in / groups, kh, kw}, rng);
  if (with_bias) c.bias = store.add_constant(name + ".bias", {out}, 0.0);
  c.opt = Conv2dOptions::same(kh, kw, stride, groups);
  return c;
}

GroupNorm GroupNorm::create(ParamStore& store, const std::string& name, int channels) {
  GroupNorm n;
  n.gamma = store.add_constant(name + ".gamma", {channels}, 1.0);
  n.beta = store.add_constant(name + ".beta", {channels}, 0.0);
  n.groups = norm_groups(channels);
  return n;
}

ConvNormAct ConvNormAct::create(ParamStore& store, const std::string& name, int in, int out, int k, Rng& rng,
                                int stride, bool act) {
  ConvNormAct m;
  m.conv = Conv::create(store, name + ".conv", in, out, k, k, rng, stride, 1, false);
  m.norm = GroupNorm::create(store, name + ".norm", out);
  m.act = act;
  return m;
}

Tensor ConvNormAct::operator()(const Tensor& x) const {
  Tensor y = norm(conv(x));
  return act ? gelu(y) : y;
}

}  // namespace famseg
