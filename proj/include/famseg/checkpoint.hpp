#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "famseg/model.hpp"
#include "famseg/optim.hpp"

namespace famseg {

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

/// Binary layout, little endian:
///   "FAMSEGCK" | u32 version | u64 digest of the model config text |
///   u32 len + model config text | u32 count + (u32 len + key, f64 value)* |
///   two tensor tables (parameters, optimizer), each u32 count +
///   (u32 len + name, u32 rank, u32 dims[rank], f64 data[])*
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string model_config;
  std::map<std::string, double> meta;
  std::vector<NamedArray> params;
  std::vector<NamedArray> optimizer;

  std::uint64_t digest() const;
};

Checkpoint make_checkpoint(const FamSegModel& model, const std::map<std::string, double>& meta,
                           const Optimizer* optimizer = nullptr);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Builds the model described by the checkpoint and copies its parameters.
std::unique_ptr<FamSegModel> restore_model(const Checkpoint& ckpt);
/// Copies parameters into an existing model; names and shapes must match.
void load_parameters(FamSegModel& model, const Checkpoint& ckpt);
void restore_optimizer(Optimizer& optimizer, const Checkpoint& ckpt);

}  // namespace famseg
