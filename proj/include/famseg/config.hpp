#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "famseg/loss.hpp"
#include "famseg/model.hpp"
#include "famseg/optim.hpp"
#include "famseg/phantom.hpp"

namespace famseg {

struct TrainConfig {
  ModelConfig model;
  Schedule schedule;
  std::uint64_t seed = 1;
  LossKind loss = LossKind::kCrossEntropy;
};

struct DataConfig {
  int n = 200;
  std::uint64_t seed = 7;
  std::array<double, 3> split{0.8, 0.1, 0.1};
};

/// Everything one config file can set. `text` is the file as read.
struct ExperimentConfig {
  TrainConfig train;
  PhantomSpec phantom;
  DataConfig data;
  std::string text;
};

/// INI-style text: [encoder] [decoder] [schedule] [train] [phantom] [data]
/// sections of `key = value` lines, '#' comments. Unknown sections or keys
/// raise ConfigError naming the line.
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::string& path);

/// Canonical [encoder]/[decoder]/[model] text of a model config; parsing it
/// back yields the same config.
std::string model_config_text(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& text);

std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace famseg
