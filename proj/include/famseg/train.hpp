#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "famseg/checkpoint.hpp"
#include "famseg/config.hpp"
#include "famseg/dataset.hpp"
#include "famseg/metrics.hpp"

namespace famseg {

struct SplitSamples {
  std::vector<SegmentationSample> train;
  std::vector<SegmentationSample> val;
  std::vector<SegmentationSample> test;
};

SplitSamples split_samples(const std::vector<SegmentationSample>& samples, const SplitIndices& idx);
SplitSamples split_samples(const Dataset& dataset);
/// Split assignment used for generated datasets.
SplitIndices data_split(const DataConfig& cfg);
/// Generates cfg.n phantoms and splits them, both seeded from cfg.
SplitSamples make_phantom_splits(const PhantomSpec& spec, const DataConfig& cfg);

/// Stacks images into [N,3,H,W].
Tensor stack_images(const std::vector<SegmentationSample>& samples, std::size_t begin, std::size_t end);

struct TrainOptions {
  /// When set, log.jsonl, last.ckpt and best.ckpt are written here.
  std::string out_dir;
  /// Echoed verbatim as the first log record.
  std::string config_text;
  /// Continue from a last.ckpt of the same config.
  const Checkpoint* resume = nullptr;
  /// Stop after this many epochs of the schedule (0: run all of it).
  int stop_after = 0;
  std::ostream* progress = nullptr;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::vector<std::string> log_lines;  // JSONL, config record first
  double best_val_miou = 0.0;
  int best_epoch = -1;
  std::unique_ptr<FamSegModel> model;
};

/// lr_fit once, then alternate_train over the schedule with per-epoch
/// validation mIoU. Deterministic for a fixed config and seed.
TrainResult train(const TrainConfig& cfg, const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& val_set, const TrainOptions& opt = {});

struct EvalResult {
  ConfusionMatrix cm;
  IouReport report;
};

/// Predicted masks for every sample, batched.
std::vector<Mask> predict(const FamSegModel& model, const std::vector<SegmentationSample>& samples,
                          int batch_size = 8);
EvalResult evaluate(const FamSegModel& model, const std::vector<SegmentationSample>& samples, int batch_size = 8);

/// image [3,H,W] -> class mask.
Mask infer(const FamSegModel& model, const Tensor& image);

}  // namespace famseg
