#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "famseg/decoder.hpp"
#include "famseg/model.hpp"

namespace famseg {

/// counts[gt][pred] pixel tallies.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void accumulate(const Mask& gt, const Mask& pred);
  void merge(const ConfusionMatrix& other);
  void add(int gt, int pred, std::uint64_t count = 1);

  int num_classes() const { return n_; }
  std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * n_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t row_sum(int c) const;
  std::uint64_t col_sum(int c) const;
  ConfusionMatrix transposed() const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int n_;
  std::vector<std::uint64_t> counts_;
};

struct IouReport {
  std::vector<double> per_class;  // NaN where the class is absent from gt and pred
  std::vector<bool> present;
  double miou = 0.0;              // mean over present classes
};

/// IoU_c = tp / (row_c + col_c - tp) over the whole matrix.
IouReport iou(const ConfusionMatrix& cm);

/// Plain-text table with BG, FL, FB, ... and mIoU columns, in percent.
std::string format_iou_table(const IouReport& report, const std::string& row_label);
std::vector<std::string> class_names(int num_classes);

struct CostRow {
  std::string block;
  std::int64_t k = 0;
  std::int64_t ho = 0;
  std::int64_t wo = 0;
  std::int64_t standard = 0;  // K*Ho*Wo*K
  std::int64_t ours = 0;      // 2*Ho*Wo*K, or 2*Ho*Wo*9 for the 3x3 row
};

struct CostReport {
  std::vector<CostRow> strip_rows;    // one per branch per strip block
  std::vector<CostRow> example_rows;  // K = 7 and 3x3 at Ho = Wo = 1
  std::int64_t params_formula = 0;
  std::int64_t params_enumerated = 0;
};

/// Closed-form parameter count of a model config, independent of the layer
/// constructors.
std::int64_t formula_param_count(const ModelConfig& cfg);

CostReport cost_report(const ModelConfig& cfg, int image_size);
std::string format_cost_report(const CostReport& report);

}  // namespace famseg
