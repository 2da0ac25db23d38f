#include "famseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace famseg {

ConfusionMatrix::ConfusionMatrix(int num_classes) : n_(num_classes) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(n_) * n_, 0);
}

void ConfusionMatrix::add(int gt, int pred, std::uint64_t count) {
  if (gt < 0 || gt >= n_ || pred < 0 || pred >= n_) {
    throw DataError("class pair (" + std::to_string(gt) + "," + std::to_string(pred) + ") outside " +
                    std::to_string(n_) + " classes");
  }
  counts_[static_cast<std::size_t>(gt) * n_ + pred] += count;
}

void ConfusionMatrix::accumulate(const Mask& gt, const Mask& pred) {
  if (gt.height != pred.height || gt.width != pred.width || gt.labels.size() != pred.labels.size()) {
    throw ShapeError("confusion matrix: gt " + std::to_string(gt.height) + "x" + std::to_string(gt.width) +
                     " vs pred " + std::to_string(pred.height) + "x" + std::to_string(pred.width));
  }
  for (std::size_t i = 0; i < gt.labels.size(); ++i) add(gt.labels[i], pred.labels[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ShapeError("confusion matrix: class count mismatch in merge");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(int c) const {
  std::uint64_t t = 0;
  for (int j = 0; j < n_; ++j) t += at(c, j);
  return t;
}

std::uint64_t ConfusionMatrix::col_sum(int c) const {
  std::uint64_t t = 0;
  for (int i = 0; i < n_; ++i) t += at(i, c);
  return t;
}

ConfusionMatrix ConfusionMatrix::transposed() const {
  ConfusionMatrix t(n_);
  for (int i = 0; i < n_; ++i) {
    for (int j = 0; j < n_; ++j) t.counts_[static_cast<std::size_t>(j) * n_ + i] = at(i, j);
  }
  return t;
}

IouReport iou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DataError("iou: confusion matrix is empty");
  IouReport r;
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t uni = cm.row_sum(c) + cm.col_sum(c) - tp;
    if (uni == 0) {
      r.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      r.present.push_back(false);
      continue;
    }
    const double v = static_cast<double>(tp) / static_cast<double>(uni);
    r.per_class.push_back(v);
    r.present.push_back(true);
    sum += v;
    ++present;
  }
  r.miou = sum / present;
  return r;
}

std::vector<std::string> class_names(int num_classes) {
  std::vector<std::string> names{"BG", "FL", "FB"};
  for (int c = 3; c < num_classes; ++c) names.push_back("C" + std::to_string(c));
  names.resize(num_classes);
  return names;
}

std::string format_iou_table(const IouReport& report, const std::string& row_label) {
  const auto names = class_names(static_cast<int>(report.per_class.size()));
  std::ostringstream os;
  os << "# IoU from the dataset-level confusion matrix; absent classes are excluded from mIoU\n";
  os << std::left << std::setw(12) << "Item";
  for (const auto& n : names) os << std::right << std::setw(8) << n;
  os << std::setw(8) << "mIoU" << '\n';
  os << std::left << std::setw(12) << row_label << std::right << std::fixed << std::setprecision(2);
  for (double v : report.per_class) {
    if (std::isnan(v)) {
      os << std::setw(8) << "-";
    } else {
      os << std::setw(8) << 100.0 * v;
    }
  }
  os << std::setw(8) << 100.0 * report.miou << '\n';
  return os.str();
}

namespace {

std::int64_t conv_params(std::int64_t in, std::int64_t out, std::int64_t k, bool bias = true) {
  return out * in * k * k + (bias ? out : 0);
}

std::int64_t cna_params(std::int64_t in, std::int64_t out, std::int64_t k) {
  return conv_params(in, out, k, false) + 2 * out;
}

std::int64_t mamba_params(std::int64_t c, const MambaSpec& spec) {
  const std::int64_t h = spec.resolved_heads(static_cast<int>(c));
  const std::int64_t n = spec.state_dim;
  return h * c + h + 2 * n * c + h + c * c + c;
}

}  // namespace

std::int64_t formula_param_count(const ModelConfig& cfg) {
  cfg.validate();
  const auto& e = cfg.encoder;
  const auto& ch = e.stage_channels;
  std::int64_t total = 0;
  const std::int64_t stem_mid = std::max(8, ch[0] / 2);
  total += cna_params(cfg.in_channels, stem_mid, 3) + cna_params(stem_mid, ch[0], 3);
  for (int s = 0; s < 4; ++s) {
    const std::int64_t c = ch[s];
    const std::int64_t in = s == 0 ? ch[0] : ch[s - 1];
    if (s < e.strip_stages) {
      if (s > 0) total += cna_params(in, c, 3);
      std::int64_t strip = 25 * c + c * c + c;
      for (int k : e.branch_kernels) strip += 2 * c * k;
      const std::int64_t hidden = c * e.mlp_ratio;
      total += e.stage_depths[s] * (4 * c + strip + conv_params(c, hidden, 1) + conv_params(hidden, c, 1));
    } else {
      const std::int64_t mid = std::max<std::int64_t>(8, c / 4);
      for (int d = 0; d < e.stage_depths[s]; ++d) {
        const bool conv_block = d == 0 && s > 0;
        const std::int64_t bin = conv_block ? in : c;
        total += cna_params(bin, mid, 1) + cna_params(mid, mid, 3) + cna_params(mid, c, 1);
        if (conv_block) {
          total += conv_params(bin, c, 1);
        } else if (e.mamba) {
          total += mamba_params(c, e.mamba_spec);
        }
      }
    }
  }
  std::int64_t fused = 0;
  for (int s = 4 - e.fuse_last_n; s < 4; ++s) fused += ch[s];
  total += 10 * fused + conv_params(fused, ch[3], 1);
  if (e.hamburger.enabled) total += conv_params(ch[3], ch[3], 1);

  const auto& d = cfg.decoder;
  const std::int64_t dc = d.refine_channels;
  const int deepest = d.fuse_stages.back();
  total += conv_params(ch[deepest - 1], dc, 1);
  const std::int64_t cd = std::min<std::int64_t>(dc, std::max<std::int64_t>(8, dc / 4));
  const std::int64_t taps = 4LL * d.k_up * d.k_up;
  const std::int64_t fam = conv_params(dc, cd, 1) + conv_params(cd, taps, d.k_enc);
  for (int level = 0, stride = 1 << deepest; level <= deepest; ++level, stride /= 2) {
    total += fam;
    if (stride >= 4) {
      total += cna_params(dc, dc, 3);
      const int stage = [&] {
        int s = 0;
        while ((1 << (s + 2)) < stride) ++s;
        return s + 1;
      }();
      const bool listed = std::find(d.fuse_stages.begin(), d.fuse_stages.end(), stage) != d.fuse_stages.end();
      if (d.fusion && listed) total += conv_params(ch[stage - 1], dc, 1);
    }
  }
  total += conv_params(dc, d.num_classes, 1);
  return total;
}

CostReport cost_report(const ModelConfig& cfg, int image_size) {
  cfg.validate();
  if (image_size < 32 || image_size % 32 != 0) {
    throw ConfigError("cost: image size must be a positive multiple of 32");
  }
  CostReport r;
  const auto& e = cfg.encoder;
  for (int s = 0; s < e.strip_stages; ++s) {
    const std::int64_t side = image_size >> (s + 2);
    for (int u = 0; u < e.stage_depths[s]; ++u) {
      for (int k : e.branch_kernels) {
        const StripCost c = strip_param_count(k, side, side);
        r.strip_rows.push_back({"stage" + std::to_string(s + 1) + ".unit" + std::to_string(u) + ".k" +
                                    std::to_string(k),
                                k, side, side, c.standard, c.strip});
      }
    }
  }
  const StripCost k7 = strip_param_count(7, 1, 1);
  r.example_rows.push_back({"example.k7", 7, 1, 1, k7.standard, k7.strip});
  r.example_rows.push_back({"example.3x3", 3, 1, 1, 3 * 1 * 1 * 3, 2 * 1 * 1 * 9});
  r.params_formula = formula_param_count(cfg);
  FamSegModel model(cfg, 0);
  r.params_enumerated = static_cast<std::int64_t>(model.params().total_numel());
  return r;
}

std::string format_cost_report(const CostReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "block" << std::right << std::setw(4) << "K" << std::setw(6) << "Ho"
     << std::setw(6) << "Wo" << std::setw(12) << "standard" << std::setw(12) << "strip" << std::setw(10)
     << "ratio" << std::setw(8) << "2/K" << '\n';
  auto row = [&](const CostRow& r) {
    os << std::left << std::setw(24) << r.block << std::right << std::setw(4) << r.k << std::setw(6) << r.ho
       << std::setw(6) << r.wo << std::setw(12) << r.standard << std::setw(12) << r.ours << std::fixed
       << std::setprecision(4) << std::setw(10) << static_cast<double>(r.ours) / static_cast<double>(r.standard)
       << std::setw(8) << 2.0 / static_cast<double>(r.k) << '\n';
  };
  for (const auto& r : report.strip_rows) row(r);
  os << "examples (Ho = Wo = 1; the 3x3 row counts 2*Ho*Wo*9)\n";
  for (const auto& r : report.example_rows) row(r);
  os << "parameters: formula " << report.params_formula << ", enumerated " << report.params_enumerated
     << (report.params_formula == report.params_enumerated ? " (match)" : " (MISMATCH)") << '\n';
  return os.str();
}

}  // namespace famseg
