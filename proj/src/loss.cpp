#include "famseg/loss.hpp"

#include <algorithm>
#include <cmath>

namespace famseg {

std::string to_string(LossKind kind) { return kind == LossKind::kCrossEntropy ? "cross_entropy" : "ce_plus_dice"; }

LossKind parse_loss(const std::string& s) {
  if (s == "cross_entropy" || s == "ce") return LossKind::kCrossEntropy;
  if (s == "ce_plus_dice") return LossKind::kCePlusDice;
  throw ConfigError("unknown loss '" + s + "' (expected cross_entropy or ce_plus_dice)");
}

namespace {

struct Layout {
  int n, c, h, w;
  std::size_t plane;
};

Layout check(const char* op, const Tensor& logits, const std::vector<Mask>& gt) {
  if (logits.rank() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(logits.shape()));
  Layout l{logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3), 0};
  l.plane = static_cast<std::size_t>(l.h) * l.w;
  if (static_cast<int>(gt.size()) != l.n) {
    throw ShapeError(std::string(op) + ": " + std::to_string(gt.size()) + " masks for a batch of " +
                     std::to_string(l.n));
  }
  for (const auto& m : gt) {
    if (m.height != l.h || m.width != l.w) {
      throw ShapeError(std::string(op) + ": mask " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                       " vs logits " + shape_str(logits.shape()));
    }
    for (auto v : m.labels) {
      if (v >= l.c) {
        throw DataError(std::string(op) + ": class " + std::to_string(v) + " out of range for " +
                        std::to_string(l.c) + " classes");
      }
    }
  }
  return l;
}

// Per-pixel softmax over the class axis.
std::vector<double> class_softmax(const Layout& l, std::span<const double> z) {
  std::vector<double> p(z.size());
  for (int b = 0; b < l.n; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * l.c * l.plane;
    for (std::size_t i = 0; i < l.plane; ++i) {
      double mx = z[base + i];
      for (int k = 1; k < l.c; ++k) mx = std::max(mx, z[base + k * l.plane + i]);
      double s = 0.0;
      for (int k = 0; k < l.c; ++k) s += (p[base + k * l.plane + i] = std::exp(z[base + k * l.plane + i] - mx));
      for (int k = 0; k < l.c; ++k) p[base + k * l.plane + i] /= s;
    }
  }
  return p;
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<Mask>& gt) {
  const Layout l = check("cross_entropy", logits, gt);
  const auto z = logits.data();
  const std::size_t count = static_cast<std::size_t>(l.n) * l.plane;
  double total = 0.0;
  for (int b = 0; b < l.n; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * l.c * l.plane;
    for (std::size_t i = 0; i < l.plane; ++i) {
      double mx = z[base + i];
      for (int k = 1; k < l.c; ++k) mx = std::max(mx, z[base + k * l.plane + i]);
      double s = 0.0;
      for (int k = 0; k < l.c; ++k) s += std::exp(z[base + k * l.plane + i] - mx);
      total += mx + std::log(s) - z[base + gt[b].labels[i] * l.plane + i];
    }
  }
  return detail::finish_op("cross_entropy", {1}, {total / count}, {logits}, [=](const Tensor&) -> BackwardFn {
    return [=](std::span<const double> g) {
      Tensor x = logits;
      auto gx = x.mutable_grad();
      const std::vector<double> p = class_softmax(l, x.data());
      const double s = g[0] / static_cast<double>(count);
      for (int b = 0; b < l.n; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * l.c * l.plane;
        for (int k = 0; k < l.c; ++k) {
          for (std::size_t i = 0; i < l.plane; ++i) {
            const std::size_t at = base + k * l.plane + i;
            gx[at] += s * (p[at] - (gt[b].labels[i] == k ? 1.0 : 0.0));
          }
        }
      }
    };
  });
}

Tensor dice_loss(const Tensor& logits, const std::vector<Mask>& gt) {
  const Layout l = check("dice_loss", logits, gt);
  if (l.c < 2) throw ShapeError("dice_loss: needs at least one foreground class");
  const std::vector<double> p = class_softmax(l, logits.data());
  constexpr double kSmooth = 1.0;
  const int fg = l.c - 1;
  // inter, sum_p, sum_g per foreground class
  std::vector<double> inter(l.c, 0.0), sp(l.c, 0.0), sg(l.c, 0.0);
  for (int b = 0; b < l.n; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * l.c * l.plane;
    for (int k = 1; k < l.c; ++k) {
      for (std::size_t i = 0; i < l.plane; ++i) {
        const double pk = p[base + k * l.plane + i];
        const double gk = gt[b].labels[i] == k ? 1.0 : 0.0;
        inter[k] += pk * gk;
        sp[k] += pk;
        sg[k] += gk;
      }
    }
  }
  double mean_dice = 0.0;
  for (int k = 1; k < l.c; ++k) mean_dice += (2.0 * inter[k] + kSmooth) / (sp[k] + sg[k] + kSmooth);
  mean_dice /= fg;
  return detail::finish_op("dice_loss", {1}, {1.0 - mean_dice}, {logits}, [=](const Tensor&) -> BackwardFn {
    return [=](std::span<const double> g) {
      Tensor x = logits;
      auto gx = x.mutable_grad();
      std::vector<double> dp(p.size(), 0.0);
      for (int b = 0; b < l.n; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * l.c * l.plane;
        for (int k = 1; k < l.c; ++k) {
          const double den = sp[k] + sg[k] + kSmooth;
          const double num = 2.0 * inter[k] + kSmooth;
          for (std::size_t i = 0; i < l.plane; ++i) {
            const double gk = gt[b].labels[i] == k ? 1.0 : 0.0;
            dp[base + k * l.plane + i] = -g[0] / fg * (2.0 * gk * den - num) / (den * den);
          }
        }
        for (std::size_t i = 0; i < l.plane; ++i) {
          double dot = 0.0;
          for (int k = 0; k < l.c; ++k) dot += p[base + k * l.plane + i] * dp[base + k * l.plane + i];
          for (int k = 0; k < l.c; ++k) {
            const std::size_t at = base + k * l.plane + i;
            gx[at] += p[at] * (dp[at] - dot);
          }
        }
      }
    };
  });
}

Tensor segmentation_loss(const Tensor& logits, const std::vector<Mask>& gt, LossKind kind) {
  Tensor ce = cross_entropy(logits, gt);
  if (kind == LossKind::kCrossEntropy) return ce;
  return add(ce, dice_loss(logits, gt));
}

}  // namespace famseg
