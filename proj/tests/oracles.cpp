#include "oracles.hpp"

#include <cmath>
#include <limits>
#include <set>
#include <utility>

namespace famseg::oracle {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo, double hi, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(v), requires_grad);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const std::vector<double>& bias, int stride_h, int stride_w,
              int pad_h, int pad_w, int groups) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h + 2 * pad_h - kh) / stride_h + 1;
  const int wo = (wd + 2 * pad_w - kw) / stride_w + 1;
  const int og = o / groups;
  std::vector<double> out(static_cast<std::size_t>(n) * o * ho * wo, 0.0);
  auto xv = [&](int b, int ch, int r, int col) {
    if (r < 0 || r >= h || col < 0 || col >= wd) return 0.0;
    return x.data()[((static_cast<std::size_t>(b) * c + ch) * h + r) * wd + col];
  };
  for (int b = 0; b < n; ++b)
    for (int oc = 0; oc < o; ++oc)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double acc = bias.empty() ? 0.0 : bias[oc];
          const int g = oc / og;
          for (int ic = 0; ic < cg; ++ic)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) {
                acc += w.data()[((static_cast<std::size_t>(oc) * cg + ic) * kh + u) * kw + v] *
                       xv(b, g * cg + ic, i * stride_h - pad_h + u, j * stride_w - pad_w + v);
              }
          out[((static_cast<std::size_t>(b) * o + oc) * ho + i) * wo + j] = acc;
        }
  return Tensor::from({n, o, ho, wo}, std::move(out));
}

std::vector<double> scan_materialized(const std::vector<double>& x, const std::vector<double>& decay,
                                      const std::vector<double>& input_map, const std::vector<double>& readout,
                                      const std::vector<double>& skip, int len, int d, int heads, int ns) {
  const int pw = d / heads;
  std::vector<double> y(static_cast<std::size_t>(len) * d, 0.0);
  for (int t = 0; t < len; ++t)
    for (int ch = 0; ch < d; ++ch) {
      const int h = ch / pw;
      double acc = skip[h] * x[static_cast<std::size_t>(t) * d + ch];
      for (int s = 0; s <= t; ++s) {
        double cb = 0.0;
        for (int n = 0; n < ns; ++n) cb += readout[static_cast<std::size_t>(t) * ns + n] * input_map[static_cast<std::size_t>(s) * ns + n];
        double prod = 1.0;
        for (int r = s + 1; r <= t; ++r) prod *= decay[static_cast<std::size_t>(r) * heads + h];
        acc += cb * prod * x[static_cast<std::size_t>(s) * d + ch];
      }
      y[static_cast<std::size_t>(t) * d + ch] = acc;
    }
  return y;
}

Tensor mamba_filter(const Tensor& x, const std::vector<ScanDirection>& dirs, const MambaParams& p) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int heads = static_cast<int>(p.skip.numel());
  const int ns = p.input_weight.dim(0);
  const int len = h * w;
  auto at = [&](int b, int ch, std::size_t pos) {
    return x.data()[(static_cast<std::size_t>(b) * c + ch) * len + pos];
  };
  std::vector<double> merged(x.numel(), 0.0);
  for (int b = 0; b < n; ++b) {
    for (ScanDirection dir : dirs) {
      std::vector<std::size_t> order;
      const bool vertical = dir == ScanDirection::kTopToBottom || dir == ScanDirection::kBottomToTop;
      if (vertical) {
        for (int col = 0; col < w; ++col)
          for (int r = 0; r < h; ++r) order.push_back(static_cast<std::size_t>(r) * w + col);
      } else {
        for (int i = 0; i < len; ++i) order.push_back(i);
      }
      if (dir == ScanDirection::kRightToLeft || dir == ScanDirection::kBottomToTop) {
        order = std::vector<std::size_t>(order.rbegin(), order.rend());
      }
      std::vector<double> xs(static_cast<std::size_t>(len) * c), a(static_cast<std::size_t>(len) * heads),
          bm(static_cast<std::size_t>(len) * ns), cm(static_cast<std::size_t>(len) * ns);
      for (int t = 0; t < len; ++t) {
        const std::size_t pos = order[t];
        for (int ch = 0; ch < c; ++ch) xs[static_cast<std::size_t>(t) * c + ch] = at(b, ch, pos);
        for (int hd = 0; hd < heads; ++hd) {
          double z = p.decay_bias.data()[hd];
          for (int ch = 0; ch < c; ++ch) z += p.decay_weight.data()[static_cast<std::size_t>(hd) * c + ch] * at(b, ch, pos);
          a[static_cast<std::size_t>(t) * heads + hd] = 1.0 / (1.0 + std::exp(-z));
        }
        for (int k = 0; k < ns; ++k) {
          double zb = 0.0, zc = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            zb += p.input_weight.data()[static_cast<std::size_t>(k) * c + ch] * at(b, ch, pos);
            zc += p.readout_weight.data()[static_cast<std::size_t>(k) * c + ch] * at(b, ch, pos);
          }
          bm[static_cast<std::size_t>(t) * ns + k] = zb;
          cm[static_cast<std::size_t>(t) * ns + k] = zc;
        }
      }
      const std::vector<double> skip(p.skip.data().begin(), p.skip.data().end());
      const auto ys = scan_materialized(xs, a, bm, cm, skip, len, c, heads, ns);
      for (int t = 0; t < len; ++t)
        for (int ch = 0; ch < c; ++ch)
          merged[(static_cast<std::size_t>(b) * c + ch) * len + order[t]] +=
              ys[static_cast<std::size_t>(t) * c + ch] / static_cast<double>(dirs.size());
    }
  }
  const Tensor m = Tensor::from(x.shape(), std::move(merged));
  const std::vector<double> bias(p.proj_bias.data().begin(), p.proj_bias.data().end());
  return conv2d(m, p.proj_weight, bias, 1, 1, 0, 0, 1);
}

Tensor box_then_nearest(const Tensor& x, int k, int scale) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int r = k / 2;
  std::vector<double> box(x.numel(), 0.0);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          double acc = 0.0;
          for (int u = -r; u <= r; ++u)
            for (int v = -r; v <= r; ++v) {
              const int ii = i + u, jj = j + v;
              if (ii >= 0 && ii < h && jj >= 0 && jj < w) {
                acc += x.data()[((static_cast<std::size_t>(b) * c + ch) * h + ii) * w + jj];
              }
            }
          box[((static_cast<std::size_t>(b) * c + ch) * h + i) * w + j] = acc / (k * k);
        }
  const int ho = h * scale, wo = w * scale;
  std::vector<double> out(static_cast<std::size_t>(n) * c * ho * wo);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j)
          out[((static_cast<std::size_t>(b) * c + ch) * ho + i) * wo + j] =
              box[((static_cast<std::size_t>(b) * c + ch) * h + i / scale) * w + j / scale];
  return Tensor::from({n, c, ho, wo}, std::move(out));
}

std::vector<double> set_iou(const std::vector<Mask>& gt, const std::vector<Mask>& pred, int num_classes) {
  std::vector<double> out(num_classes);
  for (int cls = 0; cls < num_classes; ++cls) {
    std::set<std::pair<std::size_t, std::size_t>> g, p;
    for (std::size_t m = 0; m < gt.size(); ++m)
      for (std::size_t i = 0; i < gt[m].labels.size(); ++i) {
        if (gt[m].labels[i] == cls) g.insert({m, i});
        if (pred[m].labels[i] == cls) p.insert({m, i});
      }
    std::set<std::pair<std::size_t, std::size_t>> uni = g;
    uni.insert(p.begin(), p.end());
    std::size_t inter = 0;
    for (const auto& e : g) inter += p.count(e);
    out[cls] = uni.empty() ? std::numeric_limits<double>::quiet_NaN()
                           : static_cast<double>(inter) / static_cast<double>(uni.size());
  }
  return out;
}

double set_miou(const std::vector<double>& per_class) {
  double s = 0.0;
  int n = 0;
  for (double v : per_class) {
    if (std::isnan(v)) continue;
    s += v;
    ++n;
  }
  return s / n;
}

Mask random_mask(int h, int w, int num_classes, Rng& rng) {
  Mask m{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w)};
  for (auto& v : m.labels) v = static_cast<std::uint8_t>(rng.uniform_int(0, num_classes - 1));
  return m;
}

}  // namespace famseg::oracle
