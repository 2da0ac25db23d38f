#include "famseg/mamba.hpp"

#include <algorithm>
#include <cmath>

namespace famseg {

std::string to_string(ScanDirection d) {
  switch (d) {
    case ScanDirection::kLeftToRight:
      return "lr";
    case ScanDirection::kRightToLeft:
      return "rl";
    case ScanDirection::kTopToBottom:
      return "tb";
    case ScanDirection::kBottomToTop:
      return "bt";
  }
  return "?";
}

ScanDirection parse_scan_direction(const std::string& s) {
  if (s == "lr") return ScanDirection::kLeftToRight;
  if (s == "rl") return ScanDirection::kRightToLeft;
  if (s == "tb") return ScanDirection::kTopToBottom;
  if (s == "bt") return ScanDirection::kBottomToTop;
  throw ConfigError("unknown scan direction '" + s + "' (expected lr, rl, tb or bt)");
}

std::vector<std::size_t> scan_order(int height, int width, ScanDirection d) {
  const std::size_t total = static_cast<std::size_t>(height) * width;
  std::vector<std::size_t> order;
  order.reserve(total);
  const bool vertical = d == ScanDirection::kTopToBottom || d == ScanDirection::kBottomToTop;
  if (vertical) {
    for (int c = 0; c < width; ++c)
      for (int r = 0; r < height; ++r) order.push_back(static_cast<std::size_t>(r) * width + c);
  } else {
    for (std::size_t i = 0; i < total; ++i) order.push_back(i);
  }
  if (d == ScanDirection::kRightToLeft || d == ScanDirection::kBottomToTop) {
    std::reverse(order.begin(), order.end());
  }
  return order;
}

namespace {

Tensor scan_batched(const Tensor& x, const SSMParams& p) {
  const int bt = x.dim(0), len = x.dim(1), d = x.dim(2);
  const int heads = p.skip.numel() > 0 ? static_cast<int>(p.skip.numel()) : 0;
  if (heads < 1 || d % heads != 0) {
    throw ShapeError("selective_scan: width " + std::to_string(d) + " not divisible into " +
                     std::to_string(heads) + " heads");
  }
  const int ns = p.input_map.dim(-1);
  if (p.decay.shape() != Shape{bt, len, heads} || p.input_map.shape() != Shape{bt, len, ns} ||
      p.readout.shape() != Shape{bt, len, ns}) {
    throw ShapeError("selective_scan: parameter shapes " + shape_str(p.decay.shape()) + ", " +
                     shape_str(p.input_map.shape()) + ", " + shape_str(p.readout.shape()) +
                     " do not match input " + shape_str(x.shape()));
  }
  if (ns < 1) throw ShapeError("selective_scan: state_dim must be at least 1");
  const int pw = d / heads;
  const auto xd = x.data();
  const auto ad = p.decay.data();
  const auto bd = p.input_map.data();
  const auto cd = p.readout.data();
  const auto dd = p.skip.data();

  // states[((b*heads + h)*len + t)*ns*pw + n*pw + q]
  const std::size_t state_sz = static_cast<std::size_t>(ns) * pw;
  std::vector<double> states(static_cast<std::size_t>(bt) * heads * len * state_sz);
  std::vector<double> out(xd.size());
  for (int b = 0; b < bt; ++b) {
    for (int h = 0; h < heads; ++h) {
      double* prev = nullptr;
      for (int t = 0; t < len; ++t) {
        double* s = states.data() + ((static_cast<std::size_t>(b) * heads + h) * len + t) * state_sz;
        const double a = ad[(static_cast<std::size_t>(b) * len + t) * heads + h];
        const double* bv = bd.data() + (static_cast<std::size_t>(b) * len + t) * ns;
        const double* cv = cd.data() + (static_cast<std::size_t>(b) * len + t) * ns;
        const double* xv = xd.data() + (static_cast<std::size_t>(b) * len + t) * d + h * pw;
        double* yv = out.data() + (static_cast<std::size_t>(b) * len + t) * d + h * pw;
        for (int q = 0; q < pw; ++q) yv[q] = dd[h] * xv[q];
        for (int n = 0; n < ns; ++n) {
          double* row = s + static_cast<std::size_t>(n) * pw;
          const double* prow = prev != nullptr ? prev + static_cast<std::size_t>(n) * pw : nullptr;
          for (int q = 0; q < pw; ++q) {
            row[q] = (prow != nullptr ? a * prow[q] : 0.0) + bv[n] * xv[q];
            yv[q] += cv[n] * row[q];
          }
        }
        for (int q = 0; q < pw; ++q) {
          if (!std::isfinite(yv[q])) {
            throw NumericError("selective_scan: non-finite state at step " + std::to_string(t));
          }
        }
        prev = s;
      }
    }
  }

  return detail::finish_op(
      "selective_scan", x.shape(), std::move(out), {x, p.decay, p.input_map, p.readout, p.skip},
      [&](const Tensor&) {
        return BackwardFn([x, p, bt, len, d, heads, ns, pw, state_sz,
                           states = std::move(states)](std::span<const double> go) {
          const auto xd = x.data();
          const auto ad = p.decay.data();
          const auto bd = p.input_map.data();
          const auto cd = p.readout.data();
          const auto dd = p.skip.data();
          std::vector<double> gx(xd.size(), 0.0), ga(ad.size(), 0.0), gb(bd.size(), 0.0), gc(cd.size(), 0.0),
              gd(dd.size(), 0.0);
          std::vector<double> g(state_sz), carry(state_sz);
          for (int b = 0; b < bt; ++b) {
            for (int h = 0; h < heads; ++h) {
              std::fill(carry.begin(), carry.end(), 0.0);
              for (int t = len - 1; t >= 0; --t) {
                const std::size_t tok = static_cast<std::size_t>(b) * len + t;
                const double* s = states.data() + ((static_cast<std::size_t>(b) * heads + h) * len + t) * state_sz;
                const double* sprev = t > 0 ? s - state_sz : nullptr;
                const double a = ad[tok * heads + h];
                const double* bv = bd.data() + tok * ns;
                const double* cv = cd.data() + tok * ns;
                const double* xv = xd.data() + tok * d + h * pw;
                const double* dy = go.data() + tok * d + h * pw;
                double* dx = gx.data() + tok * d + h * pw;
                double da = 0.0;
                for (int q = 0; q < pw; ++q) {
                  gd[h] += xv[q] * dy[q];
                  dx[q] += dd[h] * dy[q];
                }
                for (int n = 0; n < ns; ++n) {
                  const std::size_t r = static_cast<std::size_t>(n) * pw;
                  double dc = 0.0, db = 0.0;
                  for (int q = 0; q < pw; ++q) {
                    g[r + q] = carry[r + q] + cv[n] * dy[q];
                    dc += s[r + q] * dy[q];
                    db += g[r + q] * xv[q];
                    dx[q] += g[r + q] * bv[n];
                    if (sprev != nullptr) da += g[r + q] * sprev[r + q];
                  }
                  gc[tok * ns + n] += dc;
                  gb[tok * ns + n] += db;
                }
                ga[tok * heads + h] += da;
                for (std::size_t i = 0; i < state_sz; ++i) carry[i] = a * g[i];
              }
            }
          }
          auto flush = [](Tensor t, const std::vector<double>& src) {
            if (!t.requires_grad()) return;
            auto dst = t.mutable_grad();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
          };
          flush(x, gx);
          flush(p.decay, ga);
          flush(p.input_map, gb);
          flush(p.readout, gc);
          flush(p.skip, gd);
        });
      });
}

Tensor with_batch(const Tensor& t) {
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  return reshape(t, s);
}

// [N,C,H,W] -> [N,L,C] following `order`.
Tensor to_sequence(const Tensor& x, const std::vector<std::size_t>& order) {
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int len = static_cast<int>(order.size());
  std::vector<std::size_t> index(static_cast<std::size_t>(n) * len * c);
  std::size_t flat = 0;
  for (int b = 0; b < n; ++b)
    for (int t = 0; t < len; ++t)
      for (int ch = 0; ch < c; ++ch) index[flat++] = (static_cast<std::size_t>(b) * c + ch) * plane + order[t];
  return gather(x, std::move(index), {n, len, c});
}

// [N,L,C] -> [N,C,H,W], inverse of to_sequence.
Tensor from_sequence(const Tensor& y, const std::vector<std::size_t>& order, int h, int w) {
  const int n = y.dim(0), len = y.dim(1), c = y.dim(2);
  std::vector<std::size_t> step_of(order.size());
  for (std::size_t t = 0; t < order.size(); ++t) step_of[order[t]] = t;
  std::vector<std::size_t> index(static_cast<std::size_t>(n) * c * h * w);
  std::size_t flat = 0;
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t pos = 0; pos < order.size(); ++pos)
        index[flat++] = (static_cast<std::size_t>(b) * len + step_of[pos]) * c + ch;
  return gather(y, std::move(index), {n, c, h, w});
}

}  // namespace

Tensor selective_scan(const Tensor& x, const SSMParams& p) {
  if (x.rank() == 2) {
    if (x.dim(0) < 1) throw ShapeError("selective_scan: empty sequence");
    SSMParams q{with_batch(p.decay), with_batch(p.input_map), with_batch(p.readout), p.skip};
    Tensor y = scan_batched(with_batch(x), q);
    return reshape(y, x.shape());
  }
  if (x.rank() != 3) throw ShapeError("selective_scan: expected [L,d] or [B,L,d], got " + shape_str(x.shape()));
  return scan_batched(x, p);
}

int MambaSpec::resolved_heads(int channels) const {
  const int h = heads > 0 ? heads : std::max(1, channels / 16);
  if (channels % h != 0) {
    throw ConfigError("mamba: " + std::to_string(channels) + " channels not divisible into " +
                      std::to_string(h) + " heads");
  }
  return h;
}

MambaParams MambaParams::create(ParamStore& store, const std::string& name, int channels, const MambaSpec& spec,
                                Rng& rng) {
  if (spec.state_dim < 1) throw ConfigError("mamba: state_dim must be at least 1");
  const int heads = spec.resolved_heads(channels);
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  MambaParams m;
  m.decay_weight = store.add_normal(name + ".decay.weight", {heads, channels, 1, 1}, 0.1 * s, rng);
  m.decay_bias = store.add_constant(name + ".decay.bias", {heads}, 1.0);
  m.input_weight = store.add_normal(name + ".input.weight", {spec.state_dim, channels, 1, 1}, s, rng);
  m.readout_weight = store.add_normal(name + ".readout.weight", {spec.state_dim, channels, 1, 1}, s, rng);
  m.skip = store.add_constant(name + ".skip", {heads}, 1.0);
  // Starts as an identity map so a fresh filter does not disturb the shortcut.
  std::vector<double> eye(static_cast<std::size_t>(channels) * channels, 0.0);
  for (int c = 0; c < channels; ++c) eye[static_cast<std::size_t>(c) * channels + c] = 1.0;
  m.proj_weight = store.add_constant(name + ".proj.weight", {channels, channels, 1, 1}, 0.0);
  std::copy(eye.begin(), eye.end(), m.proj_weight.mutable_data().begin());
  m.proj_bias = store.add_constant(name + ".proj.bias", {channels}, 0.0);
  return m;
}

Tensor mamba_filter_2d(const Tensor& x, const ScanDirections& dirs, const MambaParams& p) {
  if (dirs.directions.empty()) throw ConfigError("mamba_filter_2d: empty direction set");
  if (x.rank() != 4) throw ShapeError("mamba_filter_2d: expected NCHW input, got " + shape_str(x.shape()));
  const int h = x.dim(2), w = x.dim(3);
  const Tensor decay = sigmoid(conv2d(x, p.decay_weight, p.decay_bias, {}));
  const Tensor input_map = conv2d(x, p.input_weight, {});
  const Tensor readout = conv2d(x, p.readout_weight, {});

  std::vector<Tensor> merged;
  for (ScanDirection d : dirs.directions) {
    const auto order = scan_order(h, w, d);
    SSMParams sp{to_sequence(decay, order), to_sequence(input_map, order), to_sequence(readout, order), p.skip};
    merged.push_back(from_sequence(selective_scan(to_sequence(x, order), sp), order, h, w));
  }
  Tensor avg = merged.size() == 1 ? merged.front()
                                  : scale(add_n(merged), 1.0 / static_cast<double>(merged.size()));
  return conv2d(avg, p.proj_weight, p.proj_bias, {});
}

Tensor bottle_shortcut(const Tensor& x, ShortcutFilter flag, const MambaParams* p, const ScanDirections& dirs) {
  if (flag == ShortcutFilter::kIdentity) return x;
  if (p == nullptr) throw ConfigError("bottle_shortcut: mamba filter requested without parameters");
  return mamba_filter_2d(x, dirs, *p);
}

}  // namespace famseg
