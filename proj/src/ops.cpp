#include "famseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace famseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

void require_rank(const char* op, const Tensor& x, int rank) {
  require(x.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                shape_str(x.shape()));
}

// Accumulates `g` into the gradient of `t` when it is tracked.
template <typename F>
void accumulate(Tensor t, F&& fill) {
  if (!t.requires_grad()) return;
  fill(t.mutable_grad());
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  return detail::finish_op(op, x.shape(), std::move(out), {x}, [=](const Tensor& y) {
    return BackwardFn([x, y, deriv](std::span<const double> go) {
      accumulate(x, [&](std::span<double> gx) {
        const auto xv = x.data();
        const auto yv = y.data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * deriv(xv[i], yv[i]);
      });
    });
  });
}

struct ConvGeom {
  int n, c, h, w;
  int o, cg, og, kh, kw;
  int ho, wo;
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& weight, const Conv2dOptions& opt) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d weight", weight, 4);
  ConvGeom g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.o = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  require(opt.groups >= 1 && g.c % opt.groups == 0,
          "conv2d: input channels " + std::to_string(g.c) + " not divisible by groups " +
              std::to_string(opt.groups));
  require(g.o % opt.groups == 0, "conv2d: output channels " + std::to_string(g.o) +
                                     " not divisible by groups " + std::to_string(opt.groups));
  g.cg = g.c / opt.groups;
  g.og = g.o / opt.groups;
  require(weight.dim(1) == g.cg, "conv2d: weight " + shape_str(weight.shape()) + " expects " +
                                     std::to_string(weight.dim(1)) + " channels per group, input gives " +
                                     std::to_string(g.cg));
  require(opt.stride_h >= 1 && opt.stride_w >= 1 && opt.pad_h >= 0 && opt.pad_w >= 0,
          "conv2d: invalid stride/padding");
  const int eh = g.h + 2 * opt.pad_h - g.kh;
  const int ew = g.w + 2 * opt.pad_w - g.kw;
  require(eh >= 0 && ew >= 0, "conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                                  " larger than padded input " + shape_str(x.shape()));
  g.ho = eh / opt.stride_h + 1;
  g.wo = ew / opt.stride_w + 1;
  return g;
}

// Valid output column range [lo, hi) for a kernel tap offset.
inline void tap_range(int out_len, int in_len, int stride, int pad, int tap, int& lo, int& hi) {
  // need 0 <= o*stride - pad + tap < in_len
  const int num = pad - tap;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  const int top = in_len - 1 + pad - tap;  // o*stride <= top
  hi = top < 0 ? 0 : std::min(out_len, top / stride + 1);
  if (hi < lo) hi = lo;
}

void im2col(const double* in, const ConvGeom& g, const Conv2dOptions& opt, int c0, double* col) {
  const int plane = g.ho * g.wo;
  for (int c = 0; c < g.cg; ++c) {
    const double* src = in + static_cast<std::size_t>(c0 + c) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        double* dst = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * plane;
        std::fill(dst, dst + plane, 0.0);
        int r0, r1, q0, q1;
        tap_range(g.ho, g.h, opt.stride_h, opt.pad_h, ki, r0, r1);
        tap_range(g.wo, g.w, opt.stride_w, opt.pad_w, kj, q0, q1);
        for (int r = r0; r < r1; ++r) {
          const double* row = src + static_cast<std::size_t>(r * opt.stride_h - opt.pad_h + ki) * g.w;
          double* drow = dst + static_cast<std::size_t>(r) * g.wo;
          for (int q = q0; q < q1; ++q) drow[q] = row[q * opt.stride_w - opt.pad_w + kj];
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeom& g, const Conv2dOptions& opt, int c0, double* in_grad) {
  const int plane = g.ho * g.wo;
  for (int c = 0; c < g.cg; ++c) {
    double* dst = in_grad + static_cast<std::size_t>(c0 + c) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const double* src = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * plane;
        int r0, r1, q0, q1;
        tap_range(g.ho, g.h, opt.stride_h, opt.pad_h, ki, r0, r1);
        tap_range(g.wo, g.w, opt.stride_w, opt.pad_w, kj, q0, q1);
        for (int r = r0; r < r1; ++r) {
          double* row = dst + static_cast<std::size_t>(r * opt.stride_h - opt.pad_h + ki) * g.w;
          const double* srow = src + static_cast<std::size_t>(r) * g.wo;
          for (int q = q0; q < q1; ++q) row[q * opt.stride_w - opt.pad_w + kj] += srow[q];
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g, const Conv2dOptions& opt) {
  return g.kh == 1 && g.kw == 1 && opt.stride_h == 1 && opt.stride_w == 1 && opt.pad_h == 0 && opt.pad_w == 0;
}

// Depthwise: one input and one output channel per group.
void depthwise_forward(const double* in, const double* w, const ConvGeom& g, const Conv2dOptions& opt,
                       double* out) {
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.c; ++c) {
      const double* src = in + (static_cast<std::size_t>(n) * g.c + c) * g.h * g.w;
      double* dst = out + (static_cast<std::size_t>(n) * g.o + c) * g.ho * g.wo;
      const double* wc = w + static_cast<std::size_t>(c) * g.kh * g.kw;
      for (int ki = 0; ki < g.kh; ++ki) {
        int r0, r1;
        tap_range(g.ho, g.h, opt.stride_h, opt.pad_h, ki, r0, r1);
        for (int kj = 0; kj < g.kw; ++kj) {
          const double wv = wc[ki * g.kw + kj];
          int q0, q1;
          tap_range(g.wo, g.w, opt.stride_w, opt.pad_w, kj, q0, q1);
          for (int r = r0; r < r1; ++r) {
            const double* row = src + static_cast<std::size_t>(r * opt.stride_h - opt.pad_h + ki) * g.w +
                                (kj - opt.pad_w);
            double* drow = dst + static_cast<std::size_t>(r) * g.wo;
            if (opt.stride_w == 1) {
              for (int q = q0; q < q1; ++q) drow[q] += wv * row[q];
            } else {
              for (int q = q0; q < q1; ++q) drow[q] += wv * row[q * opt.stride_w];
            }
          }
        }
      }
    }
  }
}

void depthwise_backward(const double* in, const double* w, const double* go, const ConvGeom& g,
                        const Conv2dOptions& opt, double* gin, double* gw) {
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.c; ++c) {
      const double* src = in + (static_cast<std::size_t>(n) * g.c + c) * g.h * g.w;
      const double* gsrc = go + (static_cast<std::size_t>(n) * g.o + c) * g.ho * g.wo;
      double* gdst = gin != nullptr ? gin + (static_cast<std::size_t>(n) * g.c + c) * g.h * g.w : nullptr;
      const double* wc = w + static_cast<std::size_t>(c) * g.kh * g.kw;
      double* gwc = gw != nullptr ? gw + static_cast<std::size_t>(c) * g.kh * g.kw : nullptr;
      for (int ki = 0; ki < g.kh; ++ki) {
        int r0, r1;
        tap_range(g.ho, g.h, opt.stride_h, opt.pad_h, ki, r0, r1);
        for (int kj = 0; kj < g.kw; ++kj) {
          const double wv = wc[ki * g.kw + kj];
          int q0, q1;
          tap_range(g.wo, g.w, opt.stride_w, opt.pad_w, kj, q0, q1);
          double acc = 0.0;
          for (int r = r0; r < r1; ++r) {
            const std::size_t off = static_cast<std::size_t>(r * opt.stride_h - opt.pad_h + ki) * g.w +
                                    (kj - opt.pad_w);
            const double* grow = gsrc + static_cast<std::size_t>(r) * g.wo;
            for (int q = q0; q < q1; ++q) {
              const std::size_t idx = off + static_cast<std::size_t>(q) * opt.stride_w;
              acc += grow[q] * src[idx];
              if (gdst != nullptr) gdst[idx] += wv * grow[q];
            }
          }
          if (gwc != nullptr) gwc[ki * g.kw + kj] += acc;
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt) {
  const ConvGeom g = conv_geometry(x, weight, opt);
  if (bias.defined()) {
    require(bias.numel() == static_cast<std::size_t>(g.o),
            "conv2d: bias of shape " + shape_str(bias.shape()) + " for " + std::to_string(g.o) + " outputs");
  }
  const bool depthwise = g.cg == 1 && g.og == 1;
  const bool pointwise = is_pointwise(g, opt);
  const int k_elems = g.cg * g.kh * g.kw;
  const int plane = g.ho * g.wo;
  std::vector<double> out(static_cast<std::size_t>(g.n) * g.o * plane, 0.0);

  const double* in = x.data().data();
  const double* wd = weight.data().data();
  if (depthwise) {
    depthwise_forward(in, wd, g, opt, out.data());
  } else {
    std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(k_elems) * plane);
    for (int n = 0; n < g.n; ++n) {
      for (int gr = 0; gr < opt.groups; ++gr) {
        const double* colp;
        if (pointwise) {
          colp = in + (static_cast<std::size_t>(n) * g.c + gr * g.cg) * plane;
        } else {
          im2col(in + static_cast<std::size_t>(n) * g.c * g.h * g.w, g, opt, gr * g.cg, col.data());
          colp = col.data();
        }
        ConstMapMat wm(wd + static_cast<std::size_t>(gr) * g.og * k_elems, g.og, k_elems);
        ConstMapMat cm(colp, k_elems, plane);
        MapMat om(out.data() + (static_cast<std::size_t>(n) * g.o + gr * g.og) * plane, g.og, plane);
        om.noalias() = wm * cm;
      }
    }
  }
  if (bias.defined()) {
    const auto bd = bias.data();
    for (int n = 0; n < g.n; ++n) {
      for (int o = 0; o < g.o; ++o) {
        double* p = out.data() + (static_cast<std::size_t>(n) * g.o + o) * plane;
        for (int i = 0; i < plane; ++i) p[i] += bd[o];
      }
    }
  }

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::finish_op(
      "conv2d", {g.n, g.o, g.ho, g.wo}, std::move(out), inputs, [=](const Tensor&) {
        return BackwardFn([x, weight, bias, g, opt, depthwise, pointwise, k_elems,
                           plane](std::span<const double> go) {
          Tensor xx = x;
          Tensor ww = weight;
          double* gin = x.requires_grad() ? xx.mutable_grad().data() : nullptr;
          double* gw = weight.requires_grad() ? ww.mutable_grad().data() : nullptr;
          const double* in = x.data().data();
          const double* wd = weight.data().data();
          if (bias.defined() && bias.requires_grad()) {
            Tensor bb = bias;
            auto gb = bb.mutable_grad();
            for (int n = 0; n < g.n; ++n) {
              for (int o = 0; o < g.o; ++o) {
                const double* p = go.data() + (static_cast<std::size_t>(n) * g.o + o) * plane;
                double acc = 0.0;
                for (int i = 0; i < plane; ++i) acc += p[i];
                gb[o] += acc;
              }
            }
          }
          if (gin == nullptr && gw == nullptr) return;
          if (depthwise) {
            depthwise_backward(in, wd, go.data(), g, opt, gin, gw);
            return;
          }
          std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(k_elems) * plane);
          std::vector<double> dcol(static_cast<std::size_t>(k_elems) * plane);
          for (int n = 0; n < g.n; ++n) {
            for (int gr = 0; gr < opt.groups; ++gr) {
              ConstMapMat gom(go.data() + (static_cast<std::size_t>(n) * g.o + gr * g.og) * plane, g.og, plane);
              if (gw != nullptr) {
                const double* colp;
                if (pointwise) {
                  colp = in + (static_cast<std::size_t>(n) * g.c + gr * g.cg) * plane;
                } else {
                  im2col(in + static_cast<std::size_t>(n) * g.c * g.h * g.w, g, opt, gr * g.cg, col.data());
                  colp = col.data();
                }
                ConstMapMat cm(colp, k_elems, plane);
                MapMat gwm(gw + static_cast<std::size_t>(gr) * g.og * k_elems, g.og, k_elems);
                gwm.noalias() += gom * cm.transpose();
              }
              if (gin != nullptr) {
                ConstMapMat wm(wd + static_cast<std::size_t>(gr) * g.og * k_elems, g.og, k_elems);
                if (pointwise) {
                  MapMat gim(gin + (static_cast<std::size_t>(n) * g.c + gr * g.cg) * plane, k_elems, plane);
                  gim.noalias() += wm.transpose() * gom;
                } else {
                  MapMat dcm(dcol.data(), k_elems, plane);
                  dcm.noalias() = wm.transpose() * gom;
                  col2im(dcol.data(), g, opt, gr * g.cg, gin + static_cast<std::size_t>(n) * g.c * g.h * g.w);
                }
              }
            }
          }
        });
      });
}

Tensor strip_conv(const Tensor& x, const Tensor& weight, StripAxis axis, int k) {
  if (k < 1 || k % 2 == 0) {
    throw ShapeError("strip_conv: kernel length must be odd, got " + std::to_string(k));
  }
  require_rank("strip_conv", x, 4);
  const int c = x.dim(1);
  require(weight.numel() == static_cast<std::size_t>(c) * k,
          "strip_conv: weight " + shape_str(weight.shape()) + " does not hold " + std::to_string(c) + "x" +
              std::to_string(k) + " taps");
  const bool horizontal = axis == StripAxis::kHorizontal;
  const Shape kshape = horizontal ? Shape{c, 1, 1, k} : Shape{c, 1, k, 1};
  const Tensor w = weight.shape() == kshape ? weight : reshape(weight, kshape);
  Conv2dOptions opt;
  opt.groups = c;
  if (horizontal) {
    opt.pad_w = (k - 1) / 2;
  } else {
    opt.pad_h = (k - 1) / 2;
  }
  return conv2d(x, w, opt);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return detail::finish_op("add", a.shape(), std::move(out), {a, b}, [=](const Tensor&) {
    return BackwardFn([a, b](std::span<const double> go) {
      accumulate(a, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      });
      accumulate(b, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      });
    });
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return detail::finish_op("sub", a.shape(), std::move(out), {a, b}, [=](const Tensor&) {
    return BackwardFn([a, b](std::span<const double> go) {
      accumulate(a, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      });
      accumulate(b, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i];
      });
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return detail::finish_op("mul", a.shape(), std::move(out), {a, b}, [=](const Tensor&) {
    return BackwardFn([a, b](std::span<const double> go) {
      const auto av = a.data();
      const auto bv = b.data();
      accumulate(a, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * bv[i];
      });
      accumulate(b, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * av[i];
      });
    });
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] / bd[i];
  return detail::finish_op("div", a.shape(), std::move(out), {a, b}, [=](const Tensor& y) {
    return BackwardFn([a, b, y](std::span<const double> go) {
      const auto bv = b.data();
      const auto yv = y.data();
      accumulate(a, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] / bv[i];
      });
      accumulate(b, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i] * yv[i] / bv[i];
      });
    });
  });
}

Tensor scale(const Tensor& x, double s) {
  return unary("scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary("add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor add_n(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("add_n: empty list");
  for (const auto& t : xs) require_same_shape("add_n", xs.front(), t);
  std::vector<double> out(xs.front().numel(), 0.0);
  for (const auto& t : xs) {
    const auto d = t.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += d[i];
  }
  return detail::finish_op("add_n", xs.front().shape(), std::move(out), xs, [=](const Tensor&) {
    return BackwardFn([xs](std::span<const double> go) {
      for (const auto& t : xs) {
        accumulate(t, [&](std::span<double> g) {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
        });
      }
    });
  });
}

Tensor sum(const Tensor& x) {
  const auto d = x.data();
  const double s = std::accumulate(d.begin(), d.end(), 0.0);
  return detail::finish_op("sum", {1}, {s}, {x}, [=](const Tensor&) {
    return BackwardFn([x](std::span<const double> go) {
      accumulate(x, [&](std::span<double> g) {
        for (auto& v : g) v += go[0];
      });
    });
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor softmax(const Tensor& x, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("softmax: axis out of range for shape " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  const std::size_t len = x.shape()[axis];
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xd[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(xd[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  return detail::finish_op("softmax", x.shape(), std::move(out), {x}, [=](const Tensor& y) {
    return BackwardFn([x, y, outer, inner, len](std::span<const double> go) {
      accumulate(x, [&](std::span<double> g) {
        const auto yv = y.data();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double dot = 0.0;
            for (std::size_t k = 0; k < len; ++k) dot += go[base + k * inner] * yv[base + k * inner];
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t i = base + k * inner;
              g[i] += yv[i] * (go[i] - dot);
            }
          }
        }
      });
    });
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.rank() == 3;
  require((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3),
          "matmul: expected two rank-2 or two rank-3 tensors, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  const int nb = batched ? a.dim(0) : 1;
  const int m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  require(b.dim(-2) == k && (!batched || b.dim(0) == nb),
          "matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(nb) * m * n);
  for (int i = 0; i < nb; ++i) {
    ConstMapMat am(a.data().data() + static_cast<std::size_t>(i) * m * k, m, k);
    ConstMapMat bm(b.data().data() + static_cast<std::size_t>(i) * k * n, k, n);
    MapMat om(out.data() + static_cast<std::size_t>(i) * m * n, m, n);
    om.noalias() = am * bm;
  }
  Shape shape = batched ? Shape{nb, m, n} : Shape{m, n};
  return detail::finish_op("matmul", shape, std::move(out), {a, b}, [=](const Tensor&) {
    return BackwardFn([a, b, nb, m, k, n](std::span<const double> go) {
      for (int i = 0; i < nb; ++i) {
        ConstMapMat gm(go.data() + static_cast<std::size_t>(i) * m * n, m, n);
        accumulate(a, [&](std::span<double> g) {
          ConstMapMat bm(b.data().data() + static_cast<std::size_t>(i) * k * n, k, n);
          MapMat ga(g.data() + static_cast<std::size_t>(i) * m * k, m, k);
          ga.noalias() += gm * bm.transpose();
        });
        accumulate(b, [&](std::span<double> g) {
          ConstMapMat am(a.data().data() + static_cast<std::size_t>(i) * m * k, m, k);
          MapMat gb(g.data() + static_cast<std::size_t>(i) * k * n, k, n);
          gb.noalias() += am.transpose() * gm;
        });
      }
    });
  });
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank("group_norm", x, 4);
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  require(groups >= 1 && c % groups == 0, "group_norm: " + std::to_string(c) +
                                              " channels not divisible into " + std::to_string(groups) +
                                              " groups");
  require(gamma.numel() == static_cast<std::size_t>(c) && beta.numel() == static_cast<std::size_t>(c),
          "group_norm: affine parameters must have " + std::to_string(c) + " entries");
  const int cg = c / groups;
  const std::size_t gsize = static_cast<std::size_t>(cg) * hw;
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<double> xhat(xd.size());
  std::vector<double> inv_std(static_cast<std::size_t>(n) * groups);
  std::vector<double> out(xd.size());
  for (int b = 0; b < n; ++b) {
    for (int gr = 0; gr < groups; ++gr) {
      const std::size_t base = (static_cast<std::size_t>(b) * c + gr * cg) * hw;
      double mu = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) mu += xd[base + i];
      mu /= static_cast<double>(gsize);
      double var = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) {
        const double d = xd[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(gsize);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(b) * groups + gr] = is;
      for (std::size_t i = 0; i < gsize; ++i) {
        const std::size_t idx = base + i;
        const int ch = gr * cg + static_cast<int>(i / hw);
        xhat[idx] = (xd[idx] - mu) * is;
        out[idx] = xhat[idx] * gd[ch] + bd[ch];
      }
    }
  }
  return detail::finish_op("group_norm", x.shape(), std::move(out), {x, gamma, beta}, [&](const Tensor&) {
    return BackwardFn([x, gamma, beta, n, c, hw, groups, cg, gsize, xhat = std::move(xhat),
                       inv_std = std::move(inv_std)](std::span<const double> go) {
      const auto gd = gamma.data();
      accumulate(gamma, [&](std::span<double> g) {
        for (int b = 0; b < n; ++b)
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += go[base + i] * xhat[base + i];
            g[ch] += acc;
          }
      });
      accumulate(beta, [&](std::span<double> g) {
        for (int b = 0; b < n; ++b)
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += go[base + i];
            g[ch] += acc;
          }
      });
      accumulate(x, [&](std::span<double> g) {
        for (int b = 0; b < n; ++b) {
          for (int gr = 0; gr < groups; ++gr) {
            const std::size_t base = (static_cast<std::size_t>(b) * c + gr * cg) * hw;
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) {
              const int ch = gr * cg + static_cast<int>(i / hw);
              const double dxh = go[base + i] * gd[ch];
              m1 += dxh;
              m2 += dxh * xhat[base + i];
            }
            m1 /= static_cast<double>(gsize);
            m2 /= static_cast<double>(gsize);
            const double is = inv_std[static_cast<std::size_t>(b) * groups + gr];
            for (std::size_t i = 0; i < gsize; ++i) {
              const int ch = gr * cg + static_cast<int>(i / hw);
              const double dxh = go[base + i] * gd[ch];
              g[base + i] += is * (dxh - m1 - xhat[base + i] * m2);
            }
          }
        }
      });
    });
  });
}

Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape shape) {
  require(shape_numel(shape) == index.size(), "gather: index count does not match shape " + shape_str(shape));
  const auto xd = x.data();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < xd.size(), "gather: index out of range");
    out[i] = xd[index[i]];
  }
  return detail::finish_op("gather", std::move(shape), std::move(out), {x}, [&](const Tensor&) {
    return BackwardFn([x, index = std::move(index)](std::span<const double> go) {
      accumulate(x, [&](std::span<double> g) {
        for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += go[i];
      });
    });
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::finish_op("reshape", std::move(shape), std::move(out), {x}, [=](const Tensor&) {
    return BackwardFn([x](std::span<const double> go) {
      accumulate(x, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      });
    });
  });
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  const int r = x.rank();
  require(static_cast<int>(order.size()) == r, "permute: order length differs from rank");
  std::vector<int> seen(r, 0);
  for (int a : order) {
    require(a >= 0 && a < r && !seen[a], "permute: invalid axis order");
    seen[a] = 1;
  }
  const Shape& in_shape = x.shape();
  std::vector<std::size_t> in_stride(r, 1);
  for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in_shape[i + 1];
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[order[i]];
  const std::size_t total = x.numel();
  std::vector<std::size_t> index(total);
  std::vector<int> pos(r, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t src = 0;
    for (int i = 0; i < r; ++i) src += static_cast<std::size_t>(pos[i]) * in_stride[order[i]];
    index[flat] = src;
    for (int i = r - 1; i >= 0; --i) {
      if (++pos[i] < out_shape[i]) break;
      pos[i] = 0;
    }
  }
  return gather(x, std::move(index), std::move(out_shape));
}

Tensor pixel_shuffle(const Tensor& x, int s) {
  require_rank("pixel_shuffle", x, 4);
  const int n = x.dim(0), cs = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(s >= 1 && cs % (s * s) == 0, "pixel_shuffle: channels not divisible by scale^2");
  const int c = cs / (s * s);
  const int oh = h * s, ow = w * s;
  std::vector<std::size_t> index(x.numel());
  std::size_t flat = 0;
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const int src_c = ch * s * s + (i % s) * s + (j % s);
          index[flat++] = ((static_cast<std::size_t>(b) * cs + src_c) * h + i / s) * w + j / s;
        }
  return gather(x, std::move(index), {n, c, oh, ow});
}

Tensor avg_pool2d(const Tensor& x, int k) {
  require_rank("avg_pool2d", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(k >= 1 && h % k == 0 && w % k == 0, "avg_pool2d: spatial size not divisible by window");
  const int oh = h / k, ow = w / k;
  const double inv = 1.0 / (k * k);
  const auto xd = x.data();
  std::vector<double> out(static_cast<std::size_t>(n) * c * oh * ow, 0.0);
  for (int p = 0; p < n * c; ++p)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out[(static_cast<std::size_t>(p) * oh + i / k) * ow + j / k] +=
            inv * xd[(static_cast<std::size_t>(p) * h + i) * w + j];
  return detail::finish_op("avg_pool2d", {n, c, oh, ow}, std::move(out), {x}, [=](const Tensor&) {
    return BackwardFn([x, n, c, h, w, k, oh, ow, inv](std::span<const double> go) {
      accumulate(x, [&](std::span<double> g) {
        for (int p = 0; p < n * c; ++p)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
              g[(static_cast<std::size_t>(p) * h + i) * w + j] +=
                  inv * go[(static_cast<std::size_t>(p) * oh + i / k) * ow + j / k];
      });
    });
  });
}

Tensor nearest_resize(const Tensor& x, int out_h, int out_w) {
  require_rank("nearest_resize", x, 4);
  require(out_h >= 1 && out_w >= 1, "nearest_resize: empty target size");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<std::size_t> index(static_cast<std::size_t>(n) * c * out_h * out_w);
  std::size_t flat = 0;
  for (int p = 0; p < n * c; ++p)
    for (int i = 0; i < out_h; ++i) {
      const int si = static_cast<int>(static_cast<long long>(i) * h / out_h);
      for (int j = 0; j < out_w; ++j) {
        const int sj = static_cast<int>(static_cast<long long>(j) * w / out_w);
        index[flat++] = (static_cast<std::size_t>(p) * h + si) * w + sj;
      }
    }
  return gather(x, std::move(index), {n, c, out_h, out_w});
}

Tensor nearest_upsample(const Tensor& x, int factor) {
  require(factor >= 1, "nearest_upsample: factor must be positive");
  require_rank("nearest_upsample", x, 4);
  return nearest_resize(x, x.dim(2) * factor, x.dim(3) * factor);
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: empty list");
  const int r = xs.front().rank();
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "concat: axis out of range");
  Shape shape = xs.front().shape();
  int total = 0;
  for (const auto& t : xs) {
    require(t.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis) {
        require(t.shape()[i] == shape[i], "concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                                              shape_str(shape));
      }
    }
    total += t.shape()[axis];
  }
  shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= shape[i];
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t chunk = static_cast<std::size_t>(t.shape()[axis]) * inner;
    const auto d = t.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(d.begin() + o * chunk, chunk, out.begin() + o * total * inner + off);
    }
    off += chunk;
  }
  return detail::finish_op("concat", shape, std::move(out), xs, [=](const Tensor&) {
    return BackwardFn([xs, offsets, outer, inner, axis, total](std::span<const double> go) {
      for (std::size_t k = 0; k < xs.size(); ++k) {
        const std::size_t chunk = static_cast<std::size_t>(xs[k].shape()[axis]) * inner;
        accumulate(xs[k], [&](std::span<double> g) {
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += go[o * total * inner + offsets[k] + i];
        });
      }
    });
  });
}

Tensor reassemble(const Tensor& x, const Tensor& kernels, int k, int s) {
  require_rank("reassemble", x, 4);
  require_rank("reassemble kernels", kernels, 4);
  require(k >= 1 && k % 2 == 1, "reassemble: kernel size must be odd");
  require(s >= 1, "reassemble: scale must be positive");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h * s, ow = w * s, kk = k * k, r = k / 2;
  require(kernels.shape() == Shape{n, kk, oh, ow},
          "reassemble: kernels " + shape_str(kernels.shape()) + " do not match " +
              shape_str({n, kk, oh, ow}));
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;

  // Visits every (batch, tap, channel, output row) with the valid output
  // column range for that tap.
  auto for_each_row = [=](auto&& body) {
    for (int b = 0; b < n; ++b) {
      for (int t = 0; t < kk; ++t) {
        const int du = t / k - r, dv = t % k - r;
        int j0 = 0, j1 = ow;
        while (j0 < ow && j0 / s + dv < 0) ++j0;
        while (j1 > j0 && (j1 - 1) / s + dv >= w) --j1;
        const std::size_t kbase = (static_cast<std::size_t>(b) * kk + t) * out_plane;
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t p = static_cast<std::size_t>(b) * c + ch;
          for (int i = 0; i < oh; ++i) {
            const int si = i / s + du;
            if (si < 0 || si >= h) continue;
            body(kbase + static_cast<std::size_t>(i) * ow, p * out_plane + static_cast<std::size_t>(i) * ow,
                 p * in_plane + static_cast<std::size_t>(si) * w + dv, j0, j1);
          }
        }
      }
    }
  };

  const double* xd = x.data().data();
  const double* kd = kernels.data().data();
  std::vector<double> out(static_cast<std::size_t>(n) * c * out_plane, 0.0);
  for_each_row([&](std::size_t krow, std::size_t orow, std::size_t xrow, int j0, int j1) {
    for (int j = j0; j < j1; ++j) out[orow + j] += kd[krow + j] * xd[xrow + j / s];
  });
  return detail::finish_op("reassemble", {n, c, oh, ow}, std::move(out), {x, kernels}, [=](const Tensor&) {
    return BackwardFn([x, kernels, s, for_each_row](std::span<const double> go) {
      const double* xd = x.data().data();
      const double* kd = kernels.data().data();
      Tensor xx = x, kt = kernels;
      double* gx = x.requires_grad() ? xx.mutable_grad().data() : nullptr;
      double* gk = kernels.requires_grad() ? kt.mutable_grad().data() : nullptr;
      for_each_row([&](std::size_t krow, std::size_t orow, std::size_t xrow, int j0, int j1) {
        if (gk != nullptr) {
          for (int j = j0; j < j1; ++j) gk[krow + j] += go[orow + j] * xd[xrow + j / s];
        }
        if (gx != nullptr) {
          for (int j = j0; j < j1; ++j) gx[xrow + j / s] += go[orow + j] * kd[krow + j];
        }
      });
    });
  });
}

}  // namespace famseg
