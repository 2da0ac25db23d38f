#pragma once

#include <vector>

#include "famseg/tensor.hpp"

namespace famseg {

struct Conv2dOptions {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
  int groups = 1;

  static Conv2dOptions same(int kh, int kw, int stride = 1, int groups = 1) {
    return {stride, stride, (kh - 1) / 2, (kw - 1) / 2, groups};
  }
};

/// x: [N,C,H,W], weight: [O,C/groups,kh,kw], bias: [O] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt);
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Conv2dOptions& opt = {}) {
  return conv2d(x, weight, Tensor{}, opt);
}

enum class StripAxis { kHorizontal, kVertical };

/// Depthwise 1xk (horizontal) or kx1 (vertical) convolution with "same"
/// padding on the scanned axis. `weight` holds C*k values in any shape whose
/// element count matches.
Tensor strip_conv(const Tensor& x, const Tensor& weight, StripAxis axis, int k);

// Elementwise. Binary ops need identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);

/// Sum of a list of same-shaped tensors, accumulated left to right.
Tensor add_n(const std::vector<Tensor>& xs);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor softmax(const Tensor& x, int axis);

/// Batched ([B,M,K]x[B,K,N]) or plain 2-D matrix product.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor avg_pool2d(const Tensor& x, int k);
Tensor nearest_upsample(const Tensor& x, int factor);
/// Nearest resize to an arbitrary size: source index floor(i * H / out_h).
Tensor nearest_resize(const Tensor& x, int out_h, int out_w);

Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& order);
/// out.flat[i] = x.flat[index[i]]; gradient scatters back.
Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape shape);
/// [N, C*s*s, H, W] -> [N, C, H*s, W*s]; channel c*s*s + dy*s + dx feeds
/// output pixel (h*s + dy, w*s + dx).
Tensor pixel_shuffle(const Tensor& x, int s);

/// Content-aware reassembly. x: [N,C,H,W], kernels: [N,k*k,H*s,W*s] (already
/// normalized). Output pixel (i,j) is the kernel-weighted sum of the k x k
/// neighborhood of x centered at (i/s, j/s), zero padded, shared across
/// channels.
Tensor reassemble(const Tensor& x, const Tensor& kernels, int k, int s);

}  // namespace famseg
