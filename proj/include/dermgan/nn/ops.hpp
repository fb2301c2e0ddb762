#pragma once

#include <utility>
#include <vector>

#include "dermgan/nn/autograd.hpp"

namespace dermgan::nn {

struct ConvGeometry {
  int stride = 1;
  int padding = 0;
};

// Elementwise and structural ops.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> leaky_relu(const Var<T>& x, T slope);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> tanh(const Var<T>& x);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

/// Cross-correlation, weight [out, in, k, k], optional bias [out].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, ConvGeometry g);

/// Adjoint of conv2d, weight [in, out, k, k]. Output side (H-1)*stride - 2*pad + k.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, ConvGeometry g);

/// 2x nearest-neighbour resize.
template <typename T> Var<T> upsample_nearest2x(const Var<T>& x);

/// Per-sample, per-channel normalisation over H*W, no affine parameters.
template <typename T> Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5));

/// [N,C,H,W] -> [N,C]
template <typename T> Var<T> global_avg_pool(const Var<T>& x);

/// x [N,F], weight [O,F], bias [O] -> [N,O]
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// Reductions to a single-element tensor.
template <typename T> Var<T> mean(const Var<T>& x);
template <typename T> Var<T> l1_loss(const Var<T>& x, const Var<T>& y);
/// Mean |x - y| over positions where mask [N,1,H,W] is nonzero, all channels.
template <typename T> Var<T> masked_l1_loss(const Var<T>& x, const Var<T>& y, const Tensor<T>& mask);
template <typename T> Var<T> mse_loss(const Var<T>& x, const Var<T>& y);
/// Mean over the leading (batch) axis: [N, ...] -> [1, ...].
template <typename T> Var<T> batch_mean(const Var<T>& x);
/// Mean binary cross-entropy of logits against a constant target in {0, 1}.
template <typename T> Var<T> bce_with_logits(const Var<T>& logits, T target);
/// Mean softmax cross-entropy, logits [N,C].
template <typename T> Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels);
/// sum_i w_i * x_i over single-element inputs.
template <typename T> Var<T> weighted_sum(const std::vector<std::pair<T, Var<T>>>& terms);

// Raw kernels, shared with tests and reference implementations.
namespace kernels {

/// im2col for one sample: [C,H,W] -> [C*k*k, Ho*Wo].
template <typename T>
void im2col(const T* src, int channels, int height, int width, int kernel, ConvGeometry g, int out_h, int out_w,
            T* col);
/// Scatter-add inverse of im2col.
template <typename T>
void col2im(const T* col, int channels, int height, int width, int kernel, ConvGeometry g, int out_h, int out_w,
            T* dst);

[[nodiscard]] inline int conv_out_size(int in, int kernel, ConvGeometry g) {
  return (in + 2 * g.padding - kernel) / g.stride + 1;
}
[[nodiscard]] inline int conv_transpose_out_size(int in, int kernel, ConvGeometry g) {
  return (in - 1) * g.stride - 2 * g.padding + kernel;
}

}  // namespace kernels

}  // namespace dermgan::nn
