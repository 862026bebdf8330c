#pragma once

// Differentiable primitives. Each op computes its forward value eagerly,
// throws NumericError if the result is not finite, and (when the graph is
// enabled and an input tracks gradients) records its adjoint on the graph.

#include <cstdint>
#include <span>

#include "dupl/tensor.hpp"

namespace dupl {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct Conv2dParams {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

// Output spatial extent of a convolution along one axis, or <= 0 if the
// kernel does not fit.
int conv_output_extent(int in, int kernel, const Conv2dParams& p);

// x: N x Cin x H x W, weight: Cout x Cin x k x k (k odd), bias: Cout.
template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, const Conv2dParams& params);

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x);

// x: N x D, weight: C x D, bias: C  ->  N x C.
template <typename T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias);

// N x C x H x W -> N x C.
template <typename T>
Tensor<T> global_avg_pool(Graph<T>& g, const Tensor<T>& x);

// Half-pixel bilinear interpolation (sample centres aligned, edges clamped).
template <typename T>
Tensor<T> bilinear_resize(Graph<T>& g, const Tensor<T>& x, int out_h,
                          int out_w);

// Same values, no gradient path to x.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x);

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, double factor);

// Scalar sum, accumulated in double.
template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x);

// Mean over N x C of -[y log s(z) + (1 - y) log(1 - s(z))], s = logistic.
template <typename T>
Tensor<T> multilabel_soft_margin(Graph<T>& g, const Tensor<T>& logits,
                                 std::span<const T> targets);

// Per image n: -log(1 - clamp(cos(a_n, b_n), -1, 1 - eps)) over the
// flattened image slices, averaged over the batch. A zero-norm slice counts
// as orthogonal (similarity 0).
template <typename T>
Tensor<T> cosine_discrepancy(Graph<T>& g, const Tensor<T>& a,
                             const Tensor<T>& b, double eps);

// logits: N x K x H x W, targets: N*H*W labels in [0, K) or kIgnoreLabel.
// Softmax cross-entropy averaged over each image's labelled pixels (0 for
// an image with none), then over the batch.
template <typename T>
Tensor<T> pixel_cross_entropy(Graph<T>& g, const Tensor<T>& logits,
                              std::span<const std::uint8_t> targets);

}  // namespace dupl
