#pragma once

// Differentiable primitives. Every function returns a fresh tensor and, when
// any input is tracked, records its backward rule on the active tape.
// Binary elementwise ops follow right-aligned broadcasting.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hvm/tensor.hpp"

namespace hvm::ops {

Shape broadcast_shape(const Shape& a, const Shape& b);

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <class T> Tensor<T> neg(const Tensor<T>& x);
template <class T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <class T> Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <class T> Tensor<T> exp(const Tensor<T>& x);
template <class T> Tensor<T> log(const Tensor<T>& x);
template <class T> Tensor<T> softplus(const Tensor<T>& x);
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);
template <class T> Tensor<T> silu(const Tensor<T>& x);
// Exact (erf) GELU.
template <class T> Tensor<T> gelu(const Tensor<T>& x);
template <class T> Tensor<T> reciprocal(const Tensor<T>& x);
// Gradient is passed through only strictly inside (lo, hi).
template <class T> Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

// 2-D product: (m x k) * (k x n).
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// x[..., in] * weight[out, in]^T + bias[out]; bias may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <class T> Tensor<T> transpose(const Tensor<T>& x);
template <class T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);
template <class T> Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape);

template <class T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<std::size_t>& sizes, int axis);
template <class T> Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t length);

template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim);
template <class T> Tensor<T> mean(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim);
// Ties route the gradient to the first maximal element.
template <class T> Tensor<T> max(const Tensor<T>& x, int axis, bool keepdim);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};

// x: N x C x H x W, weight: O x (C/groups) x k x k, bias: O (may be undefined).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOptions& options);

// Non-overlapping k x k max pooling on N x C x H x W; H and W must divide by k.
template <class T> Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k);
template <class T> Tensor<T> upsample_nearest2d(const Tensor<T>& x, std::size_t factor);

// Normalises over the last axis: (x - mean) / sqrt(var + eps) * gamma + beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// x: B x L x D; y[b, i, :] = x[b, order[i], :]. `order` must be a permutation of 0..L-1.
template <class T>
Tensor<T> permute_tokens(const Tensor<T>& x, std::span<const std::size_t> order);

// Name-keyed access to the attribute-free primitives, e.g. apply("mul", {a, b}).
template <class T>
Tensor<T> apply(std::string_view op, const std::vector<Tensor<T>>& inputs);
std::vector<std::string> primitive_names();

}  // namespace hvm::ops
