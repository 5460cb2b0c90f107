#pragma once

#include <span>
#include <vector>

#include "csmx/tensor.h"

// Differentiable operations. Every op records itself on the active tape when
// at least one input requires a gradient. No implicit broadcasting: bias and
// per-sample scaling have dedicated ops.
namespace csmx::ops {

/// a[..., q] x b[q, r] -> [..., r]
Tensor matmul(const Tensor& a, const Tensor& b);
/// a[n, p, q] x b[n, q, r] -> [n, p, r]
Tensor batched_matmul(const Tensor& a, const Tensor& b);
/// x[..., q] w[q, r] + bias[r]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// x[n, p, q] w[n, q, r] + bias[n, r]: one affine map per leading slice.
Tensor batched_linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// x[..., c] + bias[c]
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
/// Exact GELU: x * Phi(x).
Tensor gelu(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

Tensor reshape(const Tensor& x, Shape shape);
/// Sums over the leading axis: x[n, ...] -> [...]
Tensor sum_leading(const Tensor& x);
/// Mean over one axis; the axis is removed from the shape.
Tensor mean_axis(const Tensor& x, std::size_t axis);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Multiplies slice i of the leading axis by factors[i] (constant, not
/// differentiated).
Tensor scale_leading(const Tensor& x, std::span<const double> factors);

/// Concatenates along the last axis; leading extents must agree.
Tensor concat_last(const std::vector<Tensor>& parts);

/// Cross-correlation over NHWC input. `input` is [h, w, cin] or
/// [b, h, w, cin]; `kernel` is [k, k, cin, cout]; `bias` may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t pad);
std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad);

/// Pure axis permutation after viewing x as `factored` (same element count):
/// out axis i is factored axis perm[i]; result reshaped to `out_shape`.
Tensor permute(const Tensor& x, const Shape& factored, const std::vector<std::size_t>& perm,
               const Shape& out_shape);

/// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& logits);

}  // namespace csmx::ops
