#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "segkit/autograd.hpp"

// Differentiable tensor operations. Row-wise ops treat all leading
// dimensions as rows and the last dimension as features, so the same op
// serves token sequences [N, D] and feature maps [H, W, C].
namespace segkit::ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_bias(const Var& x, const Var& bias);
Var detach(const Var& x);
Var reshape(const Var& x, Shape shape);

/// [..., K] x [K, M] -> [..., M]
Var matmul(const Var& x, const Var& w);
/// x W + b with W stored [in, out]; `b` may be undefined.
Var linear(const Var& x, const Var& w, const Var& b);
/// Block-diagonal projection: W is [G, in/G, out/G], b is [out] or undefined.
Var grouped_linear(const Var& x, const Var& w, const Var& b);

Var gelu(const Var& x);
Var relu(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var softmax_rows(const Var& x);

/// Scaled dot-product attention over [N, D] inputs split into `heads` heads.
Var attention(const Var& q, const Var& k, const Var& v, int heads);
/// Per-head attention probabilities [heads, N, N]; no tape.
Tensor attention_probs(const Tensor& q, const Tensor& k, int heads);

Var concat_last(const std::vector<Var>& parts);
Var slice_last(const Var& x, std::int64_t begin, std::int64_t end);

/// Separable linear resampling of an [H, W, C] map: out = Ry X Rx^T per channel.
Var resample(const Var& x, const RowMatrix& ry, const RowMatrix& rx);
RowMatrix bilinear_weights(std::int64_t in, std::int64_t out);
RowMatrix bicubic_weights(std::int64_t in, std::int64_t out);
RowMatrix adaptive_avg_weights(std::int64_t in, std::int64_t out);
Var resize_bilinear(const Var& x, std::int64_t out_h, std::int64_t out_w);
Var adaptive_avg_pool(const Var& x, std::int64_t out_h, std::int64_t out_w);

/// Dense convolution on [H, W, Cin]; weight [k*k*Cin, Cout] in (ky, kx, cin) order.
Var conv2d(const Var& x, const Var& w, const Var& b, int kernel, int stride, int pad);
/// 3x3 depthwise convolution with zero padding 1; weight [9, C].
Var depthwise_conv3x3(const Var& x, const Var& w, const Var& b);

/// Rows with flag set are replaced by the shared vector `fill` [D].
Var mask_rows(const Var& x, std::span<const std::uint8_t> flags, const Var& fill);

/// Mean cross-entropy over rows whose `include` flag is set (all rows when empty).
Var cross_entropy(const Var& logits, std::span<const std::int32_t> targets,
                  std::span<const std::uint8_t> include = {});

Var sum(const Var& x);
Var mean(const Var& x);
/// Mean over rows of the squared L2 norm of each row.
Var mean_row_sq_norm(const Var& x);
Var l2_normalize_rows(const Var& x);
/// mean_i (1 - cos(a_i, b_i))
Var cosine_distance_mean(const Var& a, const Var& b);

/// Deformable 3x3 aggregation. value [H, W, C]; offsets [H, W, G*9*2] as (dy, dx)
/// per (group, point); modulation [H, W, G*9]. Out-of-range samples read zero.
Var dcn_sample(const Var& value, const Var& offsets, const Var& modulation, int groups);

}  // namespace segkit::ops
