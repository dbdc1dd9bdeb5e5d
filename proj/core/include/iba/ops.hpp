#pragma once

#include <vector>

#include "iba/tape.hpp"
#include "iba/tensor.hpp"

namespace iba {

// Differentiable tensor ops. Each is a pure function of its inputs; when a
// tape is active and any input is traced on it, the op is recorded so that
// Tape::backward can reach it. Forward values are bit-identical with or
// without an active tape.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);

// Batched matrix product. Both operands need rank >= 2; leading dims must
// match or be 1 (broadcast).
Tensor matmul(const Tensor& a, const Tensor& b);

// x[..., d_in] * w[d_in, d_out] + b[d_out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          double eps = 1e-5);
Tensor gelu(const Tensor& x);  // exact erf form

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);

// Leave-one-out mean over axis 0: out_i = (sum_j x_j - x_i) / (B - 1).
// For B == 1 the input passes through unchanged.
Tensor reference_batch(const Tensor& x);

Tensor sum_axis0_keepdim(const Tensor& x);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor mean_all(const Tensor& x);

// Mean cross-entropy of logits[M, C] against integer labels in [0, C).
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels);

// im2col on [B, C, H, W] with zero padding: rows are flattened k*k patches,
// channel-major, one row per output pixel -> [B, oh*ow, C*k*k].
Tensor unfold_patches(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad);

// Bilinear upsample of [B, C, H, W] by an integer factor, half-pixel centers.
Tensor upsample_bilinear(const Tensor& x, std::size_t factor);

}  // namespace iba
