#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fssam/tensor.hpp"

/// Differentiable primitives. Every function records a node on the active
/// Tape when at least one input requires gradients; otherwise it is a plain
/// forward computation.
namespace fssam::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

/// x[..., d] + bias[d]
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
/// x[C, H, W] + bias[C]
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

/// a[..., k] . b[k, n] -> [..., n]. Leading axes of `a` act as a batch.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a[..., k] . b[n, k]^T -> [..., n]
Tensor matmul_bt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// out[i] = x[index[i]], reshaped to `shape`. Backward scatter-adds.
Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape shape);

/// Columns [start, start + count) of a 2-D tensor.
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes the last axis to zero mean / unit variance, then applies gamma, beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

Tensor relu(const Tensor& x);
/// tanh approximation
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Cross-correlation of input[C_in, H, W] with kernel[C_out, C_in, k, k].
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);
/// Transposed convolution, kernel[C_in, C_out, k, k], no padding.
Tensor conv_transpose2d(const Tensor& input, const Tensor& kernel, std::size_t stride);
/// Bilinear resampling of input[C, H, W] (half-pixel centers, edge clamped).
Tensor bilinear_resize(const Tensor& input, std::size_t out_h, std::size_t out_w);

/// mean over elements of -[t log s(z) + (1 - t) log(1 - s(z))], evaluated in
/// the overflow-free form max(z, 0) - z t + log1p(exp(-|z|)). Only `logits`
/// is differentiated.
Tensor bce_with_logits(const Tensor& logits, const Tensor& target);

/// While alive on a thread, every relu() folds the sign pattern of its input
/// into a running hash. Finite-difference checks use it to detect probes that
/// straddle a kink.
class KinkMonitor {
public:
    KinkMonitor();
    ~KinkMonitor();
    KinkMonitor(const KinkMonitor&) = delete;
    KinkMonitor& operator=(const KinkMonitor&) = delete;

    std::uint64_t signature() const noexcept { return hash_; }

private:
    friend Tensor relu(const Tensor& x);

    std::uint64_t hash_ = 0xcbf29ce484222325ull;
    KinkMonitor* previous_;
};

}  // namespace fssam::ops
