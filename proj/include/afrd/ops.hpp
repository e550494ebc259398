// Differentiable operations used by the AFRD network.
//
// Image tensors are NCHW. All reductions run in a fixed order so forward
// results are bit-identical across runs.
#pragma once

#include <vector>

#include "afrd/tensor.hpp"

AFRD_BEGIN_NAMESPACE

// ---------------------------------------------------------------------------
// Convolutions and dense layers
// ---------------------------------------------------------------------------

/// x [B,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout] (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// Transposed convolution, the adjoint of conv2d with the same geometry.
/// x [B,Cin,H,W], weight [Cin,Cout,kh,kw]; output side (H-1)*stride - 2p + kh.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
                        int padding);

/// y = x W^T + b with x [B,Din], W [Dout,Din], b [Dout].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, real factor);
Tensor add_scalar(const Tensor& x, real value);

// ---------------------------------------------------------------------------
// Shape and reductions
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
/// [B, ...] -> [B, prod(...)].
Tensor flatten(const Tensor& x);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Softmax along `axis`, max-subtracted.
Tensor softmax(const Tensor& x, std::size_t axis);
/// [B,C,H,W] -> [B,C].
Tensor global_avg_pool(const Tensor& x);
/// Non-overlapping or strided average pooling without padding.
Tensor avg_pool(const Tensor& x, int kernel, int stride);
/// Bilinear resize with half-pixel centres (align_corners = false).
Tensor bilinear_upsample(const Tensor& x, std::size_t target_h, std::size_t target_w);

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

struct BatchNormState {
    Tensor running_mean;  // [C], updated in place in training mode
    Tensor running_var;   // [C]
    real momentum = real(0.1);
    real eps = real(1e-5);
};

/// Training mode normalizes with batch statistics and updates the running
/// estimates; eval mode uses the running estimates.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                   bool training);

// ---------------------------------------------------------------------------
// AFRD specific
// ---------------------------------------------------------------------------

/// Per-position cosine similarity over channels: [B,C,H,W] x2 -> [B,H,W].
Tensor cosine_map(const Tensor& a, const Tensor& b, real eps = real(1e-8));

/// out[b] = sum_j weights[b,j] * xs[j][b]; every xs[j] shares one shape [B,...]
/// and weights is [B,N].
Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& weights);

AFRD_END_NAMESPACE
