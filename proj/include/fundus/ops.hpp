#pragma once

#include "fundus/rng.hpp"
#include "fundus/tape.hpp"
#include "fundus/tensor.hpp"

namespace fundus {
namespace ops {

// Elementwise. b may broadcast when its shape is a suffix of a's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);

Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);

// 2D: [M,K] x [K,N]
Tensor matmul(const Tensor& a, const Tensor& b);
// batched, equal leading dims: [...,M,K] x [...,K,N]
Tensor bmm(const Tensor& a, const Tensor& b);
// batched with transposed rhs: [...,M,K] x [...,N,K] -> [...,M,N]
Tensor bmm_nt(const Tensor& a, const Tensor& b);
// y = x W^T + b over the last axis; W is [out,in], bias [out] or undefined
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

enum class ConvAlgo { kAuto, kDirect, kIm2col };

// x [N,C,H,W], w [O,C/groups,Kh,Kw], bias [O] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
              int groups, ConvAlgo algo = ConvAlgo::kAuto);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
};

// NCHW batch norm. Training mode normalizes with batch statistics and
// updates the running buffers in place; eval mode uses the buffers.
Tensor batch_norm2d(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    BatchNormState& state, float momentum, float eps, bool training);

Tensor global_avg_pool(const Tensor& x);           // [N,C,H,W] -> [N,C]
Tensor mean_tokens(const Tensor& x);               // [B,T,D] -> [B,D]
Tensor max_tokens(const Tensor& x);                // [B,T,D] -> [B,D]
Tensor scale_channels(const Tensor& x, const Tensor& g);  // x[N,C,H,W] * g[N,C]

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& order);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice_tokens(const Tensor& x, int start, int len);  // [B,T,D] -> [B,len,D]
Tensor broadcast_batch(const Tensor& x, int batch);        // [1,...] -> [batch,...]

// [B,C,S,S] -> [B,(S/P)^2, C*P*P], patches in row-major grid order
Tensor space_to_patches(const Tensor& x, int patch);

Tensor dropout(const Tensor& x, float rate, Rng& rng, bool training);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// mean over batch of -[y ln p + (1-y) ln(1-p)], p clamped to [1e-7, 1-1e-7]
Tensor bce_loss(const Tensor& prob, const Tensor& label);

// forward-only helpers (not differentiable, not recorded on the tape)
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);  // [C,H,W] -> [C,out_h,out_w]

}  // namespace ops
}  // namespace fundus
