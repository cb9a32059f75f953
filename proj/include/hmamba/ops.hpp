#pragma once

#include <vector>

#include "hmamba/rng.hpp"
#include "hmamba/tensor.hpp"

namespace hmamba {
namespace ops {

// ---- elementwise / arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard
Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow(const Tensor& a, double p);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor clamp_min(const Tensor& a, double floor);  // gradient 0 below floor

// ---- structure ----
Tensor flip_sequence(const Tensor& a);  // reverses the time axis (axis 0) only
Tensor concat(const std::vector<Tensor>& parts, int axis);  // 2-D tensors
Tensor slice(const Tensor& a, int axis, int start, int length);  // 2-D
Tensor transpose(const Tensor& a);  // 2-D
Tensor reshape(const Tensor& a, std::vector<int> shape);

// Broadcast toward `shape`. Supported expansions: scalar -> anything,
// [d] or [1,d] -> [T,d], [T,1] -> [T,d]. Gradient sums over expanded axes.
Tensor broadcast(const Tensor& a, const std::vector<int>& shape);

// ---- reductions ----
Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
// y = x W + b with x:[T,in], W:[in,out], b:[out] (b optional).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& w);

// ---- row selection (embedding lookup); gradient scatters into the table ----
Tensor take_rows(const Tensor& table, const std::vector<int>& indices);

// ---- normalization / nonlinearity over structured inputs ----
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

enum class ConvMode { kCausal, kSame };

// x:[T,d_in], kernels:[d_out,d_in,k], optional bias:[d_out] -> [T,d_out].
// Causal mode left-pads with k-1 zeros; same mode pads symmetrically
// (left floor((k-1)/2)). Output length is T in both modes.
Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias, ConvMode mode);
Tensor conv1d(const Tensor& x, const Tensor& kernels, ConvMode mode);

// Depthwise causal variant used inside Mamba branches: x:[T,d], w:[d,k].
Tensor conv1d_depthwise_causal(const Tensor& x, const Tensor& w, const Tensor& bias);

// Softmax along `axis` of a 1-D or 2-D tensor, max-subtracted for stability.
Tensor softmax(const Tensor& x, int axis);

// Inverted dropout: training zeroes each element with probability `rate` and
// scales survivors by 1/(1-rate); eval is the identity.
Tensor dropout(const Tensor& x, double rate, bool training, RngStream& rng);

}  // namespace ops
}  // namespace hmamba
