#pragma once

#include <string>
#include <vector>

#include "hmamba/ops.hpp"
#include "hmamba/rng.hpp"
#include "hmamba/tensor.hpp"

namespace hmamba {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Input-dependent state space parameters for one scan direction.
// A = -exp(a_log) stays strictly negative, so exp(delta * A) <= 1 for any
// positive step size and the recurrence cannot blow up from A alone.
struct SelectiveSSMParams {
  int d_inner = 0;
  int d_state = 0;
  int dt_rank = 0;
  Tensor a_log;  // [d_inner, d_state]
  Tensor d_skip; // [d_inner]
  Tensor w_x;    // [d_inner, dt_rank + 2*d_state]: step-size low-rank | B | C
  Tensor w_dt;   // [dt_rank, d_inner]
  Tensor b_dt;   // [d_inner]

  static SelectiveSSMParams init(int d_inner, int d_state, int dt_rank, RngStream& rng);
  void collect_params(std::vector<NamedParam>& out, const std::string& prefix) const;
};

// Core recurrence: per channel c, h_t = exp(delta_t A_c) h_{t-1} + delta_t B_t u_t,
// y_t = C_t . h_t + D_c u_t, h_{-1} = 0. Differentiable in every argument.
// u, delta: [T, d_inner]; A: [d_inner, d_state]; B, C: [T, d_state]; D: [d_inner].
Tensor selective_scan_raw(const Tensor& u, const Tensor& delta, const Tensor& a,
                          const Tensor& b, const Tensor& c, const Tensor& d);

// Full selective SSM: derives delta (softplus of a low-rank projection), B and
// C from u per position, then runs the scan.
Tensor selective_scan(const Tensor& u, const SelectiveSSMParams& params);

// One direction of the bidirectional layer: causal depthwise conv + scan.
struct MambaBranch {
  Tensor conv_w;  // [d_inner, k]
  Tensor conv_b;  // [d_inner]
  SelectiveSSMParams ssm;

  static MambaBranch init(int d_inner, int d_state, int dt_rank, int conv_kernel, RngStream& rng);
  void collect_params(std::vector<NamedParam>& out, const std::string& prefix) const;
};

// Bidirectional Mamba layer: a shared gate projection, a shared sequence
// projection whose flip feeds the backward branch, independent per-direction
// conv + scan parameters, and a shared output projection over the averaged
// directions.
struct BiMambaLayer {
  int d_model = 0;
  int d_inner = 0;
  Tensor w_z;    // [d, d_inner], gate path
  Tensor w_s;    // [d, d_inner], sequence path
  MambaBranch fwd;
  MambaBranch bwd;
  Tensor w_out;  // [d_inner, d]

  static BiMambaLayer init(int d_model, int d_inner, int d_state, int dt_rank, int conv_kernel,
                           RngStream& rng);
  void collect_params(std::vector<NamedParam>& out, const std::string& prefix) const;
};

Tensor bimamba_forward(const Tensor& n, const BiMambaLayer& layer);

// Pre-LN residual block: H' = BiMamba(LN(H)) + H; out = FFN(LN(H')) + H'.
struct MambaBlock {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  BiMambaLayer mixer;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;  // d -> ffn_hidden -> d, SiLU between

  static MambaBlock init(int d_model, int d_inner, int d_state, int dt_rank, int conv_kernel,
                         int ffn_hidden, RngStream& rng);
  void collect_params(std::vector<NamedParam>& out, const std::string& prefix) const;
};

Tensor mamba_block_forward(const Tensor& h, const MambaBlock& block);

// Pre-LN Transformer encoder block, the efficiency baseline.
struct TransformerBlock {
  int n_heads = 0;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  static TransformerBlock init(int d_model, int n_heads, int ffn_hidden, RngStream& rng);
  void collect_params(std::vector<NamedParam>& out, const std::string& prefix) const;
};

// `attn` (optional) receives one [T, T] row-stochastic matrix per head.
Tensor transformer_block_forward(const Tensor& h, const TransformerBlock& block,
                                 std::vector<Tensor>* attn = nullptr);

// Parameter and multiply-accumulate accounting for one forward pass.
//
// Counting rules (used consistently by every overload and by tests):
//   linear in->out          params in*out (+out if biased), macs T*in*out
//   depthwise conv (d, k)   params d*k + d,                 macs T*d*k
//   full conv               params d_out*d_in*k + d_out,    macs T*d_out*d_in*k
//   selective scan          params d*n (A) + d (D),
//                           macs T*d*(5n + 1): per step and channel, n muls
//                           for exp(delta A), 2n for delta B u, n for the
//                           state update, n for the C readout, 1 for D u
//   attention               macs 2*T^2*d for QK^T and AV, projections as
//                           linears; softmax free
//   layer norm              params 2d, macs not counted
//   elementwise gates, activations, residuals: not counted
struct CountResult {
  long long params = 0;
  long long macs = 0;
};

CountResult count_linear(int in, int out, bool bias, int seq_len);
CountResult count_params_and_macs(const SelectiveSSMParams& p, int seq_len);
CountResult count_params_and_macs(const BiMambaLayer& layer, int seq_len);
CountResult count_params_and_macs(const MambaBlock& block, int seq_len);
CountResult count_params_and_macs(const TransformerBlock& block, int seq_len);

// Initialization helpers shared by the model module.
Tensor init_linear_weight(int in, int out, RngStream& rng);
Tensor init_linear_bias(int in, int out, RngStream& rng);
Tensor init_embedding(int rows, int cols, RngStream& rng, double stddev = 0.02);

}  // namespace hmamba
