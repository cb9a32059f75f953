#include "hmamba/ssm.hpp"

#include <cmath>
#include <memory>

namespace hmamba {

namespace o = ops;

Tensor init_linear_weight(int in, int out, RngStream& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w = Tensor::zeros({in, out}, true);
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  return w;
}

Tensor init_linear_bias(int in, int out, RngStream& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor b = Tensor::zeros({out}, true);
  for (auto& v : b.values()) v = rng.uniform(-bound, bound);
  return b;
}

Tensor init_embedding(int rows, int cols, RngStream& rng, double stddev) {
  Tensor e = Tensor::zeros({rows, cols}, true);
  for (auto& v : e.values()) v = rng.normal(0.0, stddev);
  return e;
}

SelectiveSSMParams SelectiveSSMParams::init(int d_inner, int d_state, int dt_rank,
                                            RngStream& rng) {
  SelectiveSSMParams p;
  p.d_inner = d_inner;
  p.d_state = d_state;
  p.dt_rank = dt_rank;
  // A starts as -diag(1..d_state) replicated per channel.
  p.a_log = Tensor::zeros({d_inner, d_state}, true);
  for (int c = 0; c < d_inner; ++c) {
    for (int s = 0; s < d_state; ++s) {
      p.a_log.at_mut(c, s) = std::log(static_cast<double>(s + 1));
    }
  }
  p.d_skip = Tensor::full({d_inner}, 1.0, true);
  p.w_x = init_linear_weight(d_inner, dt_rank + 2 * d_state, rng);
  p.w_dt = init_linear_weight(dt_rank, d_inner, rng);
  // Bias places the initial step size in [1e-3, 1e-1] after softplus.
  p.b_dt = Tensor::zeros({d_inner}, true);
  for (auto& v : p.b_dt.values()) {
    double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = std::log(std::expm1(dt));
  }
  return p;
}

void SelectiveSSMParams::collect_params(std::vector<NamedParam>& out,
                                        const std::string& prefix) const {
  out.push_back({prefix + ".a_log", a_log});
  out.push_back({prefix + ".d_skip", d_skip});
  out.push_back({prefix + ".w_x", w_x});
  out.push_back({prefix + ".w_dt", w_dt});
  out.push_back({prefix + ".b_dt", b_dt});
}

Tensor selective_scan_raw(const Tensor& u, const Tensor& delta, const Tensor& a,
                          const Tensor& b, const Tensor& c, const Tensor& d) {
  if (u.ndim() != 2 || delta.shape() != u.shape()) {
    throw ShapeError("selective_scan: u and delta must both be [T,d_inner]");
  }
  int t_len = u.dim(0), d_inner = u.dim(1);
  if (t_len < 1) throw ShapeError("selective_scan: empty sequence");
  if (a.ndim() != 2 || a.dim(0) != d_inner) {
    throw ShapeError("selective_scan: A must be [d_inner,d_state]");
  }
  int n_state = a.dim(1);
  if (b.ndim() != 2 || b.dim(0) != t_len || b.dim(1) != n_state || c.shape() != b.shape()) {
    throw ShapeError("selective_scan: B and C must be [T,d_state]");
  }
  if (d.ndim() != 1 || d.dim(0) != d_inner) {
    throw ShapeError("selective_scan: D must be [d_inner]");
  }
  bool rg = u.requires_grad() || delta.requires_grad() || a.requires_grad() ||
            b.requires_grad() || c.requires_grad() || d.requires_grad();
  Tensor out = Tensor::zeros({t_len, d_inner}, rg);

  // States and discretized decays are kept for the backward recurrence.
  std::size_t cell = static_cast<std::size_t>(d_inner) * static_cast<std::size_t>(n_state);
  auto h_all = std::make_shared<std::vector<double>>(static_cast<std::size_t>(t_len) * cell);
  auto abar_all = std::make_shared<std::vector<double>>(static_cast<std::size_t>(t_len) * cell);

  const double* uv = u.values().data();
  const double* dv = delta.values().data();
  const double* av = a.values().data();
  const double* bv = b.values().data();
  const double* cv = c.values().data();
  const double* skip = d.values().data();
  double* ov = out.values().data();
  double* h = h_all->data();
  double* abar = abar_all->data();

  for (int t = 0; t < t_len; ++t) {
    const double* brow = bv + static_cast<std::size_t>(t) * n_state;
    const double* crow = cv + static_cast<std::size_t>(t) * n_state;
    double* hrow = h + static_cast<std::size_t>(t) * cell;
    double* arow = abar + static_cast<std::size_t>(t) * cell;
    const double* hprev = t > 0 ? h + static_cast<std::size_t>(t - 1) * cell : nullptr;
    bool finite = true;
    for (int ch = 0; ch < d_inner; ++ch) {
      double dtc = dv[static_cast<std::size_t>(t) * d_inner + ch];
      double utc = uv[static_cast<std::size_t>(t) * d_inner + ch];
      const double* arow_a = av + static_cast<std::size_t>(ch) * n_state;
      double* hc = hrow + static_cast<std::size_t>(ch) * n_state;
      double* ac = arow + static_cast<std::size_t>(ch) * n_state;
      const double* hp = hprev ? hprev + static_cast<std::size_t>(ch) * n_state : nullptr;
      double acc = 0.0;
      for (int s = 0; s < n_state; ++s) {
        double ab = std::exp(dtc * arow_a[s]);
        double hv = ab * (hp ? hp[s] : 0.0) + dtc * brow[s] * utc;
        ac[s] = ab;
        hc[s] = hv;
        acc += crow[s] * hv;
        finite = finite && std::isfinite(hv);
      }
      acc += skip[ch] * utc;
      ov[static_cast<std::size_t>(t) * d_inner + ch] = acc;
      finite = finite && std::isfinite(acc);
    }
    if (!finite) {
      throw NumericError("selective_scan: non-finite state at position t=" + std::to_string(t));
    }
  }
  if (!rg) return out;

  auto backward = [t_len, d_inner, n_state, cell, h_all, abar_all](Tensor& o) {
    Tensor& pu = o.node()->parents[0];
    Tensor& pdelta = o.node()->parents[1];
    Tensor& pa = o.node()->parents[2];
    Tensor& pb = o.node()->parents[3];
    Tensor& pc = o.node()->parents[4];
    Tensor& pd = o.node()->parents[5];
    const double* og = o.grad().data();
    const double* uv = pu.values().data();
    const double* dv = pdelta.values().data();
    const double* av = pa.values().data();
    const double* bv = pb.values().data();
    const double* cv = pc.values().data();
    const double* skip = pd.values().data();
    const double* h = h_all->data();
    const double* abar = abar_all->data();

    std::vector<double> gh(cell, 0.0);  // running dL/dh_t
    // Local accumulators avoid requires_grad branching in the hot loop;
    // only requested gradients are written back at the end.
    std::vector<double> gu(pu.numel(), 0.0), gdelta(pdelta.numel(), 0.0),
        ga(pa.numel(), 0.0), gb(pb.numel(), 0.0), gc(pc.numel(), 0.0), gd(pd.numel(), 0.0);

    for (int t = t_len - 1; t >= 0; --t) {
      const double* brow = bv + static_cast<std::size_t>(t) * n_state;
      const double* crow = cv + static_cast<std::size_t>(t) * n_state;
      const double* hrow = h + static_cast<std::size_t>(t) * cell;
      const double* arow = abar + static_cast<std::size_t>(t) * cell;
      const double* hprev = t > 0 ? h + static_cast<std::size_t>(t - 1) * cell : nullptr;
      double* gbrow = gb.data() + static_cast<std::size_t>(t) * n_state;
      double* gcrow = gc.data() + static_cast<std::size_t>(t) * n_state;
      for (int ch = 0; ch < d_inner; ++ch) {
        std::size_t tc = static_cast<std::size_t>(t) * d_inner + ch;
        double gy = og[tc];
        double dtc = dv[tc];
        double utc = uv[tc];
        const double* hc = hrow + static_cast<std::size_t>(ch) * n_state;
        const double* ac = arow + static_cast<std::size_t>(ch) * n_state;
        const double* hp = hprev ? hprev + static_cast<std::size_t>(ch) * n_state : nullptr;
        const double* arow_a = av + static_cast<std::size_t>(ch) * n_state;
        double* ghc = gh.data() + static_cast<std::size_t>(ch) * n_state;
        double* gac = ga.data() + static_cast<std::size_t>(ch) * n_state;

        gd[static_cast<std::size_t>(ch)] += gy * utc;
        double gu_acc = gy * skip[ch];
        double gdelta_acc = 0.0;
        for (int s = 0; s < n_state; ++s) {
          gcrow[s] += gy * hc[s];
          double g = ghc[s] + gy * crow[s];
          double hpv = hp ? hp[s] : 0.0;
          gdelta_acc += g * (arow_a[s] * ac[s] * hpv + brow[s] * utc);
          gac[s] += g * dtc * ac[s] * hpv;
          gbrow[s] += g * dtc * utc;
          gu_acc += g * dtc * brow[s];
          ghc[s] = g * ac[s];
        }
        gu[tc] += gu_acc;
        gdelta[tc] += gdelta_acc;
      }
    }

    auto write_back = [](Tensor& p, const std::vector<double>& acc) {
      if (!p.requires_grad()) return;
      auto& pg = p.grad();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += acc[i];
    };
    write_back(pu, gu);
    write_back(pdelta, gdelta);
    write_back(pa, ga);
    write_back(pb, gb);
    write_back(pc, gc);
    write_back(pd, gd);
  };

  out.node() = std::make_shared<Node>();
  out.node()->parents = {u, delta, a, b, c, d};
  out.node()->backward = backward;
  return out;
}

Tensor selective_scan(const Tensor& u, const SelectiveSSMParams& params) {
  Tensor x_dbl = o::matmul(u, params.w_x);  // [T, dt_rank + 2n]
  Tensor dt_low = o::slice(x_dbl, 1, 0, params.dt_rank);
  Tensor b_seq = o::slice(x_dbl, 1, params.dt_rank, params.d_state);
  Tensor c_seq = o::slice(x_dbl, 1, params.dt_rank + params.d_state, params.d_state);
  Tensor delta = o::softplus(o::linear(dt_low, params.w_dt, params.b_dt));
  Tensor a = o::scalar_mul(o::exp(params.a_log), -1.0);
  return selective_scan_raw(u, delta, a, b_seq, c_seq, params.d_skip);
}

MambaBranch MambaBranch::init(int d_inner, int d_state, int dt_rank, int conv_kernel,
                              RngStream& rng) {
  MambaBranch br;
  double bound = 1.0 / std::sqrt(static_cast<double>(conv_kernel));
  br.conv_w = Tensor::zeros({d_inner, conv_kernel}, true);
  for (auto& v : br.conv_w.values()) v = rng.uniform(-bound, bound);
  br.conv_b = Tensor::zeros({d_inner}, true);
  for (auto& v : br.conv_b.values()) v = rng.uniform(-bound, bound);
  br.ssm = SelectiveSSMParams::init(d_inner, d_state, dt_rank, rng);
  return br;
}

void MambaBranch::collect_params(std::vector<NamedParam>& out, const std::string& prefix) const {
  out.push_back({prefix + ".conv_w", conv_w});
  out.push_back({prefix + ".conv_b", conv_b});
  ssm.collect_params(out, prefix + ".ssm");
}

BiMambaLayer BiMambaLayer::init(int d_model, int d_inner, int d_state, int dt_rank,
                                int conv_kernel, RngStream& rng) {
  BiMambaLayer l;
  l.d_model = d_model;
  l.d_inner = d_inner;
  l.w_z = init_linear_weight(d_model, d_inner, rng);
  l.w_s = init_linear_weight(d_model, d_inner, rng);
  l.fwd = MambaBranch::init(d_inner, d_state, dt_rank, conv_kernel, rng);
  l.bwd = MambaBranch::init(d_inner, d_state, dt_rank, conv_kernel, rng);
  l.w_out = init_linear_weight(d_inner, d_model, rng);
  return l;
}

void BiMambaLayer::collect_params(std::vector<NamedParam>& out, const std::string& prefix) const {
  out.push_back({prefix + ".w_z", w_z});
  out.push_back({prefix + ".w_s", w_s});
  fwd.collect_params(out, prefix + ".fwd");
  bwd.collect_params(out, prefix + ".bwd");
  out.push_back({prefix + ".w_out", w_out});
}

Tensor bimamba_forward(const Tensor& n, const BiMambaLayer& layer) {
  Tensor z = o::matmul(n, layer.w_z);
  Tensor s_fwd = o::matmul(n, layer.w_s);
  Tensor s_bwd = o::flip_sequence(s_fwd);
  Tensor c_fwd = o::conv1d_depthwise_causal(s_fwd, layer.fwd.conv_w, layer.fwd.conv_b);
  Tensor c_bwd = o::conv1d_depthwise_causal(s_bwd, layer.bwd.conv_w, layer.bwd.conv_b);
  Tensor gate = o::silu(z);
  Tensor o_fwd = o::mul(gate, selective_scan(c_fwd, layer.fwd.ssm));
  // The backward stream runs in flipped order, so its gate must follow the
  // same ordering for positions to line up after the final flip.
  Tensor o_bwd = o::mul(o::flip_sequence(gate), selective_scan(c_bwd, layer.bwd.ssm));
  Tensor merged = o::scalar_mul(o::add(o_fwd, o::flip_sequence(o_bwd)), 0.5);
  return o::matmul(merged, layer.w_out);
}

MambaBlock MambaBlock::init(int d_model, int d_inner, int d_state, int dt_rank, int conv_kernel,
                            int ffn_hidden, RngStream& rng) {
  MambaBlock blk;
  blk.ln1_g = Tensor::full({d_model}, 1.0, true);
  blk.ln1_b = Tensor::zeros({d_model}, true);
  blk.ln2_g = Tensor::full({d_model}, 1.0, true);
  blk.ln2_b = Tensor::zeros({d_model}, true);
  blk.mixer = BiMambaLayer::init(d_model, d_inner, d_state, dt_rank, conv_kernel, rng);
  blk.ffn_w1 = init_linear_weight(d_model, ffn_hidden, rng);
  blk.ffn_b1 = init_linear_bias(d_model, ffn_hidden, rng);
  blk.ffn_w2 = init_linear_weight(ffn_hidden, d_model, rng);
  blk.ffn_b2 = init_linear_bias(ffn_hidden, d_model, rng);
  return blk;
}

void MambaBlock::collect_params(std::vector<NamedParam>& out, const std::string& prefix) const {
  out.push_back({prefix + ".ln1_g", ln1_g});
  out.push_back({prefix + ".ln1_b", ln1_b});
  mixer.collect_params(out, prefix + ".mixer");
  out.push_back({prefix + ".ln2_g", ln2_g});
  out.push_back({prefix + ".ln2_b", ln2_b});
  out.push_back({prefix + ".ffn_w1", ffn_w1});
  out.push_back({prefix + ".ffn_b1", ffn_b1});
  out.push_back({prefix + ".ffn_w2", ffn_w2});
  out.push_back({prefix + ".ffn_b2", ffn_b2});
}

Tensor mamba_block_forward(const Tensor& h, const MambaBlock& block) {
  Tensor mixed = bimamba_forward(o::layer_norm(h, block.ln1_g, block.ln1_b), block.mixer);
  Tensor h1 = o::add(mixed, h);
  Tensor normed = o::layer_norm(h1, block.ln2_g, block.ln2_b);
  Tensor ffn = o::linear(o::silu(o::linear(normed, block.ffn_w1, block.ffn_b1)), block.ffn_w2,
                         block.ffn_b2);
  return o::add(ffn, h1);
}

TransformerBlock TransformerBlock::init(int d_model, int n_heads, int ffn_hidden, RngStream& rng) {
  if (d_model % n_heads != 0) {
    throw ShapeError("transformer: d_model must be divisible by n_heads");
  }
  TransformerBlock blk;
  blk.n_heads = n_heads;
  blk.ln1_g = Tensor::full({d_model}, 1.0, true);
  blk.ln1_b = Tensor::zeros({d_model}, true);
  blk.ln2_g = Tensor::full({d_model}, 1.0, true);
  blk.ln2_b = Tensor::zeros({d_model}, true);
  blk.w_q = init_linear_weight(d_model, d_model, rng);
  blk.b_q = init_linear_bias(d_model, d_model, rng);
  blk.w_k = init_linear_weight(d_model, d_model, rng);
  blk.b_k = init_linear_bias(d_model, d_model, rng);
  blk.w_v = init_linear_weight(d_model, d_model, rng);
  blk.b_v = init_linear_bias(d_model, d_model, rng);
  blk.w_o = init_linear_weight(d_model, d_model, rng);
  blk.b_o = init_linear_bias(d_model, d_model, rng);
  blk.ffn_w1 = init_linear_weight(d_model, ffn_hidden, rng);
  blk.ffn_b1 = init_linear_bias(d_model, ffn_hidden, rng);
  blk.ffn_w2 = init_linear_weight(ffn_hidden, d_model, rng);
  blk.ffn_b2 = init_linear_bias(ffn_hidden, d_model, rng);
  return blk;
}

void TransformerBlock::collect_params(std::vector<NamedParam>& out,
                                      const std::string& prefix) const {
  out.push_back({prefix + ".ln1_g", ln1_g});
  out.push_back({prefix + ".ln1_b", ln1_b});
  out.push_back({prefix + ".w_q", w_q});
  out.push_back({prefix + ".b_q", b_q});
  out.push_back({prefix + ".w_k", w_k});
  out.push_back({prefix + ".b_k", b_k});
  out.push_back({prefix + ".w_v", w_v});
  out.push_back({prefix + ".b_v", b_v});
  out.push_back({prefix + ".w_o", w_o});
  out.push_back({prefix + ".b_o", b_o});
  out.push_back({prefix + ".ln2_g", ln2_g});
  out.push_back({prefix + ".ln2_b", ln2_b});
  out.push_back({prefix + ".ffn_w1", ffn_w1});
  out.push_back({prefix + ".ffn_b1", ffn_b1});
  out.push_back({prefix + ".ffn_w2", ffn_w2});
  out.push_back({prefix + ".ffn_b2", ffn_b2});
}

Tensor transformer_block_forward(const Tensor& h, const TransformerBlock& block,
                                 std::vector<Tensor>* attn) {
  int d_model = h.dim(1);
  int d_head = d_model / block.n_heads;
  Tensor normed = o::layer_norm(h, block.ln1_g, block.ln1_b);
  Tensor q = o::linear(normed, block.w_q, block.b_q);
  Tensor k = o::linear(normed, block.w_k, block.b_k);
  Tensor v = o::linear(normed, block.w_v, block.b_v);
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(static_cast<std::size_t>(block.n_heads));
  double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  for (int head = 0; head < block.n_heads; ++head) {
    Tensor qh = o::slice(q, 1, head * d_head, d_head);
    Tensor kh = o::slice(k, 1, head * d_head, d_head);
    Tensor vh = o::slice(v, 1, head * d_head, d_head);
    Tensor scores = o::scalar_mul(o::matmul(qh, o::transpose(kh)), scale);
    Tensor weights = o::softmax(scores, 1);
    if (attn) attn->push_back(weights);
    head_outputs.push_back(o::matmul(weights, vh));
  }
  Tensor mhsa = o::linear(block.n_heads == 1 ? head_outputs[0] : o::concat(head_outputs, 1),
                          block.w_o, block.b_o);
  Tensor h1 = o::add(mhsa, h);
  Tensor normed2 = o::layer_norm(h1, block.ln2_g, block.ln2_b);
  Tensor ffn = o::linear(o::silu(o::linear(normed2, block.ffn_w1, block.ffn_b1)), block.ffn_w2,
                         block.ffn_b2);
  return o::add(ffn, h1);
}

namespace {

CountResult linear_count(int in, int out, bool bias, int t) {
  CountResult r;
  r.params = static_cast<long long>(in) * out + (bias ? out : 0);
  r.macs = static_cast<long long>(t) * in * out;
  return r;
}

CountResult& operator+=(CountResult& lhs, const CountResult& rhs) {
  lhs.params += rhs.params;
  lhs.macs += rhs.macs;
  return lhs;
}

}  // namespace

CountResult count_linear(int in, int out, bool bias, int seq_len) {
  return linear_count(in, out, bias, seq_len);
}

CountResult count_params_and_macs(const SelectiveSSMParams& p, int seq_len) {
  CountResult r;
  r += linear_count(p.d_inner, p.dt_rank + 2 * p.d_state, false, seq_len);  // w_x
  r += linear_count(p.dt_rank, p.d_inner, true, seq_len);                   // dt projection
  r.params += static_cast<long long>(p.d_inner) * p.d_state + p.d_inner;    // A, D
  r.macs += static_cast<long long>(seq_len) * p.d_inner * (5 * p.d_state + 1);
  return r;
}

CountResult count_params_and_macs(const BiMambaLayer& layer, int seq_len) {
  CountResult r;
  r += linear_count(layer.d_model, layer.d_inner, false, seq_len);  // gate
  r += linear_count(layer.d_model, layer.d_inner, false, seq_len);  // sequence
  for (const MambaBranch* br : {&layer.fwd, &layer.bwd}) {
    int k = br->conv_w.dim(1);
    r.params += static_cast<long long>(layer.d_inner) * k + layer.d_inner;
    r.macs += static_cast<long long>(seq_len) * layer.d_inner * k;
    r += count_params_and_macs(br->ssm, seq_len);
  }
  r += linear_count(layer.d_inner, layer.d_model, false, seq_len);  // out
  return r;
}

CountResult count_params_and_macs(const MambaBlock& block, int seq_len) {
  CountResult r = count_params_and_macs(block.mixer, seq_len);
  int d_model = block.mixer.d_model;
  int hidden = block.ffn_w1.dim(1);
  r.params += 4LL * d_model;  // two layer norms
  r += linear_count(d_model, hidden, true, seq_len);
  r += linear_count(hidden, d_model, true, seq_len);
  return r;
}

CountResult count_params_and_macs(const TransformerBlock& block, int seq_len) {
  CountResult r;
  int d_model = block.w_q.dim(0);
  int hidden = block.ffn_w1.dim(1);
  r.params += 4LL * d_model;  // two layer norms
  for (int i = 0; i < 4; ++i) r += linear_count(d_model, d_model, true, seq_len);
  r.macs += 2LL * seq_len * seq_len * d_model;  // QK^T and AV
  r += linear_count(d_model, hidden, true, seq_len);
  r += linear_count(hidden, d_model, true, seq_len);
  return r;
}

}  // namespace hmamba
