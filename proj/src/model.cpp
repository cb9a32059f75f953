#include "hmamba/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace hmamba {

using nlohmann::json;
namespace o = ops;

json HMambaConfig::to_json() const {
  return json{{"d", d},
              {"l_phone", l_phone},
              {"l_word", l_word},
              {"l_utt", l_utt},
              {"conv_kernel", conv_kernel},
              {"word_conv_kernels", word_conv_kernels},
              {"word_conv_size", word_conv_size},
              {"tau", tau},
              {"d_state", d_state},
              {"expand", expand},
              {"dt_rank", dt_rank},
              {"ffn_hidden", ffn_hidden},
              {"head_hidden", head_hidden},
              {"max_positions", max_positions},
              {"n_heads", n_heads},
              {"feature_dim", feature_dim}};
}

HMambaConfig HMambaConfig::from_json(const json& j) {
  HMambaConfig c;
  c.d = j.value("d", c.d);
  c.l_phone = j.value("l_phone", c.l_phone);
  c.l_word = j.value("l_word", c.l_word);
  c.l_utt = j.value("l_utt", c.l_utt);
  c.conv_kernel = j.value("conv_kernel", c.conv_kernel);
  c.word_conv_kernels = j.value("word_conv_kernels", c.word_conv_kernels);
  c.word_conv_size = j.value("word_conv_size", c.word_conv_size);
  c.tau = j.value("tau", c.tau);
  c.d_state = j.value("d_state", c.d_state);
  c.expand = j.value("expand", c.expand);
  c.dt_rank = j.value("dt_rank", c.dt_rank);
  c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  return c;
}

HeadFFN HeadFFN::init(int d, int hidden, int out, RngStream& rng) {
  HeadFFN h;
  h.w1 = init_linear_weight(d, hidden, rng);
  h.b1 = init_linear_bias(d, hidden, rng);
  h.w2 = init_linear_weight(hidden, out, rng);
  h.b2 = init_linear_bias(hidden, out, rng);
  return h;
}

Tensor HeadFFN::apply(const Tensor& x) const {
  return o::linear(o::silu(o::linear(x, w1, b1)), w2, b2);
}

void HeadFFN::collect_params(std::vector<NamedParam>& out, const std::string& prefix) const {
  out.push_back({prefix + ".w1", w1});
  out.push_back({prefix + ".b1", b1});
  out.push_back({prefix + ".w2", w2});
  out.push_back({prefix + ".b2", b2});
}

HMambaModel HMambaModel::init(const HMambaConfig& config, const PhoneInventory& inventory,
                              RngStream& rng) {
  if (config.feature_dim <= 0) {
    throw ValidationError("model init: feature_dim must be set from the feature manifest");
  }
  HMambaModel m;
  m.config = config;
  m.inventory = inventory;
  m.in_w = init_linear_weight(config.feature_dim, config.d, rng);
  m.in_b = init_linear_bias(config.feature_dim, config.d, rng);
  m.embeddings =
      PhonologicalEmbeddings::init(inventory.embed_vocab(), config.max_positions, config.d, rng);
  auto make_block = [&] {
    return MambaBlock::init(config.d, config.d_inner(), config.d_state, config.dt_rank_eff(),
                            config.conv_kernel, config.ffn_hidden_eff(), rng);
  };
  for (int i = 0; i < config.l_phone; ++i) m.phone_blocks.push_back(make_block());
  for (int i = 0; i < config.l_word; ++i) m.word_blocks.push_back(make_block());
  {
    int k = config.word_conv_size;
    double bound = 1.0 / std::sqrt(static_cast<double>(config.d * k));
    m.word_conv_k = Tensor::zeros({config.word_conv_kernels, config.d, k}, true);
    for (auto& v : m.word_conv_k.values()) v = rng.uniform(-bound, bound);
    m.word_conv_b = Tensor::zeros({config.word_conv_kernels}, true);
    for (auto& v : m.word_conv_b.values()) v = rng.uniform(-bound, bound);
  }
  m.word_proj_w = init_linear_weight(config.word_conv_kernels, config.d, rng);
  m.word_proj_b = init_linear_bias(config.word_conv_kernels, config.d, rng);
  for (int i = 0; i < config.l_utt; ++i) m.utt_blocks.push_back(make_block());
  m.pool_w = Tensor::zeros({4}, true);
  for (auto& v : m.pool_w.values()) v = rng.normal(0.0, 0.02);
  m.phone_head = HeadFFN::init(config.d, config.head_hidden, 1, rng);
  for (auto& h : m.word_heads) h = HeadFFN::init(config.d, config.head_hidden, 1, rng);
  for (auto& h : m.utt_heads) h = HeadFFN::init(config.d, config.head_hidden, 1, rng);
  m.mdd_head = HeadFFN::init(config.d, config.head_hidden, inventory.num_classes(), rng);
  return m;
}

std::vector<NamedParam> HMambaModel::parameters() const {
  std::vector<NamedParam> out;
  out.push_back({"in_w", in_w});
  out.push_back({"in_b", in_b});
  embeddings.collect_params(out, "embeddings");
  for (std::size_t i = 0; i < phone_blocks.size(); ++i) {
    phone_blocks[i].collect_params(out, "phone_blocks." + std::to_string(i));
  }
  for (std::size_t i = 0; i < word_blocks.size(); ++i) {
    word_blocks[i].collect_params(out, "word_blocks." + std::to_string(i));
  }
  out.push_back({"word_conv_k", word_conv_k});
  out.push_back({"word_conv_b", word_conv_b});
  out.push_back({"word_proj_w", word_proj_w});
  out.push_back({"word_proj_b", word_proj_b});
  for (std::size_t i = 0; i < utt_blocks.size(); ++i) {
    utt_blocks[i].collect_params(out, "utt_blocks." + std::to_string(i));
  }
  out.push_back({"pool_w", pool_w});
  phone_head.collect_params(out, "phone_head");
  for (std::size_t i = 0; i < word_heads.size(); ++i) {
    word_heads[i].collect_params(out, "word_heads." + std::to_string(i));
  }
  for (std::size_t i = 0; i < utt_heads.size(); ++i) {
    utt_heads[i].collect_params(out, "utt_heads." + std::to_string(i));
  }
  mdd_head.collect_params(out, "mdd_head");
  return out;
}

bool HMambaModel::in_utterance_head_group(const std::string& name) {
  return name.rfind("utt_heads.", 0) == 0;
}

void HMambaModel::clear_grads() const {
  for (auto& p : parameters()) {
    Tensor t = p.tensor;
    if (t.grad_defined()) t.clear_grad();
  }
}

Tensor attention_pool(const Tensor& h, const Tensor& scores_q, const Tensor& w, double tau) {
  if (h.dim(0) != scores_q.dim(0)) {
    throw ShapeError("attention_pool: H and q disagree on sequence length");
  }
  if (w.ndim() != 1 || w.dim(0) != scores_q.dim(1)) {
    throw ShapeError("attention_pool: weight width must match q");
  }
  Tensor logits = o::scalar_mul(o::matmul(scores_q, o::reshape(w, {w.dim(0), 1})), 1.0 / tau);
  Tensor alpha = o::softmax(logits, 0);  // [N, 1]
  return o::matmul(o::transpose(alpha), h);
}

std::vector<std::array<double, 3>> broadcast_word_targets(const UtteranceRecord& record) {
  int n = record.n_positions();
  std::vector<std::array<double, 3>> targets(static_cast<std::size_t>(n), {0.0, 0.0, 0.0});
  std::vector<bool> covered(static_cast<std::size_t>(n), false);
  for (const auto& w : record.words) {
    for (int pos = w.begin; pos < w.end; ++pos) {
      targets[static_cast<std::size_t>(pos)] = w.scores;
      covered[static_cast<std::size_t>(pos)] = true;
    }
  }
  for (int pos = 0; pos < n; ++pos) {
    if (!record.is_sil(pos) && !covered[static_cast<std::size_t>(pos)]) {
      throw ValidationError(record.utt_id + ": scored position " + std::to_string(pos) +
                            " has no word");
    }
  }
  return targets;
}

std::vector<std::array<double, 3>> aggregate_word_predictions(
    const std::vector<std::array<double, 3>>& per_phone, const UtteranceRecord& record) {
  if (static_cast<int>(per_phone.size()) != record.n_positions()) {
    throw ShapeError("aggregate_word_predictions: prediction rows disagree with phone count");
  }
  std::vector<std::array<double, 3>> out;
  out.reserve(record.words.size());
  for (const auto& w : record.words) {
    if (w.end <= w.begin) throw ValidationError(record.utt_id + ": empty word span");
    std::array<double, 3> acc{0.0, 0.0, 0.0};
    for (int pos = w.begin; pos < w.end; ++pos) {
      for (std::size_t a = 0; a < 3; ++a) acc[a] += per_phone[static_cast<std::size_t>(pos)][a];
    }
    double count = static_cast<double>(w.end - w.begin);
    for (std::size_t a = 0; a < 3; ++a) acc[a] /= count;
    out.push_back(acc);
  }
  return out;
}

void diagnose(const Tensor& mdd_logits, const UtteranceRecord& record,
              const PhoneInventory& inventory, std::vector<int>& diagnosis,
              std::vector<bool>& error_states) {
  int n = record.n_positions();
  int classes = mdd_logits.dim(1);
  diagnosis.assign(static_cast<std::size_t>(n), -1);
  error_states.assign(static_cast<std::size_t>(n), false);
  for (int pos = 0; pos < n; ++pos) {
    if (record.is_sil(pos)) continue;
    int best = 0;
    for (int c = 1; c < classes; ++c) {
      // Strict comparison keeps ties on the lowest class id.
      if (mdd_logits.at(pos, c) > mdd_logits.at(pos, best)) best = c;
    }
    diagnosis[static_cast<std::size_t>(pos)] = best;
    int canon = inventory.class_id(record.phones[static_cast<std::size_t>(pos)]);
    error_states[static_cast<std::size_t>(pos)] = best != canon;
  }
}

ModelOutput forward(const UtteranceRecord& record, const FeatureBundle& bundle,
                    const HMambaModel& model, bool training) {
  (void)training;  // dropout is applied during feature assembly
  Tensor x = project(bundle, model.in_w, model.in_b);
  Tensor h = phone_level_input(x, record, model.inventory, model.embeddings);
  for (const auto& block : model.phone_blocks) h = mamba_block_forward(h, block);
  Tensor h_phone = h;

  ModelOutput out;
  out.phone_scores = model.phone_head.apply(h_phone);
  out.mdd_logits = model.mdd_head.apply(h_phone);

  Tensor hw = h_phone;
  for (const auto& block : model.word_blocks) hw = mamba_block_forward(hw, block);
  hw = o::conv1d(hw, model.word_conv_k, model.word_conv_b, o::ConvMode::kSame);
  hw = o::linear(o::silu(hw), model.word_proj_w, model.word_proj_b);
  Tensor h_word = hw;

  std::vector<Tensor> word_cols;
  for (const auto& head : model.word_heads) word_cols.push_back(head.apply(h_word));
  out.word_scores = o::concat(word_cols, 1);

  Tensor hu = h_word;
  for (const auto& block : model.utt_blocks) hu = mamba_block_forward(hu, block);
  Tensor q = o::concat({out.phone_scores, out.word_scores}, 1);  // [N, 4]
  Tensor pooled = attention_pool(hu, q, model.pool_w, model.config.tau);
  std::vector<Tensor> utt_cols;
  for (const auto& head : model.utt_heads) utt_cols.push_back(head.apply(pooled));
  out.utt_scores = o::concat(utt_cols, 1);

  diagnose(out.mdd_logits, record, model.inventory, out.diagnosis, out.error_states);
  return out;
}

CountResult count_params_and_macs(const HMambaModel& model, int seq_len) {
  const auto& c = model.config;
  CountResult r = count_linear(c.feature_dim, c.d, true, seq_len);
  // Embedding lookups: parameters only.
  r.params += static_cast<long long>(model.embeddings.phone_table.numel()) +
              static_cast<long long>(model.embeddings.absolute_table.numel()) +
              static_cast<long long>(model.embeddings.relative_table.numel());
  auto add = [&](const CountResult& x) {
    r.params += x.params;
    r.macs += x.macs;
  };
  for (const auto& b : model.phone_blocks) add(count_params_and_macs(b, seq_len));
  for (const auto& b : model.word_blocks) add(count_params_and_macs(b, seq_len));
  r.params += static_cast<long long>(model.word_conv_k.numel()) + c.word_conv_kernels;
  r.macs += static_cast<long long>(seq_len) * c.word_conv_kernels * c.d * c.word_conv_size;
  add(count_linear(c.word_conv_kernels, c.d, true, seq_len));
  for (const auto& b : model.utt_blocks) add(count_params_and_macs(b, seq_len));
  r.params += 4;  // pooling vector
  r.macs += static_cast<long long>(seq_len) * 4;
  auto head = [&](int out_width, int count, int t) {
    for (int i = 0; i < count; ++i) {
      add(count_linear(c.d, c.head_hidden, true, t));
      add(count_linear(c.head_hidden, out_width, true, t));
    }
  };
  head(1, 1, seq_len);                                // phone
  head(1, 3, seq_len);                                // word
  head(1, 5, 1);                                      // utterance heads see pooled h
  head(model.inventory.num_classes(), 1, seq_len);    // classifier
  return r;
}

void save_checkpoint(const HMambaModel& model, const std::string& path, const json& extra) {
  json j;
  j["format"] = "capt-model";
  j["version"] = 1;
  j["config"] = model.config.to_json();
  j["inventory"] = model.inventory.to_json();
  json params = json::object();
  for (const auto& p : model.parameters()) {
    params[p.name] = json{{"shape", p.tensor.shape()}, {"values", p.tensor.values()}};
  }
  j["params"] = params;
  j["extra"] = extra;
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write checkpoint: " + path);
  out << j.dump() << "\n";
}

HMambaModel load_checkpoint(const std::string& path, json* extra) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open checkpoint: " + path);
  json j;
  in >> j;
  if (j.value("format", "") != "capt-model") {
    throw ValidationError(path + ": not a model checkpoint");
  }
  HMambaConfig config = HMambaConfig::from_json(j.at("config"));
  PhoneInventory inventory = PhoneInventory::from_json(j.at("inventory"));
  RngStream rng(0);
  HMambaModel model = HMambaModel::init(config, inventory, rng);
  const auto& params = j.at("params");
  for (auto& p : model.parameters()) {
    if (!params.contains(p.name)) {
      throw ValidationError(path + ": checkpoint is missing parameter '" + p.name + "'");
    }
    const auto& pj = params.at(p.name);
    auto shape = pj.at("shape").get<std::vector<int>>();
    if (shape != p.tensor.shape()) {
      throw ValidationError(path + ": parameter '" + p.name + "' has shape " + shape_str(shape) +
                            " but the config expects " + shape_str(p.tensor.shape()));
    }
    auto values = pj.at("values").get<std::vector<double>>();
    Tensor t = p.tensor;
    t.values() = values;
  }
  if (extra) *extra = j.value("extra", json());
  return model;
}

}  // namespace hmamba
