#pragma once

#include <array>
#include <string>
#include <vector>

#include "hmamba/corpus.hpp"
#include "hmamba/features.hpp"
#include "hmamba/ssm.hpp"

namespace hmamba {

struct HMambaConfig {
  int d = 128;
  int l_phone = 3;
  int l_word = 1;
  int l_utt = 1;
  int conv_kernel = 4;        // depthwise conv inside every Mamba branch
  int word_conv_kernels = 256;
  int word_conv_size = 3;
  double tau = 1.0;           // pooling temperature
  int d_state = 16;
  int expand = 1;             // d_inner = expand * d
  int dt_rank = 0;            // 0 -> ceil(d / 16)
  int ffn_hidden = 0;         // 0 -> 2 * d
  int head_hidden = 32;
  int max_positions = 256;
  int n_heads = 4;            // transformer baseline only
  int feature_dim = 0;        // set from the feature manifest

  int d_inner() const { return expand * d; }
  int dt_rank_eff() const { return dt_rank > 0 ? dt_rank : (d + 15) / 16; }
  int ffn_hidden_eff() const { return ffn_hidden > 0 ? ffn_hidden : 2 * d; }

  nlohmann::json to_json() const;
  static HMambaConfig from_json(const nlohmann::json& j);
};

// Scoring heads are single-hidden-layer feed-forward networks.
struct HeadFFN {
  Tensor w1, b1, w2, b2;

  static HeadFFN init(int d, int hidden, int out, RngStream& rng);
  Tensor apply(const Tensor& x) const;
  void collect_params(std::vector<NamedParam>& out, const std::string& prefix) const;
};

struct HMambaModel {
  HMambaConfig config;
  PhoneInventory inventory;
  Tensor in_w, in_b;  // acoustic feature projection
  PhonologicalEmbeddings embeddings;
  std::vector<MambaBlock> phone_blocks;
  std::vector<MambaBlock> word_blocks;
  Tensor word_conv_k;  // [kernels, d, size], same-padded
  Tensor word_conv_b;
  Tensor word_proj_w, word_proj_b;  // kernels -> d
  std::vector<MambaBlock> utt_blocks;
  Tensor pool_w;  // [4], attention pooling over concatenated scores
  HeadFFN phone_head;                 // d -> 1
  std::array<HeadFFN, 3> word_heads;  // accuracy, stress, total
  std::array<HeadFFN, 5> utt_heads;   // accuracy, completeness, fluency, prosody, total
  HeadFFN mdd_head;                   // d -> classes

  static HMambaModel init(const HMambaConfig& config, const PhoneInventory& inventory,
                          RngStream& rng);

  // Stable-ordered list of every trainable tensor.
  std::vector<NamedParam> parameters() const;
  // The utterance-level APA regressors form their own learning-rate group.
  static bool in_utterance_head_group(const std::string& name);

  void clear_grads() const;
};

struct ModelOutput {
  Tensor phone_scores;  // [N, 1], normalized score scale
  Tensor word_scores;   // [N, 3], per-position word-score predictions
  Tensor utt_scores;    // [1, 5]
  Tensor mdd_logits;    // [N, classes]
  std::vector<int> diagnosis;      // class id per position, -1 at silence
  std::vector<bool> error_states;  // false at silence
};

ModelOutput forward(const UtteranceRecord& record, const FeatureBundle& bundle,
                    const HMambaModel& model, bool training);

// alpha_i = exp(w . q_i / tau) / sum_j exp(w . q_j / tau); output sum alpha_i H_i.
Tensor attention_pool(const Tensor& h, const Tensor& scores_q, const Tensor& w, double tau);

// Raw word scores copied to every member phone; silence rows are zero and
// excluded by the scored mask.
std::vector<std::array<double, 3>> broadcast_word_targets(const UtteranceRecord& record);

// Mean of the per-phone predictions over each word, one row per word.
std::vector<std::array<double, 3>> aggregate_word_predictions(
    const std::vector<std::array<double, 3>>& per_phone, const UtteranceRecord& record);

// Argmax diagnosis (ties to the lowest class id) and positional error states.
void diagnose(const Tensor& mdd_logits, const UtteranceRecord& record,
              const PhoneInventory& inventory, std::vector<int>& diagnosis,
              std::vector<bool>& error_states);

CountResult count_params_and_macs(const HMambaModel& model, int seq_len);

void save_checkpoint(const HMambaModel& model, const std::string& path,
                     const nlohmann::json& extra);
HMambaModel load_checkpoint(const std::string& path, nlohmann::json* extra = nullptr);

}  // namespace hmamba
