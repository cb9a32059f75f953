#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hmamba/corpus.hpp"
#include "hmamba/eval.hpp"
#include "hmamba/losses.hpp"
#include "hmamba/model.hpp"

namespace hmamba {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 32;
  double lr_main = 2e-3;
  double lr_utt_head = 9e-5;
  double warmup_frac = 0.4;
  double hold_frac = 0.4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double alpha = 0.7;
  double beta = 0.003;
  std::array<double, 3> omega = {1.0, 1.0, 1.0};
  double dev_frac = 0.1;

  void validate() const;  // throws ValidationError
};

// Tri-phase schedule: linear ramp 0 -> peak over the first warmup fraction of
// steps, flat hold, then linear decay to 0 at the final step.
double lr_at(long long step, long long total_steps, double peak, double warmup_frac = 0.4,
             double hold_frac = 0.4);

// Adam with bias correction and two learning-rate groups: the utterance-level
// APA regressors against everything else. Group membership is checked to be a
// partition at construction.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<NamedParam> params, const TrainConfig& cfg);

  void step(double lr_main, double lr_utt_head);
  long long steps_taken() const { return step_count_; }
  std::size_t n_params() const { return params_.size(); }
  std::size_t n_utt_head_params() const { return n_utt_group_; }

 private:
  std::vector<NamedParam> params_;
  std::vector<char> in_utt_group_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  long long step_count_ = 0;
  std::size_t n_utt_group_ = 0;
};

struct EpochStats {
  int epoch = 0;
  long long step = 0;  // optimizer steps completed so far
  double lr_main = 0.0;
  double lr_utt_head = 0.0;
  double apa = 0.0;
  double mdd = 0.0;      // weighted, per scored position
  double mdd_hit = 0.0;  // unweighted components, per scored position
  double mdd_mis = 0.0;
  double mis_weight = 1.0;
  double total = 0.0;
  double dev_loss = 0.0;
  EvalReport dev;
};

struct TrainResult {
  HMambaModel model;  // final parameters
  std::vector<EpochStats> history;
  std::string final_checkpoint;
  std::string best_checkpoint;
  double best_dev_loss = 0.0;
  LossConfig loss_config;
  std::vector<std::string> warnings;
};

// Seed-deterministic dev split: utterances whose id hash lands in the lowest
// dev_frac of the hash space form the dev set.
std::vector<std::size_t> dev_split(const Corpus& corpus, std::uint64_t seed, double dev_frac);

// Full single-seed protocol: split, estimate frequencies, train with the
// tri-phase schedule, track the best dev loss, and write history + curves +
// two checkpoints under out_dir using `tag` in the file names.
TrainResult train(const Corpus& corpus, const FeatureFile& features,
                  const HMambaConfig& model_cfg, const TrainConfig& cfg, std::uint64_t seed,
                  const std::string& out_dir, const std::string& tag);

}  // namespace hmamba
