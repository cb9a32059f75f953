#pragma once

#include <array>
#include <string>
#include <vector>

#include "hmamba/corpus.hpp"
#include "hmamba/model.hpp"

namespace hmamba {

struct LossConfig {
  std::array<double, 3> omega = {1.0, 1.0, 1.0};  // phone, word, utterance weights
  double alpha = 0.7;
  double beta = 0.003;
  double mu_mis = 0.0;
  double mu_hit = 0.0;
  bool dexent_active = true;  // cleared when the training set has no errors

  // (mu_hit / mu_mis)^alpha; 1 when decoupling is disabled.
  double mis_weight() const;

  static LossConfig from_frequencies(const PronunciationFrequencies& freq, double alpha,
                                     double beta, std::vector<std::string>* warnings = nullptr);
};

// Normalized regression targets for one utterance.
struct ApaTargets {
  std::vector<double> phone;                    // length N, zero at silence
  std::vector<std::array<double, 3>> word;      // word scores broadcast per phone
  std::array<double, 5> utterance{};
  std::vector<bool> mask;                       // true at scored positions
};

ApaTargets make_apa_targets(const UtteranceRecord& record, const ScoreScaler& scaler);

// Weighted sum over granularities of per-aspect masked MSE means.
Tensor apa_loss(const ModelOutput& output, const ApaTargets& targets,
                const std::array<double, 3>& omega, std::vector<std::string>* warnings = nullptr);

struct DexentParts {
  Tensor hit;    // cross-entropy sum over correct-pronunciation positions
  Tensor mis;    // cross-entropy sum over mispronounced positions
  Tensor total;  // hit + weight * mis
  int n_hit = 0;
  int n_mis = 0;
};

// Decoupled cross-entropy over one utterance; sums, not means, so callers can
// normalize per batch.
DexentParts dexent_loss(const Tensor& logits, const std::vector<int>& realized_cls,
                        const std::vector<int>& canonical_cls, const std::vector<bool>& mask,
                        const LossConfig& cfg);

Tensor total_loss(const Tensor& apa, const Tensor& mdd, double beta);

}  // namespace hmamba
