#include "hmamba/losses.hpp"

#include <cmath>

namespace hmamba {

namespace o = ops;

double LossConfig::mis_weight() const {
  if (!dexent_active || mu_mis <= 0.0) return 1.0;
  return std::pow(mu_hit / mu_mis, alpha);
}

LossConfig LossConfig::from_frequencies(const PronunciationFrequencies& freq, double alpha,
                                        double beta, std::vector<std::string>* warnings) {
  LossConfig cfg;
  cfg.alpha = alpha;
  cfg.beta = beta;
  cfg.mu_mis = freq.mu_mis;
  cfg.mu_hit = freq.mu_hit;
  if (freq.mispronounced == 0) {
    cfg.dexent_active = false;
    if (warnings) {
      warnings->push_back(
          "training set has no mispronunciations; decoupled weighting disabled, "
          "falling back to plain cross-entropy");
    }
  }
  return cfg;
}

ApaTargets make_apa_targets(const UtteranceRecord& record, const ScoreScaler& scaler) {
  ApaTargets t;
  int n = record.n_positions();
  t.mask = record.scored_mask();
  t.phone.assign(static_cast<std::size_t>(n), 0.0);
  for (int pos = 0; pos < n; ++pos) {
    if (!record.is_sil(pos)) {
      t.phone[static_cast<std::size_t>(pos)] = scaler.normalize(
          scaler.phone_accuracy, record.phone_scores[static_cast<std::size_t>(pos)]);
    }
  }
  t.word = broadcast_word_targets(record);
  for (int pos = 0; pos < n; ++pos) {
    for (std::size_t a = 0; a < 3; ++a) {
      t.word[static_cast<std::size_t>(pos)][a] =
          record.is_sil(pos)
              ? 0.0
              : scaler.normalize(scaler.word[a], t.word[static_cast<std::size_t>(pos)][a]);
    }
  }
  for (std::size_t a = 0; a < 5; ++a) {
    t.utterance[a] = scaler.normalize(scaler.utterance[a], record.utt_scores[a]);
  }
  return t;
}

namespace {

// Mean squared error of one predicted column against constants, restricted to
// masked positions.
Tensor masked_column_mse(const Tensor& pred, int col, const std::vector<double>& target,
                         const std::vector<bool>& mask) {
  int n = pred.dim(0);
  long long count = 0;
  Tensor target_col = Tensor::zeros({n, 1});
  Tensor mask_col = Tensor::zeros({n, 1});
  for (int i = 0; i < n; ++i) {
    if (mask[static_cast<std::size_t>(i)]) {
      target_col.values()[static_cast<std::size_t>(i)] = target[static_cast<std::size_t>(i)];
      mask_col.values()[static_cast<std::size_t>(i)] = 1.0;
      ++count;
    }
  }
  Tensor col_pred = o::slice(pred, 1, col, 1);
  Tensor diff = o::sub(col_pred, target_col);
  Tensor masked_sq = o::mul(o::mul(diff, diff), mask_col);
  return o::scalar_mul(o::sum(masked_sq), 1.0 / static_cast<double>(count));
}

}  // namespace

Tensor apa_loss(const ModelOutput& output, const ApaTargets& targets,
                const std::array<double, 3>& omega, std::vector<std::string>* warnings) {
  long long scored = 0;
  for (bool b : targets.mask) scored += b ? 1 : 0;
  Tensor loss = Tensor::scalar(0.0);

  if (scored == 0) {
    if (warnings) warnings->push_back("no scored positions; phone and word losses skipped");
  } else {
    // Phone level: one aspect.
    Tensor phone = masked_column_mse(output.phone_scores, 0, targets.phone, targets.mask);
    loss = o::add(loss, o::scalar_mul(phone, omega[0]));
    // Word level: mean over the three aspect losses.
    Tensor word = Tensor::scalar(0.0);
    for (int a = 0; a < 3; ++a) {
      std::vector<double> col(targets.word.size());
      for (std::size_t i = 0; i < targets.word.size(); ++i) col[i] = targets.word[i][a];
      word = o::add(word, masked_column_mse(output.word_scores, a, col, targets.mask));
    }
    loss = o::add(loss, o::scalar_mul(word, omega[1] / 3.0));
  }

  // Utterance level: mean of the five per-aspect squared errors.
  Tensor utt = Tensor::scalar(0.0);
  for (int a = 0; a < 5; ++a) {
    Tensor diff = o::scalar_add(o::slice(output.utt_scores, 1, a, 1), -targets.utterance[a]);
    utt = o::add(utt, o::sum(o::mul(diff, diff)));
  }
  loss = o::add(loss, o::scalar_mul(utt, omega[2] / 5.0));
  return loss;
}

DexentParts dexent_loss(const Tensor& logits, const std::vector<int>& realized_cls,
                        const std::vector<int>& canonical_cls, const std::vector<bool>& mask,
                        const LossConfig& cfg) {
  int n = logits.dim(0), classes = logits.dim(1);
  if (static_cast<int>(realized_cls.size()) != n || static_cast<int>(canonical_cls.size()) != n ||
      static_cast<int>(mask.size()) != n) {
    throw ShapeError("dexent_loss: label sequences disagree with logits");
  }
  Tensor probs = o::clamp_min(o::softmax(logits, 1), 1e-12);
  Tensor logp = o::log(probs);
  Tensor hit_mask = Tensor::zeros({n, classes});
  Tensor mis_mask = Tensor::zeros({n, classes});
  DexentParts parts;
  for (int i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    int label = realized_cls[static_cast<std::size_t>(i)];
    if (label < 0 || label >= classes) {
      throw ShapeError("dexent_loss: label " + std::to_string(label) + " out of range");
    }
    bool mispronounced = label != canonical_cls[static_cast<std::size_t>(i)];
    Tensor& target = mispronounced ? mis_mask : hit_mask;
    target.at_mut(i, label) = 1.0;
    (mispronounced ? parts.n_mis : parts.n_hit) += 1;
  }
  parts.hit = o::scalar_mul(o::sum(o::mul(logp, hit_mask)), -1.0);
  parts.mis = o::scalar_mul(o::sum(o::mul(logp, mis_mask)), -1.0);
  parts.total = o::add(parts.hit, o::scalar_mul(parts.mis, cfg.mis_weight()));
  return parts;
}

Tensor total_loss(const Tensor& apa, const Tensor& mdd, double beta) {
  return ops::add(apa, ops::scalar_mul(mdd, beta));
}

}  // namespace hmamba
