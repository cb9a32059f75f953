#include "hmamba/synth.hpp"

#include <algorithm>
#include <cmath>

#include "hmamba/metrics.hpp"
#include "hmamba/rng.hpp"

namespace hmamba {

using nlohmann::json;

namespace {

constexpr int kScoreBlockDim = 4;
constexpr int kSslBlockDim = 8;

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }
double clamp(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

}  // namespace

SynthResult generate_synthetic(const SynthConfig& cfg) {
  if (cfg.error_rate < 0.0 || cfg.error_rate >= 1.0) {
    throw ValidationError("generate_synthetic: error_rate must lie in [0, 1)");
  }
  if (cfg.n_utts <= 0 || cfg.phones_per_utt <= 0) {
    throw ValidationError("generate_synthetic: counts must be positive");
  }
  RngStream structure = RngStream::derive(cfg.seed, "synth.structure");
  RngStream scores = RngStream::derive(cfg.seed, "synth.scores");
  RngStream feats = RngStream::derive(cfg.seed, "synth.features");

  SynthResult out;
  PhoneInventory inv = PhoneInventory::defaults();
  out.corpus.inventory = inv;
  out.corpus.scaler = ScoreScaler::defaults();
  const auto& scaler = out.corpus.scaler;

  int n_classes = inv.num_classes();
  // Canonical draws use the plain (non-SIL) canonical phones.
  int n_canon = inv.embed_vocab() - 1;

  for (int ui = 0; ui < cfg.n_utts; ++ui) {
    UtteranceRecord rec;
    {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "u%05d", ui);
      rec.utt_id = buf;
    }
    int target = std::max(1, cfg.phones_per_utt - 2 + structure.uniform_int(5));

    struct PlannedWord {
      std::vector<int> canon;  // canonical phone ids (embedding space)
    };
    std::vector<PlannedWord> planned;
    int placed = 0;
    while (placed < target) {
      int len = std::min(1 + structure.uniform_int(4), target - placed);
      PlannedWord w;
      for (int i = 0; i < len; ++i) w.canon.push_back(structure.uniform_int(n_canon));
      placed += len;
      planned.push_back(std::move(w));
    }

    auto push_sil = [&]() {
      rec.phones.push_back(kSilToken);
      rec.sil_duration.push_back(structure.uniform(0.05, 1.0));
      rec.realized.push_back("");
      rec.phone_scores.push_back(0.0);
    };

    if (structure.uniform(0.0, 1.0) < 0.35) push_sil();
    for (std::size_t wi = 0; wi < planned.size(); ++wi) {
      WordSpan span;
      span.begin = rec.n_positions();
      for (int canon_id : planned[wi].canon) {
        const std::string& canon = inv.canonical[static_cast<std::size_t>(canon_id)];
        std::string realized = canon;
        if (structure.uniform(0.0, 1.0) < cfg.error_rate) {
          // Uniform over the other realizable symbols (annotation set + [DEL]).
          int alt = structure.uniform_int(n_classes - 1);
          if (alt >= inv.class_id(canon)) ++alt;
          realized = inv.class_name(alt);
        }
        rec.phones.push_back(canon);
        rec.sil_duration.push_back(0.0);
        rec.realized.push_back(realized);
        bool correct = realized == canon;
        double base = correct ? 0.80 + 0.15 * scores.uniform(0.0, 1.0)
                              : 0.10 + 0.25 * scores.uniform(0.0, 1.0);
        double s_norm = clamp01(base + 0.5 * cfg.noise * scores.normal(0.0, 1.0));
        rec.phone_scores.push_back(scaler.denormalize(scaler.phone_accuracy, s_norm));
      }
      span.end = rec.n_positions();
      rec.words.push_back(span);
      if (wi + 1 < planned.size()) {
        if (structure.uniform(0.0, 1.0) < 0.35) push_sil();
      }
    }
    if (structure.uniform(0.0, 1.0) < 0.35) push_sil();

    // Word scores: accuracy is derived exactly from member phone scores,
    // stress is a stored noisy draw, total is derived from both.
    double jitter = 0.5 + 2.0 * cfg.noise;
    for (auto& w : rec.words) {
      double acc = 0.0;
      int count = 0;
      for (int pos = w.begin; pos < w.end; ++pos) {
        acc += rec.phone_scores[static_cast<std::size_t>(pos)];
        ++count;
      }
      acc = 5.0 * (acc / count);
      double stress = clamp(acc + scores.normal(0.0, jitter), 0.0, 10.0);
      w.scores = {acc, stress, (acc + stress) / 2.0};
    }
    double utt_acc = 0.0, utt_total = 0.0;
    for (const auto& w : rec.words) {
      utt_acc += w.scores[0];
      utt_total += w.scores[2];
    }
    utt_acc /= static_cast<double>(rec.words.size());
    utt_total /= static_cast<double>(rec.words.size());
    rec.utt_scores[0] = utt_acc;
    rec.utt_scores[1] = clamp(utt_acc + scores.normal(0.0, jitter), 0.0, 10.0);  // completeness
    rec.utt_scores[2] = clamp(utt_acc + scores.normal(0.0, jitter), 0.0, 10.0);  // fluency
    rec.utt_scores[3] = clamp(utt_acc + scores.normal(0.0, jitter), 0.0, 10.0);  // prosody
    rec.utt_scores[4] = utt_total;

    // Feature blocks carrying the planted signal.
    int n = rec.n_positions();
    UtteranceFeatures uf;
    uf.utt_id = rec.utt_id;
    Tensor phone_block = Tensor::zeros({n, n_classes});
    Tensor score_block = Tensor::zeros({n, kScoreBlockDim});
    Tensor ssl_block = Tensor::zeros({n, kSslBlockDim});
    for (int pos = 0; pos < n; ++pos) {
      bool sil = rec.is_sil(pos);
      for (int c = 0; c < n_classes; ++c) {
        double hot = 0.0;
        if (!sil && inv.class_id(rec.realized[static_cast<std::size_t>(pos)]) == c) hot = 1.0;
        phone_block.at_mut(pos, c) = hot + cfg.noise * feats.normal(0.0, 1.0);
      }
      double s_norm =
          sil ? 0.5
              : scaler.normalize(scaler.phone_accuracy,
                                 rec.phone_scores[static_cast<std::size_t>(pos)]);
      for (int c = 0; c < kScoreBlockDim; ++c) {
        score_block.at_mut(pos, c) = s_norm + cfg.noise * feats.normal(0.0, 1.0);
      }
      for (int c = 0; c < kSslBlockDim; ++c) {
        ssl_block.at_mut(pos, c) = feats.normal(0.0, 1.0);
      }
    }
    uf.blocks.push_back({{"synthetic:phone", n_classes, false}, phone_block});
    uf.blocks.push_back({{"synthetic:score", kScoreBlockDim, false}, score_block});
    uf.blocks.push_back({{"synthetic:ssl", kSslBlockDim, true}, ssl_block});

    out.corpus.records.push_back(std::move(rec));
    out.features.utterances.push_back(std::move(uf));
  }

  out.corpus.generator = json{
      {"config",
       {{"n_utts", cfg.n_utts},
        {"phones_per_utt", cfg.phones_per_utt},
        {"error_rate", cfg.error_rate},
        {"noise", cfg.noise},
        {"seed", cfg.seed}}},
      {"derived_scores",
       {{"word.accuracy", "5 * mean(phone_scores of member phones)"},
        {"word.total", "(word.accuracy + word.stress) / 2"},
        {"utterance.accuracy", "mean(word.accuracy)"},
        {"utterance.total", "mean(word.total)"}}},
      {"stochastic_scores",
       {{"phone.accuracy",
         "2 * clamp01(base(correct) + 0.5*noise*N(0,1)); base uniform in [0.80,0.95] when "
         "correct, [0.10,0.35] when mispronounced"},
        {"word.stress", "clamp(word.accuracy + N(0, 0.5 + 2*noise), 0, 10)"},
        {"utterance.completeness|fluency|prosody",
         "clamp(utterance.accuracy + N(0, 0.5 + 2*noise), 0, 10)"}}},
      {"features",
       {{"synthetic:phone", "one-hot of the realized phone class + N(0, noise); zeros at SIL"},
        {"synthetic:score",
         "normalized phone accuracy + N(0, noise) in every column; 0.5 at SIL"},
        {"synthetic:ssl", "N(0,1) distractor, SSL-flagged for the dropout rule"}}}};
  return out;
}

CeilingResult bayes_ceiling(const Corpus& corpus, const FeatureFile& features) {
  const auto& inv = corpus.inventory;
  long long tp = 0, fp = 0, fn = 0;
  std::vector<double> est, truth;
  for (const auto& rec : corpus.records) {
    const auto& uf = features.find(rec.utt_id);
    const ProviderBlock* phone_block = nullptr;
    const ProviderBlock* score_block = nullptr;
    for (const auto& b : uf.blocks) {
      if (b.spec.name == "synthetic:phone") phone_block = &b;
      if (b.spec.name == "synthetic:score") score_block = &b;
    }
    if (!phone_block || !score_block) {
      throw ValidationError("bayes_ceiling: feature file lacks the planted synthetic blocks");
    }
    for (int pos = 0; pos < rec.n_positions(); ++pos) {
      if (rec.is_sil(pos)) continue;
      int best = 0;
      for (int c = 1; c < phone_block->spec.dim; ++c) {
        if (phone_block->block.at(pos, c) > phone_block->block.at(pos, best)) best = c;
      }
      int canon = inv.class_id(rec.phones[static_cast<std::size_t>(pos)]);
      int real = inv.class_id(rec.realized[static_cast<std::size_t>(pos)]);
      bool truth_err = real != canon;
      bool pred_err = best != canon;
      if (truth_err && pred_err) ++tp;
      if (!truth_err && pred_err) ++fp;
      if (truth_err && !pred_err) ++fn;
      double mean = 0.0;
      for (int c = 0; c < score_block->spec.dim; ++c) mean += score_block->block.at(pos, c);
      mean /= score_block->spec.dim;
      est.push_back(corpus.scaler.denormalize(corpus.scaler.phone_accuracy, mean));
      truth.push_back(rec.phone_scores[static_cast<std::size_t>(pos)]);
    }
  }
  CeilingResult r;
  double precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  double recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  r.mdd_f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  auto corr = pcc(est, truth);
  r.phone_pcc = corr.value_or(0.0);
  return r;
}

}  // namespace hmamba
