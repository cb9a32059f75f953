#include "hmamba/eval.hpp"

namespace hmamba {

EvalReport evaluate_model(const HMambaModel& model, const Corpus& corpus,
                          const FeatureFile& features, const std::vector<std::size_t>* subset,
                          const LossConfig* loss_cfg, double* loss_out) {
  const auto& scaler = corpus.scaler;
  const auto& inv = model.inventory;
  std::vector<double> phone_pred, phone_true;
  std::array<std::vector<double>, 3> word_pred, word_true;
  std::array<std::vector<double>, 5> utt_pred, utt_true;
  long long tp = 0, fp = 0, fn = 0;
  long long edit_total = 0, ref_total = 0;
  bool any_degenerate = false;
  double loss_acc = 0.0;
  long long loss_count = 0;

  std::vector<std::size_t> all;
  if (!subset) {
    all.resize(corpus.records.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    subset = &all;
  }
  RngStream unused_rng(0);  // eval-mode assembly never consumes randomness
  for (std::size_t idx : *subset) {
    const auto& rec = corpus.records[idx];
    const auto& uf = features.find(rec.utt_id);
    FeatureBundle bundle = assemble_features(rec, uf.blocks, false, unused_rng);
    ModelOutput out = forward(rec, bundle, model, false);

    if (loss_cfg && loss_out) {
      ApaTargets targets = make_apa_targets(rec, scaler);
      Tensor apa = apa_loss(out, targets, loss_cfg->omega);
      std::vector<int> realized_cls(static_cast<std::size_t>(rec.n_positions()), 0);
      std::vector<int> canonical_cls(static_cast<std::size_t>(rec.n_positions()), 0);
      for (int pos = 0; pos < rec.n_positions(); ++pos) {
        if (rec.is_sil(pos)) continue;
        realized_cls[static_cast<std::size_t>(pos)] =
            inv.class_id(rec.realized[static_cast<std::size_t>(pos)]);
        canonical_cls[static_cast<std::size_t>(pos)] =
            inv.class_id(rec.phones[static_cast<std::size_t>(pos)]);
      }
      auto parts = dexent_loss(out.mdd_logits, realized_cls, canonical_cls, rec.scored_mask(),
                               *loss_cfg);
      double scored = static_cast<double>(parts.n_hit + parts.n_mis);
      double mdd = scored > 0 ? parts.total.item() / scored : 0.0;
      loss_acc += apa.item() + loss_cfg->beta * mdd;
      ++loss_count;
    }

    auto mask = rec.scored_mask();
    for (int pos = 0; pos < rec.n_positions(); ++pos) {
      if (!mask[static_cast<std::size_t>(pos)]) continue;
      phone_pred.push_back(
          scaler.denormalize(scaler.phone_accuracy, out.phone_scores.at(pos, 0)));
      phone_true.push_back(rec.phone_scores[static_cast<std::size_t>(pos)]);
    }

    std::vector<std::array<double, 3>> per_phone(static_cast<std::size_t>(rec.n_positions()));
    for (int pos = 0; pos < rec.n_positions(); ++pos) {
      for (int a = 0; a < 3; ++a) {
        per_phone[static_cast<std::size_t>(pos)][static_cast<std::size_t>(a)] =
            out.word_scores.at(pos, a);
      }
    }
    auto per_word = aggregate_word_predictions(per_phone, rec);
    for (std::size_t w = 0; w < rec.words.size(); ++w) {
      for (std::size_t a = 0; a < 3; ++a) {
        word_pred[a].push_back(scaler.denormalize(scaler.word[a], per_word[w][a]));
        word_true[a].push_back(rec.words[w].scores[a]);
      }
    }
    for (std::size_t a = 0; a < 5; ++a) {
      utt_pred[a].push_back(
          scaler.denormalize(scaler.utterance[a], out.utt_scores.at(0, static_cast<int>(a))));
      utt_true[a].push_back(rec.utt_scores[a]);
    }

    std::vector<int> canonical_cls(static_cast<std::size_t>(rec.n_positions()), -1);
    std::vector<int> realized_cls(static_cast<std::size_t>(rec.n_positions()), -1);
    for (int pos = 0; pos < rec.n_positions(); ++pos) {
      if (rec.is_sil(pos)) continue;
      canonical_cls[static_cast<std::size_t>(pos)] =
          inv.class_id(rec.phones[static_cast<std::size_t>(pos)]);
      realized_cls[static_cast<std::size_t>(pos)] =
          inv.class_id(rec.realized[static_cast<std::size_t>(pos)]);
    }
    auto det = mdd_detection_metrics(out.diagnosis, canonical_cls, realized_cls, mask);
    tp += det.tp;
    fp += det.fp;
    fn += det.fn;
    // Corpus-level PER: pool edits and reference lengths.
    std::vector<int> hyp, ref;
    for (int pos = 0; pos < rec.n_positions(); ++pos) {
      if (!mask[static_cast<std::size_t>(pos)]) continue;
      if (out.diagnosis[static_cast<std::size_t>(pos)] != inv.del_class()) {
        hyp.push_back(out.diagnosis[static_cast<std::size_t>(pos)]);
      }
      if (realized_cls[static_cast<std::size_t>(pos)] != inv.del_class()) {
        ref.push_back(realized_cls[static_cast<std::size_t>(pos)]);
      }
    }
    edit_total += levenshtein(hyp, ref);
    ref_total += static_cast<long long>(ref.size());
  }

  EvalReport report;
  auto fill = [&](const char* gran, const char* aspect, const std::vector<double>& pred,
                  const std::vector<double>& truth) {
    AspectMetrics m;
    auto corr = pcc(pred, truth);
    if (!corr.has_value()) {
      report.warnings.push_back(std::string(gran) + "/" + aspect +
                                ": pcc undefined (constant or short input)");
    }
    m.pcc = corr;
    m.mse = mse(pred, truth);
    report.apa[gran][aspect] = m;
  };
  fill("phone", "accuracy", phone_pred, phone_true);
  for (std::size_t a = 0; a < 3; ++a) fill("word", kWordAspects[a], word_pred[a], word_true[a]);
  for (std::size_t a = 0; a < 5; ++a) {
    fill("utterance", kUttAspects[a], utt_pred[a], utt_true[a]);
  }
  report.mdd.tp = tp;
  report.mdd.fp = fp;
  report.mdd.fn = fn;
  if (tp + fp > 0) {
    report.mdd.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  } else {
    any_degenerate = true;
  }
  if (tp + fn > 0) {
    report.mdd.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  } else {
    any_degenerate = true;
  }
  if (report.mdd.precision + report.mdd.recall > 0) {
    report.mdd.f1 = 2 * report.mdd.precision * report.mdd.recall /
                    (report.mdd.precision + report.mdd.recall);
  }
  report.mdd.degenerate = any_degenerate;
  if (ref_total > 0) {
    report.per.defined = true;
    report.per.per = static_cast<double>(edit_total) / static_cast<double>(ref_total);
  }
  if (loss_cfg && loss_out) {
    *loss_out = loss_count > 0 ? loss_acc / static_cast<double>(loss_count) : 0.0;
  }
  return report;
}

}  // namespace hmamba
