#include "hmamba/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "hmamba/rng.hpp"

namespace hmamba {

namespace o = ops;
using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs <= 0) throw ValidationError("train config: epochs must be positive");
  if (batch_size <= 0) throw ValidationError("train config: batch_size must be positive");
  if (lr_main <= 0 || lr_utt_head <= 0) {
    throw ValidationError("train config: learning rates must be positive");
  }
  if (warmup_frac < 0 || hold_frac < 0 || warmup_frac + hold_frac > 1.0) {
    throw ValidationError("train config: warmup_frac + hold_frac must not exceed 1");
  }
  if (beta < 0) throw ValidationError("train config: beta must be non-negative");
  for (double w : omega) {
    if (w < 0) throw ValidationError("train config: omega weights must be non-negative");
  }
  if (dev_frac < 0 || dev_frac >= 1) {
    throw ValidationError("train config: dev_frac must lie in [0, 1)");
  }
}

double lr_at(long long step, long long total_steps, double peak, double warmup_frac,
             double hold_frac) {
  if (total_steps <= 0) throw ValidationError("lr_at: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw ValidationError("lr_at: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(total_steps) + "]");
  }
  double s = static_cast<double>(step);
  double t = static_cast<double>(total_steps);
  double warm_end = warmup_frac * t;
  double hold_end = (warmup_frac + hold_frac) * t;
  if (s <= warm_end) {
    return warm_end > 0 ? peak * (s / warm_end) : peak;
  }
  if (s <= hold_end) return peak;
  double tail = t - hold_end;
  return tail > 0 ? peak * ((t - s) / tail) : 0.0;
}

AdamOptimizer::AdamOptimizer(std::vector<NamedParam> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps) {
  in_utt_group_.reserve(params_.size());
  std::set<const void*> seen;
  for (const auto& p : params_) {
    if (!p.tensor.requires_grad()) {
      throw ValidationError("optimizer: parameter '" + p.name + "' does not require grad");
    }
    if (!seen.insert(p.tensor.id()).second) {
      throw ValidationError("optimizer: parameter '" + p.name + "' registered twice");
    }
    bool utt = HMambaModel::in_utterance_head_group(p.name);
    in_utt_group_.push_back(utt ? 1 : 0);
    if (utt) ++n_utt_group_;
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamOptimizer::step(double lr_main, double lr_utt_head) {
  ++step_count_;
  double t = static_cast<double>(step_count_);
  double bias1 = 1.0 - std::pow(beta1_, t);
  double bias2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor tensor = params_[pi].tensor;
    if (!tensor.grad_defined()) {
      throw NumericError("optimizer: missing gradient for parameter '" + params_[pi].name + "'");
    }
    const auto& g = tensor.grad();
    for (double gv : g) {
      if (!std::isfinite(gv)) {
        throw NumericError("optimizer: non-finite gradient in parameter '" + params_[pi].name +
                           "'");
      }
    }
    double lr = in_utt_group_[pi] ? lr_utt_head : lr_main;
    auto& vals = tensor.values();
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (std::size_t i = 0; i < vals.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      double mhat = m[i] / bias1;
      double vhat = v[i] / bias2;
      vals[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

std::vector<std::size_t> dev_split(const Corpus& corpus, std::uint64_t seed, double dev_frac) {
  std::vector<std::size_t> dev;
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    std::uint64_t h = fnv1a(corpus.records[i].utt_id + ":" + std::to_string(seed));
    double unit = static_cast<double>(h % 1000000ull) / 1000000.0;
    if (unit < dev_frac) dev.push_back(i);
  }
  return dev;
}

namespace {

struct PreparedUtterance {
  std::size_t index;
  std::vector<int> realized_cls;
  std::vector<int> canonical_cls;
  std::vector<bool> mask;
  ApaTargets targets;
  long long scored = 0;
};

PreparedUtterance prepare(const Corpus& corpus, std::size_t idx, const PhoneInventory& inv) {
  const auto& rec = corpus.records[idx];
  PreparedUtterance p;
  p.index = idx;
  p.mask = rec.scored_mask();
  int n = rec.n_positions();
  p.realized_cls.assign(static_cast<std::size_t>(n), 0);
  p.canonical_cls.assign(static_cast<std::size_t>(n), 0);
  for (int pos = 0; pos < n; ++pos) {
    if (rec.is_sil(pos)) continue;
    p.realized_cls[static_cast<std::size_t>(pos)] =
        inv.class_id(rec.realized[static_cast<std::size_t>(pos)]);
    p.canonical_cls[static_cast<std::size_t>(pos)] =
        inv.class_id(rec.phones[static_cast<std::size_t>(pos)]);
    ++p.scored;
  }
  p.targets = make_apa_targets(rec, corpus.scaler);
  return p;
}

}  // namespace

TrainResult train(const Corpus& corpus, const FeatureFile& features,
                  const HMambaConfig& model_cfg, const TrainConfig& cfg, std::uint64_t seed,
                  const std::string& out_dir, const std::string& tag) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  std::vector<std::size_t> dev = dev_split(corpus, seed, cfg.dev_frac);
  std::vector<char> is_dev(corpus.records.size(), 0);
  for (std::size_t i : dev) is_dev[i] = 1;
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    if (!is_dev[i]) train_idx.push_back(i);
  }
  if (train_idx.empty()) throw ValidationError("train: no training utterances after dev split");

  TrainResult result;
  // Frequencies come from the training split only, before the first step.
  std::vector<UtteranceRecord> train_records;
  train_records.reserve(train_idx.size());
  for (std::size_t i : train_idx) train_records.push_back(corpus.records[i]);
  auto freq = estimate_frequencies(train_records, corpus.inventory);
  LossConfig loss_cfg = LossConfig::from_frequencies(freq, cfg.alpha, cfg.beta, &result.warnings);
  loss_cfg.omega = cfg.omega;
  result.loss_config = loss_cfg;

  RngStream init_rng = RngStream::derive(seed, "init");
  HMambaModel model = HMambaModel::init(model_cfg, corpus.inventory, init_rng);
  RngStream dropout_rng = RngStream::derive(seed, "dropout");
  RngStream data_rng = RngStream::derive(seed, "data");

  std::vector<PreparedUtterance> prepared;
  prepared.reserve(corpus.records.size());
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    prepared.push_back(prepare(corpus, i, corpus.inventory));
  }

  AdamOptimizer optimizer(model.parameters(), cfg);
  long long batches_per_epoch =
      (static_cast<long long>(train_idx.size()) + cfg.batch_size - 1) / cfg.batch_size;
  long long total_steps = batches_per_epoch * cfg.epochs;

  std::string history_path = out_dir + "/history_" + tag + ".jsonl";
  std::string curves_path = out_dir + "/curves_" + tag + ".csv";
  std::ofstream history(history_path);
  std::ofstream curves(curves_path);
  if (!history || !curves) throw ValidationError("train: cannot write into " + out_dir);
  curves << "epoch,step,train_loss,dev_per,dev_phone_pcc,dev_word_total_pcc,dev_utt_total_pcc\n";
  curves.precision(17);

  result.final_checkpoint = out_dir + "/model_" + tag + "_final.json";
  result.best_checkpoint = out_dir + "/model_" + tag + "_best.json";
  result.best_dev_loss = std::numeric_limits<double>::infinity();

  long long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Deterministic shuffle from the data stream.
    std::vector<std::size_t> order = train_idx;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(data_rng.uniform_int(static_cast<int>(i)));
      std::swap(order[i - 1], order[j]);
    }
    double epoch_apa = 0.0, epoch_mdd = 0.0, epoch_total = 0.0;
    double epoch_hit = 0.0, epoch_mis = 0.0;
    long long epoch_batches = 0;
    double last_lr_main = 0.0, last_lr_utt = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Tensor apa_sum = Tensor::scalar(0.0);
      Tensor mdd_sum = Tensor::scalar(0.0);
      long long scored_sum = 0;
      double hit_sum = 0.0, mis_sum = 0.0;
      for (std::size_t bi = start; bi < end; ++bi) {
        const auto& p = prepared[order[bi]];
        const auto& rec = corpus.records[p.index];
        const auto& uf = features.find(rec.utt_id);
        FeatureBundle bundle = assemble_features(rec, uf.blocks, true, dropout_rng);
        ModelOutput out = forward(rec, bundle, model, true);
        apa_sum = o::add(apa_sum, apa_loss(out, p.targets, loss_cfg.omega, &result.warnings));
        auto parts = dexent_loss(out.mdd_logits, p.realized_cls, p.canonical_cls, p.mask,
                                 loss_cfg);
        mdd_sum = o::add(mdd_sum, parts.total);
        hit_sum += parts.hit.item();
        mis_sum += parts.mis.item();
        scored_sum += p.scored;
      }
      double inv_batch = 1.0 / static_cast<double>(end - start);
      Tensor apa_mean = o::scalar_mul(apa_sum, inv_batch);
      Tensor mdd_mean =
          o::scalar_mul(mdd_sum, scored_sum > 0 ? 1.0 / static_cast<double>(scored_sum) : 0.0);
      Tensor total = total_loss(apa_mean, mdd_mean, loss_cfg.beta);
      double total_value = total.item();
      if (!std::isfinite(total_value)) {
        history.flush();
        throw NumericError("train: loss diverged (non-finite) at step " + std::to_string(step) +
                           "; last good checkpoint: " +
                           (step > 0 ? result.final_checkpoint : std::string("none")));
      }
      total.backward();
      last_lr_main = lr_at(step, total_steps, cfg.lr_main, cfg.warmup_frac, cfg.hold_frac);
      last_lr_utt = lr_at(step, total_steps, cfg.lr_utt_head, cfg.warmup_frac, cfg.hold_frac);
      optimizer.step(last_lr_main, last_lr_utt);
      model.clear_grads();
      ++step;
      epoch_apa += apa_mean.item();
      epoch_mdd += mdd_mean.item();
      double inv_scored = scored_sum > 0 ? 1.0 / static_cast<double>(scored_sum) : 0.0;
      epoch_hit += hit_sum * inv_scored;
      epoch_mis += mis_sum * inv_scored;
      epoch_total += total_value;
      ++epoch_batches;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.step = step;
    stats.lr_main = last_lr_main;
    stats.lr_utt_head = last_lr_utt;
    stats.apa = epoch_apa / static_cast<double>(epoch_batches);
    stats.mdd = epoch_mdd / static_cast<double>(epoch_batches);
    stats.mdd_hit = epoch_hit / static_cast<double>(epoch_batches);
    stats.mdd_mis = epoch_mis / static_cast<double>(epoch_batches);
    stats.mis_weight = loss_cfg.mis_weight();
    stats.total = epoch_total / static_cast<double>(epoch_batches);
    if (!dev.empty()) {
      stats.dev = evaluate_model(model, corpus, features, &dev, &loss_cfg, &stats.dev_loss);
    }
    result.history.push_back(stats);

    json row;
    row["epoch"] = stats.epoch;
    row["step"] = stats.step;
    row["lr_main"] = stats.lr_main;
    row["lr_utt_head"] = stats.lr_utt_head;
    row["apa"] = stats.apa;
    row["mdd"] = stats.mdd;
    row["mdd_hit"] = stats.mdd_hit;
    row["mdd_mis"] = stats.mdd_mis;
    row["weight"] = stats.mis_weight;
    row["total"] = stats.total;
    if (!dev.empty()) {
      row["dev_loss"] = stats.dev_loss;
      row["dev"] = stats.dev.to_json();
    }
    history << row.dump() << "\n";

    auto pcc_or_nan = [](const EvalReport& r, const char* gran, const char* aspect) {
      auto git = r.apa.find(gran);
      if (git == r.apa.end()) return std::nan("");
      auto ait = git->second.find(aspect);
      if (ait == git->second.end() || !ait->second.pcc.has_value()) return std::nan("");
      return *ait->second.pcc;
    };
    curves << stats.epoch << "," << stats.step << "," << stats.total << ","
           << (stats.dev.per.defined ? stats.dev.per.per : std::nan("")) << ","
           << pcc_or_nan(stats.dev, "phone", "accuracy") << ","
           << pcc_or_nan(stats.dev, "word", "total") << ","
           << pcc_or_nan(stats.dev, "utterance", "total") << "\n";

    json extra{{"step", step},
               {"epoch", epoch},
               {"seed", seed},
               {"scaler", corpus.scaler.to_json()},
               {"rng", {{"dropout", dropout_rng.serialize_state()},
                        {"data", data_rng.serialize_state()}}}};
    save_checkpoint(model, result.final_checkpoint, extra);
    double selection = dev.empty() ? stats.total : stats.dev_loss;
    if (selection < result.best_dev_loss) {
      result.best_dev_loss = selection;
      save_checkpoint(model, result.best_checkpoint, extra);
    }
  }
  result.model = model;
  return result;
}

}  // namespace hmamba
