#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "hmamba/eval.hpp"
#include "hmamba/losses.hpp"
#include "hmamba/model.hpp"
#include "hmamba/synth.hpp"

using namespace hmamba;
namespace o = hmamba::ops;

namespace {

HMambaConfig toy_config(int feature_dim, int d = 8) {
  HMambaConfig cfg;
  cfg.d = d;
  cfg.l_phone = 2;
  cfg.l_word = 1;
  cfg.l_utt = 1;
  cfg.d_state = 4;
  cfg.conv_kernel = 2;
  cfg.word_conv_kernels = 2 * d;
  cfg.word_conv_size = 3;
  cfg.head_hidden = 8;
  cfg.max_positions = 64;
  cfg.feature_dim = feature_dim;
  return cfg;
}

struct Fixture {
  Corpus corpus;
  FeatureFile features;
  HMambaModel model;

  explicit Fixture(int n_utts = 3, std::uint64_t seed = 5, int d = 8) {
    SynthConfig scfg;
    scfg.n_utts = n_utts;
    scfg.phones_per_utt = 6;
    scfg.seed = seed;
    auto result = generate_synthetic(scfg);
    corpus = std::move(result.corpus);
    features = std::move(result.features);
    int feature_dim = 0;
    for (const auto& b : features.utterances.front().blocks) feature_dim += b.spec.dim;
    RngStream rng = RngStream::derive(seed, "init");
    model = HMambaModel::init(toy_config(feature_dim, d), corpus.inventory, rng);
  }

  ModelOutput run(std::size_t idx, bool training = false) {
    RngStream rng(7);
    const auto& rec = corpus.records[idx];
    auto bundle = assemble_features(rec, features.find(rec.utt_id).blocks, training, rng);
    return forward(rec, bundle, model, training);
  }
};

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("forward shape contract") {
  Fixture fx;
  for (std::size_t i = 0; i < fx.corpus.records.size(); ++i) {
    auto out = fx.run(i);
    int n = fx.corpus.records[i].n_positions();
    CHECK(out.phone_scores.shape() == std::vector<int>{n, 1});
    CHECK(out.word_scores.shape() == std::vector<int>{n, 3});
    CHECK(out.utt_scores.shape() == std::vector<int>{1, 5});
    CHECK(out.mdd_logits.shape() == std::vector<int>{n, fx.corpus.inventory.num_classes()});
    CHECK(out.diagnosis.size() == static_cast<std::size_t>(n));
    CHECK(out.error_states.size() == static_cast<std::size_t>(n));
  }
}

TEST_CASE("single-phone utterance: everything defined, pooling weight is 1") {
  Fixture fx;
  UtteranceRecord rec;
  rec.utt_id = "single";
  rec.phones = {"K"};
  rec.sil_duration = {0.0};
  rec.realized = {"K"};
  rec.phone_scores = {1.5};
  rec.words.push_back({0, 1, {7, 7, 7}});
  rec.utt_scores = {7, 7, 7, 7, 7};
  fx.corpus.records.push_back(rec);

  int fd = fx.model.config.feature_dim;
  Tensor rows = Tensor::full({1, fd}, 0.1);
  ProviderBlock blk{{"synthetic:all", fd, false}, rows};
  RngStream rng(3);
  auto bundle = assemble_features(rec, {blk}, false, rng);
  auto out = forward(rec, bundle, fx.model, false);
  CHECK(out.utt_scores.numel() == 5);
  for (double v : out.utt_scores.values()) CHECK(std::isfinite(v));

  // With one position the pooling softmax has a single weight, exactly 1.
  Tensor h = Tensor::full({1, 4}, 0.3);
  Tensor q = Tensor::full({1, 4}, 2.0);
  Tensor w = Tensor::from_values({4}, {1, 2, 3, 4});
  Tensor pooled = attention_pool(h, q, w, 1.0);
  for (int j = 0; j < 4; ++j) CHECK(pooled.at(0, j) == doctest::Approx(0.3));
}

TEST_CASE("zeroed heads output zero scores regardless of input") {
  Fixture fx;
  auto zero_head = [](HeadFFN& h) {
    for (auto& v : h.w1.values()) v = 0;
    for (auto& v : h.b1.values()) v = 0;
    for (auto& v : h.w2.values()) v = 0;
    for (auto& v : h.b2.values()) v = 0;
  };
  zero_head(fx.model.phone_head);
  for (auto& h : fx.model.word_heads) zero_head(h);
  for (auto& h : fx.model.utt_heads) zero_head(h);
  auto out = fx.run(0);
  for (double v : out.phone_scores.values()) CHECK(v == 0.0);
  for (double v : out.word_scores.values()) CHECK(v == 0.0);
  for (double v : out.utt_scores.values()) CHECK(v == 0.0);
}

TEST_CASE("attention pooling") {
  RngStream rng(11);
  Tensor h = Tensor::zeros({3, 5});
  for (auto& v : h.values()) v = rng.uniform(-1, 1);
  Tensor q = Tensor::zeros({3, 4});
  for (auto& v : q.values()) v = rng.uniform(-1, 1);

  SUBCASE("zero weight vector gives the row mean") {
    Tensor w = Tensor::zeros({4});
    Tensor pooled = attention_pool(h, q, w, 1.0);
    for (int j = 0; j < 5; ++j) {
      double mean = (h.at(0, j) + h.at(1, j) + h.at(2, j)) / 3.0;
      CHECK(pooled.at(0, j) == doctest::Approx(mean).epsilon(1e-12));
    }
  }
  SUBCASE("huge temperature flattens the weights to uniform within 1e-9") {
    Tensor w = Tensor::from_values({4}, {0.3, -0.2, 0.1, 0.05});
    double tau = 1e9;
    Tensor alpha = o::softmax(o::scalar_mul(o::matmul(q, o::reshape(w, {4, 1})), 1.0 / tau), 0);
    for (double a : alpha.values()) CHECK(std::fabs(a - 1.0 / 3.0) < 1e-9);
    Tensor pooled = attention_pool(h, q, w, tau);
    for (int j = 0; j < 5; ++j) {
      double mean = (h.at(0, j) + h.at(1, j) + h.at(2, j)) / 3.0;
      CHECK(std::fabs(pooled.at(0, j) - mean) < 1e-8);
    }
  }
  SUBCASE("hand-set weights match the scalar formula") {
    Tensor w = Tensor::from_values({4}, {0.5, -1.0, 2.0, 0.25});
    double tau = 0.7;
    Tensor pooled = attention_pool(h, q, w, tau);
    double z = 0.0;
    std::array<double, 3> e{};
    for (int i = 0; i < 3; ++i) {
      double dot = 0.0;
      for (int j = 0; j < 4; ++j) dot += w.at(j) * q.at(i, j);
      e[static_cast<std::size_t>(i)] = std::exp(dot / tau);
      z += e[static_cast<std::size_t>(i)];
    }
    for (int j = 0; j < 5; ++j) {
      double expect = 0.0;
      for (int i = 0; i < 3; ++i) expect += e[static_cast<std::size_t>(i)] / z * h.at(i, j);
      CHECK(pooled.at(0, j) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  SUBCASE("weights are positive and sum to 1") {
    Tensor w = Tensor::from_values({4}, {5, -5, 3, 1});
    Tensor logits = o::scalar_mul(o::matmul(q, o::reshape(w, {4, 1})), 1.0);
    Tensor alpha = o::softmax(logits, 0);
    double sum = 0.0;
    for (double a : alpha.values()) {
      CHECK(a > 0.0);
      sum += a;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("word target broadcast and aggregation") {
  UtteranceRecord rec;
  rec.utt_id = "w";
  rec.phones = {"K", "R", "AY", "AH"};
  rec.sil_duration = {0, 0, 0, 0};
  rec.realized = {"K", "R", "AY", "AH"};
  rec.phone_scores = {2, 2, 2, 2};
  rec.words.push_back({0, 3, {7, 6, 7}});
  rec.words.push_back({3, 4, {9, 8, 8.5}});
  rec.utt_scores = {7, 7, 7, 7, 7};

  SUBCASE("each phone of a word receives the word's scores") {
    auto targets = broadcast_word_targets(rec);
    for (int pos = 0; pos < 3; ++pos) {
      CHECK(targets[static_cast<std::size_t>(pos)] == std::array<double, 3>{7, 6, 7});
    }
    CHECK(targets[3] == std::array<double, 3>{9, 8, 8.5});
  }
  SUBCASE("broadcast then aggregate is the identity on word scores") {
    auto per_phone = broadcast_word_targets(rec);
    auto per_word = aggregate_word_predictions(per_phone, rec);
    REQUIRE(per_word.size() == 2);
    CHECK(per_word[0] == std::array<double, 3>{7, 6, 7});
    CHECK(per_word[1] == std::array<double, 3>{9, 8, 8.5});
  }
  SUBCASE("aggregation is the arithmetic mean per aspect") {
    std::vector<std::array<double, 3>> preds = {
        {0.5, 0.1, 0.9}, {0.7, 0.3, 0.1}, {0.6, 0.2, 0.2}, {1.0, 0.0, 0.5}};
    auto per_word = aggregate_word_predictions(preds, rec);
    CHECK(per_word[0][0] == doctest::Approx(0.6));
    CHECK(per_word[0][1] == doctest::Approx(0.2));
    CHECK(per_word[0][2] == doctest::Approx(0.4));
    CHECK(per_word[1][0] == doctest::Approx(1.0));
  }
  SUBCASE("random 2-word instance matches a loop oracle") {
    RngStream rng(13);
    std::vector<std::array<double, 3>> preds(4);
    for (auto& row : preds) {
      for (auto& v : row) v = rng.uniform(0, 1);
    }
    auto per_word = aggregate_word_predictions(preds, rec);
    for (std::size_t w = 0; w < rec.words.size(); ++w) {
      for (std::size_t a = 0; a < 3; ++a) {
        double acc = 0.0;
        int count = 0;
        for (int pos = rec.words[w].begin; pos < rec.words[w].end; ++pos) {
          acc += preds[static_cast<std::size_t>(pos)][a];
          ++count;
        }
        CHECK(per_word[w][a] == doctest::Approx(acc / count).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("diagnosis") {
  auto inv = PhoneInventory::defaults();
  UtteranceRecord rec;
  rec.utt_id = "d";
  rec.phones = {"K", "R", "AY", "M"};
  rec.sil_duration = {0, 0, 0, 0};
  rec.realized = {"K", "R", "IH", "M"};
  rec.phone_scores = {1, 1, 1, 1};
  rec.words.push_back({0, 4, {5, 5, 5}});
  rec.utt_scores = {5, 5, 5, 5, 5};
  int classes = inv.num_classes();

  SUBCASE("one-hot on canonical phones everywhere -> no detected errors") {
    Tensor logits = Tensor::zeros({4, classes});
    for (int pos = 0; pos < 4; ++pos) {
      logits.at_mut(pos, inv.class_id(rec.phones[static_cast<std::size_t>(pos)])) = 5.0;
    }
    std::vector<int> diagnosis;
    std::vector<bool> errors;
    diagnose(logits, rec, inv, diagnosis, errors);
    for (bool e : errors) CHECK(!e);
  }
  SUBCASE("argmax K R IH M flags only position 2") {
    Tensor logits = Tensor::zeros({4, classes});
    for (int pos = 0; pos < 4; ++pos) {
      logits.at_mut(pos, inv.class_id(rec.realized[static_cast<std::size_t>(pos)])) = 5.0;
    }
    std::vector<int> diagnosis;
    std::vector<bool> errors;
    diagnose(logits, rec, inv, diagnosis, errors);
    CHECK(errors == std::vector<bool>{false, false, true, false});
    CHECK(diagnosis[2] == inv.class_id("IH"));
  }
  SUBCASE("ties break toward the lowest class id") {
    Tensor logits = Tensor::full({4, classes}, 1.0);
    std::vector<int> diagnosis;
    std::vector<bool> errors;
    diagnose(logits, rec, inv, diagnosis, errors);
    for (int pos = 0; pos < 4; ++pos) CHECK(diagnosis[static_cast<std::size_t>(pos)] == 0);
  }
  SUBCASE("adding a constant to every logit leaves the diagnosis unchanged") {
    RngStream rng(17);
    Tensor logits = Tensor::zeros({4, classes});
    for (auto& v : logits.values()) v = rng.uniform(-1, 1);
    std::vector<int> d1, d2;
    std::vector<bool> e1, e2;
    diagnose(logits, rec, inv, d1, e1);
    Tensor shifted = o::scalar_add(logits, 17.5);
    diagnose(shifted, rec, inv, d2, e2);
    CHECK(d1 == d2);
    CHECK(e1 == e2);
  }
}

TEST_CASE("phone scores depend only on the phone-level stack") {
  Fixture fx;
  auto before = fx.run(0);
  RngStream rng(23);
  // Scramble everything above the phone stack.
  for (auto& v : fx.model.word_conv_k.values()) v = rng.uniform(-1, 1);
  for (auto& v : fx.model.word_proj_w.values()) v = rng.uniform(-1, 1);
  for (auto& b : fx.model.word_blocks) {
    for (auto& v : b.ffn_w1.values()) v = rng.uniform(-1, 1);
  }
  for (auto& b : fx.model.utt_blocks) {
    for (auto& v : b.ffn_w1.values()) v = rng.uniform(-1, 1);
  }
  for (auto& h : fx.model.word_heads) {
    for (auto& v : h.w1.values()) v = rng.uniform(-1, 1);
  }
  for (auto& h : fx.model.utt_heads) {
    for (auto& v : h.w1.values()) v = rng.uniform(-1, 1);
  }
  for (auto& v : fx.model.pool_w.values()) v = rng.uniform(-1, 1);
  auto after = fx.run(0);
  CHECK(before.phone_scores.values() == after.phone_scores.values());
  CHECK(before.mdd_logits.values() == after.mdd_logits.values());
  // The scrambled upper stack does change its own outputs.
  CHECK(before.word_scores.values() != after.word_scores.values());
}

TEST_CASE("eval-mode forward is deterministic") {
  Fixture fx;
  auto a = fx.run(1);
  auto b = fx.run(1);
  CHECK(a.phone_scores.values() == b.phone_scores.values());
  CHECK(a.word_scores.values() == b.word_scores.values());
  CHECK(a.utt_scores.values() == b.utt_scores.values());
  CHECK(a.mdd_logits.values() == b.mdd_logits.values());
}

TEST_CASE("full-model gradient check on a toy configuration") {
  Fixture fx(1, 29);
  const auto& rec = fx.corpus.records[0];
  const auto& uf = fx.features.find(rec.utt_id);
  auto targets = make_apa_targets(rec, fx.corpus.scaler);
  LossConfig loss_cfg;
  loss_cfg.mu_mis = 0.2;
  loss_cfg.mu_hit = 0.8;
  std::vector<int> realized_cls(static_cast<std::size_t>(rec.n_positions()), 0);
  std::vector<int> canonical_cls(static_cast<std::size_t>(rec.n_positions()), 0);
  for (int pos = 0; pos < rec.n_positions(); ++pos) {
    if (rec.is_sil(pos)) continue;
    realized_cls[static_cast<std::size_t>(pos)] =
        fx.corpus.inventory.class_id(rec.realized[static_cast<std::size_t>(pos)]);
    canonical_cls[static_cast<std::size_t>(pos)] =
        fx.corpus.inventory.class_id(rec.phones[static_cast<std::size_t>(pos)]);
  }
  auto build = [&] {
    RngStream rng(1);
    auto bundle = assemble_features(rec, uf.blocks, false, rng);
    auto out = forward(rec, bundle, fx.model, false);
    Tensor apa = apa_loss(out, targets, loss_cfg.omega);
    auto parts =
        dexent_loss(out.mdd_logits, realized_cls, canonical_cls, rec.scored_mask(), loss_cfg);
    Tensor mdd = o::scalar_mul(parts.total,
                               1.0 / static_cast<double>(parts.n_hit + parts.n_mis));
    return total_loss(apa, mdd, 0.5);
  };
  // Check a representative subset of parameter tensors end to end.
  std::vector<Tensor> leaves = {fx.model.in_w,
                                fx.model.embeddings.phone_table,
                                fx.model.phone_blocks[0].mixer.w_z,
                                fx.model.phone_blocks[0].mixer.fwd.ssm.a_log,
                                fx.model.phone_blocks[0].mixer.fwd.ssm.w_x,
                                fx.model.phone_blocks[0].mixer.bwd.conv_w,
                                fx.model.phone_blocks[1].ffn_w1,
                                fx.model.word_conv_k,
                                fx.model.word_proj_w,
                                fx.model.utt_blocks[0].mixer.w_out,
                                fx.model.pool_w,
                                fx.model.phone_head.w1,
                                fx.model.word_heads[1].w2,
                                fx.model.utt_heads[3].w1,
                                fx.model.mdd_head.w2};
  auto res = hmamba::testing::check_gradients(build, leaves);
  CHECK_MESSAGE(res.max_rel_err < 1e-3, res.worst);
}

TEST_CASE("an untrained model still yields a fully defined evaluation") {
  Fixture fx(6, 47);
  auto report = evaluate_model(fx.model, fx.corpus, fx.features);
  CHECK(std::isfinite(report.apa.at("phone").at("accuracy").mse));
  CHECK(std::isfinite(report.apa.at("utterance").at("total").mse));
  CHECK(report.per.defined);
  CHECK(report.mdd.tp + report.mdd.fp + report.mdd.fn > 0);
  // Evaluating twice gives the identical report.
  auto again = evaluate_model(fx.model, fx.corpus, fx.features);
  CHECK(report.to_json() == again.to_json());
}

TEST_CASE("checkpoint round trip preserves parameters and predictions") {
  namespace fs = std::filesystem;
  Fixture fx;
  auto dir = fs::temp_directory_path() / "hmamba_test_ckpt";
  fs::create_directories(dir);
  auto path = (dir / "model.json").string();
  save_checkpoint(fx.model, path, {{"step", 17}});
  nlohmann::json extra;
  HMambaModel loaded = load_checkpoint(path, &extra);
  CHECK(extra.at("step") == 17);
  auto pa = fx.model.parameters();
  auto pb = loaded.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].tensor.values() == pb[i].tensor.values());
  }
  auto before = fx.run(0);
  RngStream rng(7);
  const auto& rec = fx.corpus.records[0];
  auto bundle = assemble_features(rec, fx.features.find(rec.utt_id).blocks, false, rng);
  auto after = forward(rec, bundle, loaded, false);
  CHECK(before.phone_scores.values() == after.phone_scores.values());

  SUBCASE("shape mismatch is rejected on load") {
    std::ifstream in(path);
    nlohmann::json j;
    in >> j;
    j["params"]["pool_w"]["shape"] = std::vector<int>{5};
    j["params"]["pool_w"]["values"] = std::vector<double>{1, 2, 3, 4, 5};
    auto bad_path = (dir / "bad.json").string();
    std::ofstream out(bad_path);
    out << j.dump();
    out.close();
    CHECK_THROWS_AS(load_checkpoint(bad_path), ValidationError);
  }
}

TEST_CASE("parameter names form a disjoint cover with the utterance-head group") {
  Fixture fx;
  auto params = fx.model.parameters();
  std::size_t utt = 0;
  std::set<std::string> names;
  for (const auto& p : params) {
    CHECK(names.insert(p.name).second);  // unique names
    if (HMambaModel::in_utterance_head_group(p.name)) ++utt;
  }
  CHECK(utt == 20);  // five heads, four tensors each
}

TEST_SUITE_END();
