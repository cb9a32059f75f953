#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "hmamba/corpus.hpp"
#include "hmamba/features.hpp"
#include "hmamba/ssm.hpp"
#include "hmamba/synth.hpp"

using namespace hmamba;
namespace fs = std::filesystem;
namespace o = hmamba::ops;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("hmamba_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

UtteranceRecord tiny_record() {
  UtteranceRecord rec;
  rec.utt_id = "t0";
  rec.phones = {"SIL", "K", "R", "AY", "M", "SIL", "AH"};
  rec.sil_duration = {0.3, 0, 0, 0, 0, 0.6, 0};
  rec.realized = {"", "K", "R", "IH", "M", "", "AH"};
  rec.phone_scores = {0, 1.8, 1.9, 0.4, 1.7, 0, 1.5};
  rec.words.push_back({1, 5, {7, 6, 6.5}});
  rec.words.push_back({6, 7, {8, 8, 8}});
  rec.utt_scores = {7.2, 6.8, 7.0, 7.1, 7.0};
  return rec;
}

}  // namespace

TEST_SUITE_BEGIN("corpus");

TEST_CASE("default inventory sizes") {
  auto inv = PhoneInventory::defaults();
  CHECK(inv.embed_vocab() == 40);           // 39 CMU + SIL
  CHECK(inv.annotation.size() == 46);       // 39 + 6 L2 + [unk]
  CHECK(inv.num_classes() == 47);           // annotation + [DEL]
  CHECK(inv.class_id(kDelToken) == 46);
  CHECK(inv.is_canonical("SIL"));
  CHECK(!inv.is_realizable("SIL"));
  // Every canonical phone except SIL is a valid class target.
  for (const auto& p : inv.canonical) {
    if (p != kSilToken) CHECK(inv.is_realizable(p));
  }
}

TEST_CASE("well-formed corpus round-trips") {
  auto dir = temp_dir("roundtrip");
  Corpus corpus;
  corpus.inventory = PhoneInventory::defaults();
  corpus.scaler = ScoreScaler::defaults();
  corpus.features_file = "features.jsonl";
  corpus.records.push_back(tiny_record());
  auto rec2 = tiny_record();
  rec2.utt_id = "t1";
  corpus.records.push_back(rec2);
  auto path = (dir / "corpus.jsonl").string();
  save_corpus(corpus, path);
  Corpus loaded = load_corpus(path);
  CHECK(loaded.records.size() == 2);
  CHECK(loaded.records[0].utt_id == "t0");
  CHECK(loaded.records[0].phones == corpus.records[0].phones);
  CHECK(loaded.records[0].realized == corpus.records[0].realized);
  CHECK(loaded.records[0].words.size() == 2);
  CHECK(loaded.records[0].utt_scores == corpus.records[0].utt_scores);
  // Saving the loaded corpus reproduces the file byte for byte.
  auto path2 = (dir / "corpus2.jsonl").string();
  save_corpus(loaded, path2);
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("unknown phone symbol names the utterance and the symbol") {
  auto dir = temp_dir("badphone");
  Corpus corpus;
  corpus.inventory = PhoneInventory::defaults();
  corpus.scaler = ScoreScaler::defaults();
  auto rec = tiny_record();
  rec.phones[1] = "ZZ";
  corpus.records.push_back(rec);
  auto path = (dir / "corpus.jsonl").string();
  save_corpus(corpus, path);
  try {
    load_corpus(path);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    std::string msg = e.what();
    CHECK(msg.find("t0") != std::string::npos);
    CHECK(msg.find("ZZ") != std::string::npos);
  }
}

TEST_CASE("word partition violations are reported") {
  std::vector<std::string> problems;
  auto inv = PhoneInventory::defaults();
  SUBCASE("gap") {
    auto rec = tiny_record();
    rec.words.pop_back();  // leaves position 6 uncovered
    rec.check(inv, problems);
    CHECK(!problems.empty());
  }
  SUBCASE("overlap") {
    auto rec = tiny_record();
    rec.words.push_back({4, 5, {1, 1, 1}});
    rec.check(inv, problems);
    CHECK(!problems.empty());
  }
  SUBCASE("word covering silence") {
    auto rec = tiny_record();
    rec.words[1] = {5, 7, {8, 8, 8}};
    rec.check(inv, problems);
    CHECK(!problems.empty());
  }
}

TEST_CASE("score normalization") {
  auto scaler = ScoreScaler::defaults();
  CHECK(scaler.normalize(scaler.word[0], 10.0) == doctest::Approx(1.0));
  CHECK(scaler.normalize(scaler.word[0], 7.0) == doctest::Approx(0.7));
  RngStream rng(11);
  for (int i = 0; i < 100; ++i) {
    double raw = rng.uniform(0.0, 2.0);
    double u = scaler.normalize(scaler.phone_accuracy, raw);
    CHECK(std::fabs(scaler.denormalize(scaler.phone_accuracy, u) - raw) < 1e-12);
  }
}

TEST_CASE("estimate_frequencies counts scored positions only") {
  auto inv = PhoneInventory::defaults();
  std::vector<UtteranceRecord> records;
  UtteranceRecord rec;
  rec.utt_id = "f0";
  for (int i = 0; i < 10; ++i) {
    rec.phones.push_back("K");
    rec.sil_duration.push_back(0.0);
    rec.realized.push_back(i == 3 ? "R" : "K");
    rec.phone_scores.push_back(1.0);
  }
  rec.words.push_back({0, 10, {5, 5, 5}});
  records.push_back(rec);
  auto freq = estimate_frequencies(records, inv);
  CHECK(freq.scored == 10);
  CHECK(freq.mu_mis == doctest::Approx(0.1));
  CHECK(freq.mu_hit == doctest::Approx(0.9));

  records[0].realized[3] = "K";
  freq = estimate_frequencies(records, inv);
  CHECK(freq.mu_mis == 0.0);  // all-correct path: deXent must be disabled
}

TEST_CASE("synthetic generator determinism: byte-identical files") {
  auto dir = temp_dir("synthdet");
  SynthConfig cfg;
  cfg.n_utts = 20;
  cfg.seed = 7;
  for (int run = 0; run < 2; ++run) {
    auto result = generate_synthetic(cfg);
    result.corpus.features_file = "features.jsonl";
    save_corpus(result.corpus, (dir / ("c" + std::to_string(run) + ".jsonl")).string());
    save_features(result.features, (dir / ("f" + std::to_string(run) + ".jsonl")).string());
  }
  CHECK(slurp(dir / "c0.jsonl") == slurp(dir / "c1.jsonl"));
  CHECK(slurp(dir / "f0.jsonl") == slurp(dir / "f1.jsonl"));
  CHECK(!slurp(dir / "c0.jsonl").empty());
}

TEST_CASE("synthetic corpus passes validation and plants the documented rates") {
  SynthConfig cfg;
  cfg.n_utts = 800;
  cfg.phones_per_utt = 14;
  cfg.error_rate = 0.15;
  cfg.seed = 21;
  auto result = generate_synthetic(cfg);
  auto dir = temp_dir("synthval");
  auto path = (dir / "corpus.jsonl").string();
  result.corpus.features_file = "features.jsonl";
  save_corpus(result.corpus, path);
  Corpus loaded = load_corpus(path);  // load runs full validation
  CHECK(loaded.records.size() == 800);

  auto freq = estimate_frequencies(loaded.records, loaded.inventory);
  CHECK(freq.scored > 10000);
  CHECK(std::fabs(freq.mu_mis - 0.15) < 0.01);
}

TEST_CASE("error_rate 0 plants no mispronunciations") {
  SynthConfig cfg;
  cfg.n_utts = 30;
  cfg.error_rate = 0.0;
  cfg.seed = 3;
  auto result = generate_synthetic(cfg);
  auto freq = estimate_frequencies(result.corpus.records, result.corpus.inventory);
  CHECK(freq.mispronounced == 0);
}

TEST_CASE("planted formulas in the header reproduce stored scores exactly") {
  SynthConfig cfg;
  cfg.n_utts = 50;
  cfg.seed = 13;
  auto result = generate_synthetic(cfg);
  CHECK(result.corpus.generator.contains("derived_scores"));
  for (const auto& rec : result.corpus.records) {
    double utt_acc = 0, utt_total = 0;
    for (const auto& w : rec.words) {
      double acc = 0;
      for (int pos = w.begin; pos < w.end; ++pos) {
        acc += rec.phone_scores[static_cast<std::size_t>(pos)];
      }
      acc = 5.0 * (acc / (w.end - w.begin));
      CHECK(w.scores[0] == acc);
      CHECK(w.scores[2] == (w.scores[0] + w.scores[1]) / 2.0);
      utt_acc += w.scores[0];
      utt_total += w.scores[2];
    }
    CHECK(rec.utt_scores[0] == utt_acc / static_cast<double>(rec.words.size()));
    CHECK(rec.utt_scores[4] == utt_total / static_cast<double>(rec.words.size()));
  }
}

TEST_CASE("noise 0 gives a perfect planted-signal decoder") {
  SynthConfig cfg;
  cfg.n_utts = 60;
  cfg.noise = 0.0;
  cfg.error_rate = 0.2;
  cfg.seed = 17;
  auto result = generate_synthetic(cfg);
  auto ceiling = bayes_ceiling(result.corpus, result.features);
  CHECK(ceiling.mdd_f1 == doctest::Approx(1.0));
  CHECK(ceiling.phone_pcc > 0.999);
}

TEST_CASE("feature files round-trip") {
  SynthConfig cfg;
  cfg.n_utts = 5;
  cfg.seed = 23;
  auto result = generate_synthetic(cfg);
  auto dir = temp_dir("featrt");
  auto path = (dir / "features.jsonl").string();
  save_features(result.features, path);
  FeatureFile loaded = load_features(path);
  REQUIRE(loaded.utterances.size() == result.features.utterances.size());
  for (std::size_t i = 0; i < loaded.utterances.size(); ++i) {
    const auto& a = loaded.utterances[i];
    const auto& b = result.features.utterances[i];
    CHECK(a.utt_id == b.utt_id);
    REQUIRE(a.blocks.size() == b.blocks.size());
    for (std::size_t p = 0; p < a.blocks.size(); ++p) {
      CHECK(a.blocks[p].spec == b.blocks[p].spec);
      CHECK(a.blocks[p].block.values() == b.blocks[p].block.values());
    }
  }
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("features");

TEST_CASE("assemble concatenates provider blocks in manifest order") {
  auto rec = tiny_record();
  int n = rec.n_positions();
  RngStream rng(31);
  ProviderBlock duration{{"duration", 1, false}, Tensor::full({n, 1}, 0.5)};
  ProviderBlock energy{{"energy", 2, false}, Tensor::full({n, 2}, 1.5)};
  auto bundle = assemble_features(rec, {duration, energy}, false, rng);
  CHECK(bundle.rows.dim(0) == n);
  CHECK(bundle.rows.dim(1) == 3);
  CHECK(bundle.width() == 3);
  CHECK(bundle.rows.at(0, 0) == 0.5);
  CHECK(bundle.rows.at(0, 2) == 1.5);
}

TEST_CASE("assemble is order-stable under a fixed manifest") {
  auto rec = tiny_record();
  int n = rec.n_positions();
  RngStream fill(37);
  ProviderBlock a{{"gop", 2, false}, Tensor::zeros({n, 2})};
  ProviderBlock b{{"duration", 1, false}, Tensor::zeros({n, 1})};
  for (auto& v : a.block.values()) v = fill.uniform(-1, 1);
  for (auto& v : b.block.values()) v = fill.uniform(-1, 1);
  std::vector<std::string> manifest = {"gop", "duration"};
  RngStream r1(1), r2(1);
  auto b1 = assemble_features(rec, arrange_blocks({a, b}, manifest), false, r1);
  auto b2 = assemble_features(rec, arrange_blocks({b, a}, manifest), false, r2);
  CHECK(b1.rows.values() == b2.rows.values());
  CHECK(b1.layout == b2.layout);
}

TEST_CASE("eval-mode assembly is independent of the rng") {
  auto rec = tiny_record();
  int n = rec.n_positions();
  ProviderBlock ssl{{"w2v", 4, true}, Tensor::full({n, 4}, 2.0)};
  RngStream r1(1), r2(999);
  auto b1 = assemble_features(rec, {ssl}, false, r1);
  auto b2 = assemble_features(rec, {ssl}, false, r2);
  CHECK(b1.rows.values() == b2.rows.values());
  for (double v : b1.rows.values()) CHECK(v == 2.0);
}

TEST_CASE("training mode drops about 10% of SSL entries") {
  UtteranceRecord rec;
  rec.utt_id = "big";
  for (int i = 0; i < 2000; ++i) {
    rec.phones.push_back("K");
    rec.sil_duration.push_back(0.0);
    rec.realized.push_back("K");
    rec.phone_scores.push_back(1.0);
  }
  rec.words.push_back({0, 2000, {5, 5, 5}});
  ProviderBlock ssl{{"hubert", 50, true}, Tensor::full({2000, 50}, 1.0)};
  RngStream rng(41);
  auto bundle = assemble_features(rec, {ssl}, true, rng);
  std::size_t zeros = 0;
  for (double v : bundle.rows.values()) {
    if (v == 0.0) ++zeros;
  }
  double frac = static_cast<double>(zeros) / 100000.0;
  CHECK(std::fabs(frac - 0.1) < 0.01);
}

TEST_CASE("provider row mismatch names the provider") {
  auto rec = tiny_record();
  ProviderBlock bad{{"gop", 2, false}, Tensor::zeros({3, 2})};
  RngStream rng(43);
  try {
    assemble_features(rec, {bad}, false, rng);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("gop") != std::string::npos);
  }
}

TEST_CASE("projection basics and gradients") {
  auto rec = tiny_record();
  int n = rec.n_positions();
  RngStream rng(47);
  ProviderBlock gop{{"gop", 3, false}, Tensor::zeros({n, 3})};
  for (auto& v : gop.block.values()) v = rng.uniform(-1, 1);
  auto bundle = assemble_features(rec, {gop}, false, rng);

  SUBCASE("identity weight, zero bias") {
    Tensor w = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) w.at_mut(i, i) = 1.0;
    Tensor b = Tensor::zeros({3});
    Tensor x = project(bundle, w, b);
    CHECK(x.values() == bundle.rows.values());
  }
  SUBCASE("zero weight reproduces the bias in every row") {
    Tensor w = Tensor::zeros({3, 2});
    Tensor b = Tensor::from_values({2}, {0.25, -0.75});
    Tensor x = project(bundle, w, b);
    for (int i = 0; i < n; ++i) {
      CHECK(x.at(i, 0) == 0.25);
      CHECK(x.at(i, 1) == -0.75);
    }
  }
  SUBCASE("width mismatch is rejected") {
    Tensor w = Tensor::zeros({4, 2});
    Tensor b = Tensor::zeros({2});
    CHECK_THROWS_AS(project(bundle, w, b), ShapeError);
  }
  SUBCASE("gradient check") {
    Tensor w = Tensor::zeros({3, 2}, true);
    for (auto& v : w.values()) v = rng.uniform(-1, 1);
    Tensor b = Tensor::zeros({2}, true);
    auto res = hmamba::testing::check_gradients(
        [&] { return o::mean(o::pow(project(bundle, w, b), 2.0)); }, {w, b});
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("relative tokens follow the word-position and silence rules") {
  auto rec = tiny_record();
  auto toks = relative_tokens(rec);
  REQUIRE(toks.size() == 7);
  CHECK(toks[0] == RelTok::kShortSil);  // 0.3 s
  CHECK(toks[1] == RelTok::kBegin);     // K of K R AY M
  CHECK(toks[2] == RelTok::kInternal);
  CHECK(toks[3] == RelTok::kInternal);
  CHECK(toks[4] == RelTok::kEnd);
  CHECK(toks[5] == RelTok::kLongSil);  // 0.6 s
  CHECK(toks[6] == RelTok::kSingle);   // single-phone word

  SUBCASE("threshold is strict: exactly 0.495 s stays short") {
    rec.sil_duration[0] = 0.495;
    auto t2 = relative_tokens(rec);
    CHECK(t2[0] == RelTok::kShortSil);
    rec.sil_duration[0] = 0.4950001;
    auto t3 = relative_tokens(rec);
    CHECK(t3[0] == RelTok::kLongSil);
  }
  SUBCASE("silence positions get only silence tokens, words only word tokens") {
    for (int pos = 0; pos < rec.n_positions(); ++pos) {
      bool sil_tok = toks[static_cast<std::size_t>(pos)] == RelTok::kLongSil ||
                     toks[static_cast<std::size_t>(pos)] == RelTok::kShortSil;
      CHECK(sil_tok == rec.is_sil(pos));
    }
  }
  SUBCASE("uncovered non-silence position is a structural error") {
    rec.words.pop_back();
    CHECK_THROWS_AS(relative_tokens(rec), ValidationError);
  }
}

TEST_CASE("phone_level_input adds the three lookups pointwise") {
  auto rec = tiny_record();
  auto inv = PhoneInventory::defaults();
  int n = rec.n_positions();
  int d = 6;
  RngStream rng(53);
  auto tables = PhonologicalEmbeddings::init(inv.embed_vocab(), 32, d, rng);
  Tensor x = Tensor::zeros({n, d});
  for (auto& v : x.values()) v = rng.uniform(-1, 1);

  SUBCASE("zero tables reproduce x") {
    auto zero_tables = tables;
    zero_tables.phone_table = Tensor::zeros({inv.embed_vocab(), d}, true);
    zero_tables.absolute_table = Tensor::zeros({32, d}, true);
    zero_tables.relative_table = Tensor::zeros({kNumRelTokens, d}, true);
    Tensor h = phone_level_input(x, rec, inv, zero_tables);
    CHECK(h.values() == x.values());
  }
  SUBCASE("zero x gives the sum of lookups") {
    Tensor zero = Tensor::zeros({n, d});
    Tensor h = phone_level_input(zero, rec, inv, tables);
    auto rel = relative_tokens(rec);
    for (int pos = 0; pos < n; ++pos) {
      int pid = inv.embed_id(rec.phones[static_cast<std::size_t>(pos)]);
      int rid = static_cast<int>(rel[static_cast<std::size_t>(pos)]);
      for (int j = 0; j < d; ++j) {
        double expect = tables.phone_table.at(pid, j) + tables.absolute_table.at(pos, j) +
                        tables.relative_table.at(rid, j);
        CHECK(h.at(pos, j) == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
  SUBCASE("identical records give identical sums") {
    Tensor h1 = phone_level_input(x, rec, inv, tables);
    auto rec2 = rec;
    rec2.utt_id = "other";
    Tensor h2 = phone_level_input(x, rec2, inv, tables);
    CHECK(h1.values() == h2.values());
  }
  SUBCASE("capacity overflow is rejected") {
    auto small = PhonologicalEmbeddings::init(inv.embed_vocab(), 3, d, rng);
    CHECK_THROWS_AS(phone_level_input(x, rec, inv, small), ShapeError);
  }
}

TEST_CASE("features -> project -> phone-level input passes an end-to-end gradient check") {
  auto rec = tiny_record();
  auto inv = PhoneInventory::defaults();
  int n = rec.n_positions();
  RngStream rng(59);
  ProviderBlock gop{{"gop", 3, false}, Tensor::zeros({n, 3})};
  for (auto& v : gop.block.values()) v = rng.uniform(-1, 1);
  auto bundle = assemble_features(rec, {gop}, false, rng);
  int d = 5;
  Tensor w = init_linear_weight(3, d, rng);
  Tensor b = init_linear_bias(3, d, rng);
  auto tables = PhonologicalEmbeddings::init(inv.embed_vocab(), 32, d, rng);
  auto res = hmamba::testing::check_gradients(
      [&] {
        return o::mean(
            o::pow(phone_level_input(project(bundle, w, b), rec, inv, tables), 2.0));
      },
      {w, b, tables.phone_table, tables.absolute_table, tables.relative_table});
  CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
}

TEST_SUITE_END();
