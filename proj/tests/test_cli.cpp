#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "hmamba/cli.hpp"
#include "hmamba/eval.hpp"
#include "hmamba/synth.hpp"
#include "hmamba/trainer.hpp"
#include "json.hpp"

using namespace hmamba;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("hmamba_cli_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int cli(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
  std::ostringstream out, err;
  int code = run_cli(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

const std::vector<std::string> kTinyModel = {
    "--set", "model.d=16",   "--set", "model.l_phone=1",         "--set", "model.l_word=1",
    "--set", "model.l_utt=1", "--set", "model.word_conv_kernels=32",
    "--set", "model.max_positions=64"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTinyModel.begin(), kTinyModel.end());
  return args;
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("gen-synth is deterministic and refuses to clobber") {
  auto dir = temp_dir("gen");
  auto a = (dir / "a").string();
  auto b = (dir / "b").string();
  std::vector<std::string> base = {"gen-synth", "--n",    "30",  "--test-n", "10",
                                   "--error-rate", "0.15", "--seed", "7"};
  auto run = [&](const std::string& out) {
    auto args = base;
    args.push_back("--out");
    args.push_back(out);
    return cli(args);
  };
  CHECK(run(a) == kExitOk);
  CHECK(run(b) == kExitOk);
  for (const char* name :
       {"train.jsonl", "train_features.jsonl", "test.jsonl", "test_features.jsonl"}) {
    CHECK(slurp(fs::path(a) / name) == slurp(fs::path(b) / name));
  }
  std::string err;
  CHECK(run(a) == kExitValidation);  // non-empty without --force
  auto forced = base;
  forced.insert(forced.end(), {"--out", a, "--force"});
  CHECK(cli(forced) == kExitOk);
}

TEST_CASE("gen-synth with error rate 0 trains with a disabled-deXent warning") {
  auto dir = temp_dir("noerr");
  CHECK(cli({"gen-synth", "--out", (dir / "data").string(), "--n", "12", "--test-n", "4",
             "--error-rate", "0", "--seed", "3"}) == kExitOk);
  std::string err;
  auto args = with_tiny({"train", "--data", (dir / "data").string(), "--out",
                         (dir / "run").string(), "--seeds", "1", "--set", "train.epochs=1",
                         "--set", "train.batch_size=4"});
  CHECK(cli(args, nullptr, &err) == kExitOk);
  CHECK(err.find("no mispronunciations") != std::string::npos);
}

TEST_CASE("train writes the documented manifest and is idempotent") {
  auto dir = temp_dir("train");
  REQUIRE(cli({"gen-synth", "--out", (dir / "data").string(), "--n", "24", "--test-n", "8",
               "--error-rate", "0.2", "--seed", "5"}) == kExitOk);
  auto train_into = [&](const std::string& out) {
    return cli(with_tiny({"train", "--data", (dir / "data").string(), "--out", out, "--seeds",
                          "1,2", "--set", "train.epochs=2", "--set", "train.batch_size=8"}));
  };
  CHECK(train_into((dir / "run1").string()) == kExitOk);
  CHECK(train_into((dir / "run2").string()) == kExitOk);

  // Manifest: per seed history + curves + 2 checkpoints, plus report.json.
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir / "run1")) {
    names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  std::vector<std::string> expected = {
      "curves_seed1.csv",       "curves_seed2.csv",       "history_seed1.jsonl",
      "history_seed2.jsonl",    "model_seed1_best.json",  "model_seed1_final.json",
      "model_seed2_best.json",  "model_seed2_final.json", "report.json"};
  CHECK(names == expected);

  CHECK(slurp(dir / "run1" / "report.json") == slurp(dir / "run2" / "report.json"));
  CHECK(slurp(dir / "run1" / "history_seed1.jsonl") == slurp(dir / "run2" / "history_seed1.jsonl"));

  // The report embeds the effective config and format version.
  json report = json::parse(slurp(dir / "run1" / "report.json"));
  CHECK(report.at("format") == "capt-report");
  CHECK(report.at("version") == 1);
  CHECK(report.at("config").contains("model.d"));
  CHECK(report.at("per_seed").size() == 2);

  SUBCASE("eval is idempotent and validates feature width") {
    auto eval_args = [&](const std::string& out) {
      return std::vector<std::string>{"eval", "--model",
                                      (dir / "run1" / "model_seed1_best.json").string(), "--data",
                                      (dir / "data").string(), "--split", "test", "--out", out};
    };
    CHECK(cli(eval_args((dir / "e1.json").string())) == kExitOk);
    CHECK(cli(eval_args((dir / "e2.json").string())) == kExitOk);
    CHECK(slurp(dir / "e1.json") == slurp(dir / "e2.json"));
    json e = json::parse(slurp(dir / "e1.json"));
    CHECK(e.at("format") == "capt-eval");
    CHECK(e.at("report").at("apa").contains("phone"));
  }

  SUBCASE("eval report matches a standalone recomputation from raw predictions") {
    HMambaModel model = load_checkpoint((dir / "run1" / "model_seed1_best.json").string());
    Corpus corpus = load_corpus((dir / "data" / "test.jsonl").string());
    FeatureFile features = load_features((dir / "data" / "test_features.jsonl").string());
    EvalReport report = evaluate_model(model, corpus, features);

    std::vector<double> phone_pred, phone_true;
    std::array<std::vector<double>, 3> word_pred_agg, word_true;
    std::array<std::vector<double>, 3> word_pred_raw;  // wrong pooling, for contrast
    RngStream rng(0);
    for (const auto& rec : corpus.records) {
      auto bundle = assemble_features(rec, features.find(rec.utt_id).blocks, false, rng);
      auto out = forward(rec, bundle, model, false);
      for (int pos = 0; pos < rec.n_positions(); ++pos) {
        if (rec.is_sil(pos)) continue;
        phone_pred.push_back(corpus.scaler.denormalize(corpus.scaler.phone_accuracy,
                                                       out.phone_scores.at(pos, 0)));
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
          word_pred_agg[a].push_back(
              corpus.scaler.denormalize(corpus.scaler.word[a], per_word[w][a]));
          word_true[a].push_back(rec.words[w].scores[a]);
        }
      }
      for (int pos = 0; pos < rec.n_positions(); ++pos) {
        if (rec.is_sil(pos)) continue;
        for (std::size_t a = 0; a < 3; ++a) {
          word_pred_raw[a].push_back(corpus.scaler.denormalize(
              corpus.scaler.word[a], per_phone[static_cast<std::size_t>(pos)][a]));
        }
      }
    }
    CHECK(*report.apa.at("phone").at("accuracy").pcc ==
          doctest::Approx(*pcc(phone_pred, phone_true)).epsilon(1e-12));
    CHECK(report.apa.at("phone").at("accuracy").mse ==
          doctest::Approx(mse(phone_pred, phone_true)).epsilon(1e-12));
    // Word metrics come from aggregated per-word predictions...
    CHECK(report.apa.at("word").at("accuracy").mse ==
          doctest::Approx(mse(word_pred_agg[0], word_true[0])).epsilon(1e-12));
    // ...and demonstrably not from raw per-phone pooling.
    CHECK(word_pred_raw[0].size() != word_pred_agg[0].size());
  }
}

TEST_CASE("score prints the assessment layout") {
  auto dir = temp_dir("score");
  REQUIRE(cli({"gen-synth", "--out", (dir / "data").string(), "--n", "8", "--test-n", "4",
               "--error-rate", "0.3", "--seed", "9"}) == kExitOk);
  REQUIRE(cli(with_tiny({"train", "--data", (dir / "data").string(), "--out",
                         (dir / "run").string(), "--seeds", "1", "--set", "train.epochs=1",
                         "--set", "train.batch_size=4"})) == kExitOk);
  // Build a single-utterance file from the first test record.
  {
    std::ifstream corpus_in(dir / "data" / "test.jsonl");
    std::string header, line;
    std::getline(corpus_in, header);
    std::getline(corpus_in, line);
    std::ifstream feat_in(dir / "data" / "test_features.jsonl");
    std::string feat_line;
    std::getline(feat_in, feat_line);
    json rec = json::parse(line);
    json feats = json::parse(feat_line);
    REQUIRE(rec.at("utt_id") == feats.at("utt_id"));
    json utt{{"record", rec}, {"providers", feats.at("providers")}, {"rows", feats.at("rows")}};
    std::ofstream out(dir / "utt.json");
    out << utt.dump();
  }
  std::string text;
  CHECK(cli({"score", "--model", (dir / "run" / "model_seed1_best.json").string(), "--utt",
             (dir / "utt.json").string()},
            &text) == kExitOk);
  CHECK(text.find("utterance ") == 0);
  for (const char* aspect : {"accuracy", "completeness", "fluency", "prosody", "total"}) {
    CHECK(text.find(aspect) != std::string::npos);
  }
  CHECK(text.find("words\n") != std::string::npos);
  CHECK(text.find("phones\n") != std::string::npos);
  CHECK(text.find("canonical ") != std::string::npos);
  CHECK(text.find("diagnosed ") != std::string::npos);
  CHECK(text.find("verdict") != std::string::npos);
  bool has_mark = text.find("✓") != std::string::npos ||
                  text.find("✗") != std::string::npos;
  CHECK(has_mark);

  SUBCASE("scoring twice is byte-identical") {
    std::string again;
    CHECK(cli({"score", "--model", (dir / "run" / "model_seed1_best.json").string(), "--utt",
               (dir / "utt.json").string()},
              &again) == kExitOk);
    CHECK(text == again);
  }

  SUBCASE("verdict row equals the diagnose() error states") {
    HMambaModel model = load_checkpoint((dir / "run" / "model_seed1_best.json").string());
    Corpus corpus = load_corpus((dir / "data" / "test.jsonl").string());
    FeatureFile features = load_features((dir / "data" / "test_features.jsonl").string());
    const auto& rec = corpus.records.front();
    RngStream rng(0);
    auto bundle = assemble_features(rec, features.find(rec.utt_id).blocks, false, rng);
    auto out = forward(rec, bundle, model, false);
    std::string expected;
    for (int pos = 0; pos < rec.n_positions(); ++pos) {
      if (rec.is_sil(pos)) continue;
      expected += out.error_states[static_cast<std::size_t>(pos)] ? "✗" : "✓";
    }
    std::string verdict_line = text.substr(text.find("verdict"));
    verdict_line = verdict_line.substr(0, verdict_line.find('\n'));
    std::string marks;
    for (std::size_t i = 0; i < verdict_line.size();) {
      if ((verdict_line.compare(i, 3, "✓") == 0) ||
          (verdict_line.compare(i, 3, "✗") == 0)) {
        marks += verdict_line.substr(i, 3);
        i += 3;
      } else {
        ++i;
      }
    }
    CHECK(marks == expected);
  }
}

TEST_CASE("score output matches the golden layout") {
  auto dir = temp_dir("golden");
  // An untrained, seed-pinned model keeps the golden file stable.
  SynthConfig scfg;
  scfg.n_utts = 1;
  scfg.phones_per_utt = 5;
  scfg.error_rate = 0.4;
  scfg.noise = 0.0;
  scfg.seed = 31;
  auto data = generate_synthetic(scfg);
  HMambaConfig mcfg;
  mcfg.d = 16;
  mcfg.l_phone = 1;
  mcfg.l_word = 1;
  mcfg.l_utt = 1;
  mcfg.word_conv_kernels = 32;
  mcfg.max_positions = 64;
  mcfg.feature_dim = 0;
  for (const auto& b : data.features.utterances.front().blocks) mcfg.feature_dim += b.spec.dim;
  RngStream rng = RngStream::derive(99, "init");
  auto model = HMambaModel::init(mcfg, data.corpus.inventory, rng);
  auto ckpt = (dir / "model.json").string();
  save_checkpoint(model, ckpt, {{"scaler", data.corpus.scaler.to_json()}});
  {
    json rec_json;
    data.corpus.features_file = "f.jsonl";
    save_corpus(data.corpus, (dir / "c.jsonl").string());
    save_features(data.features, (dir / "f.jsonl").string());
    std::ifstream corpus_in(dir / "c.jsonl");
    std::string header, line;
    std::getline(corpus_in, header);
    std::getline(corpus_in, line);
    std::ifstream feat_in(dir / "f.jsonl");
    std::string feat_line;
    std::getline(feat_in, feat_line);
    json rec = json::parse(line);
    json feats = json::parse(feat_line);
    json utt{{"record", rec}, {"providers", feats.at("providers")}, {"rows", feats.at("rows")}};
    std::ofstream out(dir / "utt.json");
    out << utt.dump();
  }
  std::string text;
  REQUIRE(cli({"score", "--model", ckpt, "--utt", (dir / "utt.json").string()}, &text) == kExitOk);
  fs::path golden = fs::path(TEST_DATA_DIR) / "score_golden.txt";
  if (!fs::exists(golden)) {
    // First run freezes the golden file; review the diff when it changes.
    std::ofstream out(golden);
    out << text;
    MESSAGE("golden file created at ", golden.string());
  }
  CHECK(text == slurp(golden));
}

TEST_CASE("bench emits the documented schema and the efficiency direction") {
  auto dir = temp_dir("bench");
  auto out_path = (dir / "bench.json").string();
  std::string text;
  CHECK(cli({"bench", "--seq-len", "50", "--out", out_path, "--set", "model.d=128"}, &text) ==
        kExitOk);
  json j = json::parse(slurp(out_path));
  CHECK(j.at("format") == "capt-bench");
  CHECK(j.at("version") == 1);
  CHECK(j.at("seq_len") == 50);
  CHECK(j.at("config").contains("model.d"));
  REQUIRE(j.at("results").size() == 2);
  const auto& mamba = j.at("results").at(0);
  const auto& transformer = j.at("results").at(1);
  CHECK(mamba.at("block_type") == "mamba");
  CHECK(transformer.at("block_type") == "transformer");
  for (const char* key : {"params", "macs", "seq_len"}) {
    CHECK(mamba.contains(key));
    CHECK(transformer.contains(key));
  }
  CHECK(mamba.at("params").get<long long>() < transformer.at("params").get<long long>());
  CHECK(mamba.at("macs").get<long long>() < transformer.at("macs").get<long long>());
  CHECK(j.contains("timing_ms"));

  SUBCASE("output is idempotent apart from wall-clock fields") {
    auto second = (dir / "bench2.json").string();
    CHECK(cli({"bench", "--seq-len", "50", "--out", second, "--set", "model.d=128"}) == kExitOk);
    json a = json::parse(slurp(out_path));
    json b = json::parse(slurp(second));
    a.erase("timing_ms");
    b.erase("timing_ms");
    CHECK(a == b);
  }
}

TEST_CASE("exit codes: validation 1, runtime 2") {
  auto dir = temp_dir("codes");
  std::string err;
  CHECK(cli({"train", "--data", (dir / "missing").string(), "--out", (dir / "o").string()},
            nullptr, &err) == kExitValidation);
  CHECK(cli({"definitely-not-a-command"}, nullptr, &err) == kExitValidation);
  CHECK(cli({"bench", "--seq-len", "10", "--set", "model.not_a_key=1"}, nullptr, &err) ==
        kExitValidation);
  CHECK(cli({"eval", "--model", (dir / "nope.json").string(), "--data", dir.string(), "--out",
             (dir / "r.json").string()},
            nullptr, &err) == kExitValidation);

  // Config-file validation failures are reported before any training compute.
  {
    std::ofstream cfg(dir / "bad.cfg");
    cfg << "train.epochs = -3\n";
  }
  REQUIRE(cli({"gen-synth", "--out", (dir / "data").string(), "--n", "4", "--test-n", "2",
               "--seed", "1"}) == kExitOk);
  CHECK(cli({"train", "--data", (dir / "data").string(), "--out", (dir / "run").string(),
             "--config", (dir / "bad.cfg").string()},
            nullptr, &err) == kExitValidation);
  CHECK(err.find("epochs") != std::string::npos);

  // A corrupt checkpoint is a runtime failure, not a validation one.
  {
    std::ofstream bad(dir / "corrupt.json");
    bad << "{\"format\": \"capt-model\", \"version\": 1, truncated";
  }
  CHECK(cli({"eval", "--model", (dir / "corrupt.json").string(), "--data",
             (dir / "data").string(), "--out", (dir / "r.json").string()},
            nullptr, &err) == kExitRuntime);
}

TEST_CASE("timing budgets: generation under 10 s, small default-config train under 2 min") {
  auto dir = temp_dir("budget");
  auto t0 = std::chrono::steady_clock::now();
  REQUIRE(cli({"gen-synth", "--out", (dir / "big").string(), "--n", "1000", "--test-n", "1",
               "--error-rate", "0.15", "--seed", "2"}) == kExitOk);
  double gen_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(gen_seconds < 10.0);

  REQUIRE(cli({"gen-synth", "--out", (dir / "small").string(), "--n", "20", "--test-n", "5",
               "--error-rate", "0.15", "--seed", "4"}) == kExitOk);
  t0 = std::chrono::steady_clock::now();
  // Stock defaults: d=128, 3/1/1 blocks, 20 epochs.
  REQUIRE(cli({"train", "--data", (dir / "small").string(), "--out", (dir / "run").string(),
               "--seeds", "1"}) == kExitOk);
  double train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(train_seconds < 120.0);

  // History rows expose the loss components next to the weighted total.
  std::istringstream history(slurp(dir / "run" / "history_seed1.jsonl"));
  std::string line;
  REQUIRE(std::getline(history, line));
  json row = json::parse(line);
  for (const char* key : {"epoch", "step", "apa", "mdd", "mdd_hit", "mdd_mis", "weight", "total"}) {
    CHECK(row.contains(key));
  }
}

TEST_SUITE_END();
