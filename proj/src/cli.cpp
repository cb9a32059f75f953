#include "hmamba/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>

#include "CLI11.hpp"
#include "hmamba/config.hpp"
#include "hmamba/eval.hpp"
#include "hmamba/synth.hpp"
#include "hmamba/trainer.hpp"

namespace hmamba {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct DataSplit {
  Corpus corpus;
  FeatureFile features;
};

DataSplit load_split(const std::string& data_dir, const std::string& split) {
  fs::path corpus_path = fs::path(data_dir) / (split + ".jsonl");
  if (!fs::exists(corpus_path)) {
    throw ValidationError("no '" + split + "' split under " + data_dir + " (expected " +
                          corpus_path.string() + ")");
  }
  DataSplit d;
  d.corpus = load_corpus(corpus_path.string());
  if (d.corpus.features_file.empty()) {
    throw ValidationError(corpus_path.string() + ": header lacks a features_file reference");
  }
  d.features = load_features((fs::path(data_dir) / d.corpus.features_file).string());
  return d;
}

int manifest_width(const FeatureFile& features) {
  int width = 0;
  for (const auto& spec : shared_manifest(features)) width += spec.dim;
  return width;
}

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << j.dump(2) << "\n";
}

int cmd_gen_synth(const std::string& out_dir, int n, int test_n, int phones, double error_rate,
                  double noise, std::uint64_t seed, bool force, std::ostream& log) {
  fs::path dir(out_dir);
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw ValidationError(out_dir + " exists and is not empty (use --force to overwrite)");
  }
  fs::create_directories(dir);
  auto make = [&](int count, std::uint64_t s, const std::string& tag) {
    SynthConfig cfg;
    cfg.n_utts = count;
    cfg.phones_per_utt = phones;
    cfg.error_rate = error_rate;
    cfg.noise = noise;
    cfg.seed = s;
    auto result = generate_synthetic(cfg);
    result.corpus.features_file = tag + "_features.jsonl";
    save_corpus(result.corpus, (dir / (tag + ".jsonl")).string());
    save_features(result.features, (dir / (tag + "_features.jsonl")).string());
    return result;
  };
  make(n, seed, "train");
  // The test split draws from an independent stream derived from the seed.
  make(test_n, fnv1a("test:" + std::to_string(seed)), "test");
  log << "wrote " << n << " train and " << test_n << " test utterances to " << out_dir << "\n";
  return kExitOk;
}

EvalReport eval_best_checkpoint(const std::string& ckpt, const DataSplit& split,
                                std::uint64_t seed) {
  HMambaModel model = load_checkpoint(ckpt);
  if (model.config.feature_dim != manifest_width(split.features)) {
    throw ValidationError("checkpoint expects feature width " +
                          std::to_string(model.config.feature_dim) + " but the data provides " +
                          std::to_string(manifest_width(split.features)));
  }
  EvalReport report = evaluate_model(model, split.corpus, split.features);
  report.seeds = {seed};
  return report;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir, const RunConfig& run_cfg,
              std::ostream& log) {
  DataSplit train_split = load_split(data_dir, "train");
  bool has_test = fs::exists(fs::path(data_dir) / "test.jsonl");
  DataSplit test_split;
  if (has_test) test_split = load_split(data_dir, "test");

  int feature_dim = manifest_width(train_split.features);
  HMambaConfig model_cfg = run_cfg.model_config(feature_dim);
  TrainConfig train_cfg = run_cfg.train_config();
  fs::create_directories(out_dir);

  std::vector<EvalReport> reports;
  for (std::uint64_t seed : run_cfg.seeds()) {
    std::string tag = "seed" + std::to_string(seed);
    log << "training " << tag << "...\n";
    TrainResult result = train(train_split.corpus, train_split.features, model_cfg, train_cfg,
                               seed, out_dir, tag);
    for (const auto& w : result.warnings) log << "  warning: " << w << "\n";
    EvalReport report = has_test
                            ? eval_best_checkpoint(result.best_checkpoint, test_split, seed)
                            : result.history.back().dev;
    if (!has_test) report.seeds = {seed};
    reports.push_back(std::move(report));
  }
  EvalReport aggregate = aggregate_seeds(reports);
  json j;
  j["format"] = "capt-report";
  j["version"] = 1;
  j["config"] = run_cfg.to_json();
  j["eval_split"] = has_test ? "test" : "dev";
  j["aggregate"] = aggregate.to_json();
  json per_seed = json::array();
  for (const auto& r : reports) per_seed.push_back(r.to_json());
  j["per_seed"] = per_seed;
  write_json(j, (fs::path(out_dir) / "report.json").string());
  log << "aggregate f1=" << aggregate.mdd.f1 << " report written to " << out_dir
      << "/report.json\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split,
             const std::string& out_file, const std::string& csv_file, std::ostream& log) {
  DataSplit data = load_split(data_dir, split);
  HMambaModel model = load_checkpoint(ckpt);
  if (model.config.feature_dim != manifest_width(data.features)) {
    throw ValidationError("checkpoint expects feature width " +
                          std::to_string(model.config.feature_dim) + " but the data provides " +
                          std::to_string(manifest_width(data.features)));
  }
  EvalReport report = evaluate_model(model, data.corpus, data.features);
  json j;
  j["format"] = "capt-eval";
  j["version"] = 1;
  j["model_config"] = model.config.to_json();
  j["split"] = split;
  j["report"] = report.to_json();
  write_json(j, out_file);
  if (!csv_file.empty()) {
    std::ofstream csv(csv_file);
    if (!csv) throw ValidationError("cannot write " + csv_file);
    csv << EvalReport::csv_header() << "\n" << report.to_csv_row() << "\n";
  }
  log << "eval written to " << out_file << "\n";
  return kExitOk;
}

int cmd_score(const std::string& ckpt, const std::string& utt_file, std::ostream& out) {
  std::ifstream in(utt_file);
  if (!in) throw ValidationError("cannot open " + utt_file);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(utt_file + ": " + e.what());
  }
  json extra;
  HMambaModel model = load_checkpoint(ckpt, &extra);
  ScoreScaler scaler = extra.contains("scaler") ? ScoreScaler::from_json(extra.at("scaler"))
                                                : ScoreScaler::defaults();

  // The utterance file reuses the corpus record schema plus inline features.
  UtteranceRecord rec;
  {
    fs::path tmp = fs::temp_directory_path() /
                   ("hmamba_score_" + std::to_string(fnv1a(utt_file)) + ".jsonl");
    Corpus shell;
    shell.inventory = model.inventory;
    shell.scaler = scaler;
    std::ofstream tmp_out(tmp);
    json header;
    header["format"] = "capt-corpus";
    header["version"] = 1;
    header["inventory"] = model.inventory.to_json();
    header["score_ranges"] = scaler.to_json();
    header["features_file"] = "";
    tmp_out << header.dump() << "\n" << j.at("record").dump() << "\n";
    tmp_out.close();
    Corpus loaded = load_corpus(tmp.string());
    fs::remove(tmp);
    rec = loaded.records.at(0);
  }
  std::vector<ProviderBlock> blocks;
  {
    std::vector<ProviderSpec> specs;
    for (const auto& pj : j.at("providers")) {
      specs.push_back({pj.at("name").get<std::string>(), pj.at("dim").get<int>(),
                       pj.at("is_ssl").get<bool>()});
    }
    const auto& rows = j.at("rows");
    int n = static_cast<int>(rows.size());
    if (n != rec.n_positions()) {
      throw ValidationError(utt_file + ": " + std::to_string(n) + " feature rows for " +
                            std::to_string(rec.n_positions()) + " phones");
    }
    int col0 = 0;
    for (const auto& spec : specs) {
      Tensor block = Tensor::zeros({n, spec.dim});
      for (int i = 0; i < n; ++i) {
        for (int c = 0; c < spec.dim; ++c) {
          block.at_mut(i, c) = rows.at(static_cast<std::size_t>(i))
                                   .at(static_cast<std::size_t>(col0 + c))
                                   .get<double>();
        }
      }
      col0 += spec.dim;
      blocks.push_back({spec, block});
    }
  }
  RngStream rng(0);
  FeatureBundle bundle = assemble_features(rec, blocks, false, rng);
  ModelOutput result = forward(rec, bundle, model, false);

  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return std::string(buf);
  };
  out << "utterance " << rec.utt_id << "\n";
  for (int a = 0; a < 5; ++a) {
    out << "  " << std::left << std::setw(13) << kUttAspects[static_cast<std::size_t>(a)]
        << num(scaler.denormalize(scaler.utterance[static_cast<std::size_t>(a)],
                                  result.utt_scores.at(0, a)))
        << "\n";
  }
  std::vector<std::array<double, 3>> per_phone(static_cast<std::size_t>(rec.n_positions()));
  for (int pos = 0; pos < rec.n_positions(); ++pos) {
    for (int a = 0; a < 3; ++a) {
      per_phone[static_cast<std::size_t>(pos)][static_cast<std::size_t>(a)] =
          result.word_scores.at(pos, a);
    }
  }
  auto per_word = aggregate_word_predictions(per_phone, rec);
  out << "words\n";
  for (std::size_t w = 0; w < per_word.size(); ++w) {
    out << "  " << (w + 1);
    for (std::size_t a = 0; a < 3; ++a) {
      out << " " << kWordAspects[a] << " "
          << num(scaler.denormalize(scaler.word[a], per_word[w][a]));
    }
    out << "\n";
  }
  out << "phones\n ";
  for (int pos = 0; pos < rec.n_positions(); ++pos) {
    if (rec.is_sil(pos)) continue;
    out << " " << rec.phones[static_cast<std::size_t>(pos)] << " "
        << num(scaler.denormalize(scaler.phone_accuracy, result.phone_scores.at(pos, 0)));
  }
  out << "\nmdd\n  canonical ";
  for (int pos = 0; pos < rec.n_positions(); ++pos) {
    if (!rec.is_sil(pos)) out << " " << rec.phones[static_cast<std::size_t>(pos)];
  }
  out << "\n  diagnosed ";
  for (int pos = 0; pos < rec.n_positions(); ++pos) {
    if (!rec.is_sil(pos)) {
      out << " " << model.inventory.class_name(result.diagnosis[static_cast<std::size_t>(pos)]);
    }
  }
  out << "\n  verdict   ";
  for (int pos = 0; pos < rec.n_positions(); ++pos) {
    if (!rec.is_sil(pos)) {
      out << " " << (result.error_states[static_cast<std::size_t>(pos)] ? "✗" : "✓");
    }
  }
  out << "\n";
  return kExitOk;
}

int cmd_sweep_alpha(const std::string& data_dir, const std::vector<double>& alphas,
                    const std::string& out_file, const RunConfig& base_cfg, std::ostream& log) {
  if (alphas.empty()) throw ValidationError("sweep-alpha: no alpha values given");
  DataSplit train_split = load_split(data_dir, "train");
  DataSplit test_split = load_split(data_dir, "test");
  int feature_dim = manifest_width(train_split.features);
  fs::path work = fs::path(out_file).parent_path();
  if (work.empty()) work = ".";
  work /= "sweep_work";
  fs::create_directories(work);

  json rows = json::array();
  for (double alpha : alphas) {
    RunConfig cfg = base_cfg;
    {
      std::ostringstream os;
      os << "loss.alpha=" << std::setprecision(17) << alpha;
      cfg.apply_override(os.str());
    }
    HMambaConfig model_cfg = cfg.model_config(feature_dim);
    TrainConfig train_cfg = cfg.train_config();
    std::vector<EvalReport> reports;
    for (std::uint64_t seed : cfg.seeds()) {
      std::ostringstream tag;
      tag << "alpha" << alpha << "_seed" << seed;
      log << "sweep: training " << tag.str() << "\n";
      TrainResult result = train(train_split.corpus, train_split.features, model_cfg, train_cfg,
                                 seed, work.string(), tag.str());
      reports.push_back(eval_best_checkpoint(result.best_checkpoint, test_split, seed));
    }
    EvalReport agg = aggregate_seeds(reports);
    rows.push_back(json{{"alpha", alpha},
                        {"precision", agg.mdd.precision},
                        {"recall", agg.mdd.recall},
                        {"f1", agg.mdd.f1},
                        {"per", agg.per.defined ? json(agg.per.per) : json(nullptr)}});
    log << "  alpha=" << alpha << " precision=" << agg.mdd.precision
        << " recall=" << agg.mdd.recall << " f1=" << agg.mdd.f1 << "\n";
  }
  json j;
  j["format"] = "capt-sweep";
  j["version"] = 1;
  j["config"] = base_cfg.to_json();
  j["rows"] = rows;
  write_json(j, out_file);
  log << "sweep table written to " << out_file << "\n";
  return kExitOk;
}

int cmd_bench(int seq_len, const RunConfig& run_cfg, const std::string& out_file,
              std::ostream& out) {
  if (seq_len <= 0) throw ValidationError("bench: seq-len must be positive");
  HMambaConfig cfg = run_cfg.model_config(1);
  RngStream rng(1);
  MambaBlock mamba = MambaBlock::init(cfg.d, cfg.d_inner(), cfg.d_state, cfg.dt_rank_eff(),
                                      cfg.conv_kernel, cfg.ffn_hidden_eff(), rng);
  // The baseline keeps the conventional 4x feed-forward of the encoder block.
  TransformerBlock transformer = TransformerBlock::init(cfg.d, cfg.n_heads, 4 * cfg.d, rng);
  CountResult m = count_params_and_macs(mamba, seq_len);
  CountResult t = count_params_and_macs(transformer, seq_len);

  auto time_block = [&](auto&& fwd) {
    Tensor h = Tensor::zeros({seq_len, cfg.d});
    RngStream data(2);
    for (auto& v : h.values()) v = data.uniform(-1, 1);
    double best = 1e300;
    for (int rep = 0; rep < 5; ++rep) {
      auto start = std::chrono::steady_clock::now();
      Tensor y = fwd(h);
      auto stop = std::chrono::steady_clock::now();
      best = std::min(best, std::chrono::duration<double, std::milli>(stop - start).count());
    }
    return best;
  };
  double mamba_ms = time_block([&](const Tensor& h) { return mamba_block_forward(h, mamba); });
  double transformer_ms =
      time_block([&](const Tensor& h) { return transformer_block_forward(h, transformer); });

  json j;
  j["format"] = "capt-bench";
  j["version"] = 1;
  j["config"] = run_cfg.to_json();
  j["seq_len"] = seq_len;
  j["results"] = json::array({json{{"block_type", "mamba"},
                                   {"params", m.params},
                                   {"macs", m.macs},
                                   {"seq_len", seq_len}},
                              json{{"block_type", "transformer"},
                                   {"params", t.params},
                                   {"macs", t.macs},
                                   {"seq_len", seq_len}}});
  // Wall-clock fields; excluded from the idempotency contract.
  j["timing_ms"] = json{{"mamba", mamba_ms}, {"transformer", transformer_ms}};
  out << j.dump(2) << "\n";
  if (!out_file.empty()) write_json(j, out_file);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"hierarchical bidirectional-Mamba pronunciation assessment toolkit"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> overrides;
  auto add_config_options = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "key-value config file");
    sub->add_option("--set", overrides, "override config entries, key=value")
        ->take_all()
        ->allow_extra_args(false);
  };

  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic corpus with planted signal");
  std::string gen_out;
  int gen_n = 100, gen_test_n = -1, gen_phones = 12;
  double gen_error = 0.15, gen_noise = 0.1;
  std::uint64_t gen_seed = 1;
  bool gen_force = false;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "training utterances");
  gen->add_option("--test-n", gen_test_n, "test utterances (default n/5)");
  gen->add_option("--phones", gen_phones, "approximate phones per utterance");
  gen->add_option("--error-rate", gen_error, "mispronunciation probability");
  gen->add_option("--noise", gen_noise, "feature noise level");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_flag("--force", gen_force, "overwrite a non-empty directory");

  auto* train_cmd = app.add_subcommand("train", "train one model per seed and aggregate");
  std::string train_data, train_out, train_seeds;
  train_cmd->add_option("--data", train_data, "data directory from gen-synth")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--seeds", train_seeds, "comma-separated seeds (overrides config)");
  add_config_options(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string eval_model, eval_data, eval_split = "test", eval_out, eval_csv;
  eval_cmd->add_option("--model", eval_model, "model checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "data directory")->required();
  eval_cmd->add_option("--split", eval_split, "split name (train|test)");
  eval_cmd->add_option("--out", eval_out, "report JSON path")->required();
  eval_cmd->add_option("--csv", eval_csv, "optional flat CSV path");

  auto* score_cmd = app.add_subcommand("score", "score one utterance and print the assessment");
  std::string score_model, score_utt;
  score_cmd->add_option("--model", score_model, "model checkpoint")->required();
  score_cmd->add_option("--utt", score_utt, "utterance JSON file")->required();

  auto* sweep_cmd = app.add_subcommand("sweep-alpha", "train across decoupling exponents");
  std::string sweep_data, sweep_out;
  std::vector<double> sweep_alphas;
  sweep_cmd->add_option("--data", sweep_data, "data directory")->required();
  sweep_cmd->add_option("--alphas", sweep_alphas, "alpha values")->required()->delimiter(',');
  sweep_cmd->add_option("--out", sweep_out, "output table JSON")->required();
  add_config_options(sweep_cmd);

  auto* bench_cmd = app.add_subcommand("bench", "compare block parameter and MAC counts");
  int bench_seq = 50;
  std::string bench_out;
  bench_cmd->add_option("--seq-len", bench_seq, "sequence length for MAC counting");
  bench_cmd->add_option("--out", bench_out, "optional JSON output path");
  add_config_options(bench_cmd);

  std::vector<std::string> argv_storage = args;
  std::vector<const char*> argv;
  argv.push_back("hmamba");
  for (const auto& a : argv_storage) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      // --help and friends.
      std::ostringstream os;
      os << app.help();
      out << os.str();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }

  try {
    RunConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    cfg.apply_overrides(overrides);
    if (gen->parsed()) {
      if (gen_test_n < 0) gen_test_n = std::max(1, gen_n / 5);
      return cmd_gen_synth(gen_out, gen_n, gen_test_n, gen_phones, gen_error, gen_noise, gen_seed,
                           gen_force, err);
    }
    if (train_cmd->parsed()) {
      if (!train_seeds.empty()) cfg.apply_override("train.seeds=" + train_seeds);
      return cmd_train(train_data, train_out, cfg, err);
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(eval_model, eval_data, eval_split, eval_out, eval_csv, err);
    }
    if (score_cmd->parsed()) {
      return cmd_score(score_model, score_utt, out);
    }
    if (sweep_cmd->parsed()) {
      return cmd_sweep_alpha(sweep_data, sweep_alphas, sweep_out, cfg, err);
    }
    if (bench_cmd->parsed()) {
      return cmd_bench(bench_seq, cfg, bench_out, out);
    }
    err << "error: no command\n";
    return kExitValidation;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace hmamba
