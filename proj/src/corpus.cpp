#include "hmamba/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace hmamba {

using nlohmann::json;

namespace {

const std::vector<std::string>& cmu_phones() {
  static const std::vector<std::string> phones = {
      "AA", "AE", "AH", "AO", "AW", "AY", "B",  "CH", "D",  "DH", "EH", "ER", "EY",
      "F",  "G",  "HH", "IH", "IY", "JH", "K",  "L",  "M",  "N",  "NG", "OW", "OY",
      "P",  "R",  "S",  "SH", "T",  "TH", "UH", "UW", "V",  "W",  "Y",  "Z",  "ZH"};
  return phones;
}

}  // namespace

PhoneInventory PhoneInventory::defaults() {
  PhoneInventory inv;
  inv.canonical = cmu_phones();
  inv.canonical.push_back(kSilToken);
  inv.annotation = cmu_phones();
  // Placeholder L2-extension phones; real corpora declare their own
  // inventory in the file header.
  for (const char* extra : {"AH2", "EH2", "IH2", "IR", "UR", "ER2"}) {
    inv.annotation.push_back(extra);
  }
  inv.annotation.push_back(kUnkToken);
  return inv;
}

void PhoneInventory::build_maps() const {
  if (!embed_ids_.empty() || canonical.empty()) return;
  for (std::size_t i = 0; i < canonical.size(); ++i) {
    embed_ids_[canonical[i]] = static_cast<int>(i);
  }
  for (std::size_t i = 0; i < annotation.size(); ++i) {
    class_ids_[annotation[i]] = static_cast<int>(i);
  }
  class_ids_[kDelToken] = del_class();
}

bool PhoneInventory::is_canonical(const std::string& phone) const {
  build_maps();
  return embed_ids_.count(phone) > 0;
}

bool PhoneInventory::is_realizable(const std::string& phone) const {
  build_maps();
  return class_ids_.count(phone) > 0;
}

int PhoneInventory::embed_id(const std::string& phone) const {
  build_maps();
  auto it = embed_ids_.find(phone);
  if (it == embed_ids_.end()) {
    throw ValidationError("unknown canonical phone symbol '" + phone + "'");
  }
  return it->second;
}

int PhoneInventory::class_id(const std::string& phone) const {
  build_maps();
  auto it = class_ids_.find(phone);
  if (it == class_ids_.end()) {
    throw ValidationError("unknown realized phone symbol '" + phone + "'");
  }
  return it->second;
}

const std::string& PhoneInventory::class_name(int id) const {
  if (id == del_class()) {
    static const std::string del = kDelToken;
    return del;
  }
  return annotation.at(static_cast<std::size_t>(id));
}

json PhoneInventory::to_json() const {
  return json{{"canonical", canonical}, {"annotation", annotation}, {"del", kDelToken}};
}

PhoneInventory PhoneInventory::from_json(const json& j) {
  PhoneInventory inv;
  inv.canonical = j.at("canonical").get<std::vector<std::string>>();
  inv.annotation = j.at("annotation").get<std::vector<std::string>>();
  return inv;
}

int UtteranceRecord::n_scored() const {
  int n = 0;
  for (int pos = 0; pos < n_positions(); ++pos) {
    if (!is_sil(pos)) ++n;
  }
  return n;
}

std::vector<bool> UtteranceRecord::scored_mask() const {
  std::vector<bool> mask(static_cast<std::size_t>(n_positions()));
  for (int pos = 0; pos < n_positions(); ++pos) mask[static_cast<std::size_t>(pos)] = !is_sil(pos);
  return mask;
}

int UtteranceRecord::word_of(int pos) const {
  for (std::size_t w = 0; w < words.size(); ++w) {
    if (pos >= words[w].begin && pos < words[w].end) return static_cast<int>(w);
  }
  return -1;
}

void UtteranceRecord::check(const PhoneInventory& inventory,
                            std::vector<std::string>& problems) const {
  auto complain = [&](const std::string& what) { problems.push_back(utt_id + ": " + what); };
  int n = n_positions();
  if (n == 0) {
    complain("empty phone sequence");
    return;
  }
  if (static_cast<int>(sil_duration.size()) != n || static_cast<int>(realized.size()) != n ||
      static_cast<int>(phone_scores.size()) != n) {
    complain("per-position arrays disagree with phone count");
    return;
  }
  for (int pos = 0; pos < n; ++pos) {
    const auto& phone = phones[static_cast<std::size_t>(pos)];
    if (!inventory.is_canonical(phone)) {
      complain("unknown phone symbol '" + phone + "'");
    }
    if (is_sil(pos)) {
      if (!realized[static_cast<std::size_t>(pos)].empty()) {
        complain("silence position " + std::to_string(pos) + " carries a realized phone");
      }
    } else {
      const auto& r = realized[static_cast<std::size_t>(pos)];
      if (!inventory.is_realizable(r)) {
        complain("unknown realized phone symbol '" + r + "' at position " + std::to_string(pos));
      }
    }
  }
  // Words must partition the non-silence positions with contiguous spans.
  std::vector<int> cover(static_cast<std::size_t>(n), 0);
  for (const auto& w : words) {
    if (w.begin < 0 || w.end > n || w.begin >= w.end) {
      complain("word span [" + std::to_string(w.begin) + ", " + std::to_string(w.end) +
               ") out of bounds");
      continue;
    }
    for (int pos = w.begin; pos < w.end; ++pos) {
      if (is_sil(pos)) complain("word span covers silence position " + std::to_string(pos));
      cover[static_cast<std::size_t>(pos)] += 1;
    }
  }
  for (int pos = 0; pos < n; ++pos) {
    if (is_sil(pos)) continue;
    if (cover[static_cast<std::size_t>(pos)] == 0) {
      complain("position " + std::to_string(pos) + " belongs to no word");
    } else if (cover[static_cast<std::size_t>(pos)] > 1) {
      complain("position " + std::to_string(pos) + " belongs to multiple words");
    }
  }
}

ScoreScaler ScoreScaler::defaults() {
  ScoreScaler s;
  s.phone_accuracy = {0.0, 2.0};
  s.word.fill({0.0, 10.0});
  s.utterance.fill({0.0, 10.0});
  return s;
}

double ScoreScaler::normalize(const ScoreRange& r, double raw) const {
  return (raw - r.lo) / (r.hi - r.lo);
}

double ScoreScaler::denormalize(const ScoreRange& r, double unit) const {
  return unit * (r.hi - r.lo) + r.lo;
}

json ScoreScaler::to_json() const {
  json j;
  j["phone"]["accuracy"] = {phone_accuracy.lo, phone_accuracy.hi};
  for (std::size_t i = 0; i < kWordAspects.size(); ++i) {
    j["word"][kWordAspects[i]] = {word[i].lo, word[i].hi};
  }
  for (std::size_t i = 0; i < kUttAspects.size(); ++i) {
    j["utterance"][kUttAspects[i]] = {utterance[i].lo, utterance[i].hi};
  }
  return j;
}

ScoreScaler ScoreScaler::from_json(const json& j) {
  ScoreScaler s;
  auto read = [&](const json& node, const char* aspect) -> ScoreRange {
    if (!node.contains(aspect)) {
      throw ValidationError(std::string("score_ranges: missing aspect '") + aspect + "'");
    }
    auto pair = node.at(aspect);
    ScoreRange r{pair.at(0).get<double>(), pair.at(1).get<double>()};
    if (!(r.hi > r.lo)) {
      throw ValidationError(std::string("score_ranges: degenerate range for '") + aspect + "'");
    }
    return r;
  };
  s.phone_accuracy = read(j.at("phone"), "accuracy");
  for (std::size_t i = 0; i < kWordAspects.size(); ++i) {
    s.word[i] = read(j.at("word"), kWordAspects[i]);
  }
  for (std::size_t i = 0; i < kUttAspects.size(); ++i) {
    s.utterance[i] = read(j.at("utterance"), kUttAspects[i]);
  }
  return s;
}

namespace {

json record_to_json(const UtteranceRecord& rec) {
  json j;
  j["utt_id"] = rec.utt_id;
  j["phones"] = rec.phones;
  json sil = json::array();
  for (int pos = 0; pos < rec.n_positions(); ++pos) {
    if (rec.is_sil(pos)) {
      sil.push_back(json::array({pos, rec.sil_duration[static_cast<std::size_t>(pos)]}));
    }
  }
  j["silences"] = sil;
  json words = json::array();
  for (const auto& w : rec.words) {
    words.push_back(json{{"begin", w.begin},
                         {"end", w.end},
                         {"scores", json::array({w.scores[0], w.scores[1], w.scores[2]})}});
  }
  j["words"] = words;
  json realized = json::array();
  json scores = json::array();
  for (int pos = 0; pos < rec.n_positions(); ++pos) {
    if (rec.is_sil(pos)) continue;
    realized.push_back(rec.realized[static_cast<std::size_t>(pos)]);
    scores.push_back(rec.phone_scores[static_cast<std::size_t>(pos)]);
  }
  j["realized"] = realized;
  j["phone_scores"] = scores;
  j["utt_scores"] = rec.utt_scores;
  return j;
}

UtteranceRecord record_from_json(const json& j) {
  UtteranceRecord rec;
  rec.utt_id = j.at("utt_id").get<std::string>();
  rec.phones = j.at("phones").get<std::vector<std::string>>();
  int n = rec.n_positions();
  rec.sil_duration.assign(static_cast<std::size_t>(n), 0.0);
  for (const auto& pair : j.at("silences")) {
    int pos = pair.at(0).get<int>();
    if (pos < 0 || pos >= n) throw ValidationError(rec.utt_id + ": silence position out of range");
    rec.sil_duration[static_cast<std::size_t>(pos)] = pair.at(1).get<double>();
  }
  for (const auto& wj : j.at("words")) {
    WordSpan w;
    w.begin = wj.at("begin").get<int>();
    w.end = wj.at("end").get<int>();
    auto s = wj.at("scores");
    w.scores = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    rec.words.push_back(w);
  }
  auto realized = j.at("realized").get<std::vector<std::string>>();
  auto scores = j.at("phone_scores").get<std::vector<double>>();
  rec.realized.assign(static_cast<std::size_t>(n), "");
  rec.phone_scores.assign(static_cast<std::size_t>(n), 0.0);
  std::size_t cursor = 0;
  for (int pos = 0; pos < n; ++pos) {
    if (rec.phones[static_cast<std::size_t>(pos)] == kSilToken) continue;
    if (cursor >= realized.size() || cursor >= scores.size()) {
      throw ValidationError(rec.utt_id + ": realized/score arrays shorter than phone count");
    }
    rec.realized[static_cast<std::size_t>(pos)] = realized[cursor];
    rec.phone_scores[static_cast<std::size_t>(pos)] = scores[cursor];
    ++cursor;
  }
  if (cursor != realized.size() || cursor != scores.size()) {
    throw ValidationError(rec.utt_id + ": realized/score arrays longer than phone count");
  }
  auto us = j.at("utt_scores");
  for (std::size_t i = 0; i < 5; ++i) rec.utt_scores[i] = us.at(i).get<double>();
  return rec;
}

void check_scores_in_range(const UtteranceRecord& rec, const ScoreScaler& scaler,
                           std::vector<std::string>& problems) {
  auto in_range = [](const ScoreRange& r, double v) { return v >= r.lo && v <= r.hi; };
  for (int pos = 0; pos < rec.n_positions(); ++pos) {
    if (rec.is_sil(pos)) continue;
    if (!in_range(scaler.phone_accuracy, rec.phone_scores[static_cast<std::size_t>(pos)])) {
      problems.push_back(rec.utt_id + ": phone score out of declared range at position " +
                         std::to_string(pos));
    }
  }
  for (const auto& w : rec.words) {
    for (std::size_t a = 0; a < 3; ++a) {
      if (!in_range(scaler.word[a], w.scores[a])) {
        problems.push_back(rec.utt_id + ": word " + kWordAspects[a] + " score out of range");
      }
    }
  }
  for (std::size_t a = 0; a < 5; ++a) {
    if (!in_range(scaler.utterance[a], rec.utt_scores[a])) {
      problems.push_back(rec.utt_id + ": utterance " + std::string(kUttAspects[a]) +
                         " score out of range");
    }
  }
}

}  // namespace

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open corpus file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("corpus file is empty: " + path);
  json header = json::parse(line);
  if (header.value("format", "") != "capt-corpus") {
    throw ValidationError(path + ": missing or wrong header format tag");
  }
  Corpus corpus;
  corpus.inventory = PhoneInventory::from_json(header.at("inventory"));
  corpus.scaler = ScoreScaler::from_json(header.at("score_ranges"));
  corpus.features_file = header.value("features_file", "");
  corpus.generator = header.value("generator", json());
  std::vector<std::string> problems;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    UtteranceRecord rec;
    try {
      rec = record_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw ValidationError(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
    rec.check(corpus.inventory, problems);
    check_scores_in_range(rec, corpus.scaler, problems);
    corpus.records.push_back(std::move(rec));
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << path << ": " << problems.size() << " validation problem(s):";
    for (const auto& p : problems) os << "\n  " << p;
    throw ValidationError(os.str());
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write corpus file: " + path);
  json header;
  header["format"] = "capt-corpus";
  header["version"] = 1;
  header["inventory"] = corpus.inventory.to_json();
  header["score_ranges"] = corpus.scaler.to_json();
  header["features_file"] = corpus.features_file;
  if (!corpus.generator.is_null()) header["generator"] = corpus.generator;
  out << header.dump() << "\n";
  for (const auto& rec : corpus.records) {
    out << record_to_json(rec).dump() << "\n";
  }
}

PronunciationFrequencies estimate_frequencies(const std::vector<UtteranceRecord>& records,
                                              const PhoneInventory&) {
  PronunciationFrequencies freq;
  for (const auto& rec : records) {
    for (int pos = 0; pos < rec.n_positions(); ++pos) {
      if (rec.is_sil(pos)) continue;
      ++freq.scored;
      if (rec.realized[static_cast<std::size_t>(pos)] != rec.phones[static_cast<std::size_t>(pos)]) {
        ++freq.mispronounced;
      }
    }
  }
  if (freq.scored > 0) {
    freq.mu_mis = static_cast<double>(freq.mispronounced) / static_cast<double>(freq.scored);
    freq.mu_hit = 1.0 - freq.mu_mis;
  }
  return freq;
}

}  // namespace hmamba
