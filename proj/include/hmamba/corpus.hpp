#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace hmamba {

// Raised on malformed data files or configs; maps to CLI exit code 1.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kSilToken = "SIL";
inline constexpr const char* kDelToken = "[DEL]";
inline constexpr const char* kUnkToken = "[unk]";

inline constexpr std::array<const char*, 1> kPhoneAspects = {"accuracy"};
inline constexpr std::array<const char*, 3> kWordAspects = {"accuracy", "stress", "total"};
inline constexpr std::array<const char*, 5> kUttAspects = {"accuracy", "completeness", "fluency",
                                                           "prosody", "total"};

// Canonical phones feed the embedding table (plus SIL); the annotation set is
// what a learner may actually realize, and together with the deletion token it
// forms the classifier target space. SIL is never a class target.
struct PhoneInventory {
  std::vector<std::string> canonical;   // embedding vocabulary, includes SIL
  std::vector<std::string> annotation;  // realized-phone alphabet, no SIL/
                                        // deletion token

  static PhoneInventory defaults();

  int embed_vocab() const { return static_cast<int>(canonical.size()); }
  int num_classes() const { return static_cast<int>(annotation.size()) + 1; }
  int del_class() const { return static_cast<int>(annotation.size()); }

  bool is_canonical(const std::string& phone) const;
  bool is_realizable(const std::string& phone) const;  // annotation or [DEL]
  int embed_id(const std::string& phone) const;        // throws on unknown
  int class_id(const std::string& phone) const;        // [DEL] -> del_class()
  const std::string& class_name(int id) const;

  nlohmann::json to_json() const;
  static PhoneInventory from_json(const nlohmann::json& j);

 private:
  mutable std::map<std::string, int> embed_ids_;
  mutable std::map<std::string, int> class_ids_;
  void build_maps() const;
};

// Contiguous non-silence span, [begin, end) over full positions.
struct WordSpan {
  int begin = 0;
  int end = 0;
  std::array<double, 3> scores{};  // accuracy, stress, total
};

struct UtteranceRecord {
  std::string utt_id;
  std::vector<std::string> phones;  // canonical sequence incl. SIL, length N
  std::vector<double> sil_duration; // length N, zero at non-SIL positions
  std::vector<WordSpan> words;
  std::vector<std::string> realized;   // length N, empty at SIL positions
  std::vector<double> phone_scores;    // length N, zero at SIL positions
  std::array<double, 5> utt_scores{};

  int n_positions() const { return static_cast<int>(phones.size()); }
  int n_scored() const;
  bool is_sil(int pos) const { return phones[static_cast<std::size_t>(pos)] == kSilToken; }
  std::vector<bool> scored_mask() const;  // true exactly at non-SIL positions
  int word_of(int pos) const;             // -1 when the position is silence

  // Appends one message per violation; empty result means valid.
  void check(const PhoneInventory& inventory, std::vector<std::string>& problems) const;
};

struct ScoreRange {
  double lo = 0.0;
  double hi = 1.0;
};

// Linear map between corpus-declared score ranges and [0,1].
struct ScoreScaler {
  ScoreRange phone_accuracy;
  std::array<ScoreRange, 3> word;
  std::array<ScoreRange, 5> utterance;

  static ScoreScaler defaults();  // phone [0,2], word/utterance [0,10]

  double normalize(const ScoreRange& r, double raw) const;
  double denormalize(const ScoreRange& r, double unit) const;

  nlohmann::json to_json() const;
  static ScoreScaler from_json(const nlohmann::json& j);
};

struct Corpus {
  PhoneInventory inventory;
  ScoreScaler scaler;
  std::string features_file;  // path relative to the corpus file
  nlohmann::json generator;   // audit block written by the synthesizer; may be null
  std::vector<UtteranceRecord> records;
};

Corpus load_corpus(const std::string& path);
void save_corpus(const Corpus& corpus, const std::string& path);

// Training-set mispronunciation statistics over scored positions.
struct PronunciationFrequencies {
  double mu_mis = 0.0;
  double mu_hit = 0.0;
  long long scored = 0;
  long long mispronounced = 0;
};

PronunciationFrequencies estimate_frequencies(const std::vector<UtteranceRecord>& records,
                                              const PhoneInventory& inventory);

}  // namespace hmamba
