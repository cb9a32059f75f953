#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace hmamba {

// Sample Pearson correlation. Returns nullopt (with a caller-visible warning
// flag) when either vector is constant or shorter than 2.
std::optional<double> pcc(const std::vector<double>& pred, const std::vector<double>& target);

double mse(const std::vector<double>& pred, const std::vector<double>& target);

struct DetectionMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  long long tp = 0, fp = 0, fn = 0;
  bool degenerate = false;  // a zero denominator was clamped to 0
};

// Positional detection metrics: truth error iff realized differs from
// canonical, predicted error iff diagnosis differs from canonical. A true
// positive needs only the flag, not the right substitute phone.
DetectionMetrics mdd_detection_metrics(const std::vector<int>& diagnosis,
                                       const std::vector<int>& canonical,
                                       const std::vector<int>& realized,
                                       const std::vector<bool>& mask);

// Phone error rate: deletion markers are removed from both sequences, then
// symmetric-cost edit distance over the reference length.
struct PerResult {
  double per = 0.0;
  bool defined = false;
};

PerResult per(const std::vector<int>& diagnosis, const std::vector<int>& realized,
              const std::vector<bool>& mask, int del_class);

long long levenshtein(const std::vector<int>& a, const std::vector<int>& b);

struct AspectMetrics {
  std::optional<double> pcc;
  double mse = 0.0;
};

struct EvalReport {
  // granularity -> aspect -> metrics; keys follow kPhoneAspects & friends.
  std::map<std::string, std::map<std::string, AspectMetrics>> apa;
  DetectionMetrics mdd;
  PerResult per;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  std::string to_csv_row() const;   // flat row, schema in docs/FORMATS.md
  static std::string csv_header();
};

// Arithmetic mean of every metric over the given reports; schemas must agree.
EvalReport aggregate_seeds(const std::vector<EvalReport>& reports);

}  // namespace hmamba
