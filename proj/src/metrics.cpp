#include "hmamba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace hmamba {

using nlohmann::json;

std::optional<double> pcc(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size()) {
    throw std::invalid_argument("pcc: length mismatch");
  }
  std::size_t n = pred.size();
  if (n < 2) return std::nullopt;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += pred[i];
    my += target[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double dx = pred[i] - mx, dy = target[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

double mse(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size()) {
    throw std::invalid_argument("mse: length mismatch");
  }
  if (pred.empty()) throw std::invalid_argument("mse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double d = pred[i] - target[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

DetectionMetrics mdd_detection_metrics(const std::vector<int>& diagnosis,
                                       const std::vector<int>& canonical,
                                       const std::vector<int>& realized,
                                       const std::vector<bool>& mask) {
  if (diagnosis.size() != canonical.size() || realized.size() != canonical.size() ||
      mask.size() != canonical.size()) {
    throw std::invalid_argument("mdd_detection_metrics: sequence length mismatch");
  }
  DetectionMetrics m;
  for (std::size_t i = 0; i < canonical.size(); ++i) {
    if (!mask[i]) continue;
    bool truth = realized[i] != canonical[i];
    bool flagged = diagnosis[i] != canonical[i];
    if (truth && flagged) ++m.tp;
    if (!truth && flagged) ++m.fp;
    if (truth && !flagged) ++m.fn;
  }
  if (m.tp + m.fp > 0) {
    m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
  } else {
    m.degenerate = true;
  }
  if (m.tp + m.fn > 0) {
    m.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  } else {
    m.degenerate = true;
  }
  if (m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  }
  return m;
}

long long levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t n = a.size(), m = b.size();
  std::vector<long long> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<long long>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<long long>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      long long sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

PerResult per(const std::vector<int>& diagnosis, const std::vector<int>& realized,
              const std::vector<bool>& mask, int del_class) {
  if (diagnosis.size() != realized.size() || mask.size() != realized.size()) {
    throw std::invalid_argument("per: sequence length mismatch");
  }
  std::vector<int> hyp, ref;
  for (std::size_t i = 0; i < realized.size(); ++i) {
    if (!mask[i]) continue;
    if (diagnosis[i] != del_class) hyp.push_back(diagnosis[i]);
    if (realized[i] != del_class) ref.push_back(realized[i]);
  }
  PerResult r;
  if (ref.empty()) return r;  // undefined, flagged by defined=false
  r.defined = true;
  r.per = static_cast<double>(levenshtein(hyp, ref)) / static_cast<double>(ref.size());
  return r;
}

json EvalReport::to_json() const {
  json j;
  j["apa"] = json::object();
  for (const auto& [gran, aspects] : apa) {
    for (const auto& [aspect, m] : aspects) {
      json cell;
      if (m.pcc.has_value()) {
        cell["pcc"] = *m.pcc;
      } else {
        cell["pcc"] = nullptr;
      }
      cell["mse"] = m.mse;
      j["apa"][gran][aspect] = cell;
    }
  }
  j["mdd"] = {{"precision", mdd.precision}, {"recall", mdd.recall},    {"f1", mdd.f1},
              {"tp", mdd.tp},               {"fp", mdd.fp},            {"fn", mdd.fn},
              {"degenerate", mdd.degenerate}};
  j["per"] = per.defined ? json(per.per) : json(nullptr);
  j["seeds"] = seeds;
  j["warnings"] = warnings;
  return j;
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  for (const auto& [gran, aspects] : j.at("apa").items()) {
    for (const auto& [aspect, cell] : aspects.items()) {
      AspectMetrics m;
      if (!cell.at("pcc").is_null()) m.pcc = cell.at("pcc").get<double>();
      m.mse = cell.at("mse").get<double>();
      r.apa[gran][aspect] = m;
    }
  }
  const auto& mj = j.at("mdd");
  r.mdd.precision = mj.at("precision").get<double>();
  r.mdd.recall = mj.at("recall").get<double>();
  r.mdd.f1 = mj.at("f1").get<double>();
  r.mdd.tp = mj.at("tp").get<long long>();
  r.mdd.fp = mj.at("fp").get<long long>();
  r.mdd.fn = mj.at("fn").get<long long>();
  r.mdd.degenerate = mj.at("degenerate").get<bool>();
  if (!j.at("per").is_null()) {
    r.per.defined = true;
    r.per.per = j.at("per").get<double>();
  }
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

std::string EvalReport::csv_header() {
  return "phone_accuracy_pcc,phone_accuracy_mse,word_accuracy_pcc,word_stress_pcc,"
         "word_total_pcc,utterance_accuracy_pcc,utterance_completeness_pcc,"
         "utterance_fluency_pcc,utterance_prosody_pcc,utterance_total_pcc,"
         "mdd_precision,mdd_recall,mdd_f1,per";
}

std::string EvalReport::to_csv_row() const {
  std::ostringstream os;
  os.precision(17);
  auto cell = [&](const char* gran, const char* aspect, bool want_pcc) {
    auto git = apa.find(gran);
    if (git == apa.end()) return std::string("nan");
    auto ait = git->second.find(aspect);
    if (ait == git->second.end()) return std::string("nan");
    std::ostringstream v;
    v.precision(17);
    if (want_pcc) {
      if (!ait->second.pcc.has_value()) return std::string("nan");
      v << *ait->second.pcc;
    } else {
      v << ait->second.mse;
    }
    return v.str();
  };
  os << cell("phone", "accuracy", true) << "," << cell("phone", "accuracy", false) << ","
     << cell("word", "accuracy", true) << "," << cell("word", "stress", true) << ","
     << cell("word", "total", true) << "," << cell("utterance", "accuracy", true) << ","
     << cell("utterance", "completeness", true) << "," << cell("utterance", "fluency", true) << ","
     << cell("utterance", "prosody", true) << "," << cell("utterance", "total", true) << ","
     << mdd.precision << "," << mdd.recall << "," << mdd.f1 << ","
     << (per.defined ? std::to_string(per.per) : std::string("nan"));
  return os.str();
}

EvalReport aggregate_seeds(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("aggregate_seeds: no reports");
  const EvalReport& first = reports.front();
  for (const auto& r : reports) {
    if (r.apa.size() != first.apa.size()) {
      throw std::invalid_argument("aggregate_seeds: schema mismatch");
    }
    for (const auto& [gran, aspects] : first.apa) {
      auto it = r.apa.find(gran);
      if (it == r.apa.end() || it->second.size() != aspects.size()) {
        throw std::invalid_argument("aggregate_seeds: schema mismatch at granularity " + gran);
      }
    }
  }
  EvalReport agg;
  double n = static_cast<double>(reports.size());
  for (const auto& [gran, aspects] : first.apa) {
    for (const auto& [aspect, _] : aspects) {
      AspectMetrics m;
      double pcc_sum = 0.0;
      int pcc_count = 0;
      double mse_sum = 0.0;
      for (const auto& r : reports) {
        const auto& cell = r.apa.at(gran).at(aspect);
        if (cell.pcc.has_value()) {
          pcc_sum += *cell.pcc;
          ++pcc_count;
        }
        mse_sum += cell.mse;
      }
      if (pcc_count > 0) m.pcc = pcc_sum / pcc_count;
      if (pcc_count != static_cast<int>(reports.size())) {
        agg.warnings.push_back("pcc undefined for " + gran + "/" + aspect + " in " +
                               std::to_string(reports.size() - pcc_count) + " seed(s)");
      }
      m.mse = mse_sum / n;
      agg.apa[gran][aspect] = m;
    }
  }
  double p = 0.0, rc = 0.0, f = 0.0, per_sum = 0.0;
  int per_count = 0;
  for (const auto& r : reports) {
    p += r.mdd.precision;
    rc += r.mdd.recall;
    f += r.mdd.f1;
    agg.mdd.tp += r.mdd.tp;
    agg.mdd.fp += r.mdd.fp;
    agg.mdd.fn += r.mdd.fn;
    agg.mdd.degenerate = agg.mdd.degenerate || r.mdd.degenerate;
    if (r.per.defined) {
      per_sum += r.per.per;
      ++per_count;
    }
    agg.seeds.insert(agg.seeds.end(), r.seeds.begin(), r.seeds.end());
    agg.warnings.insert(agg.warnings.end(), r.warnings.begin(), r.warnings.end());
  }
  agg.mdd.precision = p / n;
  agg.mdd.recall = rc / n;
  agg.mdd.f1 = f / n;
  if (per_count > 0) {
    agg.per.defined = true;
    agg.per.per = per_sum / per_count;
  }
  return agg;
}

}  // namespace hmamba
