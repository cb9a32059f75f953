#pragma once

#include <cstdint>

#include "hmamba/corpus.hpp"
#include "hmamba/features.hpp"

namespace hmamba {

// Synthetic corpus with planted, learnable signal: a noisy one-hot feature
// block encodes each realized phone and a scalar block's mean carries the
// phone score, so both tasks have a computable ceiling.
struct SynthConfig {
  int n_utts = 100;
  int phones_per_utt = 12;
  double error_rate = 0.15;
  double noise = 0.1;
  std::uint64_t seed = 1;
};

struct SynthResult {
  Corpus corpus;
  FeatureFile features;
};

SynthResult generate_synthetic(const SynthConfig& cfg);

// Decodes the planted signal directly: realized phone = argmax of the one-hot
// block, phone score = mean of the scalar block. With noise 0 this is exact;
// it upper-bounds what any model can learn from these features.
struct CeilingResult {
  double mdd_f1 = 0.0;
  double phone_pcc = 0.0;
};

CeilingResult bayes_ceiling(const Corpus& corpus, const FeatureFile& features);

}  // namespace hmamba
