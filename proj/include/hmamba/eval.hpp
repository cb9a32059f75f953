#pragma once

#include <vector>

#include "hmamba/corpus.hpp"
#include "hmamba/features.hpp"
#include "hmamba/losses.hpp"
#include "hmamba/metrics.hpp"
#include "hmamba/model.hpp"

namespace hmamba {

// Runs the model over a corpus split and pools predictions per
// (granularity, aspect) across utterances. Word metrics always use per-word
// aggregated predictions; PER is corpus-level (total edits over total
// reference length). Metrics are computed on the denormalized score scale.
// When `loss_cfg` is given, `loss_out` receives the mean total loss.
EvalReport evaluate_model(const HMambaModel& model, const Corpus& corpus,
                          const FeatureFile& features,
                          const std::vector<std::size_t>* subset = nullptr,
                          const LossConfig* loss_cfg = nullptr, double* loss_out = nullptr);

}  // namespace hmamba
