#pragma once

#include <map>
#include <string>
#include <vector>

#include "hmamba/corpus.hpp"
#include "hmamba/ops.hpp"
#include "hmamba/tensor.hpp"

namespace hmamba {

struct ProviderSpec {
  std::string name;
  int dim = 0;
  bool is_ssl = false;  // SSL-flagged blocks get the 10% training dropout

  bool operator==(const ProviderSpec&) const = default;
};

// One provider's [N x dim] block for one utterance.
struct ProviderBlock {
  ProviderSpec spec;
  Tensor block;
};

// Concatenated per-phone features plus the layout that attributes every
// column range to exactly one provider.
struct FeatureBundle {
  std::vector<ProviderSpec> layout;
  Tensor rows;  // [N, sum of dims]

  int width() const;
};

struct UtteranceFeatures {
  std::string utt_id;
  std::vector<ProviderBlock> blocks;
};

struct FeatureFile {
  std::vector<UtteranceFeatures> utterances;

  const UtteranceFeatures& find(const std::string& utt_id) const;
};

FeatureFile load_features(const std::string& path);
void save_features(const FeatureFile& file, const std::string& path);

// The provider manifest shared by every utterance; throws when lines disagree.
std::vector<ProviderSpec> shared_manifest(const FeatureFile& file);

// Reorders blocks to follow a fixed manifest of provider names, so bundles do
// not depend on upstream registration order.
std::vector<ProviderBlock> arrange_blocks(const std::vector<ProviderBlock>& blocks,
                                          const std::vector<std::string>& manifest);

// Concatenates provider blocks in layout order; SSL blocks pass through
// dropout(0.1) when training. Row counts must match the record's phone count.
FeatureBundle assemble_features(const UtteranceRecord& record,
                                const std::vector<ProviderBlock>& blocks, bool training,
                                RngStream& rng);

// x_t = W a_t + b applied row-wise.
Tensor project(const FeatureBundle& bundle, const Tensor& w, const Tensor& b);

// Within-word positions and silence-length tokens.
enum class RelTok { kBegin, kInternal, kEnd, kSingle, kLongSil, kShortSil };
inline constexpr int kNumRelTokens = 6;
inline constexpr double kLongSilThreshold = 0.495;  // strictly exceeding -> long

std::vector<RelTok> relative_tokens(const UtteranceRecord& record,
                                    double long_sil_threshold = kLongSilThreshold);

struct PhonologicalEmbeddings {
  Tensor phone_table;     // [embed_vocab, d]
  Tensor absolute_table;  // [max_positions, d]
  Tensor relative_table;  // [6, d]

  static PhonologicalEmbeddings init(int embed_vocab, int max_positions, int d, RngStream& rng);
  void collect_params(std::vector<struct NamedParam>& out, const std::string& prefix) const;
};

// H0 = X + E_phn + E_abs + E_rel, all [N, d].
Tensor phone_level_input(const Tensor& x, const UtteranceRecord& record,
                         const PhoneInventory& inventory, const PhonologicalEmbeddings& tables);

}  // namespace hmamba
