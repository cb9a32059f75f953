#include "hmamba/features.hpp"

#include <fstream>

#include "hmamba/ssm.hpp"

namespace hmamba {

using nlohmann::json;
namespace o = ops;

int FeatureBundle::width() const {
  int w = 0;
  for (const auto& p : layout) w += p.dim;
  return w;
}

const UtteranceFeatures& FeatureFile::find(const std::string& utt_id) const {
  for (const auto& u : utterances) {
    if (u.utt_id == utt_id) return u;
  }
  throw ValidationError("feature file has no entry for utterance '" + utt_id + "'");
}

FeatureFile load_features(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open feature file: " + path);
  FeatureFile file;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
    UtteranceFeatures uf;
    uf.utt_id = j.at("utt_id").get<std::string>();
    std::vector<ProviderSpec> specs;
    for (const auto& pj : j.at("providers")) {
      specs.push_back({pj.at("name").get<std::string>(), pj.at("dim").get<int>(),
                       pj.at("is_ssl").get<bool>()});
      if (specs.back().dim <= 0) {
        throw ValidationError(uf.utt_id + ": provider '" + specs.back().name +
                              "' declares non-positive dim");
      }
    }
    const auto& rows = j.at("rows");
    int n = static_cast<int>(rows.size());
    int total = 0;
    for (const auto& s : specs) total += s.dim;
    std::vector<std::vector<double>> data(specs.size());
    for (std::size_t p = 0; p < specs.size(); ++p) {
      data[p].reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(specs[p].dim));
    }
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != total) {
        throw ValidationError(uf.utt_id + ": row width " + std::to_string(row.size()) +
                              " does not match provider manifest width " + std::to_string(total));
      }
      int col = 0;
      for (std::size_t p = 0; p < specs.size(); ++p) {
        for (int c = 0; c < specs[p].dim; ++c) {
          data[p].push_back(row.at(static_cast<std::size_t>(col++)).get<double>());
        }
      }
    }
    for (std::size_t p = 0; p < specs.size(); ++p) {
      uf.blocks.push_back(
          {specs[p], Tensor::from_values({n, specs[p].dim}, std::move(data[p]))});
    }
    file.utterances.push_back(std::move(uf));
  }
  return file;
}

void save_features(const FeatureFile& file, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write feature file: " + path);
  for (const auto& uf : file.utterances) {
    json j;
    j["utt_id"] = uf.utt_id;
    json providers = json::array();
    int n = uf.blocks.empty() ? 0 : uf.blocks.front().block.dim(0);
    for (const auto& b : uf.blocks) {
      providers.push_back(
          json{{"name", b.spec.name}, {"dim", b.spec.dim}, {"is_ssl", b.spec.is_ssl}});
    }
    j["providers"] = providers;
    json rows = json::array();
    for (int i = 0; i < n; ++i) {
      json row = json::array();
      for (const auto& b : uf.blocks) {
        for (int c = 0; c < b.spec.dim; ++c) row.push_back(b.block.at(i, c));
      }
      rows.push_back(std::move(row));
    }
    j["rows"] = rows;
    out << j.dump() << "\n";
  }
}

std::vector<ProviderSpec> shared_manifest(const FeatureFile& file) {
  if (file.utterances.empty()) throw ValidationError("feature file has no utterances");
  std::vector<ProviderSpec> manifest;
  for (const auto& b : file.utterances.front().blocks) manifest.push_back(b.spec);
  for (const auto& uf : file.utterances) {
    std::vector<ProviderSpec> other;
    for (const auto& b : uf.blocks) other.push_back(b.spec);
    if (other != manifest) {
      throw ValidationError("feature manifest differs at utterance '" + uf.utt_id + "'");
    }
  }
  return manifest;
}

std::vector<ProviderBlock> arrange_blocks(const std::vector<ProviderBlock>& blocks,
                                          const std::vector<std::string>& manifest) {
  std::vector<ProviderBlock> ordered;
  ordered.reserve(manifest.size());
  for (const auto& name : manifest) {
    bool found = false;
    for (const auto& b : blocks) {
      if (b.spec.name == name) {
        ordered.push_back(b);
        found = true;
        break;
      }
    }
    if (!found) throw ValidationError("arrange_blocks: no block for provider '" + name + "'");
  }
  return ordered;
}

FeatureBundle assemble_features(const UtteranceRecord& record,
                                const std::vector<ProviderBlock>& blocks, bool training,
                                RngStream& rng) {
  if (blocks.empty()) throw ValidationError(record.utt_id + ": no feature providers");
  int n = record.n_positions();
  FeatureBundle bundle;
  std::vector<Tensor> parts;
  parts.reserve(blocks.size());
  for (const auto& b : blocks) {
    if (b.block.ndim() != 2 || b.block.dim(1) != b.spec.dim) {
      throw ValidationError(record.utt_id + ": provider '" + b.spec.name +
                            "' block shape disagrees with its declared dim");
    }
    if (b.block.dim(0) != n) {
      throw ValidationError(record.utt_id + ": provider '" + b.spec.name + "' supplies " +
                            std::to_string(b.block.dim(0)) + " rows for " + std::to_string(n) +
                            " phones");
    }
    bundle.layout.push_back(b.spec);
    if (b.spec.is_ssl) {
      parts.push_back(o::dropout(b.block, 0.1, training, rng));
    } else {
      parts.push_back(b.block);
    }
  }
  bundle.rows = parts.size() == 1 ? parts[0] : o::concat(parts, 1);
  return bundle;
}

Tensor project(const FeatureBundle& bundle, const Tensor& w, const Tensor& b) {
  if (w.dim(0) != bundle.width()) {
    throw ShapeError("project: weight expects width " + std::to_string(w.dim(0)) +
                     " but bundle is " + std::to_string(bundle.width()) + " wide");
  }
  return o::linear(bundle.rows, w, b);
}

std::vector<RelTok> relative_tokens(const UtteranceRecord& record, double long_sil_threshold) {
  int n = record.n_positions();
  std::vector<RelTok> toks(static_cast<std::size_t>(n));
  std::vector<bool> covered(static_cast<std::size_t>(n), false);
  for (const auto& w : record.words) {
    for (int pos = w.begin; pos < w.end; ++pos) {
      covered[static_cast<std::size_t>(pos)] = true;
      if (w.end - w.begin == 1) {
        toks[static_cast<std::size_t>(pos)] = RelTok::kSingle;
      } else if (pos == w.begin) {
        toks[static_cast<std::size_t>(pos)] = RelTok::kBegin;
      } else if (pos == w.end - 1) {
        toks[static_cast<std::size_t>(pos)] = RelTok::kEnd;
      } else {
        toks[static_cast<std::size_t>(pos)] = RelTok::kInternal;
      }
    }
  }
  for (int pos = 0; pos < n; ++pos) {
    if (record.is_sil(pos)) {
      toks[static_cast<std::size_t>(pos)] =
          record.sil_duration[static_cast<std::size_t>(pos)] > long_sil_threshold
              ? RelTok::kLongSil
              : RelTok::kShortSil;
    } else if (!covered[static_cast<std::size_t>(pos)]) {
      throw ValidationError(record.utt_id + ": position " + std::to_string(pos) +
                            " is neither silence nor part of a word");
    }
  }
  return toks;
}

PhonologicalEmbeddings PhonologicalEmbeddings::init(int embed_vocab, int max_positions, int d,
                                                    RngStream& rng) {
  PhonologicalEmbeddings e;
  e.phone_table = init_embedding(embed_vocab, d, rng);
  e.absolute_table = init_embedding(max_positions, d, rng);
  e.relative_table = init_embedding(kNumRelTokens, d, rng);
  return e;
}

void PhonologicalEmbeddings::collect_params(std::vector<NamedParam>& out,
                                            const std::string& prefix) const {
  out.push_back({prefix + ".phone_table", phone_table});
  out.push_back({prefix + ".absolute_table", absolute_table});
  out.push_back({prefix + ".relative_table", relative_table});
}

Tensor phone_level_input(const Tensor& x, const UtteranceRecord& record,
                         const PhoneInventory& inventory, const PhonologicalEmbeddings& tables) {
  int n = record.n_positions();
  if (x.dim(0) != n) {
    throw ShapeError("phone_level_input: features have " + std::to_string(x.dim(0)) +
                     " rows for " + std::to_string(n) + " phones");
  }
  if (n > tables.absolute_table.dim(0)) {
    throw ShapeError("phone_level_input: utterance length " + std::to_string(n) +
                     " exceeds absolute table capacity " +
                     std::to_string(tables.absolute_table.dim(0)));
  }
  std::vector<int> phone_ids(static_cast<std::size_t>(n));
  std::vector<int> abs_ids(static_cast<std::size_t>(n));
  for (int pos = 0; pos < n; ++pos) {
    phone_ids[static_cast<std::size_t>(pos)] =
        inventory.embed_id(record.phones[static_cast<std::size_t>(pos)]);
    abs_ids[static_cast<std::size_t>(pos)] = pos;
  }
  auto rel = relative_tokens(record);
  std::vector<int> rel_ids(static_cast<std::size_t>(n));
  for (int pos = 0; pos < n; ++pos) {
    rel_ids[static_cast<std::size_t>(pos)] = static_cast<int>(rel[static_cast<std::size_t>(pos)]);
  }
  Tensor sum = o::add(x, o::take_rows(tables.phone_table, phone_ids));
  sum = o::add(sum, o::take_rows(tables.absolute_table, abs_ids));
  return o::add(sum, o::take_rows(tables.relative_table, rel_ids));
}

}  // namespace hmamba
