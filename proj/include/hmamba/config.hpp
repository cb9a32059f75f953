#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hmamba/model.hpp"
#include "hmamba/trainer.hpp"

namespace hmamba {

// Flat key-value run configuration: `section.key = value` lines in a file,
// `--set section.key=value` overrides from the command line. Unknown keys are
// rejected so typos fail fast. Defaults are tabulated in docs/FORMATS.md.
class RunConfig {
 public:
  RunConfig();  // defaults only

  void load_file(const std::string& path);          // file values override defaults
  void apply_override(const std::string& keyval);   // "key=value", wins over file
  void apply_overrides(const std::vector<std::string>& keyvals);

  HMambaConfig model_config(int feature_dim) const;
  TrainConfig train_config() const;
  std::vector<std::uint64_t> seeds() const;

  double get_double(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::string get_string(const std::string& key) const;

  // Full effective configuration, embedded into every output artifact.
  nlohmann::json to_json() const;

 private:
  void set_checked(const std::string& key, const std::string& value);
  std::map<std::string, std::string> values_;
};

}  // namespace hmamba
