#include "hmamba/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace hmamba {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig::RunConfig() {
  values_ = {
      {"model.d", "128"},
      {"model.l_phone", "3"},
      {"model.l_word", "1"},
      {"model.l_utt", "1"},
      {"model.conv_kernel", "4"},
      {"model.word_conv_kernels", "256"},
      {"model.word_conv_size", "3"},
      {"model.tau", "1.0"},
      {"model.d_state", "16"},
      {"model.expand", "1"},
      {"model.dt_rank", "0"},
      {"model.ffn_hidden", "0"},
      {"model.head_hidden", "32"},
      {"model.max_positions", "256"},
      {"model.n_heads", "4"},
      {"train.epochs", "20"},
      {"train.batch_size", "32"},
      {"train.lr_main", "0.002"},
      {"train.lr_utt_head", "9e-05"},
      {"train.warmup_frac", "0.4"},
      {"train.hold_frac", "0.4"},
      {"train.adam_beta1", "0.9"},
      {"train.adam_beta2", "0.999"},
      {"train.adam_eps", "1e-08"},
      {"train.dev_frac", "0.1"},
      {"train.seeds", "1,2,3,4,5"},
      {"loss.alpha", "0.7"},
      {"loss.beta", "0.003"},
      {"loss.omega_phone", "1.0"},
      {"loss.omega_word", "1.0"},
      {"loss.omega_utt", "1.0"},
  };
}

void RunConfig::set_checked(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) {
    throw ValidationError("config: unknown key '" + key + "'");
  }
  it->second = value;
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(path + " line " + std::to_string(line_no) +
                            ": expected 'key = value'");
    }
    set_checked(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
}

void RunConfig::apply_override(const std::string& keyval) {
  std::size_t eq = keyval.find('=');
  if (eq == std::string::npos) {
    throw ValidationError("override '" + keyval + "' is not of the form key=value");
  }
  set_checked(trim(keyval.substr(0, eq)), trim(keyval.substr(eq + 1)));
}

void RunConfig::apply_overrides(const std::vector<std::string>& keyvals) {
  for (const auto& kv : keyvals) apply_override(kv);
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& raw = get_string(key);
  try {
    std::size_t used = 0;
    double v = std::stod(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config: '" + key + "' = '" + raw + "' is not a number");
  }
}

int RunConfig::get_int(const std::string& key) const {
  const std::string& raw = get_string(key);
  try {
    std::size_t used = 0;
    int v = std::stoi(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config: '" + key + "' = '" + raw + "' is not an integer");
  }
}

std::string RunConfig::get_string(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError("config: unknown key '" + key + "'");
  return it->second;
}

HMambaConfig RunConfig::model_config(int feature_dim) const {
  HMambaConfig c;
  c.d = get_int("model.d");
  c.l_phone = get_int("model.l_phone");
  c.l_word = get_int("model.l_word");
  c.l_utt = get_int("model.l_utt");
  c.conv_kernel = get_int("model.conv_kernel");
  c.word_conv_kernels = get_int("model.word_conv_kernels");
  c.word_conv_size = get_int("model.word_conv_size");
  c.tau = get_double("model.tau");
  c.d_state = get_int("model.d_state");
  c.expand = get_int("model.expand");
  c.dt_rank = get_int("model.dt_rank");
  c.ffn_hidden = get_int("model.ffn_hidden");
  c.head_hidden = get_int("model.head_hidden");
  c.max_positions = get_int("model.max_positions");
  c.n_heads = get_int("model.n_heads");
  c.feature_dim = feature_dim;
  return c;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = get_int("train.epochs");
  t.batch_size = get_int("train.batch_size");
  t.lr_main = get_double("train.lr_main");
  t.lr_utt_head = get_double("train.lr_utt_head");
  t.warmup_frac = get_double("train.warmup_frac");
  t.hold_frac = get_double("train.hold_frac");
  t.adam_beta1 = get_double("train.adam_beta1");
  t.adam_beta2 = get_double("train.adam_beta2");
  t.adam_eps = get_double("train.adam_eps");
  t.dev_frac = get_double("train.dev_frac");
  t.alpha = get_double("loss.alpha");
  t.beta = get_double("loss.beta");
  t.omega = {get_double("loss.omega_phone"), get_double("loss.omega_word"),
             get_double("loss.omega_utt")};
  t.validate();
  return t;
}

std::vector<std::uint64_t> RunConfig::seeds() const {
  std::vector<std::uint64_t> out;
  std::stringstream ss(get_string("train.seeds"));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ValidationError("config: bad seed '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("config: train.seeds is empty");
  return out;
}

json RunConfig::to_json() const {
  json j = json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

}  // namespace hmamba
