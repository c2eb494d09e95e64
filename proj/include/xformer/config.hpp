#ifndef XFORMER_CONFIG_HPP
#define XFORMER_CONFIG_HPP

// Flat key = value config files and JSON echoes of the model/training
// configs. Lines starting with '#' are comments.

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "errors.hpp"
#include "model.hpp"
#include "training.hpp"

namespace xformer {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in) {
    KeyValueConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ValidationError("config line " + std::to_string(lineno) + ": empty key");
      if (c.values_.count(key)) throw ValidationError("config line " + std::to_string(lineno) + ": duplicate key " + key);
      c.values_[key] = value;
    }
    return c;
  }
  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config: " + path);
    return parse(in);
  }

  [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) > 0; }
  [[nodiscard]] const std::map<std::string, std::string>& values() const { return values_; }

  void set_int(const std::string& key, int& out) const {
    if (auto it = values_.find(key); it != values_.end()) out = static_cast<int>(to_number<long long>(key, it->second));
  }
  void set_u64(const std::string& key, std::uint64_t& out) const {
    if (auto it = values_.find(key); it != values_.end()) out = to_number<unsigned long long>(key, it->second);
  }
  void set_double(const std::string& key, double& out) const {
    if (auto it = values_.find(key); it != values_.end()) out = to_number<double>(key, it->second);
  }
  void set_bool(const std::string& key, bool& out) const {
    if (auto it = values_.find(key); it != values_.end()) {
      if (it->second == "true" || it->second == "1") out = true;
      else if (it->second == "false" || it->second == "0") out = false;
      else throw ValidationError("config key " + key + ": expected true|false");
    }
  }
  [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  template <class T>
  static T to_number(const std::string& key, const std::string& text) {
    std::istringstream is(text);
    T v{};
    is >> v;
    if (is.fail() || !is.eof()) throw ValidationError("config key " + key + ": bad number '" + text + "'");
    return v;
  }

  std::map<std::string, std::string> values_;
};

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      // model
      "blocks", "d_model", "heads", "d_k", "coverage", "dual_space", "reciprocal_range", "rbf_bins", "rbf_r_max",
      "variant", "vocab",
      // training
      "batch_size", "epochs", "lr", "schedule_constant", "beta1", "beta2", "epsilon", "weight_decay", "clip_norm",
      "swa_window", "seed", "threads"};
  return keys;
}

/// Rejects keys that neither config understands.
inline void check_config_keys(const KeyValueConfig& kv) {
  for (const auto& [k, v] : kv.values()) {
    if (!known_config_keys().count(k)) throw ValidationError("unknown config key: " + k);
  }
}

inline void apply_config(const KeyValueConfig& kv, ModelConfig& m) {
  kv.set_int("blocks", m.blocks);
  kv.set_int("d_model", m.attention.d_model);
  kv.set_int("heads", m.attention.heads);
  if (kv.has("d_k")) {
    kv.set_int("d_k", m.attention.d_k);
    m.attention.d_v = m.attention.d_k;
  } else if (kv.has("d_model") || kv.has("heads")) {
    if (m.attention.heads > 0 && m.attention.d_model % m.attention.heads == 0) {
      m.attention.d_k = m.attention.d_v = m.attention.d_model / m.attention.heads;
    }
  }
  kv.set_double("coverage", m.attention.coverage);
  kv.set_bool("dual_space", m.attention.dual_space);
  kv.set_int("reciprocal_range", m.attention.reciprocal_range);
  kv.set_int("rbf_bins", m.attention.rbf.bins);
  kv.set_double("rbf_r_max", m.attention.rbf.r_max);
  kv.set_int("vocab", m.vocab);
  if (kv.has("variant")) m.variant = parse_variant(kv.get_string("variant", "full"));
}

inline void apply_config(const KeyValueConfig& kv, TrainConfig& t) {
  kv.set_int("batch_size", t.batch_size);
  kv.set_int("epochs", t.epochs);
  kv.set_double("lr", t.lr);
  kv.set_double("schedule_constant", t.schedule_constant);
  kv.set_double("beta1", t.beta1);
  kv.set_double("beta2", t.beta2);
  kv.set_double("epsilon", t.epsilon);
  kv.set_double("weight_decay", t.weight_decay);
  kv.set_double("clip_norm", t.clip_norm);
  kv.set_int("swa_window", t.swa_window);
  kv.set_u64("seed", t.seed);
  kv.set_int("threads", t.threads);
}

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"blocks", m.blocks},
          {"d_model", m.attention.d_model},
          {"heads", m.attention.heads},
          {"d_k", m.attention.d_k},
          {"d_v", m.attention.d_v},
          {"coverage", m.attention.coverage},
          {"dual_space", m.attention.dual_space},
          {"reciprocal_range", m.attention.reciprocal_range},
          {"rbf_bins", m.attention.rbf.bins},
          {"rbf_r_max", m.attention.rbf.r_max},
          {"vocab", m.vocab},
          {"output_dim", m.output_dim},
          {"variant", to_string(m.variant)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig m;
    m.blocks = j.at("blocks").get<int>();
    m.attention.d_model = j.at("d_model").get<int>();
    m.attention.heads = j.at("heads").get<int>();
    m.attention.d_k = j.at("d_k").get<int>();
    m.attention.d_v = j.at("d_v").get<int>();
    m.attention.coverage = j.at("coverage").get<double>();
    m.attention.dual_space = j.at("dual_space").get<bool>();
    m.attention.reciprocal_range = j.at("reciprocal_range").get<int>();
    m.attention.rbf.bins = j.at("rbf_bins").get<int>();
    m.attention.rbf.r_max = j.at("rbf_r_max").get<double>();
    m.vocab = j.at("vocab").get<int>();
    m.output_dim = j.at("output_dim").get<int>();
    m.variant = parse_variant(j.at("variant").get<std::string>());
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad model config: ") + e.what());
  }
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size},         {"epochs", t.epochs},   {"lr", t.lr},
          {"schedule_constant", t.schedule_constant}, {"beta1", t.beta1}, {"beta2", t.beta2},
          {"epsilon", t.epsilon},               {"weight_decay", t.weight_decay}, {"clip_norm", t.clip_norm},
          {"swa_window", t.swa_window},         {"seed", t.seed},       {"threads", t.threads}};
}

}  // namespace xformer

#endif  // XFORMER_CONFIG_HPP
