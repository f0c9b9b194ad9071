#pragma once

// Flat experiment configuration shared by every subcommand. Every field has
// a default; a JSON file overrides any subset and unknown keys are rejected.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medrat/errors.hpp"

namespace medrat {

inline constexpr int kNumClasses = 14;

enum class AugMode { None, Dropout, Noise };
enum class MemoryMode { Off, Local, Global };

inline std::string to_string(AugMode m) {
  switch (m) {
    case AugMode::None: return "none";
    case AugMode::Dropout: return "dropout";
    case AugMode::Noise: return "noise";
  }
  return "none";
}

inline std::string to_string(MemoryMode m) {
  switch (m) {
    case MemoryMode::Off: return "off";
    case MemoryMode::Local: return "local";
    case MemoryMode::Global: return "global";
  }
  return "off";
}

struct Config {
  // corpus
  std::uint64_t seed = 1;
  int n_reports = 2000;
  int n_images = 2000;
  int n_eval = 300;
  std::vector<double> prevalence = std::vector<double>(kNumClasses, 0.12);
  double negation_rate = 0.25;
  double label_noise = 0.0;
  int vocab_size = 160;
  int max_len = 64;
  int num_patches = 64;
  int patch_dim = 16;
  int pattern_patches = 6;
  double amplitude = 3.0;
  std::uint64_t pattern_seed = 20240601;

  // model
  int d_model = 64;
  int heads = 4;
  int ffn_dim = 128;
  int modality_layers = 1;
  int shared_layers = 2;
  int decoder_layers = 2;
  int memory_slots = 128;
  int memory_topk = 8;
  MemoryMode memory_mode = MemoryMode::Local;
  bool use_global = true;
  bool use_local = true;

  // objective and optimization
  double gamma1 = 1.0;
  double gamma2 = 1.0;
  double gamma3 = 1.0;
  double tau = 0.5;
  bool classify_views = false;
  int batch_size = 16;
  int epochs = 10;
  double learning_rate = 3e-4;
  AugMode aug_mode = AugMode::Dropout;
  double drop_p = 0.9;
  double noise_sigma = 5.0;
  double paired_fraction = 0.0;
  int log_every = 10;
  int checkpoint_every = 0;

  // view augmentation strengths for the contrastive task
  double crop_fraction = 0.25;
  double blur = 0.5;
  double contrast = 0.2;
  int jitter = 1;

  // evaluation
  int gen_max_len = 64;
};

namespace detail {

template <typename E>
E parse_enum(const nlohmann::json& j, const std::vector<std::pair<const char*, E>>& table, const char* key) {
  if (!j.is_string()) throw ConfigError(std::string(key) + ": expected a string");
  const auto s = j.get<std::string>();
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw ConfigError(std::string(key) + ": unknown value '" + s + "'");
}

inline const std::vector<std::pair<const char*, AugMode>>& aug_table() {
  static const std::vector<std::pair<const char*, AugMode>> t{
      {"none", AugMode::None}, {"dropout", AugMode::Dropout}, {"noise", AugMode::Noise}};
  return t;
}

inline const std::vector<std::pair<const char*, MemoryMode>>& memory_table() {
  static const std::vector<std::pair<const char*, MemoryMode>> t{
      {"off", MemoryMode::Off}, {"local", MemoryMode::Local}, {"global", MemoryMode::Global}};
  return t;
}

}  // namespace detail

#define MEDRAT_CONFIG_FIELDS(X)                                                                                   \
  X(seed) X(n_reports) X(n_images) X(n_eval) X(prevalence) X(negation_rate) X(label_noise) X(vocab_size)         \
  X(max_len) X(num_patches) X(patch_dim) X(pattern_patches) X(amplitude) X(pattern_seed) X(d_model) X(heads)     \
  X(ffn_dim) X(modality_layers) X(shared_layers) X(decoder_layers) X(memory_slots) X(memory_topk)                \
  X(use_global) X(use_local) X(gamma1) X(gamma2) X(gamma3) X(tau) X(classify_views) X(batch_size) X(epochs)      \
  X(learning_rate) X(drop_p) X(noise_sigma) X(paired_fraction) X(log_every) X(checkpoint_every)                  \
  X(crop_fraction) X(blur) X(contrast) X(jitter) X(gen_max_len)

inline nlohmann::json to_json(const Config& c) {
  nlohmann::json j;
#define MEDRAT_PUT(name) j[#name] = c.name;
  MEDRAT_CONFIG_FIELDS(MEDRAT_PUT)
#undef MEDRAT_PUT
  j["aug_mode"] = to_string(c.aug_mode);
  j["memory_mode"] = to_string(c.memory_mode);
  return j;
}

/// Range checks; returns the offending keys (empty when valid).
inline std::vector<std::string> validate(const Config& c) {
  std::vector<std::string> bad;
  auto need = [&](bool ok, const char* key) {
    if (!ok) bad.emplace_back(key);
  };
  need(c.n_reports > 0, "n_reports");
  need(c.n_images > 0, "n_images");
  need(c.n_eval > 0, "n_eval");
  bool prev_ok = static_cast<int>(c.prevalence.size()) == kNumClasses;
  for (double p : c.prevalence) prev_ok = prev_ok && p >= 0.0 && p <= 1.0;
  need(prev_ok, "prevalence");
  need(c.negation_rate >= 0.0 && c.negation_rate <= 1.0, "negation_rate");
  need(c.label_noise >= 0.0 && c.label_noise <= 1.0, "label_noise");
  need(c.vocab_size >= 64, "vocab_size");
  need(c.max_len >= 8, "max_len");
  need(c.num_patches >= 16, "num_patches");
  need(c.patch_dim >= 1, "patch_dim");
  need(c.pattern_patches >= 1 && c.pattern_patches <= c.num_patches, "pattern_patches");
  need(c.amplitude >= 0.0, "amplitude");
  need(c.d_model >= 1, "d_model");
  need(c.heads >= 1 && c.d_model % c.heads == 0, "heads");
  need(c.ffn_dim >= 1, "ffn_dim");
  need(c.modality_layers >= 0, "modality_layers");
  need(c.shared_layers >= 0, "shared_layers");
  need(c.decoder_layers >= 1, "decoder_layers");
  need(c.memory_slots >= 1, "memory_slots");
  need(c.memory_topk >= 1 && c.memory_topk <= c.memory_slots, "memory_topk");
  need(c.use_global || c.use_local, "use_global");
  need(c.gamma1 >= 0.0, "gamma1");
  need(c.gamma2 >= 0.0, "gamma2");
  need(c.gamma3 >= 0.0, "gamma3");
  need(c.gamma1 + c.gamma2 + c.gamma3 > 0.0, "gamma1");
  need(c.tau > 0.0, "tau");
  need(c.batch_size >= 2, "batch_size");
  need(c.epochs >= 0, "epochs");
  need(c.learning_rate > 0.0, "learning_rate");
  need(c.drop_p >= 0.0 && c.drop_p < 1.0, "drop_p");
  need(c.noise_sigma >= 0.0, "noise_sigma");
  need(c.paired_fraction >= 0.0 && c.paired_fraction <= 1.0, "paired_fraction");
  need(c.log_every >= 1, "log_every");
  need(c.checkpoint_every >= 0, "checkpoint_every");
  need(c.crop_fraction >= 0.0 && c.crop_fraction <= 0.25, "crop_fraction");
  need(c.blur >= 0.0 && c.blur <= 1.0, "blur");
  need(c.contrast >= 0.0 && c.contrast < 1.0, "contrast");
  need(c.jitter >= 0, "jitter");
  need(c.gen_max_len >= 2 && c.gen_max_len <= c.max_len, "gen_max_len");
  return bad;
}

inline std::string join_keys(const std::vector<std::string>& keys) {
  std::string s;
  for (const auto& k : keys) s += (s.empty() ? "" : ", ") + k;
  return s;
}

/// Overlays `j` onto the defaults. Throws ConfigError naming unknown keys,
/// type errors, and out-of-range values.
inline Config config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  Config c;
  const nlohmann::json known = to_json(c);
  std::vector<std::string> unknown;
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) unknown.push_back(it.key());
  if (!unknown.empty()) throw ConfigError("config: unknown keys: " + join_keys(unknown));

  std::vector<std::string> type_errors;
#define MEDRAT_GET(name)                                         \
  if (j.contains(#name)) {                                       \
    try {                                                        \
      c.name = j.at(#name).get<decltype(c.name)>();              \
    } catch (const nlohmann::json::exception&) {                 \
      type_errors.emplace_back(#name);                           \
    }                                                            \
  }
  MEDRAT_CONFIG_FIELDS(MEDRAT_GET)
#undef MEDRAT_GET
  if (!type_errors.empty()) throw ConfigError("config: wrong value type for: " + join_keys(type_errors));
  if (j.contains("aug_mode")) c.aug_mode = detail::parse_enum(j["aug_mode"], detail::aug_table(), "aug_mode");
  if (j.contains("memory_mode"))
    c.memory_mode = detail::parse_enum(j["memory_mode"], detail::memory_table(), "memory_mode");

  if (auto bad = validate(c); !bad.empty()) throw ConfigError("config: invalid values for: " + join_keys(bad));
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  nlohmann::json j;
  try {
    j = text.find_first_not_of(" \t\r\n") == std::string::npos ? nlohmann::json::object() : nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  return config_from_json(j);
}

}  // namespace medrat
