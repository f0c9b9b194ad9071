#pragma once

// Synthetic unpaired corpora. Reports follow a small findings grammar and
// images are noisy patch grids carrying class-specific patterns; both are
// rendered from label vectors, but the two streams draw labels
// independently and no record links a report to an image.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "medrat/config.hpp"
#include "medrat/io.hpp"
#include "medrat/rng.hpp"

namespace medrat::synth {

using Labels = std::array<std::uint8_t, kNumClasses>;
using Tokens = std::vector<int>;
using Grid = Matrix<float>;

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPad = 2;
inline constexpr int kPeriod = 3;
inline constexpr int kNo = 4;
inline constexpr int kPresent = 5;
inline constexpr int kNoFinding = 0;

// Fixed vocabulary layout; ids beyond the word list are unused slots up to V.
inline const std::vector<std::string>& base_words() {
  static const std::vector<std::string> words = {
      "<bos>", "<eos>", "<pad>", ".", "no", "present", "lungs", "are", "clear",
      // pathology names, class 1..13
      "enlarged_cardiomediastinum", "cardiomegaly", "lung_opacity", "lung_lesion", "edema", "consolidation",
      "pneumonia", "atelectasis", "pneumothorax", "pleural_effusion", "pleural_other", "fracture",
      "support_devices",
      // severities
      "mild", "moderate", "severe", "small", "large", "minimal", "trace", "extensive", "subtle", "marked",
      // locations
      "left", "right", "bilateral", "basal", "apical", "upper", "lower", "perihilar", "retrocardiac", "lateral",
      "central", "diffuse"};
  return words;
}

inline constexpr int kFirstName = 9;
inline constexpr int kFirstSeverity = kFirstName + kNumClasses - 1;  // 22
inline constexpr int kNumSeverities = 10;
inline constexpr int kFirstLocation = kFirstSeverity + kNumSeverities;  // 32
inline constexpr int kNumLocations = 12;
inline constexpr int kPoolSize = 3;

inline const std::array<std::string_view, kNumClasses>& class_names() {
  static const std::array<std::string_view, kNumClasses> names = {
      "no_finding",   "enlarged_cardiomediastinum", "cardiomegaly", "lung_opacity", "lung_lesion",
      "edema",        "consolidation",              "pneumonia",    "atelectasis",  "pneumothorax",
      "pleural_effusion", "pleural_other",          "fracture",     "support_devices"};
  return names;
}

/// Token id of the name of pathology class c (1..13).
constexpr int name_token(int c) { return kFirstName + c - 1; }

/// Inverse of name_token; -1 for tokens that are not pathology names.
constexpr int class_of_token(int tok) {
  return (tok >= kFirstName && tok < kFirstName + kNumClasses - 1) ? tok - kFirstName + 1 : -1;
}

inline int severity_token(int c, int k) { return kFirstSeverity + (c * 3 + k) % kNumSeverities; }
inline int location_token(int c, int k) { return kFirstLocation + (c * 5 + k) % kNumLocations; }

inline std::string word_of(int tok) {
  const auto& w = base_words();
  if (tok >= 0 && tok < static_cast<int>(w.size())) return w[static_cast<std::size_t>(tok)];
  return "<unused_" + std::to_string(tok) + ">";
}

/// Space-separated words, sentinels included.
inline std::string detokenize(const Tokens& toks) {
  std::string s;
  for (int t : toks) {
    if (!s.empty()) s += ' ';
    s += t == kBos ? "BOS" : t == kEos ? "EOS" : t == kPad ? "PAD" : word_of(t);
  }
  return s;
}

/// Parses space-separated words; BOS/EOS/PAD and <bos>-style spellings are accepted.
inline Tokens tokenize(std::string_view text) {
  static const std::unordered_map<std::string, int> index = [] {
    std::unordered_map<std::string, int> m;
    const auto& w = base_words();
    for (std::size_t i = 0; i < w.size(); ++i) m.emplace(w[i], static_cast<int>(i));
    m.emplace("BOS", kBos);
    m.emplace("EOS", kEos);
    m.emplace("PAD", kPad);
    return m;
  }();
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) {
      auto it = index.find(std::string(text.substr(i, j - i)));
      if (it == index.end()) throw InputError("tokenize: unknown word '" + std::string(text.substr(i, j - i)) + "'");
      out.push_back(it->second);
    }
    i = j;
  }
  return out;
}

inline bool is_valid_labels(const Labels& y) {
  int active = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    if (y[c] > 1) return false;
    active += y[c];
  }
  if (active == 0) return false;
  return !(y[kNoFinding] == 1 && active > 1);
}

/// BOS first, EOS last before any PAD, no PAD before EOS, ids below V, length <= max_len.
inline bool is_valid_tokens(const Tokens& toks, int vocab_size, int max_len) {
  if (toks.size() < 2 || static_cast<int>(toks.size()) > max_len || toks.front() != kBos) return false;
  bool ended = false;
  for (std::size_t i = 1; i < toks.size(); ++i) {
    const int t = toks[i];
    if (t < 0 || t >= vocab_size) return false;
    if (ended) {
      if (t != kPad) return false;
    } else if (t == kPad || t == kBos) {
      return false;
    } else if (t == kEos) {
      ended = true;
    }
  }
  return ended;
}

inline Tokens strip_padding(const Tokens& toks) {
  Tokens out;
  for (int t : toks)
    if (t != kPad) out.push_back(t);
  return out;
}

inline void check_prevalence(const std::vector<double>& prevalence) {
  if (static_cast<int>(prevalence.size()) != kNumClasses)
    throw ConfigError("prevalence must have " + std::to_string(kNumClasses) + " entries");
  for (double p : prevalence)
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("prevalence entries must lie in [0, 1]");
}

/// Independent Bernoulli draws for the pathology classes; no_finding is set
/// exactly when none fires. prevalence[0] is ignored.
inline Labels sample_label_vector(const std::vector<double>& prevalence, Rng& rng) {
  check_prevalence(prevalence);
  Labels y{};
  bool any = false;
  for (int c = 1; c < kNumClasses; ++c) {
    y[c] = bernoulli(rng, prevalence[static_cast<std::size_t>(c)]) ? 1 : 0;
    any = any || y[c];
  }
  y[kNoFinding] = any ? 0 : 1;
  return y;
}

/// Flips each pathology bit with probability `rate` and renormalizes no_finding.
inline Labels corrupt_labels(Labels y, double rate, Rng& rng) {
  if (rate <= 0.0) return y;
  bool any = false;
  for (int c = 1; c < kNumClasses; ++c) {
    if (bernoulli(rng, rate)) y[c] ^= 1;
    any = any || y[c];
  }
  y[kNoFinding] = any ? 0 : 1;
  return y;
}

struct GrammarOptions {
  double negation_rate = 0.25;
  int max_len = 64;
};

/// Findings-style report: "<name> <severity> <location> present ." per
/// active class, "no <name> ." for a random subset of inactive classes,
/// "lungs are clear ." when nothing is active; sentence order shuffled.
/// Reports that would exceed max_len first lose negation sentences, then
/// severity words, so the labeler round trip always holds.
inline Tokens generate_report(const Labels& y, Rng& rng, const GrammarOptions& opt = {}) {
  if (!is_valid_labels(y)) throw InputError("generate_report: invalid label vector");
  std::vector<Tokens> positives, negatives;
  for (int c = 1; c < kNumClasses; ++c) {
    if (y[c]) {
      const int sev = severity_token(c, static_cast<int>(rng() % kPoolSize));
      const int loc = location_token(c, static_cast<int>(rng() % kPoolSize));
      positives.push_back({name_token(c), sev, loc, kPresent, kPeriod});
    } else if (bernoulli(rng, opt.negation_rate)) {
      negatives.push_back({kNo, name_token(c), kPeriod});
    }
  }
  if (y[kNoFinding]) positives.push_back({6, 7, 8, kPeriod});

  auto length = [&] {
    std::size_t n = 2;
    for (const auto& s : positives) n += s.size();
    for (const auto& s : negatives) n += s.size();
    return n;
  };
  while (length() > static_cast<std::size_t>(opt.max_len) && !negatives.empty()) negatives.pop_back();
  for (auto& s : positives) {
    if (length() <= static_cast<std::size_t>(opt.max_len)) break;
    if (s.size() == 5) s.erase(s.begin() + 1);
  }

  std::vector<Tokens> sentences = std::move(positives);
  sentences.insert(sentences.end(), negatives.begin(), negatives.end());
  std::shuffle(sentences.begin(), sentences.end(), rng);
  Tokens out{kBos};
  for (const auto& s : sentences) out.insert(out.end(), s.begin(), s.end());
  out.push_back(kEos);
  return out;
}

/// Exact rule-based labeler: class c fires iff its name occurs without the
/// negation token directly before it. Unknown tokens are ignored.
inline Labels extract_labels_from_report(const Tokens& toks) {
  Labels y{};
  bool any = false;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const int c = class_of_token(toks[i]);
    if (c < 0) continue;
    if (i > 0 && toks[i - 1] == kNo) continue;
    y[c] = 1;
    any = true;
  }
  y[kNoFinding] = any ? 0 : 1;
  return y;
}

/// Fixed class patterns and patch subsets shared by every image of a corpus.
struct ImagePrior {
  int num_patches = 64;
  int patch_dim = 16;
  double amplitude = 3.0;
  std::uint64_t pattern_seed = 0;
  Matrix<float> patterns;                    // C x patch_dim, unit rows
  std::vector<std::vector<int>> subsets;     // C subsets of patch indices

  int grid_side() const { return static_cast<int>(std::lround(std::sqrt(static_cast<double>(num_patches)))); }
};

/// Draws unit patterns (orthogonalized when patch_dim allows it, otherwise
/// rejection-sampled to pairwise |cos| < 0.3) and sorted patch subsets.
inline ImagePrior make_image_prior(int num_patches, int patch_dim, int subset_size, double amplitude,
                                   std::uint64_t pattern_seed) {
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(num_patches))));
  if (side * side != num_patches) throw ConfigError("num_patches must be a perfect square");
  if (subset_size < 1 || subset_size > num_patches) throw ConfigError("pattern_patches out of range");
  ImagePrior prior;
  prior.num_patches = num_patches;
  prior.patch_dim = patch_dim;
  prior.amplitude = amplitude;
  prior.pattern_seed = pattern_seed;
  Rng rng(pattern_seed);
  Matrix<double> pats(kNumClasses, patch_dim);
  for (int c = 0; c < kNumClasses; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw ConfigError("cannot draw separated class patterns; increase patch_dim");
      Eigen::RowVectorXd v = random_normal<double>(1, patch_dim, 1.0, rng);
      if (patch_dim >= kNumClasses)
        for (int k = 0; k < c; ++k) v -= v.dot(pats.row(k)) * pats.row(k);
      if (v.norm() < 1e-6) continue;
      v.normalize();
      bool ok = true;
      for (int k = 0; k < c && ok; ++k) ok = std::abs(v.dot(pats.row(k))) < 0.3;
      if (!ok) continue;
      pats.row(c) = v;
      break;
    }
  }
  prior.patterns = pats.cast<float>();
  std::vector<int> idx(static_cast<std::size_t>(num_patches));
  for (int c = 0; c < kNumClasses; ++c) {
    std::iota(idx.begin(), idx.end(), 0);
    for (int k = 0; k < subset_size; ++k) {
      const auto j = k + static_cast<int>(rng() % static_cast<std::uint64_t>(num_patches - k));
      std::swap(idx[static_cast<std::size_t>(k)], idx[static_cast<std::size_t>(j)]);
    }
    std::vector<int> s(idx.begin(), idx.begin() + subset_size);
    std::sort(s.begin(), s.end());
    prior.subsets.push_back(std::move(s));
  }
  return prior;
}

/// Background N(0, noise_std^2) plus amplitude * p_c on every patch of S_c
/// for each active class c (no_finding included).
inline Grid generate_image(const Labels& y, Rng& rng, const ImagePrior& prior, double noise_std = 1.0) {
  if (!is_valid_labels(y)) throw InputError("generate_image: invalid label vector");
  Grid g(prior.num_patches, prior.patch_dim);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = static_cast<float>(noise_std * noise(rng));
  for (int c = 0; c < kNumClasses; ++c) {
    if (!y[c]) continue;
    for (int s : prior.subsets[static_cast<std::size_t>(c)])
      g.row(s) += static_cast<float>(prior.amplitude) * prior.patterns.row(c);
  }
  return g;
}

struct ReportRecord {
  Tokens tokens;
  Labels labels{};
};

struct ImageRecord {
  Grid grid;
  Labels labels{};
};

/// Held-out or few-shot sample with its true counterpart retained.
struct PairedRecord {
  Tokens tokens;
  Grid grid;
  Labels labels{};
};

struct CorpusManifest {
  std::uint64_t seed = 0;
  int num_classes = kNumClasses;
  int vocab_size = 160;
  int max_len = 64;
  int num_patches = 64;
  int patch_dim = 16;
  int pattern_patches = 6;
  double amplitude = 3.0;
  double negation_rate = 0.25;
  double label_noise = 0.0;
  std::vector<double> prevalence;
  std::uint64_t pattern_seed = 0;
  int n_reports = 0;
  int n_images = 0;
  ImagePrior prior;

  GrammarOptions grammar() const { return {negation_rate, max_len}; }
};

/// Two independent streams; nothing here joins a report to an image.
struct UnpairedCorpus {
  CorpusManifest manifest;
  std::vector<ReportRecord> reports;
  std::vector<ImageRecord> images;
};

inline CorpusManifest manifest_from_config(const Config& cfg) {
  check_prevalence(cfg.prevalence);
  CorpusManifest m;
  m.seed = cfg.seed;
  m.vocab_size = cfg.vocab_size;
  m.max_len = cfg.max_len;
  m.num_patches = cfg.num_patches;
  m.patch_dim = cfg.patch_dim;
  m.pattern_patches = cfg.pattern_patches;
  m.amplitude = cfg.amplitude;
  m.negation_rate = cfg.negation_rate;
  m.label_noise = cfg.label_noise;
  m.prevalence = cfg.prevalence;
  m.pattern_seed = cfg.pattern_seed;
  m.n_reports = cfg.n_reports;
  m.n_images = cfg.n_images;
  m.prior = make_image_prior(cfg.num_patches, cfg.patch_dim, cfg.pattern_patches, cfg.amplitude, cfg.pattern_seed);
  return m;
}

inline ReportRecord make_report_sample(const CorpusManifest& m, std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  const Labels y = sample_label_vector(m.prevalence, rng);
  ReportRecord r;
  r.tokens = generate_report(y, rng, m.grammar());
  r.labels = corrupt_labels(y, m.label_noise, rng);
  return r;
}

inline ImageRecord make_image_sample(const CorpusManifest& m, std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  const Labels y = sample_label_vector(m.prevalence, rng);
  ImageRecord r;
  r.grid = generate_image(y, rng, m.prior);
  r.labels = corrupt_labels(y, m.label_noise, rng);
  return r;
}

/// One label vector rendered into both modalities.
inline PairedRecord make_paired_sample(const CorpusManifest& m, std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  PairedRecord p;
  p.labels = sample_label_vector(m.prevalence, rng);
  p.tokens = generate_report(p.labels, rng, m.grammar());
  p.grid = generate_image(p.labels, rng, m.prior);
  return p;
}

/// Reports and images draw labels from independent per-sample seeds; the
/// pairing index never leaves this function.
inline UnpairedCorpus build_corpus(const Config& cfg) {
  if (cfg.n_reports <= 0 || cfg.n_images <= 0) throw ConfigError("build_corpus: corpus sizes must be positive");
  UnpairedCorpus corpus;
  corpus.manifest = manifest_from_config(cfg);
  const std::uint64_t base = derive_seed(cfg.seed, "corpus");
  corpus.reports.reserve(static_cast<std::size_t>(cfg.n_reports));
  for (int i = 0; i < cfg.n_reports; ++i)
    corpus.reports.push_back(make_report_sample(corpus.manifest, derive_seed(base, "report", static_cast<std::uint64_t>(i))));
  corpus.images.reserve(static_cast<std::size_t>(cfg.n_images));
  for (int i = 0; i < cfg.n_images; ++i)
    corpus.images.push_back(make_image_sample(corpus.manifest, derive_seed(base, "image", static_cast<std::uint64_t>(i))));
  return corpus;
}

/// Held-out paired evaluation samples, derived from the corpus seed so every
/// run against the same corpus sees the same set.
inline std::vector<PairedRecord> build_eval_set(const CorpusManifest& m, int n) {
  std::vector<PairedRecord> out;
  out.reserve(static_cast<std::size_t>(n));
  const std::uint64_t base = derive_seed(m.seed, "eval");
  for (int i = 0; i < n; ++i) out.push_back(make_paired_sample(m, derive_seed(base, "sample", static_cast<std::uint64_t>(i))));
  return out;
}

/// Few-shot pool: round(fraction * n_images) pairs (at least one when the
/// fraction is positive) from a seed stream disjoint from the corpus.
inline std::vector<PairedRecord> build_paired_pool(const CorpusManifest& m, double fraction) {
  if (fraction <= 0.0) return {};
  const int n = std::max(1, static_cast<int>(std::lround(fraction * m.n_images)));
  std::vector<PairedRecord> out;
  out.reserve(static_cast<std::size_t>(n));
  const std::uint64_t base = derive_seed(m.seed, "paired");
  for (int i = 0; i < n; ++i) out.push_back(make_paired_sample(m, derive_seed(base, "sample", static_cast<std::uint64_t>(i))));
  return out;
}

inline nlohmann::json labels_to_json(const Labels& y) {
  nlohmann::json j = nlohmann::json::array();
  for (auto b : y) j.push_back(static_cast<int>(b));
  return j;
}

inline Labels labels_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != kNumClasses) throw InputError("labels: expected an array of 14 bits");
  Labels y{};
  for (int c = 0; c < kNumClasses; ++c) {
    const int v = j[static_cast<std::size_t>(c)].get<int>();
    if (v != 0 && v != 1) throw InputError("labels: entries must be 0 or 1");
    y[c] = static_cast<std::uint8_t>(v);
  }
  return y;
}

inline nlohmann::json manifest_to_json(const CorpusManifest& m) {
  nlohmann::json j;
  j["seed"] = m.seed;
  j["C"] = m.num_classes;
  j["V"] = m.vocab_size;
  j["max_len"] = m.max_len;
  j["n_p"] = m.num_patches;
  j["d_raw"] = m.patch_dim;
  j["pattern_patches"] = m.pattern_patches;
  j["amplitude"] = m.amplitude;
  j["negation_rate"] = m.negation_rate;
  j["label_noise"] = m.label_noise;
  j["prevalence"] = m.prevalence;
  j["pattern_seed"] = m.pattern_seed;
  j["n_reports"] = m.n_reports;
  j["n_images"] = m.n_images;
  nlohmann::json pats = nlohmann::json::array();
  for (Eigen::Index c = 0; c < m.prior.patterns.rows(); ++c) {
    std::vector<float> row(m.prior.patterns.row(c).data(), m.prior.patterns.row(c).data() + m.prior.patterns.cols());
    pats.push_back(row);
  }
  j["patterns"] = pats;
  j["pattern_subsets"] = m.prior.subsets;
  return j;
}

inline CorpusManifest manifest_from_json(const nlohmann::json& j) {
  try {
    CorpusManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.num_classes = j.at("C").get<int>();
    if (m.num_classes != kNumClasses) throw InputError("manifest: unsupported class count");
    m.vocab_size = j.at("V").get<int>();
    m.max_len = j.at("max_len").get<int>();
    m.num_patches = j.at("n_p").get<int>();
    m.patch_dim = j.at("d_raw").get<int>();
    m.pattern_patches = j.at("pattern_patches").get<int>();
    m.amplitude = j.at("amplitude").get<double>();
    m.negation_rate = j.at("negation_rate").get<double>();
    m.label_noise = j.at("label_noise").get<double>();
    m.prevalence = j.at("prevalence").get<std::vector<double>>();
    m.pattern_seed = j.at("pattern_seed").get<std::uint64_t>();
    m.n_reports = j.at("n_reports").get<int>();
    m.n_images = j.at("n_images").get<int>();
    m.prior.num_patches = m.num_patches;
    m.prior.patch_dim = m.patch_dim;
    m.prior.amplitude = m.amplitude;
    m.prior.pattern_seed = m.pattern_seed;
    const auto pats = j.at("patterns").get<std::vector<std::vector<float>>>();
    m.prior.patterns.resize(static_cast<Eigen::Index>(pats.size()), m.patch_dim);
    for (std::size_t c = 0; c < pats.size(); ++c) {
      if (static_cast<int>(pats[c].size()) != m.patch_dim) throw InputError("manifest: pattern width mismatch");
      for (int k = 0; k < m.patch_dim; ++k) m.prior.patterns(static_cast<Eigen::Index>(c), k) = pats[c][static_cast<std::size_t>(k)];
    }
    m.prior.subsets = j.at("pattern_subsets").get<std::vector<std::vector<int>>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("manifest: ") + e.what());
  }
}

namespace files {
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kReports = "reports.jsonl";
inline constexpr const char* kImages = "images.bin";
inline constexpr const char* kImageIndex = "images_index.json";
}  // namespace files

/// Writes manifest.json, reports.jsonl, images.bin (little-endian float32
/// grids back to back) and images_index.json (offsets and labels).
inline void save_corpus(const UnpairedCorpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_json(dir / files::kManifest, manifest_to_json(corpus.manifest));
  std::string reports;
  for (const auto& r : corpus.reports) {
    nlohmann::json j;
    j["tokens"] = r.tokens;
    j["labels"] = labels_to_json(r.labels);
    reports += j.dump() + "\n";
  }
  io::write_file(dir / files::kReports, reports);

  std::string blob;
  nlohmann::json index;
  index["n_p"] = corpus.manifest.num_patches;
  index["d_raw"] = corpus.manifest.patch_dim;
  index["dtype"] = "float32-le";
  nlohmann::json records = nlohmann::json::array();
  for (const auto& im : corpus.images) {
    nlohmann::json rec;
    rec["offset"] = blob.size();
    rec["labels"] = labels_to_json(im.labels);
    records.push_back(rec);
    blob.append(reinterpret_cast<const char*>(im.grid.data()), static_cast<std::size_t>(im.grid.size()) * sizeof(float));
  }
  index["records"] = records;
  io::write_file(dir / files::kImages, blob);
  io::write_json(dir / files::kImageIndex, index);
}

inline UnpairedCorpus load_corpus(const std::filesystem::path& dir) {
  UnpairedCorpus corpus;
  corpus.manifest = manifest_from_json(io::read_json(dir / files::kManifest));
  const auto& m = corpus.manifest;
  for (const auto& j : io::read_json_lines(dir / files::kReports)) {
    ReportRecord r;
    r.tokens = j.at("tokens").get<Tokens>();
    r.labels = labels_from_json(j.at("labels"));
    if (!is_valid_tokens(r.tokens, m.vocab_size, m.max_len)) throw InputError("reports: invalid token sequence");
    corpus.reports.push_back(std::move(r));
  }
  const std::string blob = io::read_file(dir / files::kImages);
  const auto index = io::read_json(dir / files::kImageIndex);
  if (index.at("n_p").get<int>() != m.num_patches || index.at("d_raw").get<int>() != m.patch_dim)
    throw InputError("images: index shape disagrees with manifest");
  const std::size_t bytes = static_cast<std::size_t>(m.num_patches) * static_cast<std::size_t>(m.patch_dim) * sizeof(float);
  for (const auto& rec : index.at("records")) {
    const auto off = rec.at("offset").get<std::size_t>();
    if (off + bytes > blob.size()) throw InputError("images: record offset past end of blob");
    ImageRecord im;
    im.grid.resize(m.num_patches, m.patch_dim);
    std::memcpy(im.grid.data(), blob.data() + off, bytes);
    im.labels = labels_from_json(rec.at("labels"));
    corpus.images.push_back(std::move(im));
  }
  return corpus;
}

/// Content hash of a saved corpus directory.
inline std::string corpus_hash(const std::filesystem::path& dir) {
  return io::sha256_files({dir / files::kManifest, dir / files::kReports, dir / files::kImageIndex, dir / files::kImages});
}

/// Per-class positive rate over a label list.
template <typename Records>
std::vector<double> class_rates(const Records& recs) {
  std::vector<double> rate(kNumClasses, 0.0);
  for (const auto& r : recs)
    for (int c = 0; c < kNumClasses; ++c) rate[static_cast<std::size_t>(c)] += r.labels[c];
  for (auto& v : rate) v /= static_cast<double>(std::max<std::size_t>(1, recs.size()));
  return rate;
}

/// Expected per-class rate implied by a prevalence vector (no_finding derived).
inline std::vector<double> expected_rates(const std::vector<double>& prevalence) {
  std::vector<double> r(prevalence);
  double none = 1.0;
  for (int c = 1; c < kNumClasses; ++c) none *= 1.0 - prevalence[static_cast<std::size_t>(c)];
  r[0] = none;
  return r;
}

}  // namespace medrat::synth
