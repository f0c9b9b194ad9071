#pragma once

// Report-quality metrics (BLEU-n, ROUGE-L, clinical efficacy through the
// synthetic labeler), the cross-modal alignment gap, attention-map export,
// and the ablation harness.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "medrat/trainer.hpp"

namespace medrat {

/// Tokens with BOS/EOS/PAD removed.
inline synth::Tokens strip_sentinels(const synth::Tokens& toks) {
  synth::Tokens out;
  for (int t : toks)
    if (t != synth::kBos && t != synth::kEos && t != synth::kPad) out.push_back(t);
  return out;
}

namespace detail {

inline void check_corpora(std::size_t cands, std::size_t refs, const char* what) {
  if (cands == 0) throw InputError(std::string(what) + ": empty candidate set");
  if (cands != refs) throw InputError(std::string(what) + ": candidates and references differ in count");
}

inline std::map<std::vector<int>, int> ngram_counts(const synth::Tokens& s, int n) {
  std::map<std::vector<int>, int> c;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i)
    ++c[std::vector<int>(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  return c;
}

inline std::size_t lcs_length(const synth::Tokens& a, const synth::Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

/// Corpus BLEU with uniform weights over orders 1..n and the brevity
/// penalty. Returns 0 when any order has no matching n-gram.
inline double bleu(const std::vector<synth::Tokens>& candidates, const std::vector<synth::Tokens>& references, int n) {
  detail::check_corpora(candidates.size(), references.size(), "bleu");
  if (n < 1) throw InputError("bleu: order must be >= 1");
  std::vector<double> matched(static_cast<std::size_t>(n), 0.0), total(static_cast<std::size_t>(n), 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const auto c = strip_sentinels(candidates[s]);
    const auto r = strip_sentinels(references[s]);
    cand_len += static_cast<double>(c.size());
    ref_len += static_cast<double>(r.size());
    for (int k = 1; k <= n; ++k) {
      const auto cc = detail::ngram_counts(c, k);
      const auto rc = detail::ngram_counts(r, k);
      for (const auto& [g, cnt] : cc) {
        const auto it = rc.find(g);
        matched[static_cast<std::size_t>(k - 1)] += std::min(cnt, it == rc.end() ? 0 : it->second);
        total[static_cast<std::size_t>(k - 1)] += cnt;
      }
    }
  }
  if (cand_len == 0.0) return 0.0;
  double log_p = 0.0;
  for (int k = 0; k < n; ++k) {
    if (matched[static_cast<std::size_t>(k)] == 0.0) return 0.0;
    log_p += std::log(matched[static_cast<std::size_t>(k)] / total[static_cast<std::size_t>(k)]) / n;
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_p);
}

/// Mean over pairs of the LCS F-measure (beta = 1). Two empty sequences
/// count as identical.
inline double rouge_l(const std::vector<synth::Tokens>& candidates, const std::vector<synth::Tokens>& references) {
  detail::check_corpora(candidates.size(), references.size(), "rouge_l");
  double acc = 0.0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const auto c = strip_sentinels(candidates[s]);
    const auto r = strip_sentinels(references[s]);
    if (c.empty() && r.empty()) {
      acc += 1.0;
      continue;
    }
    const double lcs = static_cast<double>(detail::lcs_length(c, r));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(c.size()), rc = lcs / static_cast<double>(r.size());
    acc += 2.0 * p * rc / (p + rc);
  }
  return acc / static_cast<double>(candidates.size());
}

struct ClassCounts {
  int tp = 0, fp = 0, fn = 0, support = 0;
};

struct ClinicalEfficacy {
  double micro_precision = 0, micro_recall = 0, micro_f1 = 0;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
  std::array<ClassCounts, kNumClasses> per_class{};
};

inline double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

/// Precision/recall/F1 of labels read back from generated reports. Macro
/// averages run over classes that occur in either the ground truth or the
/// predictions; F1 is the harmonic mean of the averaged precision and recall.
inline ClinicalEfficacy clinical_efficacy_from_labels(const std::vector<synth::Labels>& predicted,
                                                      const std::vector<synth::Labels>& truth) {
  if (predicted.size() != truth.size()) throw InputError("clinical efficacy: prediction/label count mismatch");
  ClinicalEfficacy ce;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    for (int c = 0; c < kNumClasses; ++c) {
      auto& k = ce.per_class[static_cast<std::size_t>(c)];
      const bool p = predicted[i][c] != 0, y = truth[i][c] != 0;
      k.tp += p && y;
      k.fp += p && !y;
      k.fn += !p && y;
      k.support += y;
    }
  int tp = 0, fp = 0, fn = 0, classes = 0;
  double sp = 0.0, sr = 0.0;
  for (const auto& k : ce.per_class) {
    tp += k.tp;
    fp += k.fp;
    fn += k.fn;
    if (k.tp + k.fp + k.fn == 0) continue;
    ++classes;
    sp += k.tp + k.fp > 0 ? static_cast<double>(k.tp) / (k.tp + k.fp) : 0.0;
    sr += k.tp + k.fn > 0 ? static_cast<double>(k.tp) / (k.tp + k.fn) : 0.0;
  }
  ce.micro_precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  ce.micro_recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  ce.micro_f1 = harmonic(ce.micro_precision, ce.micro_recall);
  if (classes > 0) {
    ce.macro_precision = sp / classes;
    ce.macro_recall = sr / classes;
  }
  ce.macro_f1 = harmonic(ce.macro_precision, ce.macro_recall);
  return ce;
}

inline ClinicalEfficacy clinical_efficacy(const std::vector<synth::Tokens>& generated,
                                          const std::vector<synth::Labels>& truth) {
  std::vector<synth::Labels> pred;
  pred.reserve(generated.size());
  for (const auto& g : generated) pred.push_back(synth::extract_labels_from_report(g));
  return clinical_efficacy_from_labels(pred, truth);
}

struct MetricsRecord {
  double bleu1 = 0, bleu4 = 0, rougeL = 0;
  ClinicalEfficacy ce;
  int n = 0;
};

inline nlohmann::json to_json(const MetricsRecord& m) {
  nlohmann::json j;
  j["n"] = m.n;
  j["bleu1"] = m.bleu1;
  j["bleu4"] = m.bleu4;
  j["rougeL"] = m.rougeL;
  j["ce_micro_precision"] = m.ce.micro_precision;
  j["ce_micro_recall"] = m.ce.micro_recall;
  j["ce_micro_f1"] = m.ce.micro_f1;
  j["ce_macro_precision"] = m.ce.macro_precision;
  j["ce_macro_recall"] = m.ce.macro_recall;
  j["ce_macro_f1"] = m.ce.macro_f1;
  nlohmann::json pc = nlohmann::json::array();
  for (int c = 0; c < kNumClasses; ++c) {
    const auto& k = m.ce.per_class[static_cast<std::size_t>(c)];
    pc.push_back({{"class", std::string(synth::class_names()[static_cast<std::size_t>(c)])},
                  {"tp", k.tp},
                  {"fp", k.fp},
                  {"fn", k.fn},
                  {"support", k.support}});
  }
  j["per_class"] = pc;
  return j;
}

inline std::string metrics_csv(const MetricsRecord& m) {
  std::ostringstream s;
  s.precision(10);
  s << "metric,value\n";
  s << "bleu1," << m.bleu1 << "\nbleu4," << m.bleu4 << "\nrougeL," << m.rougeL << "\n";
  s << "ce_micro_precision," << m.ce.micro_precision << "\nce_micro_recall," << m.ce.micro_recall
    << "\nce_micro_f1," << m.ce.micro_f1 << "\n";
  s << "ce_macro_precision," << m.ce.macro_precision << "\nce_macro_recall," << m.ce.macro_recall
    << "\nce_macro_f1," << m.ce.macro_f1 << "\n";
  return s.str();
}

inline MetricsRecord score_reports(const std::vector<synth::Tokens>& generated,
                                   const std::vector<synth::PairedRecord>& eval_set) {
  std::vector<synth::Tokens> refs;
  std::vector<synth::Labels> labels;
  for (const auto& p : eval_set) {
    refs.push_back(p.tokens);
    labels.push_back(p.labels);
  }
  MetricsRecord m;
  m.n = static_cast<int>(generated.size());
  m.bleu1 = bleu(generated, refs, 1);
  m.bleu4 = bleu(generated, refs, 4);
  m.rougeL = rouge_l(generated, refs);
  m.ce = clinical_efficacy(generated, labels);
  return m;
}

/// Greedy reports for every image, in chunks to bound memory.
template <typename T>
std::vector<synth::Tokens> generate_reports(Model<T>& model, const std::vector<const synth::Grid*>& grids,
                                            std::size_t chunk = 64) {
  std::vector<synth::Tokens> out;
  out.reserve(grids.size());
  for (std::size_t s = 0; s < grids.size(); s += chunk) {
    std::vector<const synth::Grid*> part(grids.begin() + static_cast<std::ptrdiff_t>(s),
                                         grids.begin() + static_cast<std::ptrdiff_t>(std::min(grids.size(), s + chunk)));
    for (auto& g : model.generate_from_images(part)) out.push_back(std::move(g.tokens));
  }
  return out;
}

/// Image -> report on a held-out paired set, scored against the true reports.
template <typename T>
MetricsRecord evaluate(Model<T>& model, const std::vector<synth::PairedRecord>& eval_set,
                       std::vector<synth::Tokens>* generated_out = nullptr) {
  std::vector<const synth::Grid*> grids;
  for (const auto& p : eval_set) grids.push_back(&p.grid);
  auto gen = generate_reports(model, grids);
  auto m = score_reports(gen, eval_set);
  if (generated_out != nullptr) *generated_out = std::move(gen);
  return m;
}

struct AlignmentGap {
  double gap = 0.0;
  double mean_shared = 0.0;
  double mean_disjoint = 0.0;
  int n_shared = 0;
  int n_disjoint = 0;
};

/// Mean cosine of sampled report/image pairs sharing a pathology minus the
/// mean over pairs sharing none. Empty groups count as mean 0.
inline AlignmentGap alignment_gap(const Matrix<double>& report_z, const std::vector<synth::Labels>& report_labels,
                                  const Matrix<double>& image_z, const std::vector<synth::Labels>& image_labels,
                                  int n_pairs, Rng& rng) {
  if (report_z.rows() != static_cast<Eigen::Index>(report_labels.size()) ||
      image_z.rows() != static_cast<Eigen::Index>(image_labels.size()) || report_z.rows() == 0 || image_z.rows() == 0)
    throw InputError("alignment gap: representation/label count mismatch");
  auto unit = [](const Matrix<double>& z) {
    Matrix<double> u = z;
    for (Eigen::Index i = 0; i < u.rows(); ++i) u.row(i) /= std::max(u.row(i).norm(), 1e-8);
    return u;
  };
  const Matrix<double> ur = unit(report_z), ui = unit(image_z);
  AlignmentGap g;
  double ss = 0.0, sd = 0.0;
  for (int k = 0; k < n_pairs; ++k) {
    const auto i = static_cast<std::size_t>(rng() % report_labels.size());
    const auto j = static_cast<std::size_t>(rng() % image_labels.size());
    const double cs = ur.row(static_cast<Eigen::Index>(i)).dot(ui.row(static_cast<Eigen::Index>(j)));
    if (share_pathology(report_labels[i], image_labels[j])) {
      ss += cs;
      ++g.n_shared;
    } else {
      sd += cs;
      ++g.n_disjoint;
    }
  }
  g.mean_shared = g.n_shared > 0 ? ss / g.n_shared : 0.0;
  g.mean_disjoint = g.n_disjoint > 0 ? sd / g.n_disjoint : 0.0;
  g.gap = g.mean_shared - g.mean_disjoint;
  return g;
}

/// Gap between the reports and images of a held-out set, each encoded on
/// its own path.
template <typename T>
AlignmentGap alignment_diagnostic(Model<T>& model, const std::vector<synth::PairedRecord>& eval_set, int n_pairs,
                                  std::uint64_t seed) {
  std::vector<const synth::Tokens*> toks;
  std::vector<const synth::Grid*> grids;
  std::vector<synth::Labels> labels;
  for (const auto& p : eval_set) {
    toks.push_back(&p.tokens);
    grids.push_back(&p.grid);
    labels.push_back(p.labels);
  }
  const Matrix<double> zr = model.report_globals(toks).template cast<double>();
  const Matrix<double> zi = model.image_globals(grids).template cast<double>();
  Rng rng(seed);
  return alignment_gap(zr, labels, zi, labels, n_pairs, rng);
}

inline nlohmann::json to_json(const AlignmentGap& g) {
  return {{"gap", g.gap},
          {"mean_shared", g.mean_shared},
          {"mean_disjoint", g.mean_disjoint},
          {"n_shared", g.n_shared},
          {"n_disjoint", g.n_disjoint}};
}

/// Per generated token: last-layer cross-attention over grid positions.
/// The global memory row is left out, so a map sums to at most one.
struct AttentionMaps {
  synth::Tokens tokens;                 // including BOS
  std::vector<std::vector<double>> maps;  // one per generated token, n_p values
};

template <typename T>
AttentionMaps export_attention_maps(Model<T>& model, const synth::Grid& image) {
  auto gen = model.generate_from_images({&image}, true).front();
  ag::Tape<T> t(false);
  const ImageView v = full_view(image);
  auto e = model.encode_images(t, {&v});
  const auto in = model.decoder_input(e);
  AttentionMaps out;
  out.tokens = gen.tokens;
  for (const auto& w : gen.cross_attention) {
    std::vector<double> m(static_cast<std::size_t>(image.rows()), 0.0);
    for (std::size_t r = 0; r < in.source_rows.size() && r < w.size(); ++r) {
      const auto src = in.source_rows[r];
      if (src >= 0) m[static_cast<std::size_t>(v.positions[static_cast<std::size_t>(src)])] += static_cast<double>(w[r]);
    }
    out.maps.push_back(std::move(m));
  }
  return out;
}

inline nlohmann::json to_json(const AttentionMaps& a) {
  nlohmann::json j;
  j["tokens"] = a.tokens;
  nlohmann::json words = nlohmann::json::array();
  for (int t : a.tokens) words.push_back(synth::word_of(t));
  j["words"] = words;
  j["maps"] = a.maps;
  return j;
}

/// Binary PGM of a side x side map, each patch drawn as a scale x scale
/// block, brightest patch at 255.
inline std::string render_pgm(const std::vector<double>& map, int side, int scale = 16) {
  if (static_cast<int>(map.size()) != side * side) throw InputError("render_pgm: map is not side x side");
  const double mx = std::max(*std::max_element(map.begin(), map.end()), 1e-12);
  const int w = side * scale;
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(w) + "\n255\n";
  for (int y = 0; y < w; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = map[static_cast<std::size_t>((y / scale) * side + x / scale)] / mx;
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    }
  return out;
}

/// Writes attention.json and one PGM per generated token; returns the paths.
inline std::vector<std::filesystem::path> write_attention_maps(const AttentionMaps& a, int side,
                                                               const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths{dir / "attention.json"};
  io::write_json(paths.front(), to_json(a));
  for (std::size_t k = 0; k < a.maps.size(); ++k) {
    char name[64];
    std::snprintf(name, sizeof name, "token_%02zu_%s.pgm", k, synth::word_of(a.tokens[k + 1]).c_str());
    paths.push_back(dir / name);
    io::write_file(paths.back(), render_pgm(a.maps[k], side));
  }
  return paths;
}

/// How often each memory slot is selected by the eval reports and images.
template <typename T>
std::string memory_usage_csv(Model<T>& model, const std::vector<synth::PairedRecord>& eval_set) {
  const auto slots = static_cast<std::size_t>(model.memory.num_slots());
  std::vector<long> rep(slots, 0), img(slots, 0);
  if (model.config().memory_mode != MemoryMode::Off) {
    ag::Tape<T> t(false);
    std::vector<const synth::Tokens*> toks;
    std::vector<ImageView> views;
    for (const auto& p : eval_set) {
      toks.push_back(&p.tokens);
      views.push_back(full_view(p.grid));
    }
    std::vector<const ImageView*> vp;
    for (const auto& v : views) vp.push_back(&v);
    for (const auto& sel : model.encode_reports(t, toks).memory_slots)
      for (auto s : sel) ++rep[static_cast<std::size_t>(s)];
    for (const auto& sel : model.encode_images(t, vp).memory_slots)
      for (auto s : sel) ++img[static_cast<std::size_t>(s)];
  }
  std::ostringstream s;
  s << "slot,report_hits,image_hits\n";
  for (std::size_t i = 0; i < slots; ++i) s << i << ',' << rep[i] << ',' << img[i] << '\n';
  return s.str();
}

// ---------------------------------------------------------------------------
// Single runs and ablations

struct RunResult {
  MetricsRecord metrics;
  AlignmentGap gap;
  std::vector<StepMetrics> history;
};

/// Trains a fresh model on `corpus` with `seed` and scores it on the
/// held-out set derived from the corpus manifest.
template <typename T = float>
RunResult train_and_evaluate(const Config& cfg, std::uint64_t seed, const synth::UnpairedCorpus& corpus,
                             const std::vector<synth::PairedRecord>& eval_set,
                             const typename Trainer<T>::StepCallback& on_step = {},
                             Trainer<T>* keep = nullptr) {
  Trainer<T> tr(cfg, seed);
  RunResult res;
  const auto pool = cfg.paired_fraction > 0.0 ? synth::build_paired_pool(corpus.manifest, cfg.paired_fraction)
                                              : std::vector<synth::PairedRecord>{};
  tr.train(corpus, pool, [&](const StepMetrics& sm) {
    res.history.push_back(sm);
    if (on_step) on_step(sm);
  });
  res.metrics = evaluate(tr.model(), eval_set);
  res.gap = alignment_diagnostic(tr.model(), eval_set, 1000, derive_seed(seed, "gap"));
  if (keep != nullptr) *keep = std::move(tr);
  return res;
}

struct AblationSpec {
  std::string name;
  std::function<void(Config&)> apply;
};

inline const std::vector<AblationSpec>& ablation_specs() {
  static const std::vector<AblationSpec> specs{
      {"full", [](Config&) {}},
      {"no_global", [](Config& c) { c.use_global = false; }},
      {"no_local", [](Config& c) { c.use_local = false; }},
      {"no_contrastive", [](Config& c) { c.gamma2 = 0.0; }},
      {"no_classification", [](Config& c) { c.gamma3 = 0.0; }},
      {"no_memory", [](Config& c) { c.memory_mode = MemoryMode::Off; }},
      {"aug_none", [](Config& c) { c.aug_mode = AugMode::None; }},
      {"aug_dropout", [](Config& c) { c.aug_mode = AugMode::Dropout; }},
      {"aug_noise", [](Config& c) { c.aug_mode = AugMode::Noise; }},
  };
  return specs;
}

inline const AblationSpec& ablation_spec(const std::string& name) {
  for (const auto& s : ablation_specs())
    if (s.name == name) return s;
  throw ConfigError("unknown ablation variant '" + name + "'");
}

inline Config apply_variant(const Config& base, const std::string& name) {
  Config c = base;
  ablation_spec(name).apply(c);
  return c;
}

inline std::vector<std::string> ablation_suite(const std::string& suite) {
  if (suite == "table5") return {"full", "no_global", "no_local", "no_contrastive", "no_classification", "no_memory"};
  if (suite == "table6") return {"aug_none", "aug_dropout", "aug_noise"};
  throw ConfigError("unknown ablation suite '" + suite + "' (expected table5 or table6)");
}

/// Seed of replicate i for base seed b.
inline std::uint64_t replicate_seed(std::uint64_t base, int i) { return base + static_cast<std::uint64_t>(i); }

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

struct AblationRow {
  std::string variant;
  std::vector<std::uint64_t> seeds;
  std::vector<RunResult> runs;

  std::vector<double> values(const std::function<double(const RunResult&)>& f) const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(f(r));
    return v;
  }
  MeanStd bleu1() const { return mean_std(values([](const RunResult& r) { return r.metrics.bleu1; })); }
  MeanStd bleu4() const { return mean_std(values([](const RunResult& r) { return r.metrics.bleu4; })); }
  MeanStd rougeL() const { return mean_std(values([](const RunResult& r) { return r.metrics.rougeL; })); }
  MeanStd ce_macro_f1() const { return mean_std(values([](const RunResult& r) { return r.metrics.ce.macro_f1; })); }
  MeanStd ce_micro_f1() const { return mean_std(values([](const RunResult& r) { return r.metrics.ce.micro_f1; })); }
  MeanStd gap() const { return mean_std(values([](const RunResult& r) { return r.gap.gap; })); }
};

using AblationTable = std::vector<AblationRow>;

using RunCallback = std::function<void(const std::string& variant, std::uint64_t seed, const RunResult&)>;

template <typename T = float>
AblationTable run_ablation(const std::vector<std::string>& variants, const Config& base,
                           const synth::UnpairedCorpus& corpus, const std::vector<std::uint64_t>& seeds,
                           const RunCallback& on_run = {}) {
  if (seeds.empty()) throw ConfigError("ablation: at least one seed is required");
  for (const auto& v : variants) ablation_spec(v);
  const auto eval_set = synth::build_eval_set(corpus.manifest, base.n_eval);
  AblationTable table;
  for (const auto& v : variants) {
    AblationRow row;
    row.variant = v;
    const Config cfg = apply_variant(base, v);
    for (auto s : seeds) {
      row.seeds.push_back(s);
      row.runs.push_back(train_and_evaluate<T>(cfg, s, corpus, eval_set));
      if (on_run) on_run(v, s, row.runs.back());
    }
    table.push_back(std::move(row));
  }
  return table;
}

inline std::string ablation_csv(const AblationTable& table) {
  std::ostringstream s;
  s.precision(8);
  s << "variant,runs,bleu1_mean,bleu1_std,bleu4_mean,bleu4_std,rougeL_mean,rougeL_std,ce_macro_f1_mean,ce_macro_f1_std,"
       "ce_micro_f1_mean,ce_micro_f1_std,gap_mean,gap_std\n";
  for (const auto& r : table) {
    s << r.variant << ',' << r.runs.size();
    for (const auto& m : {r.bleu1(), r.bleu4(), r.rougeL(), r.ce_macro_f1(), r.ce_micro_f1(), r.gap()})
      s << ',' << m.mean << ',' << m.std;
    s << '\n';
  }
  return s.str();
}

inline std::string ablation_text(const AblationTable& table) {
  std::ostringstream s;
  char line[256];
  std::snprintf(line, sizeof line, "%-18s %-17s %-17s %-17s %-17s %-17s\n", "variant", "BLEU-1", "BLEU-4", "ROUGE-L",
                "CE macro-F1", "CE micro-F1");
  s << line;
  auto cell = [](const MeanStd& m) {
    char b[32];
    std::snprintf(b, sizeof b, "%.3f +- %.3f", m.mean, m.std);
    return std::string(b);
  };
  for (const auto& r : table) {
    std::snprintf(line, sizeof line, "%-18s %-17s %-17s %-17s %-17s %-17s\n", r.variant.c_str(), cell(r.bleu1()).c_str(),
                  cell(r.bleu4()).c_str(), cell(r.rougeL()).c_str(), cell(r.ce_macro_f1()).c_str(),
                  cell(r.ce_micro_f1()).c_str());
    s << line;
  }
  return s.str();
}

}  // namespace medrat
