#pragma once

// Joint objective, unpaired batch assembly, Adam updates, the optional
// few-shot paired term, and binary checkpoints.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "medrat/io.hpp"
#include "medrat/model.hpp"

namespace medrat {

struct StepMetrics {
  std::int64_t step = 0;
  double l_lang = 0.0;
  double l_contrast = 0.0;
  double l_class = 0.0;
  double total = 0.0;
  double l_paired = 0.0;
  bool paired = false;
};

inline nlohmann::json to_json(const StepMetrics& m) {
  nlohmann::json j;
  j["step"] = m.step;
  j["l_lang"] = m.l_lang;
  j["l_contrast"] = m.l_contrast;
  j["l_class"] = m.l_class;
  j["total"] = m.total;
  if (m.paired) j["l_paired"] = m.l_paired;
  return j;
}

/// gamma1 * L_lang + gamma2 * L_contrast + gamma3 * L_class.
inline double total_loss(double l_lang, double l_contrast, double l_class, const Config& cfg, std::int64_t step = -1) {
  if (!std::isfinite(l_lang) || !std::isfinite(l_contrast) || !std::isfinite(l_class)) {
    std::ostringstream s;
    s << "non-finite loss at step " << step << ": l_lang=" << l_lang << " l_contrast=" << l_contrast
      << " l_class=" << l_class;
    throw TrainingError(s.str());
  }
  return cfg.gamma1 * l_lang + cfg.gamma2 * l_contrast + cfg.gamma3 * l_class;
}

/// Differentiable form; a null component counts as zero.
template <typename T>
ag::Var<T> total_loss(ag::Tape<T>& t, const ag::Var<T>* l_lang, const ag::Var<T>* l_contrast,
                      const ag::Var<T>* l_class, const Config& cfg, std::int64_t step = -1) {
  auto val = [](const ag::Var<T>* v) { return v != nullptr ? static_cast<double>(v->item()) : 0.0; };
  total_loss(val(l_lang), val(l_contrast), val(l_class), cfg, step);
  std::vector<ag::Var<T>> terms;
  if (l_lang != nullptr && cfg.gamma1 != 0.0) terms.push_back(ag::scale(*l_lang, static_cast<T>(cfg.gamma1)));
  if (l_contrast != nullptr && cfg.gamma2 != 0.0) terms.push_back(ag::scale(*l_contrast, static_cast<T>(cfg.gamma2)));
  if (l_class != nullptr && cfg.gamma3 != 0.0) terms.push_back(ag::scale(*l_class, static_cast<T>(cfg.gamma3)));
  if (terms.empty()) return t.constant(Matrix<T>::Zero(1, 1));
  ag::Var<T> out = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) out = ag::add(out, terms[i]);
  return out;
}

/// Adam with bias correction and no schedule.
template <typename T>
struct Adam {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::vector<Matrix<T>> m, v;

  void step(const nn::ParamRefs<T>& params) {
    if (m.empty()) {
      for (auto* p : params) {
        m.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
        v.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      }
    }
    if (m.size() != params.size()) throw TrainingError("adam: parameter list changed");
    ++t;
    const T c1 = static_cast<T>(1.0 - std::pow(beta1, static_cast<double>(t)));
    const T c2 = static_cast<T>(1.0 - std::pow(beta2, static_cast<double>(t)));
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T a = static_cast<T>(lr), e = static_cast<T>(eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& g = params[i]->grad;
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g.cwiseAbs2();
      params[i]->value.array() -= a * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + e);
    }
  }
};

/// Model, optimizer and the training random stream.
template <typename T>
class Trainer {
 public:
  Trainer(const Config& cfg, std::uint64_t seed)
      : cfg_(cfg), model_(cfg, derive_seed(seed, "init")), rng_(derive_seed(seed, "train")), seed_(seed) {
    opt_.lr = cfg.learning_rate;
  }

  Model<T>& model() { return model_; }
  const Config& config() const { return cfg_; }
  std::int64_t step() const { return step_; }
  std::uint64_t seed() const { return seed_; }
  const std::string& corpus_hash() const { return corpus_hash_; }
  void set_corpus_hash(std::string h) { corpus_hash_ = std::move(h); }
  Adam<T>& optimizer() { return opt_; }
  Rng& rng() { return rng_; }

  AugmentationConfig augmentation() const { return {cfg_.aug_mode, cfg_.drop_p, cfg_.noise_sigma}; }
  ImageAugmentConfig view_augmentation() const { return {cfg_.crop_fraction, cfg_.blur, cfg_.contrast, cfg_.jitter}; }

  /// One update on N reports and N images drawn independently. A non-empty
  /// `pairs` adds the image-conditioned language loss, each pair weighted
  /// like one batch sample.
  StepMetrics train_step(const std::vector<const synth::ReportRecord*>& reports,
                         const std::vector<const synth::ImageRecord*>& images,
                         const std::vector<const synth::PairedRecord*>& pairs = {}) {
    ag::Tape<T> t(true);
    model_.zero_grad();
    StepMetrics sm;
    sm.step = step_ + 1;
    auto total = objective(t, reports, images, sm);
    if (!pairs.empty()) {
      auto lp = paired_loss(t, pairs);
      sm.l_paired = static_cast<double>(lp.item());
      sm.paired = true;
      if (!std::isfinite(sm.l_paired)) throw TrainingError("non-finite paired loss at step " + std::to_string(sm.step));
      total = ag::add(total, ag::scale(lp, static_cast<T>(cfg_.gamma1 * static_cast<double>(pairs.size()) / static_cast<double>(reports.size()))));
      sm.total = static_cast<double>(total.item());
    }
    t.backward(total);
    opt_.step(model_.parameters());
    ++step_;
    return sm;
  }

  /// Joint loss of one unpaired batch on `t`, without updating anything
  /// except the training random stream. Fills the loss fields of `sm`.
  ag::Var<T> objective(ag::Tape<T>& t, const std::vector<const synth::ReportRecord*>& reports,
                       const std::vector<const synth::ImageRecord*>& images, StepMetrics& sm) {
    if (reports.empty() || images.empty()) throw InputError("train_step: both modality streams need samples");

    std::vector<const synth::Tokens*> toks;
    for (const auto* r : reports) toks.push_back(&r->tokens);
    auto e_r = model_.encode_reports(t, toks);

    ag::Var<T> l_lang, l_con, l_cls;
    const bool want_lang = cfg_.gamma1 != 0.0, want_con = cfg_.gamma2 != 0.0, want_cls = cfg_.gamma3 != 0.0;

    if (want_lang) l_lang = auto_encoding_loss(e_r, toks);

    if (want_con || want_cls) {
      std::vector<ImageView> originals;
      for (const auto* im : images) originals.push_back(full_view(im->grid));
      std::vector<const ImageView*> optr;
      for (const auto& v : originals) optr.push_back(&v);
      auto e_i = model_.encode_images(t, optr);

      const bool need_views = want_con || cfg_.classify_views;
      AlignmentBatch<T> views;
      if (need_views) views = view_batch(t, reports, images);
      if (want_cls) {
        std::vector<synth::Labels> y;
        for (const auto* r : reports) y.push_back(r->labels);
        for (const auto* im : images) y.push_back(im->labels);
        std::vector<ag::Var<T>> parts{e_r.global.z, e_i.global.z};
        if (cfg_.classify_views) {
          parts.push_back(views.z);
          y.insert(y.end(), views.labels.begin(), views.labels.end());
        }
        l_cls = classification_loss(model_.classifier(ag::concat_rows<T>(parts)), y);
      }
      if (want_con) l_con = contrastive_loss(views, static_cast<T>(cfg_.tau));
    }

    auto total = total_loss(t, want_lang ? &l_lang : nullptr, want_con ? &l_con : nullptr,
                            want_cls ? &l_cls : nullptr, cfg_, sm.step);
    sm.l_lang = want_lang ? static_cast<double>(l_lang.item()) : 0.0;
    sm.l_contrast = want_con ? static_cast<double>(l_con.item()) : 0.0;
    sm.l_class = want_cls ? static_cast<double>(l_cls.item()) : 0.0;
    sm.total = static_cast<double>(total.item());
    return total;
  }

  /// Pairs mixed into a batch of n: the paired fraction of n, at least one.
  std::size_t pairs_per_step(std::size_t n) const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg_.paired_fraction * static_cast<double>(n))));
  }

  /// Mean language loss of true reports decoded from unaugmented paired images.
  ag::Var<T> paired_loss(ag::Tape<T>& t, const std::vector<const synth::PairedRecord*>& pairs) {
    std::vector<ImageView> views;
    for (const auto* p : pairs) views.push_back(full_view(p->grid));
    std::vector<const ImageView*> vptr;
    for (const auto& v : views) vptr.push_back(&v);
    auto e_i = model_.encode_images(t, vptr);
    std::vector<const synth::Tokens*> toks;
    for (const auto* p : pairs) toks.push_back(&p->tokens);
    return decode_loss(model_.decoder_input(e_i), toks);
  }

  /// Joint update with a non-empty paired subset.
  StepMetrics train_paired_step(const std::vector<const synth::ReportRecord*>& reports,
                                const std::vector<const synth::ImageRecord*>& images,
                                const std::vector<const synth::PairedRecord*>& pairs) {
    if (pairs.empty()) throw ConfigError("paired mode enabled with zero pairs");
    return train_step(reports, images, pairs);
  }

  /// L_lang for a set of token sequences given decoder memory.
  ag::Var<T> decode_loss(const DecoderInput<T>& in, const std::vector<const synth::Tokens*>& toks) {
    std::vector<std::vector<int>> prefixes;
    std::vector<int> targets;
    for (const auto* tk : toks) {
      auto [p, y] = shift_for_teacher_forcing(*tk);
      prefixes.push_back(std::move(p));
      targets.insert(targets.end(), y.begin(), y.end());
    }
    return language_loss(model_.decoder.logits(in, prefixes), targets);
  }

  /// Teacher-forced reconstruction of the reports from their own
  /// (augmented) representations.
  ag::Var<T> auto_encoding_loss(const Encoded<T>& e_r, const std::vector<const synth::Tokens*>& toks) {
    auto aug = augment_locals(e_r.local, augmentation(), rng_);
    return decode_loss(model_.decoder_input(e_r, aug.keep, aug.z), toks);
  }

  /// Two augmented views of every report and image; rows 2k and 2k + 1 are
  /// siblings. Reports come first.
  AlignmentBatch<T> view_batch(ag::Tape<T>& t, const std::vector<const synth::ReportRecord*>& reports,
                               const std::vector<const synth::ImageRecord*>& images) {
    AlignmentBatch<T> b;
    std::vector<synth::Tokens> rviews;
    for (std::size_t k = 0; k < reports.size(); ++k)
      for (int v = 0; v < 2; ++v) {
        rviews.push_back(shuffle_sentences(reports[k]->tokens, rng_));
        b.labels.push_back(reports[k]->labels);
        b.view_of.push_back(static_cast<int>(k));
        b.modality.push_back(Modality::Report);
      }
    std::vector<ImageView> iviews;
    const auto icfg = view_augmentation();
    const int side = model_.grid_side();
    for (std::size_t k = 0; k < images.size(); ++k)
      for (int v = 0; v < 2; ++v) {
        iviews.push_back(augment_image(images[k]->grid, side, icfg, rng_));
        b.labels.push_back(images[k]->labels);
        b.view_of.push_back(static_cast<int>(reports.size() + k));
        b.modality.push_back(Modality::Image);
      }
    std::vector<const synth::Tokens*> rp;
    for (const auto& r : rviews) rp.push_back(&r);
    std::vector<const ImageView*> ip;
    for (const auto& v : iviews) ip.push_back(&v);
    auto zr = model_.encode_reports(t, rp).global.z;
    auto zi = model_.encode_images(t, ip).global.z;
    b.z = ag::concat_rows<T>({zr, zi});
    return b;
  }

  using StepCallback = std::function<void(const StepMetrics&)>;

  /// Epoch loop over independent shuffles of the two streams. The paired
  /// pool, when given, mixes paired samples into every step.
  void train(const synth::UnpairedCorpus& corpus, const std::vector<synth::PairedRecord>& paired_pool = {},
             const StepCallback& on_step = {}) {
    check_compatible(corpus.manifest);
    if (cfg_.paired_fraction > 0.0 && paired_pool.empty()) throw ConfigError("paired mode enabled with zero pairs");
    const std::size_t n = static_cast<std::size_t>(cfg_.batch_size);
    const std::size_t nr = corpus.reports.size(), ni = corpus.images.size();
    if (nr == 0 || ni == 0) throw InputError("train: corpus has an empty modality stream");
    const std::size_t steps = std::max<std::size_t>(1, std::min(nr, ni) / n);
    std::vector<std::size_t> ri(nr), ii(ni);
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      std::iota(ri.begin(), ri.end(), 0);
      std::iota(ii.begin(), ii.end(), 0);
      std::shuffle(ri.begin(), ri.end(), rng_);
      std::shuffle(ii.begin(), ii.end(), rng_);
      for (std::size_t s = 0; s < steps; ++s) {
        std::vector<const synth::ReportRecord*> rb;
        std::vector<const synth::ImageRecord*> ib;
        for (std::size_t k = s * n; k < std::min(nr, (s + 1) * n); ++k) rb.push_back(&corpus.reports[ri[k]]);
        for (std::size_t k = s * n; k < std::min(ni, (s + 1) * n); ++k) ib.push_back(&corpus.images[ii[k]]);
        std::vector<const synth::PairedRecord*> pb;
        if (!paired_pool.empty()) {
          const std::size_t np = std::min(pairs_per_step(n), paired_pool.size());
          for (std::size_t k = 0; k < np; ++k) pb.push_back(&paired_pool[rng_() % paired_pool.size()]);
        }
        auto sm = train_step(rb, ib, pb);
        if (on_step) on_step(sm);
      }
    }
  }

  void check_compatible(const synth::CorpusManifest& m) const {
    std::vector<std::string> bad;
    if (m.vocab_size != cfg_.vocab_size) bad.emplace_back("vocab_size");
    if (m.max_len != cfg_.max_len) bad.emplace_back("max_len");
    if (m.num_patches != cfg_.num_patches) bad.emplace_back("num_patches");
    if (m.patch_dim != cfg_.patch_dim) bad.emplace_back("patch_dim");
    if (!bad.empty()) throw ConfigError("config does not match the corpus: " + join_keys(bad));
  }

  // Checkpoint layout: 8-byte magic, u64 header length, JSON header, then
  // float32 little-endian parameter values, Adam first and second moments.
  static constexpr char kMagic[9] = "MEDRATCK";

  void save(const std::filesystem::path& path) {
    auto params = model_.parameters();
    nlohmann::json h;
    h["config"] = to_json(cfg_);
    h["seed"] = seed_;
    h["step"] = step_;
    h["adam_step"] = opt_.t;
    h["corpus_hash"] = corpus_hash_;
    std::ostringstream rs;
    rs << rng_;
    h["rng"] = rs.str();
    nlohmann::json plist = nlohmann::json::array();
    for (auto* p : params) plist.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
    h["params"] = plist;
    h["has_moments"] = !opt_.m.empty();
    const std::string header = h.dump();
    std::string blob(kMagic, 8);
    const std::uint64_t len = header.size();
    blob.append(reinterpret_cast<const char*>(&len), sizeof len);
    blob += header;
    auto put = [&](const Matrix<T>& x) {
      std::vector<float> f(static_cast<std::size_t>(x.size()));
      for (Eigen::Index i = 0; i < x.size(); ++i) f[static_cast<std::size_t>(i)] = static_cast<float>(x.data()[i]);
      blob.append(reinterpret_cast<const char*>(f.data()), f.size() * sizeof(float));
    };
    for (auto* p : params) put(p->value);
    for (const auto& x : opt_.m) put(x);
    for (const auto& x : opt_.v) put(x);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    io::write_file(path, blob);
  }

  static Trainer load(const std::filesystem::path& path) {
    const std::string blob = io::read_file(path);
    if (blob.size() < 16 || blob.compare(0, 8, kMagic, 8) != 0) throw InputError(path.string() + ": not a checkpoint");
    std::uint64_t len = 0;
    std::memcpy(&len, blob.data() + 8, sizeof len);
    if (16 + len > blob.size()) throw InputError(path.string() + ": truncated header");
    nlohmann::json h;
    try {
      h = nlohmann::json::parse(blob.substr(16, len));
    } catch (const nlohmann::json::parse_error&) {
      throw InputError(path.string() + ": malformed header");
    }
    Trainer tr(config_from_json(h.at("config")), h.at("seed").get<std::uint64_t>());
    tr.step_ = h.at("step").get<std::int64_t>();
    tr.opt_.t = h.at("adam_step").get<std::int64_t>();
    tr.corpus_hash_ = h.at("corpus_hash").get<std::string>();
    std::istringstream rs(h.at("rng").get<std::string>());
    rs >> tr.rng_;
    auto params = tr.model_.parameters();
    const auto& plist = h.at("params");
    if (plist.size() != params.size()) throw InputError(path.string() + ": parameter count mismatch");
    std::size_t off = 16 + len;
    auto get = [&](Matrix<T>& x) {
      const std::size_t bytes = static_cast<std::size_t>(x.size()) * sizeof(float);
      if (off + bytes > blob.size()) throw InputError(path.string() + ": truncated parameter data");
      std::vector<float> f(static_cast<std::size_t>(x.size()));
      std::memcpy(f.data(), blob.data() + off, bytes);
      off += bytes;
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<T>(f[static_cast<std::size_t>(i)]);
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& e = plist[i];
      if (e.at("name").get<std::string>() != params[i]->name || e.at("rows").get<Eigen::Index>() != params[i]->value.rows() ||
          e.at("cols").get<Eigen::Index>() != params[i]->value.cols())
        throw InputError(path.string() + ": parameter '" + params[i]->name + "' does not match the model");
      get(params[i]->value);
    }
    if (h.at("has_moments").get<bool>()) {
      for (auto* p : params) tr.opt_.m.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      for (auto* p : params) tr.opt_.v.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      for (auto& x : tr.opt_.m) get(x);
      for (auto& x : tr.opt_.v) get(x);
    }
    if (off != blob.size()) throw InputError(path.string() + ": trailing bytes");
    return tr;
  }

 private:
  Config cfg_;
  Model<T> model_;
  Adam<T> opt_;
  Rng rng_;
  std::uint64_t seed_ = 0;
  std::int64_t step_ = 0;
  std::string corpus_hash_;
};

/// F_I -> enrich -> E_I -> E_S -> pooling -> greedy decode, no augmentation.
template <typename T>
synth::Tokens infer_report(Model<T>& model, const synth::Grid& image) {
  return model.infer_report(image);
}

}  // namespace medrat
