#pragma once

// Full network: extractors -> memory enrichment -> modality encoder ->
// shared encoder -> attention pooling, with the shared decoder and the
// classification head on top.

#include <string>
#include <vector>

#include "medrat/alignment.hpp"
#include "medrat/config.hpp"
#include "medrat/decoder.hpp"
#include "medrat/memory.hpp"

namespace medrat {

template <typename T>
struct Encoded {
  LocalReps<T> local;
  GlobalRep<T> global;
  /// Memory slots selected for every enriched row (empty when memory is off).
  std::vector<std::vector<Eigen::Index>> memory_slots;
};

template <typename T>
class Model {
 public:
  Model(const Config& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    if (auto bad = validate(cfg); !bad.empty()) throw ConfigError("model: invalid config: " + join_keys(bad));
    Rng rng(init_seed);
    const Eigen::Index d = cfg.d_model;
    report_features = ReportFeatures<T>("report_features", cfg.vocab_size, cfg.max_len, d, rng);
    image_features = ImageFeatures<T>("image_features", cfg.num_patches, cfg.patch_dim, d, rng);
    memory = SharedMemory<T>("memory", d, cfg.memory_slots, cfg.memory_topk, rng);
    report_encoder = EncoderStack<T>("report_encoder", cfg.modality_layers, d, cfg.heads, cfg.ffn_dim, false, rng);
    image_encoder = EncoderStack<T>("image_encoder", cfg.modality_layers, d, cfg.heads, cfg.ffn_dim, false, rng);
    shared_encoder = EncoderStack<T>("shared_encoder", cfg.shared_layers, d, cfg.heads, cfg.ffn_dim, true, rng);
    pool = AttentionPool<T>("pool", d, rng);
    decoder = Decoder<T>("decoder", cfg.vocab_size, cfg.max_len, d, cfg.heads, cfg.ffn_dim, cfg.decoder_layers, rng);
    classifier = ClassifierHead<T>("classifier", d, d, rng);
  }

  const Config& config() const { return cfg_; }
  int grid_side() const {
    return static_cast<int>(std::lround(std::sqrt(static_cast<double>(cfg_.num_patches))));
  }

  /// Modality-specific encoder (E_R or E_I) applied to extracted features,
  /// after per-row memory enrichment when enabled.
  ag::Var<T> encode_modality(const FeatureSeq<T>& fs, std::vector<std::vector<Eigen::Index>>* slots = nullptr) {
    ag::Var<T> x = fs.x;
    if (cfg_.memory_mode == MemoryMode::Local) x = memory.enrich(x, slots);
    auto& enc = fs.modality == Modality::Report ? report_encoder : image_encoder;
    return enc(x, fs.segs, fs.mask);
  }

  /// Shared encoder E_S: identical parameters for both modalities.
  LocalReps<T> encode_shared(const ag::Var<T>& x, const Segments& segs, const std::vector<std::uint8_t>& mask,
                             std::vector<ag::AttentionWeights<T>>* weights = nullptr) {
    return LocalReps<T>{shared_encoder(x, segs, mask, weights), segs, mask};
  }

  GlobalRep<T> aggregate_global(const LocalReps<T>& local,
                                std::vector<std::vector<Eigen::Index>>* slots = nullptr) {
    GlobalRep<T> g = pool(local);
    if (cfg_.memory_mode == MemoryMode::Global) g.z = memory.enrich(g.z, slots);
    return g;
  }

  Encoded<T> encode(const FeatureSeq<T>& fs) {
    Encoded<T> e;
    auto x = encode_modality(fs, &e.memory_slots);
    e.local = encode_shared(x, fs.segs, fs.mask);
    e.global = aggregate_global(e.local, cfg_.memory_mode == MemoryMode::Global ? &e.memory_slots : nullptr);
    return e;
  }

  Encoded<T> encode_reports(ag::Tape<T>& t, const std::vector<const synth::Tokens*>& reports) {
    return encode(report_features(t, reports));
  }

  Encoded<T> encode_images(ag::Tape<T>& t, const std::vector<const ImageView*>& images) {
    return encode(image_features(t, images));
  }

  /// Decoder memory honouring the global/local wiring switches.
  DecoderInput<T> decoder_input(const Encoded<T>& e, const std::vector<std::uint8_t>& keep,
                                const ag::Var<T>& local_values) const {
    return make_decoder_input(e.global, e.local, keep, local_values, cfg_.use_global, cfg_.use_local);
  }

  DecoderInput<T> decoder_input(const Encoded<T>& e) const { return decoder_input(e, e.local.mask, e.local.z); }

  /// Image -> report with no augmentation, greedy decoding.
  std::vector<Generated<T>> generate_from_images(const std::vector<const synth::Grid*>& grids,
                                                 bool keep_attention = false) {
    ag::Tape<T> t(false);
    std::vector<ImageView> views;
    views.reserve(grids.size());
    for (const auto* g : grids) views.push_back(full_view(*g));
    std::vector<const ImageView*> ptrs;
    for (const auto& v : views) ptrs.push_back(&v);
    auto e = encode_images(t, ptrs);
    auto in = decoder_input(e);
    return generate(decoder, in, cfg_.gen_max_len, keep_attention);
  }

  synth::Tokens infer_report(const synth::Grid& grid) { return generate_from_images({&grid}).front().tokens; }

  /// Global representations (detached) for a list of reports or images.
  Matrix<T> report_globals(const std::vector<const synth::Tokens*>& reports) {
    ag::Tape<T> t(false);
    return encode_reports(t, reports).global.z.value();
  }

  Matrix<T> image_globals(const std::vector<const synth::Grid*>& grids) {
    ag::Tape<T> t(false);
    std::vector<ImageView> views;
    for (const auto* g : grids) views.push_back(full_view(*g));
    std::vector<const ImageView*> ptrs;
    for (const auto& v : views) ptrs.push_back(&v);
    return encode_images(t, ptrs).global.z.value();
  }

  nn::ParamRefs<T> parameters() {
    nn::ParamRefs<T> out;
    report_features.collect(out);
    image_features.collect(out);
    memory.collect(out);
    report_encoder.collect(out);
    image_encoder.collect(out);
    shared_encoder.collect(out);
    pool.collect(out);
    decoder.collect(out);
    classifier.collect(out);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += static_cast<std::size_t>(p->size());
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  ReportFeatures<T> report_features;
  ImageFeatures<T> image_features;
  SharedMemory<T> memory;
  EncoderStack<T> report_encoder;
  EncoderStack<T> image_encoder;
  EncoderStack<T> shared_encoder;
  AttentionPool<T> pool;
  Decoder<T> decoder;
  ClassifierHead<T> classifier;

 private:
  Config cfg_;
};

}  // namespace medrat
