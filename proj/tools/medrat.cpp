// medrat command-line entry point: synth, train, eval, ablate, infer.
//
// Exit codes: 0 success, 1 domain error (bad config, bad input, training
// failure), 2 usage error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "medrat/evalkit.hpp"
#include "medrat/version.hpp"

namespace fs = std::filesystem;
using namespace medrat;

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// --seed beats MEDRAT_BASE_SEED beats the config file.
void apply_seed(Config& cfg, const std::optional<std::uint64_t>& flag) {
  if (flag) {
    cfg.seed = *flag;
    return;
  }
  if (const char* env = std::getenv("MEDRAT_BASE_SEED"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (end == nullptr || *end != '\0') throw ConfigError("MEDRAT_BASE_SEED must be an unsigned integer");
    cfg.seed = v;
  }
}

Config resolve_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  Config cfg = path.empty() ? Config{} : load_config(path);
  apply_seed(cfg, seed);
  return cfg;
}

/// One manifest per run directory, written before any other output and
/// completed when the command finishes.
class RunManifest {
 public:
  RunManifest(const fs::path& dir, const std::string& command, const nlohmann::json& config) : path_(dir / "experiment.json") {
    fs::create_directories(dir);
    j_["command"] = command;
    j_["config"] = config;
    j_["code_version"] = kVersion;
    j_["started"] = utc_now();
    j_["status"] = "running";
    j_["outputs"] = nlohmann::json::array();
    flush();
  }
  void set(const std::string& key, nlohmann::json v) {
    j_[key] = std::move(v);
    flush();
  }
  void output(const fs::path& p) { j_["outputs"].push_back(p.filename().string()); }
  void output_rel(const std::string& p) { j_["outputs"].push_back(p); }
  void finish() {
    j_["status"] = "complete";
    j_["finished"] = utc_now();
    flush();
  }

 private:
  void flush() { io::write_json(path_, j_); }
  fs::path path_;
  nlohmann::json j_;
};

int cmd_synth(const std::string& config_path, const std::string& out, const std::optional<std::uint64_t>& seed) {
  const Config cfg = resolve_config(config_path, seed);
  RunManifest man(out, "synth", to_json(cfg));
  const auto corpus = synth::build_corpus(cfg);
  synth::save_corpus(corpus, out);
  for (const char* f : {synth::files::kManifest, synth::files::kReports, synth::files::kImages, synth::files::kImageIndex})
    man.output_rel(f);
  const auto hash = synth::corpus_hash(out);
  man.set("corpus_hash", hash);
  man.finish();
  std::printf("corpus: %d reports, %d images -> %s (sha256 %s)\n", cfg.n_reports, cfg.n_images, out.c_str(), hash.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& corpus_dir, const std::string& out,
              const std::optional<std::uint64_t>& seed) {
  const Config cfg = resolve_config(config_path, seed);
  const auto corpus = synth::load_corpus(corpus_dir);
  const auto hash = synth::corpus_hash(corpus_dir);
  RunManifest man(out, "train", to_json(cfg));
  man.set("corpus", fs::absolute(corpus_dir).string());
  man.set("corpus_hash", hash);

  Trainer<float> tr(cfg, cfg.seed);
  tr.set_corpus_hash(hash);
  const auto pool = cfg.paired_fraction > 0.0 ? synth::build_paired_pool(corpus.manifest, cfg.paired_fraction)
                                              : std::vector<synth::PairedRecord>{};
  io::JsonLinesWriter log(fs::path(out) / "metrics.jsonl");
  man.output_rel("metrics.jsonl");
  tr.train(corpus, pool, [&](const StepMetrics& sm) {
    log.write(to_json(sm));
    if (sm.step % cfg.log_every == 0)
      std::fprintf(stderr, "step %lld total %.4f (lang %.4f, contrast %.4f, class %.4f)\n",
                   static_cast<long long>(sm.step), sm.total, sm.l_lang, sm.l_contrast, sm.l_class);
    if (cfg.checkpoint_every > 0 && sm.step % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoints/step_%06lld.ckpt", static_cast<long long>(sm.step));
      tr.save(fs::path(out) / name);
      man.output_rel(name);
    }
  });
  tr.save(fs::path(out) / "model.ckpt");
  man.output_rel("model.ckpt");
  man.set("steps", tr.step());
  man.finish();
  std::printf("trained %lld steps -> %s\n", static_cast<long long>(tr.step()), (fs::path(out) / "model.ckpt").c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus_dir, const std::string& out, bool dump_memory,
             int attention_samples) {
  auto tr = Trainer<float>::load(checkpoint);
  const auto corpus = synth::load_corpus(corpus_dir);
  const auto hash = synth::corpus_hash(corpus_dir);
  tr.check_compatible(corpus.manifest);
  RunManifest man(out, "eval", to_json(tr.config()));
  man.set("checkpoint", fs::absolute(checkpoint).string());
  man.set("corpus_hash", hash);
  if (!tr.corpus_hash().empty() && tr.corpus_hash() != hash)
    std::fprintf(stderr, "warning: checkpoint was trained on a different corpus (%s)\n", tr.corpus_hash().c_str());

  const auto eval_set = synth::build_eval_set(corpus.manifest, tr.config().n_eval);
  std::vector<synth::Tokens> generated;
  auto& model = tr.model();
  const auto m = evaluate(model, eval_set, &generated);
  const auto gap = alignment_diagnostic(model, eval_set, 1000, derive_seed(tr.seed(), "gap"));
  auto j = to_json(m);
  j["alignment"] = to_json(gap);
  const fs::path dir(out);
  io::write_json(dir / "metrics.json", j);
  io::write_file(dir / "metrics.csv", metrics_csv(m));
  {
    io::JsonLinesWriter g(dir / "generated.jsonl");
    for (std::size_t i = 0; i < generated.size(); ++i)
      g.write({{"index", i},
               {"generated", synth::detokenize(generated[i])},
               {"reference", synth::detokenize(eval_set[i].tokens)}});
  }
  for (const char* f : {"metrics.json", "metrics.csv", "generated.jsonl"}) man.output_rel(f);
  if (dump_memory) {
    io::write_file(dir / "memory_usage.csv", memory_usage_csv(model, eval_set));
    man.output_rel("memory_usage.csv");
  }
  for (int k = 0; k < attention_samples && k < static_cast<int>(eval_set.size()); ++k) {
    const auto maps = export_attention_maps(model, eval_set[static_cast<std::size_t>(k)].grid);
    const std::string sub = "attention/sample_" + std::to_string(k);
    write_attention_maps(maps, model.grid_side(), dir / sub);
    man.output_rel(sub);
  }
  man.finish();
  std::printf("BLEU-1 %.4f  BLEU-4 %.4f  ROUGE-L %.4f  CE macro-F1 %.4f  micro-F1 %.4f  gap %.4f\n", m.bleu1, m.bleu4,
              m.rougeL, m.ce.macro_f1, m.ce.micro_f1, gap.gap);
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& corpus_dir, const std::string& out,
               const std::string& suite, int seeds, const std::optional<std::uint64_t>& seed) {
  const Config cfg = resolve_config(config_path, seed);
  const auto variants = ablation_suite(suite);
  if (seeds < 1) throw ConfigError("--seeds must be >= 1");
  const auto corpus = corpus_dir.empty() ? synth::build_corpus(cfg) : synth::load_corpus(corpus_dir);
  RunManifest man(out, "ablate", to_json(cfg));
  man.set("suite", suite);
  man.set("corpus_hash", corpus_dir.empty() ? std::string("in-memory:") + std::to_string(cfg.seed)
                                            : synth::corpus_hash(corpus_dir));
  std::vector<std::uint64_t> seed_list;
  for (int i = 0; i < seeds; ++i) seed_list.push_back(replicate_seed(cfg.seed, i));
  man.set("seeds", seed_list);
  io::JsonLinesWriter runs(fs::path(out) / "runs.jsonl");
  man.output_rel("runs.jsonl");
  const auto table = run_ablation(variants, cfg, corpus, seed_list, [&](const std::string& v, std::uint64_t s, const RunResult& r) {
    auto j = to_json(r.metrics);
    j["variant"] = v;
    j["seed"] = s;
    j["alignment"] = to_json(r.gap);
    runs.write(j);
    std::fprintf(stderr, "%s seed %llu: BLEU-1 %.4f CE macro-F1 %.4f\n", v.c_str(), static_cast<unsigned long long>(s),
                 r.metrics.bleu1, r.metrics.ce.macro_f1);
  });
  io::write_file(fs::path(out) / "table.csv", ablation_csv(table));
  const auto text = ablation_text(table);
  io::write_file(fs::path(out) / "table.txt", text);
  man.output_rel("table.csv");
  man.output_rel("table.txt");
  man.finish();
  std::fputs(text.c_str(), stdout);
  return 0;
}

synth::Grid read_image(const std::string& path, int n_p, int d_raw) {
  synth::Grid g(n_p, d_raw);
  if (fs::path(path).extension() == ".json") {
    const auto j = io::read_json(path);
    if (!j.is_array() || static_cast<int>(j.size()) != n_p) throw InputError(path + ": expected " + std::to_string(n_p) + " patches");
    for (int i = 0; i < n_p; ++i) {
      const auto& row = j[static_cast<std::size_t>(i)];
      if (!row.is_array() || static_cast<int>(row.size()) != d_raw) throw InputError(path + ": wrong patch dimension");
      for (int k = 0; k < d_raw; ++k) g(i, k) = row[static_cast<std::size_t>(k)].get<float>();
    }
    return g;
  }
  const std::string blob = io::read_file(path);
  if (blob.size() != static_cast<std::size_t>(g.size()) * sizeof(float))
    throw InputError(path + ": expected " + std::to_string(g.size()) + " little-endian float32 values");
  std::memcpy(g.data(), blob.data(), blob.size());
  return g;
}

int cmd_infer(const std::string& checkpoint, const std::string& image, const std::string& corpus_dir,
              const std::string& out) {
  auto tr = Trainer<float>::load(checkpoint);
  const auto& cfg = tr.config();
  synth::Grid grid;
  std::optional<synth::PairedRecord> ref;
  const bool is_index = !image.empty() && image.find_first_not_of("0123456789") == std::string::npos;
  if (is_index) {
    if (corpus_dir.empty()) throw InputError("--image <index> needs --corpus to locate the held-out set");
    const auto corpus = synth::load_corpus(corpus_dir);
    const auto eval_set = synth::build_eval_set(corpus.manifest, cfg.n_eval);
    const auto idx = std::stoul(image);
    if (idx >= eval_set.size()) throw InputError("--image index beyond the held-out set (" + std::to_string(eval_set.size()) + ")");
    ref = eval_set[idx];
    grid = ref->grid;
  } else {
    grid = read_image(image, cfg.num_patches, cfg.patch_dim);
  }
  std::optional<RunManifest> man;
  if (!out.empty()) {
    man.emplace(out, "infer", to_json(cfg));
    man->set("checkpoint", fs::absolute(checkpoint).string());
    man->set("image", image);
  }
  auto& model = tr.model();
  const auto maps = export_attention_maps(model, grid);
  std::printf("%s\n", synth::detokenize(maps.tokens).c_str());
  if (man) {
    auto j = to_json(maps);
    j["report"] = synth::detokenize(maps.tokens);
    if (ref) j["reference"] = synth::detokenize(ref->tokens);
    io::write_json(fs::path(out) / "infer.json", j);
    man->output_rel("infer.json");
    write_attention_maps(maps, model.grid_side(), fs::path(out) / "attention");
    man->output_rel("attention");
    man->finish();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"medrat: unpaired report generation on a synthetic corpus"};
  app.require_subcommand(1);
  std::string config, out, corpus, checkpoint, suite = "table5", image;
  std::optional<std::uint64_t> seed;
  int seeds = 3;
  int attention_samples = 3;
  bool dump_memory = false;

  auto* synth_cmd = app.add_subcommand("synth", "generate an unpaired corpus");
  synth_cmd->add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);
  synth_cmd->add_option("--out", out, "output corpus directory")->required();
  synth_cmd->add_option("--seed", seed, "base seed");

  auto* train_cmd = app.add_subcommand("train", "train on an unpaired corpus");
  train_cmd->add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--corpus", corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", out, "run directory")->required();
  train_cmd->add_option("--seed", seed, "base seed");

  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on the held-out set");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--corpus", corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--out", out, "output directory")->required();
  eval_cmd->add_flag("--dump-memory", dump_memory, "write memory slot usage");
  eval_cmd->add_option("--attention-samples", attention_samples, "held-out images to export attention maps for")
      ->check(CLI::NonNegativeNumber);

  auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation suite");
  ablate_cmd->add_option("--suite", suite, "table5 or table6")->check(CLI::IsMember({"table5", "table6"}));
  ablate_cmd->add_option("--seeds", seeds, "replicates per variant")->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);
  ablate_cmd->add_option("--corpus", corpus, "corpus directory (generated from the config if absent)")
      ->check(CLI::ExistingDirectory);
  ablate_cmd->add_option("--out", out, "output directory")->required();
  ablate_cmd->add_option("--seed", seed, "base seed");

  auto* infer_cmd = app.add_subcommand("infer", "generate a report for one image");
  infer_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--image", image, "held-out index (with --corpus) or image file (.json or raw float32)")
      ->required();
  infer_cmd->add_option("--corpus", corpus, "corpus directory")->check(CLI::ExistingDirectory);
  infer_cmd->add_option("--out", out, "directory for the JSON record and attention maps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) return cmd_synth(config, out, seed);
    if (*train_cmd) return cmd_train(config, corpus, out, seed);
    if (*eval_cmd) return cmd_eval(checkpoint, corpus, out, dump_memory, attention_samples);
    if (*ablate_cmd) return cmd_ablate(config, corpus, out, suite, seeds, seed);
    if (*infer_cmd) return cmd_infer(checkpoint, image, corpus, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const InputError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 1;
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "training error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
