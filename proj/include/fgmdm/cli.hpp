#pragma once

// Command-line plumbing: run configuration with profiles and strict JSON
// parsing, per-command manifests, and the subcommand implementations behind
// the `fgmdm` binary. Everything here is deterministic given the effective
// configuration and seeds, so reruns reproduce outputs byte for byte.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <fgmdm/bvh.hpp>
#include <fgmdm/common.hpp>
#include <fgmdm/corpus.hpp>
#include <fgmdm/dataset.hpp>
#include <fgmdm/evaluation.hpp>
#include <fgmdm/llm_client.hpp>
#include <fgmdm/sampling.hpp>
#include <fgmdm/training.hpp>

namespace fgmdm {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  std::string profile = "desk";

  struct SkeletonSection {
    std::string source = "default";
  } skeleton;

  struct DatasetSection {
    int variations = 21;  // ~256 sequences with the 12 stock templates
    std::uint64_t seed = 1234;
  } dataset;

  DenoiserConfig model;  // plus d_text below; conditioning derives from both
  int d_text = 64;
  DiffusionConfig diffusion;
  TrainingConfig training;

  struct EvaluationSection {
    int hidden = 64;
    int d_eval = 32;
    int batch = 16;
    int steps = 500;
    double lr = 1e-3;
    double temperature = 0.07;
    int diversity_pairs = 32;
    int n_gen = 128;
    std::uint64_t seed = 0;
  } evaluation;

  struct ParaphraseSection {
    std::string endpoint = "https://api.openai.com/v1/chat/completions";
    std::string model = "gpt-3.5-turbo";
    bool offline = true;
    std::string cache;  // empty = in-memory cache only
    double timeout_seconds = 30;
    int max_retries = 4;
    int max_in_flight = 2;
    int backoff_base_ms = 500;
  } paraphrase;

  ConditioningConfig conditioning() const {
    ConditioningConfig c;
    c.d_model = model.d_model;
    c.d_text = d_text;
    c.total_steps = diffusion.total_steps;
    return c;
  }

  EvaluatorConfig evaluator_config() const {
    EvaluatorConfig c;
    c.feature_width = model.feature_width;
    c.d_text = d_text;
    c.hidden = evaluation.hidden;
    c.d_eval = evaluation.d_eval;
    c.batch = evaluation.batch;
    c.steps = evaluation.steps;
    c.lr = evaluation.lr;
    c.temperature = evaluation.temperature;
    return c;
  }

  LlmClientConfig llm_config() const {
    LlmClientConfig c;
    c.endpoint = paraphrase.endpoint;
    c.model = paraphrase.model;
    c.timeout_seconds = paraphrase.timeout_seconds;
    c.max_retries = paraphrase.max_retries;
    c.max_in_flight = paraphrase.max_in_flight;
    c.backoff_base_ms = paraphrase.backoff_base_ms;
    return c;
  }

  void validate() const {
    if (profile != "desk" && profile != "paper")
      throw ConfigError("config: profile must be 'desk' or 'paper', got '" +
                        profile + "'");
    if (skeleton.source != "default")
      throw ConfigError("config: skeleton.source only supports 'default'");
    if (dataset.variations < 1)
      throw ConfigError("config: dataset.variations must be >= 1");
    auto check = [](const char* section, auto&& fn) {
      try {
        fn();
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("config section '") + section +
                          "': " + e.what());
      }
    };
    check("model", [&] { model.validate(); });
    check("model", [&] { conditioning().validate(); });
    check("diffusion", [&] { diffusion.validate(); });
    check("training", [&] { training.validate(); });
    check("evaluation", [&] { evaluator_config().validate(); });
    check("paraphrase", [&] { llm_config().validate(); });
    if (evaluation.n_gen < 2)
      throw ConfigError("config: evaluation.n_gen must be >= 2");
    if (evaluation.diversity_pairs < 1)
      throw ConfigError("config: evaluation.diversity_pairs must be >= 1");
    const int expected = flat_width(default_skeleton().joint_count());
    if (model.feature_width != expected)
      throw ConfigError("config: model.feature_width must be " +
                        std::to_string(expected) + " for the default skeleton");
  }
};

/// Fully-specified base configuration for a named profile. `desk` is sized
/// for CPU minutes; `paper` mirrors the published model dimensions.
inline RunConfig profile_defaults(const std::string& name) {
  RunConfig c;
  c.profile = name;
  if (name == "desk") {
    c.model.layers = 2;
    c.model.heads = 2;
    c.model.d_model = 64;
    c.model.ff = 0;  // 4 * d_model
    c.model.dropout = 0.1;
    c.model.n_max = 64;
    c.model.feature_width = 67;
    c.model.use_part_tokens = true;
    c.d_text = 64;
    c.diffusion.total_steps = 100;
    c.diffusion.schedule = "cosine";
    c.diffusion.guidance_scale = 2.5;
    c.diffusion.dropout_p = 0.1;
    c.training.batch_size = 16;
    c.training.total_steps = 2000;
    c.training.lr = 1e-3;
    c.training.checkpoint_interval = 500;
  } else if (name == "paper") {
    c.model.layers = 8;
    c.model.heads = 4;
    c.model.d_model = 512;
    c.model.ff = 0;
    c.model.dropout = 0.1;
    c.model.n_max = 196;
    c.model.feature_width = 67;
    c.model.use_part_tokens = true;
    c.d_text = 256;
    c.diffusion.total_steps = 1000;
    c.diffusion.schedule = "cosine";
    c.diffusion.guidance_scale = 2.5;
    c.diffusion.dropout_p = 0.1;
    c.training.batch_size = 64;
    c.training.total_steps = 100000;
    c.training.lr = 1e-4;
    c.training.checkpoint_interval = 5000;
    c.evaluation.steps = 2000;
  } else {
    throw ConfigError("config: profile must be 'desk' or 'paper', got '" +
                      name + "'");
  }
  return c;
}

namespace cli_detail {

/// Strict reader for one JSON config section: every key must be known and
/// well-typed, and errors name the offending dotted key.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& obj, std::string section)
      : obj_(obj), section_(std::move(section)) {
    if (!obj_.is_object())
      throw ConfigError("config: section '" + section_ + "' must be an object");
  }

  template <typename T>
  void take(const char* key, T& dst) {
    taken_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      dst = obj_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: invalid value for " + section_ + "." + key);
    }
  }

  void finish() const {
    for (const auto& item : obj_.items())
      if (!taken_.count(item.key()))
        throw ConfigError("config: unknown key " + section_ + "." + item.key());
  }

 private:
  const nlohmann::json& obj_;
  std::string section_;
  std::set<std::string> taken_;
};

}  // namespace cli_detail

/// Overlays file values onto `c`. Unknown sections or keys and badly typed
/// values raise ConfigError naming the offending key.
inline void apply_config_json(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  static const std::set<std::string> known = {
      "profile",  "skeleton",   "dataset",    "model",
      "diffusion", "training",  "evaluation", "paraphrase"};
  for (const auto& item : j.items())
    if (!known.count(item.key()))
      throw ConfigError("config: unknown section '" + item.key() + "'");

  if (j.contains("profile")) {
    if (!j.at("profile").is_string())
      throw ConfigError("config: invalid value for profile");
    c.profile = j.at("profile").get<std::string>();
  }
  if (j.contains("skeleton")) {
    cli_detail::SectionReader r(j.at("skeleton"), "skeleton");
    r.take("source", c.skeleton.source);
    r.finish();
  }
  if (j.contains("dataset")) {
    cli_detail::SectionReader r(j.at("dataset"), "dataset");
    r.take("variations", c.dataset.variations);
    r.take("seed", c.dataset.seed);
    r.finish();
  }
  if (j.contains("model")) {
    cli_detail::SectionReader r(j.at("model"), "model");
    r.take("layers", c.model.layers);
    r.take("heads", c.model.heads);
    r.take("d_model", c.model.d_model);
    r.take("ff", c.model.ff);
    r.take("dropout", c.model.dropout);
    r.take("n_max", c.model.n_max);
    r.take("feature_width", c.model.feature_width);
    r.take("use_part_tokens", c.model.use_part_tokens);
    r.take("d_text", c.d_text);
    r.finish();
  }
  if (j.contains("diffusion")) {
    cli_detail::SectionReader r(j.at("diffusion"), "diffusion");
    r.take("total_steps", c.diffusion.total_steps);
    r.take("schedule", c.diffusion.schedule);
    r.take("guidance_scale", c.diffusion.guidance_scale);
    r.take("dropout_p", c.diffusion.dropout_p);
    r.finish();
  }
  if (j.contains("training")) {
    cli_detail::SectionReader r(j.at("training"), "training");
    r.take("batch_size", c.training.batch_size);
    r.take("total_steps", c.training.total_steps);
    r.take("lr", c.training.lr);
    r.take("grad_clip", c.training.grad_clip);
    r.take("checkpoint_interval", c.training.checkpoint_interval);
    r.take("seed", c.training.seed);
    r.take("standardize_features", c.training.standardize_features);
    r.take("lambda_pos", c.training.weights.lambda_pos);
    r.take("lambda_vel", c.training.weights.lambda_vel);
    r.take("lambda_foot", c.training.weights.lambda_foot);
    r.finish();
  }
  if (j.contains("evaluation")) {
    cli_detail::SectionReader r(j.at("evaluation"), "evaluation");
    r.take("hidden", c.evaluation.hidden);
    r.take("d_eval", c.evaluation.d_eval);
    r.take("batch", c.evaluation.batch);
    r.take("steps", c.evaluation.steps);
    r.take("lr", c.evaluation.lr);
    r.take("temperature", c.evaluation.temperature);
    r.take("diversity_pairs", c.evaluation.diversity_pairs);
    r.take("n_gen", c.evaluation.n_gen);
    r.take("seed", c.evaluation.seed);
    r.finish();
  }
  if (j.contains("paraphrase")) {
    cli_detail::SectionReader r(j.at("paraphrase"), "paraphrase");
    r.take("endpoint", c.paraphrase.endpoint);
    r.take("model", c.paraphrase.model);
    r.take("offline", c.paraphrase.offline);
    r.take("cache", c.paraphrase.cache);
    r.take("timeout_seconds", c.paraphrase.timeout_seconds);
    r.take("max_retries", c.paraphrase.max_retries);
    r.take("max_in_flight", c.paraphrase.max_in_flight);
    r.take("backoff_base_ms", c.paraphrase.backoff_base_ms);
    r.finish();
  }
}

/// Effective configuration: profile defaults, then config file values, then
/// (by the caller) CLI flags. The profile flag beats the file's profile key.
inline RunConfig load_run_config(const std::string& config_path,
                                 const std::string& profile_flag) {
  nlohmann::json j;
  bool have_file = false;
  if (!config_path.empty()) {
    std::ifstream f(config_path, std::ios::binary);
    if (!f)
      throw ConfigError("config: cannot read file '" + config_path + "'");
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config: " + config_path + " is not valid JSON: " +
                        e.what());
    }
    have_file = true;
    if (!j.is_object())
      throw ConfigError("config: top level must be an object");
  }

  std::string profile = "desk";
  if (have_file && j.contains("profile")) {
    if (!j.at("profile").is_string())
      throw ConfigError("config: invalid value for profile");
    profile = j.at("profile").get<std::string>();
  }
  if (!profile_flag.empty()) profile = profile_flag;

  RunConfig c = profile_defaults(profile);
  if (have_file) apply_config_json(c, j);
  c.profile = profile;
  return c;
}

inline nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["profile"] = c.profile;
  j["skeleton"] = {{"source", c.skeleton.source}};
  j["dataset"] = {{"variations", c.dataset.variations},
                  {"seed", c.dataset.seed}};
  j["model"] = {{"layers", c.model.layers},
                {"heads", c.model.heads},
                {"d_model", c.model.d_model},
                {"ff", c.model.ff},
                {"dropout", c.model.dropout},
                {"n_max", c.model.n_max},
                {"feature_width", c.model.feature_width},
                {"use_part_tokens", c.model.use_part_tokens},
                {"d_text", c.d_text}};
  j["diffusion"] = {{"total_steps", c.diffusion.total_steps},
                    {"schedule", c.diffusion.schedule},
                    {"guidance_scale", c.diffusion.guidance_scale},
                    {"dropout_p", c.diffusion.dropout_p}};
  j["training"] = {{"batch_size", c.training.batch_size},
                   {"total_steps", c.training.total_steps},
                   {"lr", c.training.lr},
                   {"grad_clip", c.training.grad_clip},
                   {"checkpoint_interval", c.training.checkpoint_interval},
                   {"seed", c.training.seed},
                   {"standardize_features", c.training.standardize_features},
                   {"lambda_pos", c.training.weights.lambda_pos},
                   {"lambda_vel", c.training.weights.lambda_vel},
                   {"lambda_foot", c.training.weights.lambda_foot}};
  j["evaluation"] = {{"hidden", c.evaluation.hidden},
                     {"d_eval", c.evaluation.d_eval},
                     {"batch", c.evaluation.batch},
                     {"steps", c.evaluation.steps},
                     {"lr", c.evaluation.lr},
                     {"temperature", c.evaluation.temperature},
                     {"diversity_pairs", c.evaluation.diversity_pairs},
                     {"n_gen", c.evaluation.n_gen},
                     {"seed", c.evaluation.seed}};
  j["paraphrase"] = {{"endpoint", c.paraphrase.endpoint},
                     {"model", c.paraphrase.model},
                     {"offline", c.paraphrase.offline},
                     {"cache", c.paraphrase.cache},
                     {"timeout_seconds", c.paraphrase.timeout_seconds},
                     {"max_retries", c.paraphrase.max_retries},
                     {"max_in_flight", c.paraphrase.max_in_flight},
                     {"backoff_base_ms", c.paraphrase.backoff_base_ms}};
  return j;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

namespace cli_detail {

inline void write_text_atomic(const std::string& path,
                              const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    f << content;
    if (!f.good()) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

}  // namespace cli_detail

/// Written alongside every command's outputs. Contains no timestamps so a
/// rerun with the same inputs produces a byte-identical manifest.
inline void write_manifest(const std::string& path, const std::string& command,
                           const RunConfig& cfg,
                           const nlohmann::ordered_json& seeds,
                           const std::vector<std::string>& outputs) {
  nlohmann::ordered_json m;
  m["command"] = command;
  m["versions"] = {{"app", kVersion},
                   {"checkpoint_format", 1},
                   {"prompt_template", kPromptTemplateVersion}};
  m["seeds"] = seeds;
  m["outputs"] = outputs;
  m["config"] = run_config_to_json(cfg);
  cli_detail::write_text_atomic(path, m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Shared command helpers
// ---------------------------------------------------------------------------

namespace cli_detail {

inline std::vector<DatasetRecord> load_or_generate_records(
    const RunConfig& cfg, const std::string& data_path) {
  if (!data_path.empty()) return read_jsonl(data_path);
  return generate_dataset(default_skeleton(), default_templates(),
                          cfg.dataset.variations, cfg.dataset.seed);
}

inline std::vector<DatasetRecord> split_records(
    const std::vector<DatasetRecord>& records, const std::string& split) {
  std::vector<DatasetRecord> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(r);
  return out;
}

inline std::string safe_file_stem(const std::string& id) {
  std::string out;
  for (char ch : id)
    out.push_back(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' ||
                          ch == '_'
                      ? ch
                      : '_');
  return out.empty() ? std::string("motion") : out;
}

/// Generates n_gen motions from the test-split prompts (cycled) with derived
/// per-sample seeds, then scores them against the test motions.
inline EvalReport evaluate_bundle(const RunConfig& cfg,
                                  const ModelBundle& bundle,
                                  const std::vector<DatasetRecord>& test_split,
                                  const EvaluatorBundle& evaluator,
                                  const TextEmbedder& embedder,
                                  std::uint64_t seed) {
  if (test_split.empty())
    throw ContractError("evaluate: dataset has no test-split records");
  const Skeleton skel = default_skeleton();
  std::vector<Motion> generated, reference;
  std::vector<std::string> prompts;
  reference.reserve(test_split.size());
  for (const auto& r : test_split) reference.push_back(r.motion);
  const int n_gen = cfg.evaluation.n_gen;
  generated.reserve(static_cast<std::size_t>(n_gen));
  for (int i = 0; i < n_gen; ++i) {
    const DatasetRecord& r =
        test_split[static_cast<std::size_t>(i) % test_split.size()];
    generated.push_back(
        sample_motion(skel, bundle, embedder, r.parts, r.motion.frames(),
                      derive_seed(seed, 0x5a, static_cast<std::uint64_t>(i))));
    prompts.push_back(r.parts.full_text);
  }
  return evaluate_motion_set(evaluator, embedder, generated, prompts,
                             reference, cfg.evaluation.diversity_pairs, seed);
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_dataset_generate(const RunConfig& cfg, const std::string& out_dir,
                                std::ostream& log) {
  cli_detail::ensure_dir(out_dir);
  const auto records =
      generate_dataset(default_skeleton(), default_templates(),
                       cfg.dataset.variations, cfg.dataset.seed);
  const std::string data_path = out_dir + "/dataset.jsonl";
  write_jsonl(records, data_path);
  write_manifest(out_dir + "/manifest.json", "dataset generate", cfg,
                 {{"dataset", cfg.dataset.seed}}, {"dataset.jsonl"});
  int train = 0, test = 0, zero = 0;
  for (const auto& r : records) {
    if (r.split == "train") ++train;
    else if (r.split == "test") ++test;
    else ++zero;
  }
  log << "wrote " << records.size() << " records (" << train << " train, "
      << test << " test, " << zero << " zero_shot) to " << data_path << "\n";
  return 0;
}

inline int cmd_paraphrase(const RunConfig& cfg, const std::string& in_path,
                          const std::string& out_dir, std::ostream& log) {
  cli_detail::ensure_dir(out_dir);
  auto records = read_jsonl(in_path);
  std::vector<std::string> sentences;
  sentences.reserve(records.size());
  for (const auto& r : records) sentences.push_back(r.vague_text);

  const std::string cache_path = cfg.paraphrase.cache.empty()
                                     ? out_dir + "/cache.jsonl"
                                     : cfg.paraphrase.cache;
  ParaphraseCache cache(cache_path);
  LlmClientStats stats;
  const auto descriptions =
      paraphrase_all(sentences, cfg.llm_config(), cache, cfg.paraphrase.offline,
                     default_lexicon(), &stats);
  for (std::size_t i = 0; i < records.size(); ++i)
    records[i].parts = descriptions[i];

  const std::string data_path = out_dir + "/dataset.jsonl";
  write_jsonl(records, data_path);
  write_manifest(out_dir + "/manifest.json", "paraphrase", cfg,
                 nlohmann::ordered_json::object(), {"dataset.jsonl"});
  log << "paraphrased " << records.size() << " records ("
      << (cfg.paraphrase.offline ? "offline rules" : "chat endpoint") << ", "
      << stats.cache_hits << " cache hits, " << stats.requests
      << " requests) to " << data_path << "\n";
  return 0;
}

inline int cmd_train(const RunConfig& cfg, const std::string& data_path,
                     const std::string& out_dir, std::ostream& log) {
  cli_detail::ensure_dir(out_dir);
  const auto records = cli_detail::load_or_generate_records(cfg, data_path);
  const auto train_split = cli_detail::split_records(records, "train");
  if (train_split.empty())
    throw ContractError("train: dataset has no train-split records");

  const Skeleton skel = default_skeleton();
  TextEmbedder embedder({cfg.d_text});
  std::vector<TelemetryRow> telemetry;
  const std::string ckpt_path = out_dir + "/checkpoint.bin";
  const ModelBundle bundle =
      train(skel, train_split, embedder, cfg.model, cfg.conditioning(),
            cfg.diffusion, cfg.training, &telemetry,
            [&](const ModelBundle& mb, long long) {
              save_checkpoint(mb, ckpt_path);
            });
  save_checkpoint(bundle, ckpt_path);
  write_telemetry_csv(telemetry, out_dir + "/telemetry.csv");
  write_manifest(out_dir + "/manifest.json", "train", cfg,
                 {{"training", cfg.training.seed},
                  {"dataset", cfg.dataset.seed}},
                 {"checkpoint.bin", "telemetry.csv"});
  log << "trained " << cfg.training.total_steps << " steps on "
      << train_split.size() << " sequences; final loss "
      << (telemetry.empty() ? 0.0 : telemetry.back().total) << "; checkpoint "
      << ckpt_path << "\n";
  return 0;
}

/// Per-part texts supplied directly by the user, bypassing paraphrasing.
/// Missing parts get the neutral filler sentence (and mark the description
/// degraded); an optional "full" key overrides the concatenated paragraph.
inline FineGrainedDescription read_parts_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("parts file: cannot read '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("parts file: not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object())
    throw ConfigError("parts file: top level must be an object");
  std::set<std::string> known = {"full"};
  for (int p = 0; p < kPartCount; ++p) known.insert(part_names()[p]);
  for (const auto& item : j.items())
    if (!known.count(item.key()))
      throw ConfigError("parts file: unknown key '" + item.key() + "'");

  FineGrainedDescription d;
  d.degraded = false;
  for (int p = 0; p < kPartCount; ++p) {
    const std::string name = part_names()[p];
    if (j.contains(name) && j.at(name).is_string() &&
        !j.at(name).get<std::string>().empty()) {
      d.parts[p] = j.at(name).get<std::string>();
    } else {
      d.parts[p] = part_filler(p);
      d.degraded = true;
    }
    if (p) d.full_text += " ";
    d.full_text += d.parts[p];
  }
  if (j.contains("full")) d.full_text = j.at("full").get<std::string>();
  return d;
}

struct SampleOptions {
  std::string checkpoint;
  std::string text;
  std::string parts_file;
  std::string out_file;
  int frames = 32;
  std::uint64_t seed = 0;
  bool guidance_set = false;
  double guidance = 2.5;
};

inline int cmd_sample(const RunConfig& cfg, const SampleOptions& opt,
                      std::ostream& log) {
  if (opt.text.empty() && opt.parts_file.empty())
    throw ConfigError("sample: provide --text or --parts-file");

  ModelBundle bundle = load_checkpoint(opt.checkpoint);
  if (opt.guidance_set) bundle.diff.guidance_scale = opt.guidance;
  const Skeleton skel = default_skeleton();
  if (bundle.net.feature_width != flat_width(skel.joint_count()))
    throw ContractError("sample: checkpoint feature width does not match the "
                        "default skeleton");

  FineGrainedDescription desc;
  if (!opt.parts_file.empty()) {
    desc = read_parts_file(opt.parts_file);
  } else {
    // The sampling pipeline runs the paraphrase step before conditioning;
    // offline rules by default, chat endpoint when configured.
    ParaphraseCache cache = cfg.paraphrase.cache.empty()
                                ? ParaphraseCache()
                                : ParaphraseCache(cfg.paraphrase.cache);
    desc = call_llm_cached(opt.text, cfg.llm_config(), cache,
                           cfg.paraphrase.offline, default_lexicon());
  }

  TextEmbedder embedder({bundle.cond.d_text});
  const Motion motion =
      sample_motion(skel, bundle, embedder, desc, opt.frames, opt.seed);

  DatasetRecord rec;
  rec.id = "sample-000";
  rec.vague_text = opt.text.empty() ? desc.full_text : opt.text;
  rec.parts = desc;
  rec.motion = motion;
  rec.template_name = "sample";
  rec.split = "generated";
  const std::filesystem::path out_path(opt.out_file);
  if (out_path.has_parent_path())
    cli_detail::ensure_dir(out_path.parent_path().string());
  write_jsonl({rec}, opt.out_file);
  write_manifest(opt.out_file + ".manifest.json", "sample", cfg,
                 {{"sampling", opt.seed}},
                 {out_path.filename().string()});
  log << "sampled " << opt.frames << " frames (guidance "
      << bundle.diff.guidance_scale << ") to " << opt.out_file << "\n";
  return 0;
}

inline int cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint,
                        const std::string& data_path, const std::string& out_dir,
                        std::uint64_t seed, std::ostream& log) {
  cli_detail::ensure_dir(out_dir);
  const ModelBundle bundle = load_checkpoint(checkpoint);
  const auto records = cli_detail::load_or_generate_records(cfg, data_path);
  const auto train_split = cli_detail::split_records(records, "train");
  const auto test_split = cli_detail::split_records(records, "test");
  if (train_split.empty())
    throw ContractError("evaluate: dataset has no train-split records");

  TextEmbedder embedder({bundle.cond.d_text});
  EvaluatorConfig eval_cfg = cfg.evaluator_config();
  eval_cfg.feature_width = bundle.net.feature_width;
  eval_cfg.d_text = bundle.cond.d_text;
  const EvaluatorBundle evaluator =
      train_evaluator(train_split, embedder, eval_cfg, cfg.evaluation.seed);
  if (evaluator.single_class)
    log << "warning: evaluator trained on a single motion class\n";

  const EvalReport report = cli_detail::evaluate_bundle(
      cfg, bundle, test_split, evaluator, embedder, seed);
  cli_detail::write_text_atomic(out_dir + "/report.json",
                                report.to_json() + "\n");
  write_manifest(out_dir + "/manifest.json", "evaluate", cfg,
                 {{"evaluation", seed},
                  {"evaluator_training", cfg.evaluation.seed}},
                 {"report.json"});
  log << report.to_json() << "\n";
  return 0;
}

inline int cmd_export_bvh(const std::string& in_path, const RunConfig& cfg,
                          const std::string& out_dir, std::ostream& log) {
  cli_detail::ensure_dir(out_dir);
  const auto records = read_jsonl(in_path);
  if (records.empty()) throw ContractError("export-bvh: no records in input");
  const Skeleton skel = default_skeleton();
  std::vector<std::string> outputs;
  for (const auto& r : records) {
    if (r.motion.joint_count() != skel.joint_count())
      throw ContractError("export-bvh: record " + r.id +
                          " does not match the default skeleton");
    const std::string name = cli_detail::safe_file_stem(r.id) + ".bvh";
    save_bvh(out_dir + "/" + name, skel, r.motion);
    outputs.push_back(name);
  }
  write_manifest(out_dir + "/manifest.json", "export-bvh", cfg,
                 nlohmann::ordered_json::object(), outputs);
  log << "exported " << outputs.size() << " BVH files to " << out_dir << "\n";
  return 0;
}

inline int cmd_ablate(const RunConfig& cfg, const std::string& data_path,
                      const std::string& out_dir, std::ostream& log) {
  cli_detail::ensure_dir(out_dir);
  const auto records = cli_detail::load_or_generate_records(cfg, data_path);
  const auto train_split = cli_detail::split_records(records, "train");
  const auto test_split = cli_detail::split_records(records, "test");
  if (train_split.empty())
    throw ContractError("ablate: dataset has no train-split records");

  const Skeleton skel = default_skeleton();
  TextEmbedder embedder({cfg.d_text});

  RunConfig global_cfg = cfg;
  global_cfg.model.use_part_tokens = false;

  log << "training part-token model (" << cfg.training.total_steps
      << " steps)...\n";
  const ModelBundle part_bundle =
      train(skel, train_split, embedder, cfg.model, cfg.conditioning(),
            cfg.diffusion, cfg.training);
  log << "training global-only model (" << cfg.training.total_steps
      << " steps)...\n";
  const ModelBundle global_bundle =
      train(skel, train_split, embedder, global_cfg.model,
            global_cfg.conditioning(), global_cfg.diffusion,
            global_cfg.training);

  const EvaluatorBundle evaluator = train_evaluator(
      train_split, embedder, cfg.evaluator_config(), cfg.evaluation.seed);
  const std::uint64_t seed = cfg.evaluation.seed;
  const EvalReport part_report = cli_detail::evaluate_bundle(
      cfg, part_bundle, test_split, evaluator, embedder, seed);
  const EvalReport global_report = cli_detail::evaluate_bundle(
      global_cfg, global_bundle, test_split, evaluator, embedder, seed);

  nlohmann::ordered_json cmp;
  cmp["fid_part_tokens"] = part_report.fid;
  cmp["fid_global_only"] = global_report.fid;
  cmp["part_tokens_better"] = part_report.fid < global_report.fid;
  cli_detail::write_text_atomic(out_dir + "/ablation.json",
                                cmp.dump(2) + "\n");
  cli_detail::write_text_atomic(out_dir + "/report_part.json",
                                part_report.to_json() + "\n");
  cli_detail::write_text_atomic(out_dir + "/report_global.json",
                                global_report.to_json() + "\n");
  write_manifest(out_dir + "/manifest.json", "ablate", cfg,
                 {{"training", cfg.training.seed},
                  {"evaluation", cfg.evaluation.seed},
                  {"dataset", cfg.dataset.seed}},
                 {"ablation.json", "report_part.json", "report_global.json"});
  log << "FID part tokens " << part_report.fid << " vs global only "
      << global_report.fid << " -> part tokens "
      << (part_report.fid < global_report.fid ? "better" : "NOT better")
      << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Parses argv (without the program name) and runs one subcommand.
/// Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
inline int dispatch(const std::vector<std::string>& args,
                    std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Fine-grained part-conditioned motion diffusion toolkit"};
  app.name("fgmdm");
  app.require_subcommand(1);

  std::string config_path, profile_flag, out_path, endpoint_flag, model_flag;
  std::uint64_t seed_flag = 0;
  bool offline_flag = false, online_flag = false;
  double guidance_flag = 0.0;
  int steps_flag = 0;

  auto* o_config =
      app.add_option("--config", config_path, "JSON run configuration file");
  auto* o_seed = app.add_option("--seed", seed_flag,
                                "Primary seed for the command");
  auto* o_out = app.add_option(
      "--out", out_path, "Output directory (output file for `sample`)");
  app.add_option("--profile", profile_flag,
                 "Configuration profile: desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}));
  app.add_flag("--offline", offline_flag,
               "Paraphrase with the offline rule engine (no network)");
  app.add_flag("--online", online_flag,
               "Paraphrase through the chat completion endpoint");
  auto* o_endpoint =
      app.add_option("--endpoint", endpoint_flag, "Chat endpoint URL");
  auto* o_model =
      app.add_option("--model", model_flag, "Chat model name");
  auto* o_guidance = app.add_option("--guidance-scale", guidance_flag,
                                    "Classifier-free guidance scale");
  auto* o_steps = app.add_option("--steps", steps_flag,
                                 "Training step count override");

  auto* c_dataset =
      app.add_subcommand("dataset", "Synthetic dataset commands");
  c_dataset->require_subcommand(1);
  auto* c_dataset_gen = c_dataset->add_subcommand(
      "generate", "Generate the synthetic motion-text corpus");
  c_dataset_gen->fallthrough();
  c_dataset->fallthrough();
  int variations_flag = 0;
  auto* o_variations = c_dataset_gen->add_option(
      "--variations", variations_flag, "Variations per motion template");

  auto* c_paraphrase = app.add_subcommand(
      "paraphrase", "Rewrite dataset sentences into per-part descriptions");
  c_paraphrase->fallthrough();
  std::string para_in;
  c_paraphrase->add_option("--in", para_in, "Input dataset JSONL")->required();

  auto* c_train =
      app.add_subcommand("train", "Train the motion diffusion model");
  c_train->fallthrough();
  std::string train_data;
  c_train->add_option("--data", train_data,
                      "Dataset JSONL (generated from config when omitted)");

  auto* c_sample =
      app.add_subcommand("sample", "Generate a motion from a text prompt");
  c_sample->fallthrough();
  SampleOptions sample_opt;
  c_sample->add_option("--checkpoint", sample_opt.checkpoint,
                       "Model checkpoint")->required();
  c_sample->add_option("--text", sample_opt.text, "Motion prompt");
  c_sample->add_option("--parts-file", sample_opt.parts_file,
                       "JSON file with per-part texts (skips paraphrasing)");
  c_sample->add_option("--frames", sample_opt.frames,
                       "Number of frames to generate");

  auto* c_evaluate = app.add_subcommand(
      "evaluate", "Score a checkpoint: FID, diversity, matching distance");
  c_evaluate->fallthrough();
  std::string eval_ckpt, eval_data;
  c_evaluate->add_option("--checkpoint", eval_ckpt, "Model checkpoint")
      ->required();
  c_evaluate->add_option("--data", eval_data,
                         "Dataset JSONL (generated from config when omitted)");
  int ngen_flag = 0;
  auto* o_ngen = c_evaluate->add_option("--n-gen", ngen_flag,
                                        "Generated sample count");

  auto* c_export =
      app.add_subcommand("export-bvh", "Export motion records as BVH files");
  c_export->fallthrough();
  std::string export_in;
  c_export->add_option("--in", export_in, "Motion JSONL file")->required();

  auto* c_ablate = app.add_subcommand(
      "ablate", "Train part-token and global-only models and compare FID");
  c_ablate->fallthrough();
  std::string ablate_data;
  c_ablate->add_option("--data", ablate_data,
                       "Dataset JSONL (generated from config when omitted)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    RunConfig cfg = load_run_config(config_path, profile_flag);
    if (o_steps->count()) cfg.training.total_steps = steps_flag;
    if (o_guidance->count()) cfg.diffusion.guidance_scale = guidance_flag;
    if (o_endpoint->count()) cfg.paraphrase.endpoint = endpoint_flag;
    if (o_model->count()) cfg.paraphrase.model = model_flag;
    if (offline_flag && online_flag)
      throw ConfigError("config: --offline and --online are mutually exclusive");
    if (offline_flag) cfg.paraphrase.offline = true;
    if (online_flag) cfg.paraphrase.offline = false;
    if (o_variations->count()) cfg.dataset.variations = variations_flag;
    if (o_ngen->count()) cfg.evaluation.n_gen = ngen_flag;
    if (o_seed->count()) {
      cfg.dataset.seed = seed_flag;
      cfg.training.seed = seed_flag;
    }
    cfg.validate();

    auto need_out = [&]() -> const std::string& {
      if (!o_out->count() || out_path.empty())
        throw ConfigError("config: --out is required for this command");
      return out_path;
    };

    if (c_dataset_gen->parsed()) {
      if (o_seed->count()) cfg.dataset.seed = seed_flag;
      return cmd_dataset_generate(cfg, need_out(), out);
    }
    if (c_paraphrase->parsed())
      return cmd_paraphrase(cfg, para_in, need_out(), out);
    if (c_train->parsed()) return cmd_train(cfg, train_data, need_out(), out);
    if (c_sample->parsed()) {
      sample_opt.out_file = need_out();
      sample_opt.seed = o_seed->count() ? seed_flag : 0;
      sample_opt.guidance_set = o_guidance->count() > 0;
      sample_opt.guidance = guidance_flag;
      return cmd_sample(cfg, sample_opt, out);
    }
    if (c_evaluate->parsed()) {
      const std::uint64_t seed = o_seed->count() ? seed_flag : 0;
      return cmd_evaluate(cfg, eval_ckpt, eval_data, need_out(), seed, out);
    }
    if (c_export->parsed()) return cmd_export_bvh(export_in, cfg, need_out(), out);
    if (c_ablate->parsed()) return cmd_ablate(cfg, ablate_data, need_out(), out);
    err << "error: no command selected\n" << app.help();
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace fgmdm
