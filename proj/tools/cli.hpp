#pragma once

// Command implementations for the memechain executable. Exit codes: 0
// success, 1 runtime failure, 2 usage or validation error.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "memechain/memechain.hpp"

namespace memechain::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require_file(const fs::path& p, const char* what) {
  if (p.empty()) throw UsageError(std::string(what) + " is required");
  if (!fs::is_regular_file(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

inline FusionConfig parse_ratio(const std::string& s, bool normalize = true) {
  const auto colon = s.find(':');
  FusionConfig f;
  f.normalize = normalize;
  try {
    if (colon == std::string::npos) throw std::invalid_argument("missing ':'");
    std::size_t used = 0;
    const auto t = s.substr(0, colon), i = s.substr(colon + 1);
    f.text_weight = std::stof(t, &used);
    if (used != t.size()) throw std::invalid_argument("text weight");
    f.image_weight = std::stof(i, &used);
    if (used != i.size()) throw std::invalid_argument("image weight");
    validate(f);
  } catch (const std::exception&) {
    throw UsageError("--ratio must look like TEXT:IMAGE with nonnegative weights, got '" + s + "'");
  }
  return f;
}

inline std::string format_ratio(const FusionConfig& f) {
  std::ostringstream out;
  out << f.text_weight << ':' << f.image_weight;
  return out.str();
}

inline std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError("--ks takes a comma-separated list of integers >= 1, got '" + s + "'");
    }
  }
  if (ks.empty()) throw UsageError("--ks is empty");
  return ks;
}

// Advisory lock on <dir>/.lock, released when the process exits.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) {
    fs::create_directories(dir);
    const auto path = dir / ".lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw std::runtime_error("another memechain process is writing to " + dir.string());
    }
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;
  ~OutputLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }

 private:
  int fd_ = -1;
};

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Settings shared by run, ablate and sweep-k. Precedence: flags, then the
// manifest file, then built-in defaults.

struct RunSettings {
  fs::path corpus;
  fs::path text_emb;
  fs::path image_emb;
  std::optional<fs::path> index;
  std::string profile = "FHM";
  bool profile_given = false;
  std::optional<fs::path> profile_file;
  std::string backend = "http";
  std::optional<fs::path> script;
  EndpointConfig endpoint;
  AblationConfig ablation;
  std::size_t parallelism = 4;
  fs::path output_dir = "out";
  FusionConfig fusion;
  bool resume = false;
  bool text_only_neighbors = false;
  std::optional<int> max_retries;
  std::optional<double> timeout_s;
  std::string ks = "1,3,5,7,9";
};

inline nlohmann::json settings_to_json(const RunSettings& s) {
  auto opt = [](const std::optional<fs::path>& p) { return p ? nlohmann::json(p->string()) : nlohmann::json(nullptr); };
  nlohmann::json j{{"corpus", s.corpus.string()},
                   {"text_emb", s.text_emb.string()},
                   {"image_emb", s.image_emb.string()},
                   {"index", opt(s.index)},
                   {"profile", s.profile_file && !s.profile_given ? "" : s.profile},
                   {"profile_file", opt(s.profile_file)},
                   {"backend", s.backend},
                   {"script", opt(s.script)},
                   {"endpoint", endpoint_to_json(s.endpoint)},
                   {"ablation", ablation_to_json(s.ablation)},
                   {"parallelism", s.parallelism},
                   {"output_dir", s.output_dir.string()},
                   {"ratio", format_ratio(s.fusion)},
                   {"resume", s.resume},
                   {"text_only_neighbors", s.text_only_neighbors}};
  if (s.max_retries) j["max_retries"] = *s.max_retries;
  if (s.timeout_s) j["timeout_s"] = *s.timeout_s;
  return j;
}

inline void apply_manifest(RunSettings& s, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("manifest not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    auto path_of = [&](const char* key, fs::path& dst) {
      if (j.contains(key) && !j.at(key).is_null()) dst = j.at(key).get<std::string>();
    };
    auto opt_path_of = [&](const char* key, std::optional<fs::path>& dst) {
      if (j.contains(key) && !j.at(key).is_null()) dst = fs::path(j.at(key).get<std::string>());
    };
    path_of("corpus", s.corpus);
    path_of("text_emb", s.text_emb);
    path_of("image_emb", s.image_emb);
    opt_path_of("index", s.index);
    opt_path_of("profile_file", s.profile_file);
    opt_path_of("script", s.script);
    path_of("output_dir", s.output_dir);
    if (j.contains("profile")) {
      s.profile = j.at("profile").get<std::string>();
      s.profile_given = true;
    }
    if (j.contains("backend")) s.backend = j.at("backend").get<std::string>();
    if (j.contains("endpoint")) s.endpoint = endpoint_from_json(j.at("endpoint"), s.endpoint);
    if (j.contains("ablation")) s.ablation = ablation_from_json(j.at("ablation"), s.ablation);
    if (j.contains("parallelism")) s.parallelism = j.at("parallelism").get<std::size_t>();
    if (j.contains("ratio")) s.fusion = parse_ratio(j.at("ratio").get<std::string>(), s.fusion.normalize);
    if (j.contains("text_only_neighbors")) s.text_only_neighbors = j.at("text_only_neighbors").get<bool>();
    if (j.contains("max_retries")) s.max_retries = j.at("max_retries").get<int>();
    if (j.contains("timeout_s")) s.timeout_s = j.at("timeout_s").get<double>();
    if (j.contains("ks")) s.ks = j.at("ks").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("manifest " + path.string() + ": " + e.what());
  }
  // Relative paths in a manifest are relative to the manifest itself.
  const auto base = path.parent_path();
  auto rebase = [&](fs::path& p) {
    if (!p.empty() && p.is_relative()) p = base / p;
  };
  for (auto* p : {&s.corpus, &s.text_emb, &s.image_emb, &s.output_dir}) rebase(*p);
  for (auto* p : {&s.index, &s.profile_file, &s.script})
    if (*p) rebase(**p);
}

// Raw flag storage; a flag overrides the manifest only when given.
struct RunFlags {
  std::string manifest, corpus, text_emb, image_emb, index, profile, profile_file, backend, script;
  std::string endpoint, model, preset, api_key_env, out, ratio, ks;
  std::size_t k = kDefaultTopK, parallelism = 4;
  std::uint64_t seed = 0;
  int max_retries = 3;
  double timeout_s = 120;
  bool no_epm = false, no_eie = false, no_cra = false, resume = false, text_only = false, logprobs = false;
  std::map<std::string, CLI::Option*> opts;

  bool given(const std::string& name) const {
    auto it = opts.find(name);
    return it != opts.end() && it->second->count() > 0;
  }
};

enum class RunKind { run, ablate, sweep };

inline void add_run_flags(CLI::App& app, RunFlags& f, RunKind kind) {
  auto& o = f.opts;
  o["manifest"] = app.add_option("--manifest", f.manifest, "JSON run manifest; flags override its fields");
  o["corpus"] = app.add_option("--corpus", f.corpus, "Corpus file (JSON lines)");
  o["profile"] = app.add_option("--profile", f.profile, "Dataset profile: FHM, MAMI, HarM or a profile-file name [FHM]");
  o["profile-file"] = app.add_option("--profile-file", f.profile_file, "JSON file defining a custom profile");
  o["text-emb"] = app.add_option("--text-emb", f.text_emb, "Text embeddings (CEMB) for pool and test records");
  o["image-emb"] = app.add_option("--image-emb", f.image_emb, "Image embeddings (CEMB) for pool and test records");
  o["index"] = app.add_option("--index", f.index, "Prebuilt fused index (CIDX); built from the embeddings if absent");
  o["ratio"] = app.add_option("--ratio", f.ratio, "Text:image fusion ratio when building the index [4:1]");
  o["backend"] = app.add_option("--backend", f.backend, "LMM backend: http or stub [http]")
                     ->check(CLI::IsMember({"http", "stub"}));
  o["script"] = app.add_option("--script", f.script, "Stub backend script (JSON)");
  o["endpoint"] = app.add_option("--endpoint", f.endpoint, "Base URL of the chat-completion server");
  o["model"] = app.add_option("--model", f.model, "Model name sent to the server");
  o["preset"] = app.add_option("--preset", f.preset, "Generation preset: mmicl or llava [mmicl]")
                    ->check(CLI::IsMember(preset_names()));
  o["api-key-env"] = app.add_option("--api-key-env", f.api_key_env,
                                    "Environment variable holding the bearer token [MEMECHAIN_API_KEY]");
  o["logprobs"] = app.add_flag("--logprobs", f.logprobs, "Request token log-probabilities and score AUC with them");
  o["max-retries"] = app.add_option("--max-retries", f.max_retries, "Retries per LMM call on transient failure [3]");
  o["timeout"] = app.add_option("--timeout", f.timeout_s, "Per-request timeout in seconds [120]");
  if (kind != RunKind::sweep) o["k"] = app.add_option("--k", f.k, "Number of evolutionary neighbors [5]");
  o["seed"] = app.add_option("--seed", f.seed, "Seed for neighbor sampling when retrieval is off [0]");
  if (kind == RunKind::run) {
    o["no-epm"] = app.add_flag("--no-epm", f.no_epm, "Disable evolutionary pair mining (retrieval)");
    o["no-eie"] = app.add_flag("--no-eie", f.no_eie, "Disable the evolution information extractor");
    o["no-cra"] = app.add_flag("--no-cra", f.no_cra, "Disable the contextual relevance amplifier");
  }
  if (kind == RunKind::sweep) o["ks"] = app.add_option("--ks", f.ks, "Comma-separated neighbor counts [1,3,5,7,9]");
  o["text-only-neighbors"] =
      app.add_flag("--text-only-neighbors", f.text_only, "Send neighbor captions without their images");
  o["parallelism"] = app.add_option("--parallelism", f.parallelism, "Memes in flight at once [4]");
  o["out"] = app.add_option("--out", f.out, "Output directory [out]");
  o["resume"] = app.add_flag("--resume", f.resume, "Continue from the checkpoint in the output directory");
}

inline RunSettings resolve_settings(const RunFlags& f, RunKind kind) {
  RunSettings s;
  if (f.given("manifest")) apply_manifest(s, f.manifest);
  auto set_path = [&](const char* name, const std::string& v, fs::path& dst) {
    if (f.given(name)) dst = v;
  };
  auto set_opt = [&](const char* name, const std::string& v, std::optional<fs::path>& dst) {
    if (f.given(name)) dst = fs::path(v);
  };
  set_path("corpus", f.corpus, s.corpus);
  set_path("text-emb", f.text_emb, s.text_emb);
  set_path("image-emb", f.image_emb, s.image_emb);
  set_path("out", f.out, s.output_dir);
  set_opt("index", f.index, s.index);
  set_opt("profile-file", f.profile_file, s.profile_file);
  set_opt("script", f.script, s.script);
  if (f.given("profile")) {
    s.profile = f.profile;
    s.profile_given = true;
  }
  if (f.given("backend")) s.backend = f.backend;
  if (f.given("endpoint")) s.endpoint.base_url = f.endpoint;
  if (f.given("model")) s.endpoint.model = f.model;
  if (f.given("preset")) s.endpoint.preset = f.preset;
  if (f.given("api-key-env")) s.endpoint.api_key_env = f.api_key_env;
  if (f.given("logprobs")) s.endpoint.request_logprobs = f.logprobs;
  if (f.given("ratio")) s.fusion = parse_ratio(f.ratio, s.fusion.normalize);
  if (f.given("max-retries")) s.max_retries = f.max_retries;
  if (f.given("timeout")) s.timeout_s = f.timeout_s;
  if (f.given("k")) s.ablation.k = f.k;
  if (f.given("seed")) s.ablation.random_seed = f.seed;
  if (f.given("no-epm")) s.ablation.use_epm = !f.no_epm;
  if (f.given("no-eie")) s.ablation.use_eie = !f.no_eie;
  if (f.given("no-cra")) s.ablation.use_cra = !f.no_cra;
  if (f.given("ks")) s.ks = f.ks;
  if (f.given("text-only-neighbors")) s.text_only_neighbors = f.text_only;
  if (f.given("parallelism")) s.parallelism = f.parallelism;
  if (f.given("resume")) s.resume = f.resume;
  if (kind != RunKind::run) s.ablation.use_epm = s.ablation.use_eie = s.ablation.use_cra = true;

  if (s.ablation.k == 0) throw UsageError("--k must be >= 1");
  if (s.ablation.k > kMaxEieNeighbors) throw UsageError("--k must be at most " + std::to_string(kMaxEieNeighbors));
  if (s.parallelism == 0) throw UsageError("--parallelism must be >= 1");
  if (s.max_retries && *s.max_retries < 0) throw UsageError("--max-retries must be >= 0");
  if (s.timeout_s && !(*s.timeout_s > 0)) throw UsageError("--timeout must be positive");
  if (s.backend != "http" && s.backend != "stub") throw UsageError("backend must be http or stub");
  require_file(s.corpus, "corpus");
  if (s.profile_file) require_file(*s.profile_file, "profile file");
  if (s.script) require_file(*s.script, "stub script");
  if (s.index) require_file(*s.index, "index");
  const bool needs_embeddings = kind != RunKind::run || s.ablation.use_epm;
  if (needs_embeddings) {
    require_file(s.text_emb, "text embedding file");
    require_file(s.image_emb, "image embedding file");
  }
  if (s.backend == "http" && s.endpoint.model.empty()) throw UsageError("--model is required with the http backend");
  return s;
}

// Loaded inputs for a batch command.
struct Workspace {
  LabeledCorpus corpus;
  std::optional<EmbeddingTable> text_embs;
  std::optional<EmbeddingTable> image_embs;
  std::optional<FusedIndex> index;
  std::shared_ptr<Backend> backend;
  std::unique_ptr<LmmClient> client;
  PipelineOptions options;

  CoePipeline pipeline() const {
    return CoePipeline(corpus, *client, index ? &*index : nullptr, text_embs ? &*text_embs : nullptr,
                       image_embs ? &*image_embs : nullptr, options);
  }
};

inline std::unique_ptr<Workspace> load_workspace(const RunSettings& s, std::ostream& err) {
  auto ws = std::make_unique<Workspace>();
  // A profile file names its own profile unless --profile says otherwise.
  ws->corpus = load_corpus(s.corpus, s.profile_file && !s.profile_given ? "" : s.profile, s.profile_file);
  for (const auto& w : check_instruction_budget(ws->corpus.profile())) err << "warning: " << w.message << '\n';
  if (!s.text_emb.empty() && fs::exists(s.text_emb) && !s.image_emb.empty() && fs::exists(s.image_emb)) {
    ws->text_embs = load_embeddings(s.text_emb);
    ws->image_embs = load_embeddings(s.image_emb);
    if (s.index) {
      ws->index = load_index(*s.index);
      if (ws->index->dim() != ws->text_embs->dim())
        throw std::runtime_error("index dim " + std::to_string(ws->index->dim()) + " does not match embedding dim " +
                                 std::to_string(ws->text_embs->dim()));
    } else {
      ws->index = build_index(ws->corpus, *ws->text_embs, *ws->image_embs, s.fusion);
    }
  }
  if (s.backend == "stub") {
    StubScript script;
    script.fallback = {ws->corpus.profile().negative_word, std::nullopt};
    if (s.script) {
      auto loaded = load_script(*s.script);
      script.responses = std::move(loaded.responses);
      script.rules = std::move(loaded.rules);
      std::ifstream in(*s.script);
      if (nlohmann::json::parse(in).contains("default")) script.fallback = loaded.fallback;
    }
    ws->backend = std::make_shared<StubBackend>(std::move(script));
  } else {
    auto endpoint = s.endpoint;
    if (endpoint.image_root.empty()) endpoint.image_root = s.corpus.parent_path();
    ws->backend = std::make_shared<HttpBackend>(endpoint);
  }
  ws->client = std::make_unique<LmmClient>(ws->backend);
  ws->options.preset = generation_preset(s.endpoint.preset);
  for (auto* p : {&ws->options.preset.eie, &ws->options.preset.final}) {
    if (s.max_retries) p->max_retries = *s.max_retries;
    if (s.timeout_s) p->request_timeout = Millis{static_cast<std::int64_t>(*s.timeout_s * 1000.0)};
  }
  ws->options.text_only_neighbors = s.text_only_neighbors;
  return ws;
}

inline RunOptions run_options(const RunSettings& s) {
  RunOptions o;
  o.parallelism = s.parallelism;
  o.resume = s.resume;
  return o;
}

inline void report_outcome(const RunOutcome& o, const std::string& label, std::ostream& err) {
  err << label << ": " << o.results.size() << " results (" << o.processed << " new, " << o.resumed << " resumed), "
      << o.errors.size() << " errors\n";
  for (const auto& w : o.warnings) err << "  warning: " << w << '\n';
  for (const auto& e : o.errors) err << "  error: " << e.meme_id << ": " << e.message << '\n';
}

inline void write_errors(const fs::path& path, const std::vector<MemeError>& errors) {
  if (errors.empty()) {
    fs::remove(path);
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& e : errors)
    out << nlohmann::json{{"meme_id", e.meme_id}, {"stage", e.stage}, {"message", e.message}}.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_build_index(const fs::path& corpus_path, const std::string& profile,
                           const std::optional<fs::path>& profile_file, const fs::path& text_path,
                           const fs::path& image_path, const fs::path& out_path, const FusionConfig& fusion,
                           std::ostream& out, std::ostream& err) {
  require_file(corpus_path, "corpus");
  require_file(text_path, "text embedding file");
  require_file(image_path, "image embedding file");
  if (profile_file) require_file(*profile_file, "profile file");
  if (out_path.empty()) throw UsageError("--out is required");
  out << "fusion ratio " << format_ratio(fusion) << (fusion.normalize ? ", normalized" : ", unnormalized") << '\n';
  const auto corpus = load_corpus(corpus_path, profile, profile_file);
  const auto text = load_embeddings(text_path);
  const auto image = load_embeddings(image_path);
  const auto index = build_index(corpus, text, image, fusion);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  save_index(index, out_path);
  out << "indexed " << index.size() << " rows, dim " << index.dim() << '\n';
  (void)err;
  return kExitOk;
}

inline int cmd_run(const RunSettings& s, std::ostream& out, std::ostream& err) {
  OutputLock lock(s.output_dir);
  err << "config: " << settings_to_json(s).dump() << '\n';
  auto ws = load_workspace(s, err);
  auto opts = run_options(s);
  opts.checkpoint = s.output_dir / "checkpoint.jsonl";
  RunOutcome outcome;
  try {
    outcome = run_dataset(ws->pipeline(), s.ablation, opts);
  } catch (const FatalEndpointError& e) {
    err << "fatal: " << e.what() << "\npartial results kept in " << opts.checkpoint->string() << '\n';
    return kExitRuntime;
  }
  report_outcome(outcome, ablation_label(s.ablation), err);
  write_results(s.output_dir / "results.jsonl", outcome.results);
  write_errors(s.output_dir / "errors.jsonl", outcome.errors);
  const std::vector<MetricsReport> reports{evaluate(outcome.results, test_labels(ws->corpus), s.ablation)};
  write_text(s.output_dir / "metrics.md", metrics_markdown(reports));
  write_text(s.output_dir / "metrics.csv", metrics_csv(reports));
  out << metrics_markdown(reports);
  return outcome.errors.empty() ? kExitOk : kExitRuntime;
}

inline int cmd_ablate(const RunSettings& s, std::ostream& out, std::ostream& err) {
  OutputLock lock(s.output_dir);
  err << "config: " << settings_to_json(s).dump() << '\n';
  auto ws = load_workspace(s, err);
  const auto grid = ablation_grid(s.ablation.k, s.ablation.random_seed);
  const auto dir = s.output_dir / "ablation";
  fs::create_directories(dir);
  std::vector<ExperimentRun> runs;
  try {
    runs = run_ablation(ws->pipeline(), grid, run_options(s), dir);
  } catch (const FatalEndpointError& e) {
    err << "fatal: " << e.what() << '\n';
    return kExitRuntime;
  }
  std::vector<MetricsReport> reports;
  std::vector<MemeError> errors;
  for (const auto& r : runs) {
    report_outcome(r.outcome, r.metrics.label, err);
    write_results(dir / (r.metrics.label + ".results.jsonl"), r.outcome.results);
    errors.insert(errors.end(), r.outcome.errors.begin(), r.outcome.errors.end());
    reports.push_back(r.metrics);
  }
  write_errors(s.output_dir / "errors.jsonl", errors);
  const auto rows = ablation_report(reports);
  write_text(s.output_dir / "ablation.md", ablation_markdown(rows));
  write_text(s.output_dir / "ablation.csv", ablation_csv(rows));
  out << ablation_markdown(rows);
  return errors.empty() ? kExitOk : kExitRuntime;
}

inline int cmd_sweep_k(const RunSettings& s, std::ostream& out, std::ostream& err) {
  const auto ks = parse_ks(s.ks);
  for (auto k : ks)
    if (k > kMaxEieNeighbors) throw UsageError("--ks values must be at most " + std::to_string(kMaxEieNeighbors));
  OutputLock lock(s.output_dir);
  err << "config: " << settings_to_json(s).dump() << '\n';
  auto ws = load_workspace(s, err);
  const auto dir = s.output_dir / "sweep";
  fs::create_directories(dir);
  std::vector<KSweepRow> rows;
  try {
    rows = k_sweep(ws->pipeline(), ks, s.ablation, run_options(s), dir);
  } catch (const FatalEndpointError& e) {
    err << "fatal: " << e.what() << '\n';
    return kExitRuntime;
  }
  const auto csv = k_sweep_csv(rows);
  write_text(s.output_dir / "k_sweep.csv", csv);
  out << csv;
  return kExitOk;
}

// Re-renders metrics from stored checkpoints; never contacts a backend.
inline int cmd_report(const fs::path& corpus_path, const std::string& profile,
                      const std::optional<fs::path>& profile_file, const std::vector<std::string>& checkpoints,
                      const std::optional<fs::path>& out_dir, std::ostream& out, std::ostream& err) {
  require_file(corpus_path, "corpus");
  if (profile_file) require_file(*profile_file, "profile file");
  if (checkpoints.empty()) throw UsageError("at least one --checkpoint is required");
  for (const auto& c : checkpoints) require_file(c, "checkpoint");
  const auto corpus = load_corpus(corpus_path, profile, profile_file);
  const auto labels = test_labels(corpus);

  // Group by configuration, keeping the last record per meme.
  std::vector<AblationConfig> order;
  std::vector<std::map<std::string, PipelineResult>> groups;
  for (const auto& c : checkpoints) {
    for (auto& r : read_results(c)) {
      auto it = std::find(order.begin(), order.end(), r.config);
      if (it == order.end()) {
        order.push_back(r.config);
        groups.emplace_back();
        it = order.end() - 1;
      }
      auto& g = groups[static_cast<std::size_t>(it - order.begin())];
      g.insert_or_assign(r.meme_id, std::move(r));
    }
  }
  std::vector<MetricsReport> reports;
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::vector<PipelineResult> rs;
    for (const auto& rec : corpus.records())
      if (auto it = groups[i].find(rec.id); it != groups[i].end()) rs.push_back(it->second);
    reports.push_back(evaluate(rs, labels, order[i]));
    err << reports.back().label << ": " << rs.size() << " results\n";
  }
  std::string md = metrics_markdown(reports);
  std::string csv = metrics_csv(reports);
  if (reports.size() > 1) {
    const auto rows = ablation_report(reports);
    md += "\n" + ablation_markdown(rows);
    if (out_dir) {
      fs::create_directories(*out_dir);
      write_text(*out_dir / "report_ablation.csv", ablation_csv(rows));
    }
  }
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_text(*out_dir / "report.md", md);
    write_text(*out_dir / "report.csv", csv);
  }
  out << md;
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Chain-of-evolution prompting for hateful meme detection", "memechain"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(MEMECHAIN_VERSION));

  auto* build = app.add_subcommand("build-index", "Fuse text and image embeddings of the pool into a CIDX index");
  std::string b_corpus, b_profile = "FHM", b_profile_file, b_text, b_image, b_out, b_ratio = "4:1";
  bool b_no_normalize = false;
  build->add_option("--corpus", b_corpus, "Corpus file (JSON lines)")->required();
  auto* b_profile_opt = build->add_option("--profile", b_profile, "Dataset profile [FHM]");
  auto* b_profile_file_opt = build->add_option("--profile-file", b_profile_file, "JSON file defining a custom profile");
  build->add_option("--text-emb", b_text, "Text embeddings (CEMB)")->required();
  build->add_option("--image-emb", b_image, "Image embeddings (CEMB)")->required();
  build->add_option("--out", b_out, "Output index file (CIDX)")->required();
  build->add_option("--ratio", b_ratio, "Text:image fusion ratio [4:1]");
  build->add_flag("--no-normalize", b_no_normalize, "Store fused rows without L2 normalization");

  RunFlags run_flags, ablate_flags, sweep_flags;
  auto* run = app.add_subcommand("run", "Classify every test meme with one ablation configuration");
  add_run_flags(*run, run_flags, RunKind::run);
  auto* ablate = app.add_subcommand("ablate", "Run the six ablation configurations and print the delta table");
  add_run_flags(*ablate, ablate_flags, RunKind::ablate);
  auto* sweep = app.add_subcommand("sweep-k", "Run the full pipeline for several neighbor counts");
  add_run_flags(*sweep, sweep_flags, RunKind::sweep);

  auto* report = app.add_subcommand("report", "Recompute metrics from checkpoint files without querying any model");
  std::string r_corpus, r_profile = "FHM", r_profile_file, r_out;
  std::vector<std::string> r_checkpoints;
  report->add_option("--corpus", r_corpus, "Corpus file (JSON lines) with ground-truth labels")->required();
  auto* r_profile_opt = report->add_option("--profile", r_profile, "Dataset profile [FHM]");
  auto* r_profile_file_opt = report->add_option("--profile-file", r_profile_file, "JSON file defining a custom profile");
  report->add_option("--checkpoint", r_checkpoints, "Checkpoint or results file; repeat for several")->required();
  auto* r_out_opt = report->add_option("--out", r_out, "Directory for report.md and report.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help and version requests print to out and exit 0.
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (build->parsed()) {
      const auto fusion = parse_ratio(b_ratio, !b_no_normalize);
      std::optional<fs::path> pf;
      if (b_profile_file_opt->count()) pf = b_profile_file;
      if (pf && !b_profile_opt->count()) b_profile.clear();
      return cmd_build_index(b_corpus, b_profile, pf, b_text, b_image, b_out, fusion, out, err);
    }
    if (run->parsed()) return cmd_run(resolve_settings(run_flags, RunKind::run), out, err);
    if (ablate->parsed()) return cmd_ablate(resolve_settings(ablate_flags, RunKind::ablate), out, err);
    if (sweep->parsed()) return cmd_sweep_k(resolve_settings(sweep_flags, RunKind::sweep), out, err);
    if (report->parsed()) {
      std::optional<fs::path> pf, od;
      if (r_profile_file_opt->count()) pf = r_profile_file;
      if (pf && !r_profile_opt->count()) r_profile.clear();
      if (r_out_opt->count()) od = r_out;
      return cmd_report(r_corpus, r_profile, pf, r_checkpoints, od, out, err);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace memechain::cli
