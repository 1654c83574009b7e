#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "memechain/corpus.hpp"
#include "memechain/index.hpp"
#include "memechain/lmm.hpp"
#include "memechain/prompt.hpp"

namespace memechain {

struct AblationConfig {
  bool use_epm = true;
  bool use_eie = true;
  bool use_cra = true;
  std::size_t k = kDefaultTopK;
  std::uint64_t random_seed = 0;

  friend bool operator==(const AblationConfig&, const AblationConfig&) = default;
};

// Short name of a toggle combination, e.g. "baseline", "epm+eie", "full".
inline std::string ablation_label(const AblationConfig& c) {
  if (c.use_epm && c.use_eie && c.use_cra) return "full";
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += '+';
    s += name;
  };
  add(c.use_epm, "epm");
  add(c.use_eie, "eie");
  add(c.use_cra, "cra");
  return s.empty() ? "baseline" : s;
}

// The six combinations studied for the FHM ablation, in table order.
inline std::vector<AblationConfig> ablation_grid(std::size_t k = kDefaultTopK, std::uint64_t seed = 0) {
  return {{false, false, false, k, seed}, {true, false, false, k, seed}, {false, true, false, k, seed},
          {false, true, true, k, seed},   {true, true, false, k, seed},  {true, true, true, k, seed}};
}

inline nlohmann::json ablation_to_json(const AblationConfig& c) {
  return {{"use_epm", c.use_epm}, {"use_eie", c.use_eie}, {"use_cra", c.use_cra},
          {"k", c.k},             {"random_seed", c.random_seed}};
}

inline AblationConfig ablation_from_json(const nlohmann::json& j, AblationConfig c = {}) {
  if (j.contains("use_epm")) c.use_epm = j.at("use_epm").get<bool>();
  if (j.contains("use_eie")) c.use_eie = j.at("use_eie").get<bool>();
  if (j.contains("use_cra")) c.use_cra = j.at("use_cra").get<bool>();
  if (j.contains("k")) c.k = j.at("k").get<std::size_t>();
  if (j.contains("random_seed")) c.random_seed = j.at("random_seed").get<std::uint64_t>();
  return c;
}

struct StageTimings {
  Millis retrieval{0};
  Millis eie{0};
  Millis final{0};
};

struct PipelineResult {
  std::string meme_id;
  std::vector<Neighbor> retrieved;      // EPM neighbors; empty when EPM is off
  std::vector<std::string> sampled;     // seed-sampled neighbors when EIE runs without EPM
  std::optional<std::string> info_text;
  std::optional<std::string> eie_prompt;
  std::string final_prompt;
  std::string raw_response;
  int prediction = 0;
  double score = 0.0;
  bool unparseable = false;
  std::optional<std::string> warning;
  StageTimings timings;
  AblationConfig config;
};

// ---------------------------------------------------------------------------
// Label parsing

struct ParsedLabel {
  int prediction = 0;
  double score = 0.0;
  bool unparseable = false;

  friend bool operator==(const ParsedLabel&, const ParsedLabel&) = default;
};

namespace detail {

inline std::string first_word(std::string_view lower) {
  std::size_t i = 0;
  while (i < lower.size() && !std::isalnum(static_cast<unsigned char>(lower[i]))) ++i;
  std::size_t j = i;
  while (j < lower.size() && std::isalnum(static_cast<unsigned char>(lower[j]))) ++j;
  return std::string(lower.substr(i, j - i));
}

// Strips whitespace and the word-boundary markers used by common tokenizers.
inline std::string clean_token(std::string_view tok) {
  std::string out;
  for (std::size_t i = 0; i < tok.size(); ++i) {
    const auto c = static_cast<unsigned char>(tok[i]);
    if (std::isspace(c)) continue;
    if (c == 0xE2 && i + 2 < tok.size() && static_cast<unsigned char>(tok[i + 1]) == 0x96 &&
        static_cast<unsigned char>(tok[i + 2]) == 0x81) {  // U+2581
      i += 2;
      continue;
    }
    if (c == 0xC4 && i + 1 < tok.size() && static_cast<unsigned char>(tok[i + 1]) == 0xA0) {  // U+0120
      i += 1;
      continue;
    }
    out += static_cast<char>(std::tolower(c));
  }
  return out;
}

// P(positive) from the first content token's log-probability, when that token
// commits to one of the two answers.
inline std::optional<double> positive_probability(const std::vector<TokenScore>& scores, std::string_view pos,
                                                  std::string_view neg) {
  for (const auto& t : scores) {
    const auto tok = clean_token(t.token);
    if (tok.empty()) continue;
    if (!std::isfinite(t.logprob)) return std::nullopt;
    const double p = std::clamp(std::exp(t.logprob), 0.0, 1.0);
    const bool starts_pos = pos.starts_with(tok) || tok == "yes";
    const bool starts_neg = neg.starts_with(tok) || tok == "no";
    if (starts_pos && !starts_neg) return p;
    if (starts_neg && !starts_pos) return 1.0 - p;
    return std::nullopt;
  }
  return std::nullopt;
}

}  // namespace detail

// The negative word is checked first, so "not hateful" never reads as
// "hateful". Falls back to a leading yes/no, then to 0 with the unparseable
// flag. score is P(positive) from token log-probabilities when available,
// else the hard label.
inline ParsedLabel parse_label(std::string_view response_text, const DatasetProfile& profile,
                               const std::optional<std::vector<TokenScore>>& token_scores = std::nullopt) {
  const auto text = detail::lowercase(response_text);
  const auto pos = detail::lowercase(profile.positive_word);
  const auto neg = detail::lowercase(profile.negative_word);
  ParsedLabel out;
  if (text.find(neg) != std::string::npos) {
    out.prediction = 0;
  } else if (text.find(pos) != std::string::npos) {
    out.prediction = 1;
  } else if (const auto w = detail::first_word(text); w == "no") {
    out.prediction = 0;
  } else if (w == "yes") {
    out.prediction = 1;
  } else {
    out.unparseable = true;
    return out;
  }
  out.score = out.prediction;
  if (token_scores && !token_scores->empty())
    if (auto p = detail::positive_probability(*token_scores, pos, neg)) out.score = *p;
  return out;
}

// ---------------------------------------------------------------------------
// Neighbor selection

namespace detail {

// Unbiased draw in [0, n) from a standard-specified engine, so sampled
// neighbors are identical across standard library implementations.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t u;
  do u = rng();
  while (u >= limit);
  return u % n;
}

}  // namespace detail

struct NeighborSelection {
  std::vector<Neighbor> retrieved;
  std::vector<std::string> sampled;
  std::optional<std::string> warning;

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& n : retrieved) out.push_back(n.id);
    out.insert(out.end(), sampled.begin(), sampled.end());
    return out;
  }
};

// EPM on: top-k of the index excluding the target itself. EPM off and EIE on:
// k pool ids drawn without replacement, seeded by (random_seed, target id).
// Both off: nothing.
inline NeighborSelection select_neighbors(const FusedIndex* index, const EmbeddingVector* target_vec,
                                          const AblationConfig& config, std::span<const std::string> pool_ids,
                                          std::string_view target_id) {
  NeighborSelection sel;
  if (config.k == 0) throw std::invalid_argument("k must be >= 1");
  if (config.use_epm) {
    if (!index || index->empty()) throw std::invalid_argument("retrieval needs a nonempty index");
    if (!target_vec) throw std::invalid_argument("retrieval needs the target's fused vector");
    sel.retrieved = top_k(*index, *target_vec, config.k, target_id);
    if (sel.retrieved.size() < config.k)
      sel.warning = "pool has " + std::to_string(sel.retrieved.size()) + " candidates, fewer than k=" +
                    std::to_string(config.k);
    return sel;
  }
  if (!config.use_eie) return sel;

  std::vector<std::string> candidates;
  candidates.reserve(pool_ids.size());
  for (const auto& id : pool_ids)
    if (id != target_id) candidates.push_back(id);
  if (candidates.empty()) throw std::invalid_argument("neighbor sampling needs a nonempty pool");
  std::mt19937_64 rng(config.random_seed ^ fnv1a64(target_id));
  const std::size_t n = std::min(config.k, candidates.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + detail::bounded(rng, candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
    sel.sampled.push_back(candidates[i]);
  }
  if (n < config.k)
    sel.warning = "pool has " + std::to_string(n) + " candidates, fewer than k=" + std::to_string(config.k);
  return sel;
}

// ---------------------------------------------------------------------------
// Stages

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& msg, std::optional<LmmErrorKind> lmm_kind = std::nullopt)
      : std::runtime_error(stage + ": " + msg), stage_(std::move(stage)), lmm_kind_(lmm_kind) {}
  const std::string& stage() const noexcept { return stage_; }
  std::optional<LmmErrorKind> lmm_kind() const noexcept { return lmm_kind_; }

 private:
  std::string stage_;
  std::optional<LmmErrorKind> lmm_kind_;
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

struct EvolutionInfo {
  std::string text;
  RenderedPrompt prompt;
};

// One extraction call over the neighbors; the rules block is dropped when
// use_cra is false.
inline EvolutionInfo extract_evolution_info(std::span<const MemeRecord> neighbors, const DatasetProfile& profile,
                                            const LmmClient& client, const GenerationParams& params, bool use_cra,
                                            bool text_only_neighbors = false) {
  RenderedPrompt prompt;
  try {
    prompt = build_eie_prompt(profile, neighbors, {use_cra, text_only_neighbors});
  } catch (const PromptError& e) {
    throw StageError("eie", e.what());
  }
  try {
    auto resp = client.generate(make_request(prompt, params));
    return {trim(resp.text), std::move(prompt)};
  } catch (const LmmError& e) {
    throw StageError("eie", e.what(), e.kind());
  }
}

struct PipelineOptions {
  StagePreset preset = generation_preset("mmicl");
  bool text_only_neighbors = false;
};

// Read-only view over everything one classification needs. Safe to share
// across worker threads.
class CoePipeline {
 public:
  CoePipeline(const LabeledCorpus& corpus, const LmmClient& client, const FusedIndex* index = nullptr,
              const EmbeddingTable* text_embs = nullptr, const EmbeddingTable* image_embs = nullptr,
              PipelineOptions options = {})
      : corpus_(corpus),
        client_(client),
        index_(index),
        text_embs_(text_embs),
        image_embs_(image_embs),
        options_(std::move(options)),
        pool_ids_(corpus.pool_ids()) {}

  const LabeledCorpus& corpus() const noexcept { return corpus_; }
  const PipelineOptions& options() const noexcept { return options_; }

  PipelineResult classify(const MemeRecord& target, const AblationConfig& ablation) const {
    using clock = std::chrono::steady_clock;
    auto since = [](clock::time_point t) { return std::chrono::duration_cast<Millis>(clock::now() - t); };
    const auto& profile = corpus_.profile();

    PipelineResult r;
    r.meme_id = target.id;
    r.config = ablation;

    auto t0 = clock::now();
    NeighborSelection sel;
    if (ablation.use_epm || ablation.use_eie) {
      try {
        std::optional<EmbeddingVector> query;
        if (ablation.use_epm) query = target_vector(target.id);
        sel = select_neighbors(index_, query ? &*query : nullptr, ablation, pool_ids_, target.id);
      } catch (const std::exception& e) {
        throw StageError("retrieval", e.what());
      }
    }
    r.retrieved = sel.retrieved;
    r.sampled = sel.sampled;
    r.warning = sel.warning;
    r.timings.retrieval = since(t0);

    std::vector<MemeRecord> neighbors;
    for (const auto& id : sel.ids()) {
      const auto* rec = corpus_.find(id);
      if (!rec) throw StageError("retrieval", "neighbor '" + id + "' is not in the corpus");
      neighbors.push_back(*rec);
    }

    FinalPromptInputs fin;
    fin.include_amplifier = ablation.use_cra;
    fin.evolution_count = neighbors.size();
    if (ablation.use_eie) {
      t0 = clock::now();
      auto info = extract_evolution_info(neighbors, profile, client_, options_.preset.eie, ablation.use_cra,
                                         options_.text_only_neighbors);
      r.timings.eie = since(t0);
      r.info_text = info.text;
      r.eie_prompt = info.prompt.text;
      fin.info = std::move(info.text);
    } else if (ablation.use_epm) {
      fin.raw_neighbors = neighbors;
    }

    t0 = clock::now();
    RenderedPrompt prompt;
    try {
      prompt = build_final_prompt(profile, target, fin);
    } catch (const PromptError& e) {
      throw StageError("final", e.what());
    }
    r.final_prompt = prompt.text;
    LmmResponse resp;
    try {
      resp = client_.generate(make_request(std::move(prompt), options_.preset.final));
    } catch (const LmmError& e) {
      throw StageError("final", e.what(), e.kind());
    }
    r.timings.final = since(t0);
    r.raw_response = resp.text;
    const auto parsed = parse_label(resp.text, profile, resp.token_scores);
    r.prediction = parsed.prediction;
    r.score = parsed.score;
    r.unparseable = parsed.unparseable;
    return r;
  }

 private:
  EmbeddingVector target_vector(const std::string& id) const {
    if (!index_) throw std::invalid_argument("retrieval needs an index");
    if (!text_embs_ || !image_embs_) throw std::invalid_argument("retrieval needs text and image embeddings");
    const auto* t = text_embs_->find(id);
    if (!t) throw std::invalid_argument("no text embedding for '" + id + "'");
    const auto* im = image_embs_->find(id);
    if (!im) throw std::invalid_argument("no image embedding for '" + id + "'");
    return fuse(*t, *im, index_->fusion());
  }

  const LabeledCorpus& corpus_;
  const LmmClient& client_;
  const FusedIndex* index_;
  const EmbeddingTable* text_embs_;
  const EmbeddingTable* image_embs_;
  PipelineOptions options_;
  std::vector<std::string> pool_ids_;
};

// ---------------------------------------------------------------------------
// Checkpoints and result files

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json result_to_json(const PipelineResult& r, bool include_timings = true) {
  nlohmann::json retrieved = nlohmann::json::array();
  for (const auto& n : r.retrieved) retrieved.push_back({n.id, n.similarity});
  nlohmann::json j{{"meme_id", r.meme_id},
                   {"config", ablation_to_json(r.config)},
                   {"retrieved", retrieved},
                   {"sampled", r.sampled},
                   {"info_text", r.info_text ? nlohmann::json(*r.info_text) : nlohmann::json(nullptr)},
                   {"eie_prompt", r.eie_prompt ? nlohmann::json(*r.eie_prompt) : nlohmann::json(nullptr)},
                   {"final_prompt", r.final_prompt},
                   {"raw_response", r.raw_response},
                   {"prediction", r.prediction},
                   {"score", r.score},
                   {"unparseable", r.unparseable}};
  if (r.warning) j["warning"] = *r.warning;
  if (include_timings)
    j["timings"] = {{"retrieval_ms", r.timings.retrieval.count()},
                    {"eie_ms", r.timings.eie.count()},
                    {"final_ms", r.timings.final.count()}};
  return j;
}

inline PipelineResult result_from_json(const nlohmann::json& j) {
  PipelineResult r;
  r.meme_id = j.at("meme_id").get<std::string>();
  if (j.contains("config")) r.config = ablation_from_json(j.at("config"));
  for (const auto& n : j.at("retrieved")) r.retrieved.push_back({n.at(0).get<std::string>(), n.at(1).get<double>()});
  if (j.contains("sampled")) r.sampled = j.at("sampled").get<std::vector<std::string>>();
  if (!j.at("info_text").is_null()) r.info_text = j.at("info_text").get<std::string>();
  if (!j.at("eie_prompt").is_null()) r.eie_prompt = j.at("eie_prompt").get<std::string>();
  r.final_prompt = j.at("final_prompt").get<std::string>();
  r.raw_response = j.at("raw_response").get<std::string>();
  r.prediction = j.at("prediction").get<int>();
  if (r.prediction != 0 && r.prediction != 1) throw CheckpointError("prediction must be 0 or 1");
  r.score = j.at("score").get<double>();
  r.unparseable = j.value("unparseable", false);
  if (j.contains("warning") && j.at("warning").is_string()) r.warning = j.at("warning").get<std::string>();
  if (j.contains("timings")) {
    const auto& t = j.at("timings");
    r.timings.retrieval = Millis{t.value("retrieval_ms", 0)};
    r.timings.eie = Millis{t.value("eie_ms", 0)};
    r.timings.final = Millis{t.value("final_ms", 0)};
  }
  return r;
}

// A final line cut short by a crash is skipped; a malformed line anywhere
// else is an error.
inline std::vector<PipelineResult> read_results(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(std::move(line));
  std::vector<PipelineResult> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      out.push_back(result_from_json(nlohmann::json::parse(lines[i])));
    } catch (const std::exception& e) {
      if (i + 1 == lines.size()) break;
      throw CheckpointError(path.string() + ": record " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

inline void write_results(const std::filesystem::path& path, const std::vector<PipelineResult>& results,
                          bool include_timings = false) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  for (const auto& r : results) out << result_to_json(r, include_timings).dump() << '\n';
}

// Single append-only writer shared by all workers.
class CheckpointWriter {
 public:
  CheckpointWriter(const std::filesystem::path& path, bool append)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw CheckpointError("cannot open checkpoint " + path.string());
  }

  void append(const PipelineResult& r) {
    const auto line = result_to_json(r).dump();
    std::lock_guard lock(mutex_);
    out_ << line << '\n';
    out_.flush();
  }

 private:
  std::mutex mutex_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Batch runs

struct MemeError {
  std::string meme_id;
  std::string stage;
  std::string message;
};

class FatalEndpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  std::size_t parallelism = 4;
  std::optional<std::filesystem::path> checkpoint;
  bool resume = false;
  // Stop after this many new memes; the rest stay pending for a resume.
  std::optional<std::size_t> limit;
};

struct RunOutcome {
  std::vector<PipelineResult> results;  // test-record order
  std::vector<MemeError> errors;
  std::size_t resumed = 0;
  std::size_t processed = 0;
  std::vector<std::string> warnings;
};

// Classifies every test record with up to `parallelism` memes in flight. A
// failure aborts only that meme, except when the very first LMM call cannot
// reach the endpoint, which aborts the run with FatalEndpointError.
inline RunOutcome run_dataset(const CoePipeline& pipeline, const AblationConfig& ablation, const RunOptions& options = {}) {
  const auto& corpus = pipeline.corpus();
  std::vector<const MemeRecord*> tests;
  for (const auto& r : corpus.records())
    if (r.split == Split::test) tests.push_back(&r);
  if (tests.empty()) throw std::invalid_argument("corpus has no test records");
  if (options.parallelism == 0) throw std::invalid_argument("parallelism must be >= 1");

  std::unordered_map<std::string, PipelineResult> done;
  RunOutcome outcome;
  if (options.resume && options.checkpoint && std::filesystem::exists(*options.checkpoint)) {
    for (auto& r : read_results(*options.checkpoint)) {
      if (r.config != ablation)
        throw CheckpointError("checkpoint " + options.checkpoint->string() + " was written with configuration '" +
                              ablation_label(r.config) + "' (k=" + std::to_string(r.config.k) + "), not '" +
                              ablation_label(ablation) + "' (k=" + std::to_string(ablation.k) + ")");
      const auto* rec = corpus.find(r.meme_id);
      if (rec && rec->split == Split::test) done.insert_or_assign(r.meme_id, std::move(r));
    }
    outcome.resumed = done.size();
  }

  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < tests.size(); ++i)
    if (!done.contains(tests[i]->id)) pending.push_back(i);
  if (options.limit && pending.size() > *options.limit) pending.resize(*options.limit);

  std::optional<CheckpointWriter> writer;
  if (options.checkpoint) {
    // Rewrite the surviving records first so a torn last line cannot merge
    // with the next append.
    if (outcome.resumed) {
      std::vector<PipelineResult> kept;
      for (const auto* t : tests)
        if (auto it = done.find(t->id); it != done.end()) kept.push_back(it->second);
      auto tmp = *options.checkpoint;
      tmp += ".tmp";
      write_results(tmp, kept, true);
      std::filesystem::rename(tmp, *options.checkpoint);
    }
    writer.emplace(*options.checkpoint, options.resume);
  }

  std::vector<std::optional<PipelineResult>> fresh(tests.size());
  std::vector<std::optional<MemeError>> failed(tests.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> any_success{false};
  std::atomic<bool> abort{false};
  std::mutex fatal_mutex;
  std::optional<std::string> fatal;

  auto worker = [&] {
    for (;;) {
      if (abort.load()) return;
      const auto slot = next.fetch_add(1);
      if (slot >= pending.size()) return;
      const auto i = pending[slot];
      try {
        auto r = pipeline.classify(*tests[i], ablation);
        any_success.store(true);
        if (writer) writer->append(r);
        fresh[i] = std::move(r);
      } catch (const StageError& e) {
        if (e.lmm_kind() == LmmErrorKind::unreachable && !any_success.load()) {
          std::lock_guard lock(fatal_mutex);
          if (!fatal) fatal = e.what();
          abort.store(true);
        }
        failed[i] = MemeError{tests[i]->id, e.stage(), e.what()};
      } catch (const std::exception& e) {
        failed[i] = MemeError{tests[i]->id, "pipeline", e.what()};
      }
    }
  };
  {
    std::vector<std::jthread> workers;
    const auto n = std::min(options.parallelism, std::max<std::size_t>(pending.size(), 1));
    for (std::size_t t = 0; t < n; ++t) workers.emplace_back(worker);
  }
  if (fatal) throw FatalEndpointError("endpoint unreachable on first request: " + *fatal);

  for (std::size_t i = 0; i < tests.size(); ++i) {
    if (fresh[i]) {
      if (fresh[i]->warning) outcome.warnings.push_back(tests[i]->id + ": " + *fresh[i]->warning);
      outcome.results.push_back(std::move(*fresh[i]));
      ++outcome.processed;
    } else if (auto it = done.find(tests[i]->id); it != done.end()) {
      outcome.results.push_back(std::move(it->second));
    }
    if (failed[i]) outcome.errors.push_back(std::move(*failed[i]));
  }
  return outcome;
}

}  // namespace memechain
