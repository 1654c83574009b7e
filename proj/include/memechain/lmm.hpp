#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "memechain/prompt.hpp"

namespace memechain {

using Millis = std::chrono::milliseconds;

struct GenerationParams {
  double temperature = 0.2;
  int min_new_tokens = 0;
  int max_new_tokens = 50;
  Millis request_timeout{120'000};
  int max_retries = 3;

  friend bool operator==(const GenerationParams&, const GenerationParams&) = default;
};

struct StagePreset {
  std::string name;
  GenerationParams eie;
  GenerationParams final;

  const GenerationParams& for_stage(Stage s) const { return s == Stage::eie ? eie : final; }
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"mmicl", "llava"};
  return names;
}

// mmicl: 50..80 new tokens for extraction, 1..50 for the final answer.
// llava: up to 1024 new tokens in both stages.
inline StagePreset generation_preset(std::string_view name) {
  if (name == "mmicl") {
    GenerationParams eie;
    eie.min_new_tokens = 50;
    eie.max_new_tokens = 80;
    GenerationParams fin;
    fin.min_new_tokens = 1;
    fin.max_new_tokens = 50;
    return {"mmicl", eie, fin};
  }
  if (name == "llava") {
    GenerationParams p;
    p.min_new_tokens = 0;
    p.max_new_tokens = 1024;
    return {"llava", p, p};
  }
  throw std::invalid_argument("unknown generation preset '" + std::string(name) + "' (available: mmicl, llava)");
}

struct LmmRequest {
  RenderedPrompt prompt;
  // One image reference per prompt slot, in slot order.
  std::vector<std::string> images;
  GenerationParams params;
  Stage stage = Stage::final;

  friend bool operator==(const LmmRequest&, const LmmRequest&) = default;
};

inline LmmRequest make_request(RenderedPrompt prompt, const GenerationParams& params) {
  LmmRequest r;
  r.stage = prompt.stage;
  for (const auto& s : prompt.slots) r.images.push_back(s.image_ref);
  r.prompt = std::move(prompt);
  r.params = params;
  return r;
}

struct TokenScore {
  std::string token;
  double logprob = 0.0;

  friend bool operator==(const TokenScore&, const TokenScore&) = default;
};

struct LmmResponse {
  std::string text;
  std::optional<std::vector<TokenScore>> token_scores;
  Millis latency{0};
  std::string backend_id;
  int attempts = 1;
};

enum class LmmErrorKind {
  timeout,
  http_status,
  missing_text,
  image_rejected,
  unreachable,
  invalid_request,
};

inline std::string_view to_string(LmmErrorKind k) {
  switch (k) {
    case LmmErrorKind::timeout: return "timeout";
    case LmmErrorKind::http_status: return "http_status";
    case LmmErrorKind::missing_text: return "missing_text";
    case LmmErrorKind::image_rejected: return "image_rejected";
    case LmmErrorKind::unreachable: return "unreachable";
    case LmmErrorKind::invalid_request: return "invalid_request";
  }
  return "unknown";
}

class LmmError : public std::runtime_error {
 public:
  LmmError(LmmErrorKind kind, const std::string& msg, int status = 0)
      : std::runtime_error(std::string(to_string(kind)) + ": " + msg), kind_(kind), status_(status) {}

  LmmErrorKind kind() const noexcept { return kind_; }
  int status() const noexcept { return status_; }
  int attempts() const noexcept { return attempts_; }
  void set_attempts(int n) noexcept { attempts_ = n; }

  // Timeouts, connection failures, 429 and 5xx are worth retrying.
  bool transient() const noexcept {
    switch (kind_) {
      case LmmErrorKind::timeout:
      case LmmErrorKind::unreachable:
        return true;
      case LmmErrorKind::http_status:
        return status_ == 429 || status_ >= 500;
      default:
        return false;
    }
  }

 private:
  LmmErrorKind kind_;
  int status_;
  int attempts_ = 1;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual LmmResponse complete(const LmmRequest& request) = 0;
  virtual std::string id() const = 0;
};

struct BackoffPolicy {
  Millis base{1000};
  double factor = 2.0;
  Millis cap{30'000};
};

using Sleeper = std::function<void(Millis)>;

inline void sleep_for(Millis d) { std::this_thread::sleep_for(d); }

// Jittered exponential delay before retry number `retry` (0-based): a uniform
// draw from [d/2, d] with d = min(cap, base * factor^retry).
inline Millis backoff_delay(const BackoffPolicy& policy, int retry, std::mt19937_64& rng) {
  double d = static_cast<double>(policy.base.count());
  for (int i = 0; i < retry && d < static_cast<double>(policy.cap.count()); ++i) d *= policy.factor;
  d = std::min(d, static_cast<double>(policy.cap.count()));
  std::uniform_real_distribution<double> jitter(0.5, 1.0);
  return Millis{static_cast<std::int64_t>(d * jitter(rng))};
}

inline void validate(const GenerationParams& p) {
  if (!(p.temperature >= 0.0)) throw LmmError(LmmErrorKind::invalid_request, "temperature must be >= 0");
  if (p.min_new_tokens < 0) throw LmmError(LmmErrorKind::invalid_request, "min_new_tokens must be >= 0");
  if (p.max_new_tokens <= 0) throw LmmError(LmmErrorKind::invalid_request, "max_new_tokens must be > 0");
  if (p.min_new_tokens > p.max_new_tokens)
    throw LmmError(LmmErrorKind::invalid_request, "min_new_tokens exceeds max_new_tokens");
  if (p.max_retries < 0) throw LmmError(LmmErrorKind::invalid_request, "max_retries must be >= 0");
}

inline void validate(const LmmRequest& r) {
  validate(r.params);
  if (r.prompt.text.empty()) throw LmmError(LmmErrorKind::invalid_request, "empty prompt");
  if (r.images.size() != r.prompt.slots.size())
    throw LmmError(LmmErrorKind::invalid_request, "request carries " + std::to_string(r.images.size()) +
                                                      " images for " + std::to_string(r.prompt.slots.size()) +
                                                      " prompt slots");
  try {
    check_slots(r.prompt);
  } catch (const PromptError& e) {
    throw LmmError(LmmErrorKind::invalid_request, e.what());
  }
}

// Shareable across threads; each generate() call is independent.
class LmmClient {
 public:
  explicit LmmClient(std::shared_ptr<Backend> backend, Sleeper sleeper = sleep_for, BackoffPolicy backoff = {})
      : backend_(std::move(backend)), sleeper_(std::move(sleeper)), backoff_(backoff) {
    if (!backend_) throw std::invalid_argument("LmmClient needs a backend");
  }

  LmmResponse generate(const LmmRequest& request) const {
    validate(request);
    for (int attempt = 0;; ++attempt) {
      const auto start = std::chrono::steady_clock::now();
      try {
        auto resp = backend_->complete(request);
        if (resp.text.empty()) throw LmmError(LmmErrorKind::missing_text, "backend returned empty text");
        resp.attempts = attempt + 1;
        resp.latency = std::chrono::duration_cast<Millis>(std::chrono::steady_clock::now() - start);
        if (resp.backend_id.empty()) resp.backend_id = backend_->id();
        return resp;
      } catch (LmmError& e) {
        e.set_attempts(attempt + 1);
        if (!e.transient() || attempt >= request.params.max_retries) throw;
      }
      sleeper_(next_delay(attempt));
    }
  }

  Backend& backend() const noexcept { return *backend_; }

 private:
  Millis next_delay(int retry) const {
    std::lock_guard lock(rng_mutex_);
    return backoff_delay(backoff_, retry, rng_);
  }

  std::shared_ptr<Backend> backend_;
  Sleeper sleeper_;
  BackoffPolicy backoff_;
  mutable std::mutex rng_mutex_;
  mutable std::mt19937_64 rng_{std::random_device{}()};
};

// FNV-1a, 64-bit.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// "<stage>:<16 hex digits>" over the prompt text.
inline std::string request_fingerprint(Stage stage, std::string_view prompt_text) {
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a64(prompt_text)));
  return std::string(to_string(stage)) + ":" + hex;
}

inline std::string request_fingerprint(const LmmRequest& r) { return request_fingerprint(r.stage, r.prompt.text); }

struct ScriptedReply {
  std::string text;
  std::optional<std::vector<TokenScore>> token_scores;
};

// Substring rule, consulted when no fingerprint matches.
struct ScriptRule {
  std::optional<Stage> stage;
  std::string contains;
  ScriptedReply reply;
};

struct StubScript {
  std::map<std::string, ScriptedReply> responses;
  std::vector<ScriptRule> rules;
  ScriptedReply fallback{"not hateful", std::nullopt};
};

namespace detail {

inline ScriptedReply reply_from_json(const nlohmann::json& j) {
  if (j.is_string()) return {j.get<std::string>(), std::nullopt};
  if (!j.is_object() || !j.contains("text") || !j.at("text").is_string())
    throw std::invalid_argument("script reply must be a string or an object with a 'text' string");
  ScriptedReply r{j.at("text").get<std::string>(), std::nullopt};
  if (j.contains("token_scores")) {
    std::vector<TokenScore> scores;
    for (const auto& t : j.at("token_scores")) scores.push_back({t.at(0).get<std::string>(), t.at(1).get<double>()});
    r.token_scores = std::move(scores);
  }
  return r;
}

inline nlohmann::json reply_to_json(const ScriptedReply& r) {
  if (!r.token_scores) return r.text;
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& t : *r.token_scores) scores.push_back({t.token, t.logprob});
  return {{"text", r.text}, {"token_scores", scores}};
}

}  // namespace detail

// Script file:
//   {"default": reply, "responses": {fingerprint: reply, ...},
//    "rules": [{"stage": "final", "contains": "...", "reply": reply}, ...]}
// where reply is a string or {"text": ..., "token_scores": [[token, logprob], ...]}.
inline StubScript script_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("stub script must be a JSON object");
  StubScript s;
  if (j.contains("default")) s.fallback = detail::reply_from_json(j.at("default"));
  if (j.contains("responses"))
    for (const auto& [key, value] : j.at("responses").items()) s.responses[key] = detail::reply_from_json(value);
  if (j.contains("rules")) {
    for (const auto& r : j.at("rules")) {
      ScriptRule rule;
      if (r.contains("stage")) {
        const auto st = r.at("stage").get<std::string>();
        if (st == "eie") rule.stage = Stage::eie;
        else if (st == "final") rule.stage = Stage::final;
        else throw std::invalid_argument("unknown stage '" + st + "' in stub rule");
      }
      rule.contains = r.at("contains").get<std::string>();
      rule.reply = detail::reply_from_json(r.at("reply"));
      s.rules.push_back(std::move(rule));
    }
  }
  return s;
}

inline nlohmann::json script_to_json(const StubScript& s) {
  nlohmann::json j{{"default", detail::reply_to_json(s.fallback)}};
  j["responses"] = nlohmann::json::object();
  for (const auto& [k, v] : s.responses) j["responses"][k] = detail::reply_to_json(v);
  j["rules"] = nlohmann::json::array();
  for (const auto& r : s.rules) {
    nlohmann::json rule{{"contains", r.contains}, {"reply", detail::reply_to_json(r.reply)}};
    if (r.stage) rule["stage"] = std::string(to_string(*r.stage));
    j["rules"].push_back(rule);
  }
  return j;
}

inline StubScript load_script(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open stub script " + path.string());
  return script_from_json(nlohmann::json::parse(in));
}

// Deterministic offline backend. Replies by fingerprint, then by the first
// matching rule, then with the default; records every request it sees.
class StubBackend : public Backend {
 public:
  explicit StubBackend(StubScript script = {}) : script_(std::move(script)) {}

  LmmResponse complete(const LmmRequest& request) override {
    {
      std::lock_guard lock(mutex_);
      recorded_.push_back(request);
    }
    const auto& reply = lookup(request);
    LmmResponse r;
    r.text = reply.text;
    r.token_scores = reply.token_scores;
    r.backend_id = id();
    return r;
  }

  std::string id() const override { return "stub"; }

  std::vector<LmmRequest> recorded() const {
    std::lock_guard lock(mutex_);
    return recorded_;
  }

  std::size_t call_count(std::optional<Stage> stage = std::nullopt) const {
    std::lock_guard lock(mutex_);
    if (!stage) return recorded_.size();
    return static_cast<std::size_t>(
        std::count_if(recorded_.begin(), recorded_.end(), [&](const auto& r) { return r.stage == *stage; }));
  }

  void clear() {
    std::lock_guard lock(mutex_);
    recorded_.clear();
  }

 private:
  const ScriptedReply& lookup(const LmmRequest& request) const {
    if (auto it = script_.responses.find(request_fingerprint(request)); it != script_.responses.end())
      return it->second;
    for (const auto& rule : script_.rules) {
      if (rule.stage && *rule.stage != request.stage) continue;
      if (request.prompt.text.find(rule.contains) != std::string::npos) return rule.reply;
    }
    return script_.fallback;
  }

  StubScript script_;
  mutable std::mutex mutex_;
  std::vector<LmmRequest> recorded_;
};

}  // namespace memechain
