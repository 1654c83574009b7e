#pragma once

// Chat-completion client for OpenAI-compatible multimodal servers (vLLM,
// llama.cpp server, LMDeploy, ...). Images travel as base64 data URIs,
// interleaved with the prompt text at their placeholders.

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "memechain/lmm.hpp"

namespace memechain {

struct EndpointConfig {
  std::string base_url = "http://127.0.0.1:8000";
  std::string path = "/v1/chat/completions";
  std::string model;
  // Name of the environment variable holding the bearer token.
  std::string api_key_env = "MEMECHAIN_API_KEY";
  std::string preset = "mmicl";
  // Relative image references resolve against this directory.
  std::filesystem::path image_root;
  bool request_logprobs = false;
};

inline EndpointConfig endpoint_from_json(const nlohmann::json& j, EndpointConfig base = {}) {
  if (j.contains("base_url")) base.base_url = j.at("base_url").get<std::string>();
  if (j.contains("path")) base.path = j.at("path").get<std::string>();
  if (j.contains("model")) base.model = j.at("model").get<std::string>();
  if (j.contains("api_key_env")) base.api_key_env = j.at("api_key_env").get<std::string>();
  if (j.contains("preset")) base.preset = j.at("preset").get<std::string>();
  if (j.contains("image_root")) base.image_root = j.at("image_root").get<std::string>();
  if (j.contains("request_logprobs")) base.request_logprobs = j.at("request_logprobs").get<bool>();
  return base;
}

inline nlohmann::json endpoint_to_json(const EndpointConfig& e) {
  return {{"base_url", e.base_url},       {"path", e.path},
          {"model", e.model},             {"api_key_env", e.api_key_env},
          {"preset", e.preset},           {"image_root", e.image_root.string()},
          {"request_logprobs", e.request_logprobs}};
}

struct ImagePayload {
  std::string mime;
  std::string bytes;
};

using ImageLoader = std::function<ImagePayload(const std::string& ref)>;

inline std::string base64_encode(std::string_view in) {
  static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const auto n = (static_cast<unsigned char>(in[i]) << 16) | (static_cast<unsigned char>(in[i + 1]) << 8) |
                   static_cast<unsigned char>(in[i + 2]);
    out += table[(n >> 18) & 63];
    out += table[(n >> 12) & 63];
    out += table[(n >> 6) & 63];
    out += table[n & 63];
  }
  if (i < in.size()) {
    const bool two = i + 1 < in.size();
    const auto n = (static_cast<unsigned char>(in[i]) << 16) | (two ? static_cast<unsigned char>(in[i + 1]) << 8 : 0);
    out += table[(n >> 18) & 63];
    out += table[(n >> 12) & 63];
    out += two ? table[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::string image_mime_type(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  if (ext == ".bmp") return "image/bmp";
  return "application/octet-stream";
}

inline ImageLoader file_image_loader(std::filesystem::path root) {
  return [root = std::move(root)](const std::string& ref) {
    std::filesystem::path p(ref);
    if (p.is_relative() && !root.empty()) p = root / p;
    std::ifstream in(p, std::ios::binary);
    if (!in) throw LmmError(LmmErrorKind::invalid_request, "cannot read image " + p.string());
    return ImagePayload{image_mime_type(p), std::string(std::istreambuf_iterator<char>(in), {})};
  };
}

// Splits the prompt at each "<imageN>" and puts image N's data URI there.
inline nlohmann::json encode_request_body(const LmmRequest& request, const EndpointConfig& endpoint,
                                          const ImageLoader& load_image) {
  validate(request);
  nlohmann::json content = nlohmann::json::array();
  const auto& text = request.prompt.text;
  std::size_t pos = 0;
  auto push_text = [&](std::string_view s) {
    if (!s.empty()) content.push_back({{"type", "text"}, {"text", std::string(s)}});
  };
  for (std::size_t i = 0; i < request.images.size(); ++i) {
    const auto ph = image_placeholder(i);
    const auto at = text.find(ph, pos);
    push_text(std::string_view(text).substr(pos, at - pos));
    const auto img = load_image(request.images[i]);
    content.push_back(
        {{"type", "image_url"}, {"image_url", {{"url", "data:" + img.mime + ";base64," + base64_encode(img.bytes)}}}});
    pos = at + ph.size();
  }
  push_text(std::string_view(text).substr(pos));

  nlohmann::json body{{"model", endpoint.model},
                      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})},
                      {"temperature", request.params.temperature},
                      {"max_tokens", request.params.max_new_tokens}};
  // Not part of the common schema; servers without it ignore the field.
  if (request.params.min_new_tokens > 0) body["min_tokens"] = request.params.min_new_tokens;
  if (endpoint.request_logprobs) body["logprobs"] = true;
  return body;
}

inline LmmResponse decode_response_body(std::string_view body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    throw LmmError(LmmErrorKind::missing_text, std::string("response is not JSON: ") + e.what());
  }
  const auto* choices = j.contains("choices") && j.at("choices").is_array() && !j.at("choices").empty()
                            ? &j.at("choices").at(0)
                            : nullptr;
  if (!choices || !choices->contains("message") || !choices->at("message").contains("content"))
    throw LmmError(LmmErrorKind::missing_text, "response has no choices[0].message.content");
  const auto& c = choices->at("message").at("content");
  LmmResponse r;
  if (c.is_string()) {
    r.text = c.get<std::string>();
  } else if (c.is_array()) {
    for (const auto& part : c)
      if (part.contains("text") && part.at("text").is_string()) r.text += part.at("text").get<std::string>();
  }
  if (r.text.empty()) throw LmmError(LmmErrorKind::missing_text, "response content is empty");
  if (choices->contains("logprobs") && choices->at("logprobs").is_object() &&
      choices->at("logprobs").contains("content") && choices->at("logprobs").at("content").is_array()) {
    std::vector<TokenScore> scores;
    for (const auto& t : choices->at("logprobs").at("content"))
      scores.push_back({t.value("token", std::string{}), t.value("logprob", 0.0)});
    r.token_scores = std::move(scores);
  }
  if (j.contains("model") && j.at("model").is_string()) r.backend_id = j.at("model").get<std::string>();
  return r;
}

inline LmmError status_error(int status, std::string_view body) {
  std::string lower(body.substr(0, 2048));
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  const auto snippet = std::string(body.substr(0, 200));
  if (status == 413 || status == 415 || (status == 400 && lower.find("image") != std::string::npos))
    return LmmError(LmmErrorKind::image_rejected, "HTTP " + std::to_string(status) + ": " + snippet, status);
  return LmmError(LmmErrorKind::http_status, "HTTP " + std::to_string(status) + ": " + snippet, status);
}

class HttpBackend : public Backend {
 public:
  explicit HttpBackend(EndpointConfig endpoint, ImageLoader loader = {})
      : endpoint_(std::move(endpoint)),
        loader_(loader ? std::move(loader) : file_image_loader(endpoint_.image_root)) {}

  LmmResponse complete(const LmmRequest& request) override {
    const auto body = encode_request_body(request, endpoint_, loader_).dump();
    httplib::Client cli(endpoint_.base_url);
    if (!cli.is_valid())
      throw LmmError(LmmErrorKind::invalid_request, "unsupported endpoint URL '" + endpoint_.base_url + "'");
    const auto timeout = request.params.request_timeout;
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    httplib::Headers headers;
    if (!endpoint_.api_key_env.empty())
      if (const char* key = std::getenv(endpoint_.api_key_env.c_str()); key && *key)
        headers.emplace("Authorization", std::string("Bearer ") + key);
    auto res = cli.Post(endpoint_.path, headers, body, "application/json");
    if (!res) {
      const auto err = res.error();
      const auto msg = endpoint_.base_url + endpoint_.path + ": " + httplib::to_string(err);
      if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read || err == httplib::Error::Write)
        throw LmmError(LmmErrorKind::timeout, msg);
      throw LmmError(LmmErrorKind::unreachable, msg);
    }
    if (res->status < 200 || res->status >= 300) throw status_error(res->status, res->body);
    auto r = decode_response_body(res->body);
    if (r.backend_id.empty()) r.backend_id = id();
    return r;
  }

  std::string id() const override { return endpoint_.model.empty() ? endpoint_.base_url : endpoint_.model; }

  const EndpointConfig& endpoint() const noexcept { return endpoint_; }

 private:
  EndpointConfig endpoint_;
  ImageLoader loader_;
};

}  // namespace memechain
