#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "memechain/builtin_templates.hpp"
#include "memechain/template.hpp"

namespace memechain {

enum class Split { pool, test };

inline std::string_view to_string(Split s) { return s == Split::pool ? "pool" : "test"; }

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "pool") return Split::pool;
  if (s == "test") return Split::test;
  return std::nullopt;
}

// One image + caption pair. label: 0 negative, 1 positive, empty when unknown.
struct MemeRecord {
  std::string id;
  std::string image_ref;
  std::string ocr_text;
  std::optional<int> label;
  Split split = Split::pool;

  friend bool operator==(const MemeRecord&, const MemeRecord&) = default;
};

// Dataset-specific wording. eie_instruction and final_instruction are template
// bodies (see template.hpp), not plain text.
struct DatasetProfile {
  std::string name;
  std::string positive_word;
  std::string negative_word;
  std::string amplifier_text;
  std::string eie_instruction;
  std::string final_instruction;

  friend bool operator==(const DatasetProfile&, const DatasetProfile&) = default;
};

class CorpusError : public std::runtime_error {
 public:
  CorpusError(const std::string& msg, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + msg : msg),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace detail

// Tags the prompt builder supplies for each stage.
inline std::set<std::string> eie_template_names() { return {"input", "k", "pos", "neg", "amplifier", "cra"}; }
inline std::set<std::string> final_template_names() {
  return {"ocr", "pos", "neg", "amplifier", "k", "info", "neighbors", "cra"};
}

// Throws CorpusError when the profile violates its invariants. The label
// words must let a scan for negative_word run before positive_word: either
// negative_word ends with positive_word ("not hateful" / "hateful"), or the
// two are disjoint.
inline void validate_profile(const DatasetProfile& p) {
  if (p.name.empty()) throw CorpusError("profile name is empty");
  if (p.positive_word.empty() || p.negative_word.empty())
    throw CorpusError("profile '" + p.name + "': label words must be nonempty");
  if (p.amplifier_text.empty())
    throw CorpusError("profile '" + p.name + "': amplifier_text is empty");
  const auto pos = detail::lowercase(p.positive_word);
  const auto neg = detail::lowercase(p.negative_word);
  if (pos == neg) throw CorpusError("profile '" + p.name + "': label words are identical");
  const bool suffix = detail::ends_with(neg, pos);
  const bool disjoint = neg.find(pos) == std::string::npos && pos.find(neg) == std::string::npos;
  if (!suffix && !disjoint)
    throw CorpusError("profile '" + p.name + "': negative_word '" + p.negative_word +
                      "' must end with positive_word '" + p.positive_word +
                      "' or not overlap it");
  const std::pair<const std::string*, std::set<std::string>> bodies[] = {
      {&p.eie_instruction, eie_template_names()}, {&p.final_instruction, final_template_names()}};
  for (const auto& [body, allowed] : bodies) {
    const char* field = body == &p.eie_instruction ? "eie_instruction" : "final_instruction";
    std::set<std::string> used;
    try {
      used = template_names(*body);
    } catch (const TemplateError& e) {
      throw CorpusError("profile '" + p.name + "': " + field + ": " + e.what());
    }
    for (const auto& name : used)
      if (!allowed.contains(name))
        throw CorpusError("profile '" + p.name + "': " + field + " uses unknown tag '" + name + "'");
  }
}

inline const std::vector<std::string>& builtin_profile_names() {
  static const std::vector<std::string> names{"FHM", "MAMI", "HarM"};
  return names;
}

inline DatasetProfile builtin_profile(std::string_view name) {
  if (name == "FHM") {
    return {"FHM", "hateful", "not hateful",
            "A direct or indirect attack on people based on characteristics, including ethnicity, "
            "race, nationality, immigration status, religion, caste, sex, gender identity, sexual "
            "orientation, and disability or disease. We define attack as violent or dehumanizing "
            "(comparing people to non-human things, e.g. animals) speech, statements of "
            "inferiority, and calls for exclusion or segregation. Mocking hate crime is also "
            "considered hate speech.",
            std::string(templates::fhm_eie), std::string(templates::fhm_final)};
  }
  if (name == "MAMI") {
    return {"MAMI", "misogynous", "not misogynous",
            "meme is misogynous if it conceptually describes an offensive, sexist, or hateful "
            "scene (weak or strong, implicitly or explicitly) having as target a woman or a group "
            "of women. Misogyny can be expressed in the form of shaming, stereotype, "
            "objectification, and/or violence.",
            std::string(templates::mami_eie), std::string(templates::mami_final)};
  }
  if (name == "HarM") {
    return {"HarM", "harmful", "not harmful",
            "Multi-modal unit consisting of an image and an embedded text that has the potential "
            "to cause harm to an individual, an organization, a community, or society",
            std::string(templates::harm_eie), std::string(templates::harm_final)};
  }
  std::string avail;
  for (const auto& n : builtin_profile_names()) avail += (avail.empty() ? "" : ", ") + n;
  throw CorpusError("unknown profile '" + std::string(name) + "' (available: " + avail + ")");
}

inline bool is_builtin_profile(const DatasetProfile& p) {
  const auto& names = builtin_profile_names();
  if (std::find(names.begin(), names.end(), p.name) == names.end()) return false;
  return builtin_profile(p.name) == p;
}

// Profile file: a JSON object with name, positive_word, negative_word and
// amplifier_text; eie_instruction and final_instruction default to the
// generic templates when absent.
inline DatasetProfile profile_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw CorpusError("profile must be a JSON object");
  auto str = [&](const char* key, bool required) -> std::optional<std::string> {
    if (!j.contains(key) || j.at(key).is_null()) {
      if (required) throw CorpusError(std::string("profile is missing '") + key + "'");
      return std::nullopt;
    }
    if (!j.at(key).is_string()) throw CorpusError(std::string("profile field '") + key + "' must be a string");
    return j.at(key).get<std::string>();
  };
  DatasetProfile p{*str("name", true),
                   *str("positive_word", true),
                   *str("negative_word", true),
                   *str("amplifier_text", true),
                   str("eie_instruction", false).value_or(std::string(templates::generic_eie)),
                   str("final_instruction", false).value_or(std::string(templates::generic_final))};
  validate_profile(p);
  return p;
}

inline nlohmann::json profile_to_json(const DatasetProfile& p) {
  return {{"name", p.name},
          {"positive_word", p.positive_word},
          {"negative_word", p.negative_word},
          {"amplifier_text", p.amplifier_text},
          {"eie_instruction", p.eie_instruction},
          {"final_instruction", p.final_instruction}};
}

inline DatasetProfile load_profile_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open profile file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError("profile file " + path.string() + ": " + e.what());
  }
  return profile_from_json(j);
}

// Immutable after construction; safe for concurrent readers.
class LabeledCorpus {
 public:
  LabeledCorpus() = default;
  LabeledCorpus(std::vector<MemeRecord> records, DatasetProfile profile)
      : records_(std::move(records)), profile_(std::move(profile)) {
    for (std::size_t i = 0; i < records_.size(); ++i) {
      if (!by_id_.emplace(records_[i].id, i).second)
        throw CorpusError("duplicate id '" + records_[i].id + "'");
    }
  }

  const std::vector<MemeRecord>& records() const noexcept { return records_; }
  const DatasetProfile& profile() const noexcept { return profile_; }

  std::vector<std::string> pool_ids() const {
    std::vector<std::string> ids;
    for (const auto& r : records_)
      if (r.split == Split::pool) ids.push_back(r.id);
    return ids;
  }

  std::size_t pool_size() const { return pool_ids().size(); }

  const MemeRecord* find(std::string_view id) const {
    auto it = by_id_.find(std::string(id));
    return it == by_id_.end() ? nullptr : &records_[it->second];
  }

 private:
  std::vector<MemeRecord> records_;
  DatasetProfile profile_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

inline MemeRecord record_from_json(const nlohmann::json& j, std::size_t line) {
  if (!j.is_object()) throw CorpusError("record is not a JSON object", line);
  auto need_string = [&](const char* key) {
    if (!j.contains(key) || !j.at(key).is_string())
      throw CorpusError(std::string("field '") + key + "' missing or not a string", line);
    return j.at(key).get<std::string>();
  };
  MemeRecord r;
  r.id = need_string("id");
  if (r.id.empty()) throw CorpusError("empty id", line);
  r.image_ref = need_string("img");
  r.ocr_text = need_string("text");
  if (j.contains("label") && !j.at("label").is_null()) {
    const auto& l = j.at("label");
    if (!l.is_number_integer() || (l.get<int>() != 0 && l.get<int>() != 1))
      throw CorpusError("label must be 0, 1 or null (record '" + r.id + "')", line);
    r.label = l.get<int>();
  }
  const auto split = need_string("split");
  auto s = parse_split(split);
  if (!s) throw CorpusError("unknown split '" + split + "' (record '" + r.id + "')", line);
  r.split = *s;
  return r;
}

inline nlohmann::json record_to_json(const MemeRecord& r) {
  nlohmann::json j{{"id", r.id}, {"img", r.image_ref}, {"text", r.ocr_text}};
  j["label"] = r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr);
  j["split"] = std::string(to_string(r.split));
  return j;
}

inline std::vector<MemeRecord> read_records(std::istream& in) {
  std::vector<MemeRecord> out;
  std::unordered_map<std::string, std::size_t> seen;  // id -> line
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw CorpusError(std::string("malformed JSON: ") + e.what(), line);
    }
    auto rec = record_from_json(j, line);
    auto [it, inserted] = seen.emplace(rec.id, line);
    if (!inserted)
      throw CorpusError("duplicate id '" + rec.id + "' (first seen on line " +
                            std::to_string(it->second) + ")",
                        line);
    out.push_back(std::move(rec));
  }
  return out;
}

// Resolves profile_name against profile_file when given (the file's name
// field must match), else against the built-in profiles.
inline DatasetProfile resolve_profile(std::string_view profile_name,
                                      const std::optional<std::filesystem::path>& profile_file = {}) {
  if (profile_file) {
    auto p = load_profile_file(*profile_file);
    if (!profile_name.empty() && p.name != profile_name)
      throw CorpusError("profile file " + profile_file->string() + " defines '" + p.name +
                        "', expected '" + std::string(profile_name) + "'");
    return p;
  }
  return builtin_profile(profile_name);
}

inline LabeledCorpus load_corpus(const std::filesystem::path& path, std::string_view profile_name,
                                 const std::optional<std::filesystem::path>& profile_file = {}) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus file " + path.string());
  auto profile = resolve_profile(profile_name, profile_file);
  return LabeledCorpus(read_records(in), std::move(profile));
}

inline void write_records(std::ostream& out, const std::vector<MemeRecord>& records) {
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

inline void save_corpus(const std::filesystem::path& path, const LabeledCorpus& corpus) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw CorpusError("cannot write corpus file " + path.string());
  write_records(out, corpus.records());
}

}  // namespace memechain
