#pragma once

#include <charconv>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "memechain/corpus.hpp"
#include "memechain/template.hpp"

namespace memechain {

enum class Stage { eie, final };

inline std::string_view to_string(Stage s) { return s == Stage::eie ? "eie" : "final"; }

// Binds "<imageN>" in the prompt text to an attached image.
struct ImageSlot {
  std::string placeholder;
  std::string image_ref;

  friend bool operator==(const ImageSlot&, const ImageSlot&) = default;
};

struct RenderedPrompt {
  std::string text;
  std::vector<ImageSlot> slots;
  Stage stage = Stage::final;

  friend bool operator==(const RenderedPrompt&, const RenderedPrompt&) = default;
};

class PromptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kMaxEieNeighbors = 16;
inline constexpr std::size_t kPromptWordBudget = 30;
inline constexpr std::string_view kEmptyCaptionMarker = "[no caption]";

inline std::string image_placeholder(std::size_t ordinal) { return "<image" + std::to_string(ordinal) + ">"; }

// Ordinals of every "<imageN>" occurrence, in text order.
inline std::vector<std::size_t> placeholder_ordinals(std::string_view text) {
  static constexpr std::string_view open = "<image";
  std::vector<std::size_t> out;
  for (auto pos = text.find(open); pos != std::string_view::npos; pos = text.find(open, pos + 1)) {
    const char* first = text.data() + pos + open.size();
    const char* last = text.data() + text.size();
    std::size_t n = 0;
    auto [ptr, ec] = std::from_chars(first, last, n);
    if (ec == std::errc{} && ptr != first && ptr < last && *ptr == '>') out.push_back(n);
  }
  return out;
}

// Breaks any "<image" sequence in user-supplied text so that captions cannot
// create or shift image slots.
inline std::string escape_placeholders(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  static constexpr std::string_view open = "<image";
  std::size_t pos = 0;
  for (auto hit = s.find(open); hit != std::string_view::npos; hit = s.find(open, hit + 1)) {
    out.append(s.substr(pos, hit - pos));
    out.append("< image");
    pos = hit + open.size();
  }
  out.append(s.substr(pos));
  return out;
}

// Placeholders must be exactly <image0>..<image(m-1)>, each once, in order,
// with m == slots.size().
inline void check_slots(const RenderedPrompt& p) {
  const auto ords = placeholder_ordinals(p.text);
  if (ords.size() != p.slots.size())
    throw PromptError("prompt has " + std::to_string(ords.size()) + " image placeholders but " +
                      std::to_string(p.slots.size()) + " slots");
  for (std::size_t i = 0; i < ords.size(); ++i) {
    if (ords[i] != i) throw PromptError("image placeholders are not dense: found <image" + std::to_string(ords[i]) +
                                        "> at position " + std::to_string(i));
    if (p.slots[i].placeholder != image_placeholder(i)) throw PromptError("slot " + std::to_string(i) + " is mislabeled");
  }
}

namespace detail {

inline std::string caption_text(std::string_view raw) {
  return raw.empty() ? std::string(kEmptyCaptionMarker) : escape_placeholders(raw);
}

inline TemplateContext base_context(const DatasetProfile& profile, bool cra) {
  TemplateContext ctx;
  ctx.values["pos"] = profile.positive_word;
  ctx.values["neg"] = profile.negative_word;
  ctx.values["amplifier"] = profile.amplifier_text;
  ctx.flags["cra"] = cra;
  return ctx;
}

inline RenderedPrompt finish(std::string text, std::vector<ImageSlot> slots, Stage stage) {
  RenderedPrompt p{std::move(text), std::move(slots), stage};
  if (p.text.empty()) throw PromptError("rendered prompt is empty");
  check_slots(p);
  return p;
}

}  // namespace detail

struct EieOptions {
  // Omitting the rules block is the CRA-off ablation.
  bool include_rules = true;
  // Caption-only neighbors for backends that cannot take several images.
  bool text_only = false;
};

// Neighbors are listed in retrieval order; slot i binds neighbor i's image.
inline RenderedPrompt build_eie_prompt(const DatasetProfile& profile, std::span<const MemeRecord> neighbors,
                                       const EieOptions& options = {}) {
  if (neighbors.empty()) throw PromptError("extraction prompt needs at least one neighbor");
  if (neighbors.size() > kMaxEieNeighbors)
    throw PromptError("extraction prompt takes at most " + std::to_string(kMaxEieNeighbors) + " neighbors, got " +
                      std::to_string(neighbors.size()));
  std::string input;
  std::vector<ImageSlot> slots;
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    if (i) input += ", ";
    const auto n = std::to_string(i);
    if (!options.text_only) {
      input += "image " + n + " : " + image_placeholder(i) + ", ";
      slots.push_back({image_placeholder(i), neighbors[i].image_ref});
    }
    input += "caption " + n + " : " + detail::caption_text(neighbors[i].ocr_text);
  }
  auto ctx = detail::base_context(profile, options.include_rules);
  ctx.values["input"] = std::move(input);
  ctx.values["k"] = std::to_string(neighbors.size());
  try {
    return detail::finish(render_template(profile.eie_instruction, ctx), std::move(slots), Stage::eie);
  } catch (const TemplateError& e) {
    throw PromptError("profile '" + profile.name + "' extraction template: " + e.what());
  }
}

struct FinalPromptInputs {
  // Extracted evolution information (EIE on).
  std::optional<std::string> info;
  // Retrieved neighbors shown verbatim instead of info (EPM on, EIE off).
  std::optional<std::vector<MemeRecord>> raw_neighbors;
  // Rendered as the number of evolutional pairs behind info.
  std::size_t evolution_count = 5;
  bool include_amplifier = true;
};

inline RenderedPrompt build_final_prompt(const DatasetProfile& profile, const MemeRecord& target,
                                         const FinalPromptInputs& in) {
  if (in.info && in.raw_neighbors)
    throw PromptError("final prompt takes either extracted info or raw neighbors, not both");
  auto ctx = detail::base_context(profile, in.include_amplifier);
  ctx.values["ocr"] = detail::caption_text(target.ocr_text);
  ctx.flags["info"] = in.info.has_value();
  ctx.flags["neighbors"] = in.raw_neighbors.has_value();
  std::size_t count = in.evolution_count;
  if (in.info) ctx.values["info"] = escape_placeholders(*in.info);
  if (in.raw_neighbors) {
    if (in.raw_neighbors->empty()) throw PromptError("raw neighbor list is empty");
    std::string listing;
    for (std::size_t i = 0; i < in.raw_neighbors->size(); ++i) {
      if (i) listing += ", ";
      listing += "caption " + std::to_string(i) + " : " + detail::caption_text((*in.raw_neighbors)[i].ocr_text);
    }
    ctx.values["neighbors"] = std::move(listing);
    count = in.raw_neighbors->size();
  }
  ctx.values["k"] = std::to_string(count);
  try {
    return detail::finish(render_template(profile.final_instruction, ctx), {{image_placeholder(0), target.image_ref}},
                          Stage::final);
  } catch (const TemplateError& e) {
    throw PromptError("profile '" + profile.name + "' final template: " + e.what());
  }
}

struct BudgetWarning {
  std::string field;
  std::size_t words = 0;
  std::string message;
};

inline std::size_t count_words(std::string_view s) {
  std::istringstream in{std::string(s)};
  std::size_t n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

// Custom definitions longer than the 30-word prompt budget draw a warning.
// Built-in profiles are exempt: they ship the datasets' full definitions.
inline std::vector<BudgetWarning> check_instruction_budget(const DatasetProfile& profile) {
  std::vector<BudgetWarning> out;
  if (is_builtin_profile(profile)) return out;
  const auto n = count_words(profile.amplifier_text);
  if (n > kPromptWordBudget)
    out.push_back({"amplifier_text", n,
                   "profile '" + profile.name + "': amplifier_text has " + std::to_string(n) + " words (budget " +
                       std::to_string(kPromptWordBudget) + ")"});
  return out;
}

}  // namespace memechain
