#pragma once

// Minimal logic-less templates for prompt bodies:
//   {{name}}            substitute a value
//   {{#name}}...{{/name}}  keep the block when name is truthy
//   {{^name}}...{{/name}}  keep the block when name is falsy
// Substituted values are inserted as-is and never re-parsed. Anything else,
// including single braces, is literal text.

#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace memechain {

class TemplateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TemplateNode {
  enum class Kind { text, variable, section, inverted };
  Kind kind = Kind::text;
  std::string value;  // literal text, or the tag name
  std::vector<TemplateNode> children;
};

struct TemplateContext {
  std::map<std::string, std::string, std::less<>> values;
  std::map<std::string, bool, std::less<>> flags;
};

namespace detail {

inline std::string_view trim_tag(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  return s;
}

inline std::vector<TemplateNode> parse_nodes(std::string_view body, std::size_t& pos,
                                             std::string_view open_section) {
  std::vector<TemplateNode> out;
  while (pos < body.size()) {
    const auto open = body.find("{{", pos);
    if (open == std::string_view::npos) {
      out.push_back({TemplateNode::Kind::text, std::string(body.substr(pos)), {}});
      pos = body.size();
      break;
    }
    if (open > pos) out.push_back({TemplateNode::Kind::text, std::string(body.substr(pos, open - pos)), {}});
    const auto close = body.find("}}", open + 2);
    if (close == std::string_view::npos)
      throw TemplateError("unterminated tag at offset " + std::to_string(open));
    auto tag = trim_tag(body.substr(open + 2, close - open - 2));
    pos = close + 2;
    if (tag.empty()) throw TemplateError("empty tag at offset " + std::to_string(open));
    const char sigil = tag.front();
    if (sigil == '/') {
      auto name = trim_tag(tag.substr(1));
      if (name != open_section)
        throw TemplateError("unexpected {{/" + std::string(name) + "}} at offset " + std::to_string(open));
      return out;
    }
    if (sigil == '#' || sigil == '^') {
      auto name = std::string(trim_tag(tag.substr(1)));
      if (name.empty()) throw TemplateError("section without a name at offset " + std::to_string(open));
      TemplateNode node{sigil == '#' ? TemplateNode::Kind::section : TemplateNode::Kind::inverted, name, {}};
      node.children = parse_nodes(body, pos, name);
      out.push_back(std::move(node));
      continue;
    }
    out.push_back({TemplateNode::Kind::variable, std::string(tag), {}});
  }
  if (!open_section.empty())
    throw TemplateError("section '" + std::string(open_section) + "' is never closed");
  return out;
}

inline void collect_names(const std::vector<TemplateNode>& nodes, std::set<std::string>& names) {
  for (const auto& n : nodes) {
    if (n.kind == TemplateNode::Kind::text) continue;
    names.insert(n.value);
    collect_names(n.children, names);
  }
}

inline bool truthy(const TemplateContext& ctx, const std::string& name) {
  if (auto f = ctx.flags.find(name); f != ctx.flags.end()) return f->second;
  if (auto v = ctx.values.find(name); v != ctx.values.end()) return !v->second.empty();
  throw TemplateError("no value or flag named '" + name + "'");
}

inline void render_nodes(const std::vector<TemplateNode>& nodes, const TemplateContext& ctx,
                         std::string& out) {
  for (const auto& n : nodes) {
    switch (n.kind) {
      case TemplateNode::Kind::text:
        out += n.value;
        break;
      case TemplateNode::Kind::variable: {
        auto v = ctx.values.find(n.value);
        if (v == ctx.values.end()) throw TemplateError("no value named '" + n.value + "'");
        out += v->second;
        break;
      }
      case TemplateNode::Kind::section:
        if (truthy(ctx, n.value)) render_nodes(n.children, ctx, out);
        break;
      case TemplateNode::Kind::inverted:
        if (!truthy(ctx, n.value)) render_nodes(n.children, ctx, out);
        break;
    }
  }
}

}  // namespace detail

inline std::vector<TemplateNode> parse_template(std::string_view body) {
  std::size_t pos = 0;
  return detail::parse_nodes(body, pos, {});
}

// Every tag name referenced anywhere in the template, sections included.
inline std::set<std::string> template_names(std::string_view body) {
  std::set<std::string> names;
  detail::collect_names(parse_template(body), names);
  return names;
}

inline std::string render_template(std::string_view body, const TemplateContext& ctx) {
  std::string out;
  out.reserve(body.size() + 256);
  detail::render_nodes(parse_template(body), ctx, out);
  return out;
}

// Template files carry a free-form header, then a line "---", then the body.
// The body's final newline belongs to the file, not the template.
inline std::string template_file_body(std::string_view file) {
  std::size_t body_start = std::string_view::npos;
  if (file.starts_with("---\n")) {
    body_start = 4;
  } else if (auto sep = file.find("\n---\n"); sep != std::string_view::npos) {
    body_start = sep + 5;
  }
  if (body_start == std::string_view::npos) throw TemplateError("template file has no '---' separator");
  auto body = file.substr(body_start);
  if (body.ends_with('\n')) body.remove_suffix(1);
  return std::string(body);
}

}  // namespace memechain
