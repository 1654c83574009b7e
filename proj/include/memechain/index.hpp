#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "memechain/corpus.hpp"
#include "memechain/embedding.hpp"

namespace memechain {

inline constexpr std::size_t kDefaultTopK = 5;

struct Neighbor {
  std::string id;
  double similarity = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

// Row-major N x dim matrix of fused pool embeddings. Immutable once built;
// top_k is safe to call from any number of threads.
class FusedIndex {
 public:
  FusedIndex() = default;

  FusedIndex(std::vector<std::string> ids, std::vector<float> matrix, std::size_t dim, FusionConfig fusion)
      : ids_(std::move(ids)), matrix_(std::move(matrix)), dim_(dim), fusion_(fusion) {
    if (dim_ == 0 && !ids_.empty()) throw EmbeddingError("index dim must be positive");
    if (matrix_.size() != ids_.size() * dim_)
      throw EmbeddingError("index matrix has " + std::to_string(matrix_.size()) + " floats, expected " +
                           std::to_string(ids_.size() * dim_));
    norms_.resize(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!position_.emplace(ids_[i], i).second) throw EmbeddingError("duplicate index id '" + ids_[i] + "'");
      norms_[i] = detail::norm(row(i));
      if (norms_[i] == 0.0) throw EmbeddingError("index row '" + ids_[i] + "' is all zeros");
    }
  }

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  bool empty() const noexcept { return ids_.empty(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<float>& matrix() const noexcept { return matrix_; }
  const FusionConfig& fusion() const noexcept { return fusion_; }

  std::span<const float> row(std::size_t i) const { return {matrix_.data() + i * dim_, dim_}; }

  std::optional<std::size_t> position(std::string_view id) const {
    auto it = position_.find(std::string(id));
    if (it == position_.end()) return std::nullopt;
    return it->second;
  }

  double row_norm(std::size_t i) const { return norms_[i]; }

  friend bool operator==(const FusedIndex& a, const FusedIndex& b) {
    return a.ids_ == b.ids_ && a.dim_ == b.dim_ && a.fusion_ == b.fusion_ &&
           std::equal(a.matrix_.begin(), a.matrix_.end(), b.matrix_.begin(), b.matrix_.end(),
                      [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
  }

 private:
  std::vector<std::string> ids_;
  std::vector<float> matrix_;
  std::size_t dim_ = 0;
  FusionConfig fusion_;
  std::vector<double> norms_;
  std::unordered_map<std::string, std::size_t> position_;
};

// Fuses the text and image embedding of every pool record, in corpus order.
// Test records are never indexed.
inline FusedIndex build_index(const LabeledCorpus& corpus, const EmbeddingTable& text_embs,
                              const EmbeddingTable& image_embs, const FusionConfig& config = {}) {
  validate(config);
  if (text_embs.size() && image_embs.size() && text_embs.dim() != image_embs.dim())
    throw EmbeddingError("text embeddings have dim " + std::to_string(text_embs.dim()) + ", image embeddings " +
                         std::to_string(image_embs.dim()));
  std::vector<std::string> ids;
  std::vector<float> matrix;
  std::size_t dim = 0;
  for (const auto& rec : corpus.records()) {
    if (rec.split != Split::pool) continue;
    const auto* t = text_embs.find(rec.id);
    if (!t) throw EmbeddingError("no text embedding for pool record '" + rec.id + "'");
    const auto* im = image_embs.find(rec.id);
    if (!im) throw EmbeddingError("no image embedding for pool record '" + rec.id + "'");
    auto fused = fuse(*t, *im, config);
    if (dim == 0) {
      dim = fused.dim();
      matrix.reserve(dim * corpus.records().size());
    }
    matrix.insert(matrix.end(), fused.values().begin(), fused.values().end());
    ids.push_back(rec.id);
  }
  return FusedIndex(std::move(ids), std::move(matrix), dim, config);
}

// Exact search. Results are sorted by descending cosine similarity, ties by
// ascending row position; exclude_id is never returned.
inline std::vector<Neighbor> top_k(const FusedIndex& index, const EmbeddingVector& query, std::size_t k = kDefaultTopK,
                                   std::optional<std::string_view> exclude_id = std::nullopt) {
  if (index.empty()) throw EmbeddingError("top_k on an empty index");
  if (k == 0) throw EmbeddingError("top_k requires k >= 1");
  if (query.dim() != index.dim())
    throw EmbeddingError("query dim " + std::to_string(query.dim()) + " does not match index dim " +
                         std::to_string(index.dim()));
  const double qn = detail::norm(query.values());
  if (qn == 0.0) throw EmbeddingError("top_k query is a zero vector");

  std::optional<std::size_t> skip;
  if (exclude_id) skip = index.position(*exclude_id);

  std::vector<double> sims(index.size());
  for (std::size_t i = 0; i < index.size(); ++i)
    sims[i] = std::clamp(detail::dot(index.row(i), query.values()) / (index.row_norm(i) * qn), -1.0, 1.0);

  std::vector<std::size_t> order;
  order.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i)
    if (i != skip) order.push_back(i);
  const std::size_t n = std::min(k, order.size());
  auto better = [&](std::size_t a, std::size_t b) { return sims[a] != sims[b] ? sims[a] > sims[b] : a < b; };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(), better);

  std::vector<Neighbor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back({index.ids()[order[i]], sims[order[i]]});
  return out;
}

inline std::string encode_cidx(const FusedIndex& index) {
  io::Writer w;
  io::write_header(w, "CIDX", index.dim(), index.size());
  const auto& f = index.fusion();
  w.f32(f.text_weight);
  w.f32(f.image_weight);
  w.u8(f.normalize ? 1 : 0);
  for (int i = 0; i < 7; ++i) w.u8(0);
  for (std::size_t i = 0; i < index.size(); ++i) io::write_record(w, index.ids()[i], index.row(i));
  return w.data();
}

inline FusedIndex decode_cidx(std::string_view data) {
  io::Reader r(data);
  const auto h = io::read_header(r, "CIDX", "embedding index");
  FusionConfig f;
  f.text_weight = r.f32("fusion config");
  f.image_weight = r.f32("fusion config");
  const auto norm_flag = r.u8("fusion config");
  if (norm_flag > 1) throw FormatError("fusion normalize flag must be 0 or 1, found " + std::to_string(norm_flag));
  f.normalize = norm_flag == 1;
  r.bytes(7, "fusion config padding");
  try {
    validate(f);
  } catch (const EmbeddingError& e) {
    throw FormatError(std::string("bad fusion config: ") + e.what());
  }
  std::vector<std::string> ids;
  std::vector<float> matrix;
  ids.reserve(h.count);
  matrix.reserve(h.count * h.dim);
  for (std::uint64_t i = 0; i < h.count; ++i) {
    auto [id, values] = io::read_record(r, h.dim);
    ids.push_back(std::move(id));
    matrix.insert(matrix.end(), values.begin(), values.end());
  }
  if (r.remaining() != 0)
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after " + std::to_string(h.count) + " records");
  try {
    return FusedIndex(std::move(ids), std::move(matrix), h.dim, f);
  } catch (const EmbeddingError& e) {
    throw FormatError(e.what());
  }
}

inline void save_index(const FusedIndex& index, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_cidx(index));
}

inline FusedIndex load_index(const std::filesystem::path& path) {
  try {
    return decode_cidx(io::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace memechain
