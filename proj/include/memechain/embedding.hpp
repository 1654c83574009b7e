#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace memechain {

class EmbeddingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or unreadable CEMB/CIDX file.
class FormatError : public EmbeddingError {
 public:
  using EmbeddingError::EmbeddingError;
};

inline constexpr std::size_t kDefaultEmbeddingDim = 768;

class EmbeddingVector {
 public:
  EmbeddingVector() = default;
  explicit EmbeddingVector(std::vector<float> values) : values_(std::move(values)) {
    if (values_.empty()) throw EmbeddingError("embedding has zero dimensions");
    for (float v : values_)
      if (!std::isfinite(v)) throw EmbeddingError("embedding has a non-finite entry");
  }
  EmbeddingVector(std::initializer_list<float> values) : EmbeddingVector(std::vector<float>(values)) {}

  std::size_t dim() const noexcept { return values_.size(); }
  std::span<const float> values() const noexcept { return values_; }
  float operator[](std::size_t i) const { return values_[i]; }

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;

 private:
  std::vector<float> values_;
};

// Text and image weights are normalized to sum to one before mixing.
struct FusionConfig {
  float text_weight = 4.0f;
  float image_weight = 1.0f;
  bool normalize = true;

  friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

inline void validate(const FusionConfig& c) {
  if (!(c.text_weight >= 0.0f) || !(c.image_weight >= 0.0f) || !std::isfinite(c.text_weight) ||
      !std::isfinite(c.image_weight))
    throw EmbeddingError("fusion weights must be finite and nonnegative");
  if (!(c.text_weight + c.image_weight > 0.0f)) throw EmbeddingError("fusion weights sum to zero");
}

namespace detail {

inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

inline double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

}  // namespace detail

inline EmbeddingVector fuse(const EmbeddingVector& text, const EmbeddingVector& image,
                            const FusionConfig& config = {}) {
  validate(config);
  if (text.dim() != image.dim())
    throw EmbeddingError("dimension mismatch: text " + std::to_string(text.dim()) + " vs image " +
                         std::to_string(image.dim()));
  const double total = static_cast<double>(config.text_weight) + config.image_weight;
  const double wt = config.text_weight / total;
  const double wi = config.image_weight / total;

  std::vector<double> mixed(text.dim());
  for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] = wt * text[i] + wi * image[i];

  if (config.normalize) {
    double sq = 0.0;
    for (double v : mixed) sq += v * v;
    const double n = std::sqrt(sq);
    if (n == 0.0) throw EmbeddingError("fused vector has zero norm and cannot be normalized");
    for (double& v : mixed) v /= n;
  }
  std::vector<float> out(mixed.begin(), mixed.end());
  return EmbeddingVector(std::move(out));
}

// Clamped to [-1, 1].
inline double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.dim() != b.dim())
    throw EmbeddingError("dimension mismatch: " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  const double na = detail::norm(a.values());
  const double nb = detail::norm(b.values());
  if (na == 0.0 || nb == 0.0) throw EmbeddingError("cosine of a zero vector is undefined");
  const double c = detail::dot(a.values(), b.values()) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

// Ordered id -> vector table, as stored in a CEMB file.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  void add(std::string id, EmbeddingVector v) {
    if (dim_ == 0) dim_ = v.dim();
    if (v.dim() != dim_)
      throw EmbeddingError("embedding '" + id + "' has dim " + std::to_string(v.dim()) + ", table has " +
                           std::to_string(dim_));
    if (!index_.emplace(id, ids_.size()).second) throw EmbeddingError("duplicate embedding id '" + id + "'");
    ids_.push_back(std::move(id));
    vectors_.push_back(std::move(v));
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const EmbeddingVector& at(std::size_t i) const { return vectors_.at(i); }

  const EmbeddingVector* find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &vectors_[it->second];
  }

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
    return a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.vectors_ == b.vectors_;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<EmbeddingVector> vectors_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace io {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderBytes = 4 + 4 + 4 + 8;
inline constexpr std::size_t kFusionBlockBytes = 16;

class Writer {
 public:
  void bytes(std::string_view s) { buf_.append(s); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  const std::string& data() const noexcept { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(le(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(le(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(le(4, what)); }
  std::uint64_t u64(const char* what) { return le(8, what); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n)
      throw FormatError("truncated file: expected " + std::to_string(n) + " bytes of " + what + " at offset " +
                        std::to_string(pos_) + ", " + std::to_string(remaining()) + " available");
  }
  std::uint64_t le(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

struct Header {
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
};

inline void write_header(Writer& w, std::string_view magic, std::size_t dim, std::size_t count) {
  w.bytes(magic);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(dim));
  w.u64(count);
}

inline Header read_header(Reader& r, std::string_view magic, const char* kind) {
  if (r.remaining() < 4 || r.bytes(4, "magic") != magic) throw FormatError(std::string("not an ") + kind + " file");
  const auto version = r.u32("version");
  if (version != kFormatVersion)
    throw FormatError("unsupported " + std::string(kind) + " version " + std::to_string(version) + " (expected " +
                      std::to_string(kFormatVersion) + ")");
  Header h;
  h.dim = r.u32("dim");
  h.count = r.u64("count");
  if (h.dim == 0 && h.count > 0) throw FormatError("header declares dim 0 with " + std::to_string(h.count) + " rows");
  // Each record needs at least the id length prefix and its floats.
  const std::uint64_t min_record = 2 + 4ull * h.dim;
  if (h.count > r.remaining() / std::max<std::uint64_t>(min_record, 1))
    throw FormatError("truncated file: header declares " + std::to_string(h.count) + " rows of dim " + std::to_string(h.dim) +
                      " but only " + std::to_string(r.remaining()) + " bytes follow");
  return h;
}

inline void write_record(Writer& w, std::string_view id, std::span<const float> values) {
  if (id.empty() || id.size() > 0xffff) throw EmbeddingError("id length must be 1..65535 bytes");
  w.u16(static_cast<std::uint16_t>(id.size()));
  w.bytes(id);
  for (float v : values) w.f32(v);
}

inline std::pair<std::string, std::vector<float>> read_record(Reader& r, std::uint32_t dim) {
  const auto len = r.u16("id length");
  if (len == 0) throw FormatError("empty id at offset " + std::to_string(r.offset() - 2));
  std::string id(r.bytes(len, "id"));
  std::vector<float> values(dim);
  for (auto& v : values) v = r.f32("vector");
  return {std::move(id), std::move(values)};
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Writes to a sibling temp file, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace io

inline std::string encode_cemb(const EmbeddingTable& table) {
  io::Writer w;
  io::write_header(w, "CEMB", table.dim(), table.size());
  for (std::size_t i = 0; i < table.size(); ++i) io::write_record(w, table.ids()[i], table.at(i).values());
  return w.data();
}

inline EmbeddingTable decode_cemb(std::string_view data) {
  io::Reader r(data);
  const auto h = io::read_header(r, "CEMB", "embedding");
  EmbeddingTable table(h.dim);
  for (std::uint64_t i = 0; i < h.count; ++i) {
    auto [id, values] = io::read_record(r, h.dim);
    try {
      table.add(std::move(id), EmbeddingVector(std::move(values)));
    } catch (const EmbeddingError& e) {
      throw FormatError("record " + std::to_string(i) + ": " + e.what());
    }
  }
  if (r.remaining() != 0)
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after " + std::to_string(h.count) + " records");
  return table;
}

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  io::write_file_atomic(path, encode_cemb(table));
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  try {
    return decode_cemb(io::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace memechain
