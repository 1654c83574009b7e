#pragma once

// Fixtures shared by the unit tests and the acceptance runner.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "memechain/memechain.hpp"

namespace memechain::testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "memechain-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const fs::path& p, std::string_view data) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

inline std::vector<float> random_values(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> v(dim);
  for (auto& x : v) x = nd(rng);
  return v;
}

inline std::vector<float> random_unit(std::mt19937_64& rng, std::size_t dim) {
  auto v = random_values(rng, dim);
  double n = 0;
  for (float x : v) n += double(x) * x;
  n = std::sqrt(n);
  for (auto& x : v) x = static_cast<float>(x / n);
  return v;
}

inline std::string pad_id(const char* prefix, std::size_t i, int width = 3) {
  auto s = std::to_string(i);
  return prefix + std::string(static_cast<std::size_t>(std::max<int>(0, width - int(s.size()))), '0') + s;
}

// Synthetic dataset: pool records p000.., test records t000.. with
// alternating labels, random text and image embeddings for every record.
struct Synthetic {
  LabeledCorpus corpus;
  EmbeddingTable text;
  EmbeddingTable image;
  FusedIndex index;
};

inline Synthetic make_synthetic(std::size_t n_pool, std::size_t n_test, const std::string& profile = "FHM",
                                std::size_t dim = 16, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  std::vector<MemeRecord> recs;
  for (std::size_t i = 0; i < n_pool; ++i) {
    const auto id = pad_id("p", i);
    recs.push_back({id, "img/" + id + ".png", "pool caption " + std::to_string(i), int(i % 2), Split::pool});
  }
  for (std::size_t i = 0; i < n_test; ++i) {
    const auto id = pad_id("t", i);
    recs.push_back({id, "img/" + id + ".png", "test caption " + std::to_string(i), int(i % 2), Split::test});
  }
  Synthetic s;
  s.text = EmbeddingTable(dim);
  s.image = EmbeddingTable(dim);
  for (const auto& r : recs) {
    s.text.add(r.id, EmbeddingVector(random_values(rng, dim)));
    s.image.add(r.id, EmbeddingVector(random_values(rng, dim)));
  }
  s.corpus = LabeledCorpus(std::move(recs), builtin_profile(profile));
  s.index = build_index(s.corpus, s.text, s.image, FusionConfig{});
  return s;
}

// Writes the synthetic corpus and embeddings to dir; returns nothing, files
// are corpus.jsonl, text.cemb, image.cemb.
inline void write_synthetic(const Synthetic& s, const fs::path& dir) {
  save_corpus(dir / "corpus.jsonl", s.corpus);
  save_embeddings(dir / "text.cemb", s.text);
  save_embeddings(dir / "image.cemb", s.image);
}

// Stub script mapping every final-stage prompt to the ground-truth answer.
// Pass one records the final prompts (EIE replies are the constant default,
// so they do not change in pass two).
inline StubScript oracle_script(const Synthetic& s, const AblationConfig& config, const std::string& eie_reply) {
  StubScript probe;
  probe.rules.push_back({Stage::eie, "", {eie_reply, std::nullopt}});
  auto backend = std::make_shared<StubBackend>(probe);
  LmmClient client(backend);
  CoePipeline pipe(s.corpus, client, &s.index, &s.text, &s.image);
  RunOptions opts;
  opts.parallelism = 1;
  run_dataset(pipe, config, opts);

  StubScript script = probe;
  const auto& profile = s.corpus.profile();
  for (const auto& req : backend->recorded()) {
    if (req.stage != Stage::final) continue;
    // The target's caption identifies the record.
    for (const auto& r : s.corpus.records()) {
      if (r.split != Split::test) continue;
      if (req.prompt.text.find("caption: " + r.ocr_text + " is") == std::string::npos) continue;
      script.responses[request_fingerprint(req)] = {*r.label ? profile.positive_word : profile.negative_word,
                                                    std::nullopt};
    }
  }
  return script;
}

}  // namespace memechain::testing
