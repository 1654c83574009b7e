#include <gtest/gtest.h>

#include "support.hpp"

using namespace memechain;
using memechain::testing::TempDir;

namespace {

std::vector<MemeRecord> parse(const std::string& text) {
  std::istringstream in(text);
  return read_records(in);
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Corpus, ReadsRecordsAndSkipsBlankLines) {
  const auto recs = parse(
      R"({"id":"a","img":"a.png","text":"hi","label":1,"split":"pool"})"
      "\n\n"
      R"({"id":"b","img":"b.png","text":"","label":null,"split":"test"})"
      "\n");
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].label, 1);
  EXPECT_EQ(recs[0].split, Split::pool);
  EXPECT_FALSE(recs[1].label);
  EXPECT_EQ(recs[1].split, Split::test);
  EXPECT_EQ(recs[1].ocr_text, "");
}

TEST(Corpus, DuplicateIdNamesBothLines) {
  const auto msg = message_of([] {
    parse(R"({"id":"a","img":"a","text":"x","label":0,"split":"pool"})"
          "\n"
          R"({"id":"a","img":"a","text":"x","label":0,"split":"test"})");
  });
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
  EXPECT_NE(msg.find("'a'"), std::string::npos) << msg;
}

TEST(Corpus, FieldErrorsCarryLineNumbers) {
  EXPECT_NE(message_of([] { parse("{not json"); }).find("line 1"), std::string::npos);
  EXPECT_NE(message_of([] { parse(R"({"id":"a","img":"a","text":"x","split":"dev"})"); }).find("unknown split"),
            std::string::npos);
  EXPECT_NE(message_of([] { parse(R"({"id":"a","img":"a","text":"x","label":2,"split":"pool"})"); }).find("label"),
            std::string::npos);
  EXPECT_NE(message_of([] { parse(R"({"id":"a","text":"x","split":"pool"})"); }).find("'img'"), std::string::npos);
  EXPECT_THROW(parse(R"({"id":"","img":"a","text":"x","split":"pool"})"), CorpusError);
}

TEST(Corpus, RoundTrip) {
  TempDir dir;
  const auto s = memechain::testing::make_synthetic(3, 2);
  save_corpus(dir / "c.jsonl", s.corpus);
  const auto back = load_corpus(dir / "c.jsonl", "FHM");
  EXPECT_EQ(back.records(), s.corpus.records());
  EXPECT_EQ(back.pool_ids(), (std::vector<std::string>{"p000", "p001", "p002"}));
  EXPECT_EQ(back.pool_size(), 3u);
  ASSERT_NE(back.find("t001"), nullptr);
  EXPECT_EQ(back.find("t001")->split, Split::test);
  EXPECT_EQ(back.find("nope"), nullptr);
}

TEST(Profiles, Builtins) {
  const auto fhm = builtin_profile("FHM");
  EXPECT_EQ(fhm.positive_word, "hateful");
  EXPECT_EQ(fhm.negative_word, "not hateful");
  EXPECT_EQ(builtin_profile("MAMI").positive_word, "misogynous");
  EXPECT_EQ(builtin_profile("HarM").negative_word, "not harmful");
  for (const auto& n : builtin_profile_names()) {
    EXPECT_NO_THROW(validate_profile(builtin_profile(n))) << n;
    EXPECT_TRUE(is_builtin_profile(builtin_profile(n)));
  }
  const auto msg = message_of([] { builtin_profile("XYZ"); });
  EXPECT_NE(msg.find("FHM, MAMI, HarM"), std::string::npos) << msg;
}

TEST(Profiles, JsonRoundTripAndValidation) {
  auto p = builtin_profile("MAMI");
  EXPECT_EQ(profile_from_json(profile_to_json(p)), p);
  p.name = "Mine";
  EXPECT_FALSE(is_builtin_profile(p));

  nlohmann::json bad{{"name", "x"}, {"positive_word", "bad"}, {"negative_word", "bad"}, {"amplifier_text", "a"}};
  EXPECT_THROW(profile_from_json(bad), CorpusError);
  bad["negative_word"] = "not bad";
  EXPECT_NO_THROW(profile_from_json(bad));
  bad["final_instruction"] = "{{ocr}} {{bogus}}";
  EXPECT_THROW(profile_from_json(bad), CorpusError);
  bad.erase("final_instruction");
  bad.erase("amplifier_text");
  EXPECT_THROW(profile_from_json(bad), CorpusError);
}

TEST(Profiles, ProfileFileMustMatchName) {
  TempDir dir;
  std::ofstream(dir / "p.json") << R"({"name":"Toxic","positive_word":"toxic","negative_word":"not toxic",)"
                                   R"("amplifier_text":"rude"})";
  EXPECT_EQ(resolve_profile("", dir / "p.json").name, "Toxic");
  EXPECT_EQ(resolve_profile("Toxic", dir / "p.json").name, "Toxic");
  EXPECT_THROW(resolve_profile("FHM", dir / "p.json"), CorpusError);
}
