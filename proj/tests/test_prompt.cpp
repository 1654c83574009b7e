#include <gtest/gtest.h>

#include "prompt_fixtures.hpp"
#include "support.hpp"

using namespace memechain;
using namespace memechain::testing;

// --- template engine -------------------------------------------------------

TEST(Template, SubstitutesAndSections) {
  TemplateContext ctx;
  ctx.values["a"] = "x";
  ctx.flags["on"] = true;
  ctx.flags["off"] = false;
  EXPECT_EQ(render_template("[{{a}}]{{#on}}1{{/on}}{{#off}}2{{/off}}{{^off}}3{{/off}}", ctx), "[x]13");
}

TEST(Template, ValuesAreNotReparsed) {
  TemplateContext ctx;
  ctx.values["a"] = "{{b}}";
  EXPECT_EQ(render_template("{{a}}", ctx), "{{b}}");
}

TEST(Template, SingleBracesAreLiteral) {
  EXPECT_EQ(render_template("{texts[0]} }{", {}), "{texts[0]} }{");
}

TEST(Template, Errors) {
  EXPECT_THROW(render_template("{{a}}", {}), TemplateError);
  EXPECT_THROW(parse_template("{{#a}}x"), TemplateError);
  EXPECT_THROW(parse_template("{{#a}}x{{/b}}"), TemplateError);
  EXPECT_THROW(parse_template("x {{a"), TemplateError);
  EXPECT_THROW(parse_template("{{}}"), TemplateError);
}

TEST(Template, Names) {
  EXPECT_EQ(template_names("{{a}}{{#b}}{{c}}{{/b}}"), (std::set<std::string>{"a", "b", "c"}));
}

TEST(Template, FileBody) {
  EXPECT_EQ(template_file_body("# header\n---\nbody\n"), "body");
  EXPECT_EQ(template_file_body("---\nx\n\n"), "x\n");
  EXPECT_THROW(template_file_body("no separator"), TemplateError);
}

TEST(Template, EmbeddedBodiesMatchFiles) {
  const std::pair<const char*, std::string_view> files[] = {
      {"fhm_eie", templates::fhm_eie},     {"fhm_final", templates::fhm_final},
      {"mami_eie", templates::mami_eie},   {"mami_final", templates::mami_final},
      {"harm_eie", templates::harm_eie},   {"harm_final", templates::harm_final},
      {"generic_eie", templates::generic_eie}, {"generic_final", templates::generic_final}};
  for (const auto& [name, embedded] : files) {
    const auto file = slurp(std::string(MEMECHAIN_TEMPLATES_DIR) + "/" + name + ".tmpl");
    EXPECT_EQ(template_file_body(file), embedded) << name;
  }
}

// --- golden renderings -------------------------------------------------------

TEST(PromptGolden, FhmExtraction) {
  const auto n = placeholder_neighbors();
  EXPECT_EQ(build_eie_prompt(builtin_profile("FHM"), n).text, golden("fhm_eie.txt"));
}

TEST(PromptGolden, MamiExtraction) {
  const auto n = placeholder_neighbors();
  EXPECT_EQ(build_eie_prompt(builtin_profile("MAMI"), n).text, golden("mami_eie.txt"));
}

TEST(PromptGolden, HarmExtraction) {
  const auto n = placeholder_neighbors();
  EXPECT_EQ(build_eie_prompt(builtin_profile("HarM"), n).text, golden("harm_eie.txt"));
}

TEST(PromptGolden, MamiFinal) {
  EXPECT_EQ(build_final_prompt(builtin_profile("MAMI"), placeholder_target(), info_inputs()).text,
            golden("mami_final.txt"));
}

TEST(PromptGolden, HarmFinal) {
  EXPECT_EQ(build_final_prompt(builtin_profile("HarM"), placeholder_target(), info_inputs()).text,
            golden("harm_final.txt"));
}

TEST(PromptGolden, FhmFinalByAnalogy) {
  EXPECT_EQ(build_final_prompt(builtin_profile("FHM"), placeholder_target(), info_inputs()).text,
            fhm_final_by_analogy());
}

// --- structure ---------------------------------------------------------------

TEST(Prompt, ExtractionSlotsFollowNeighbors) {
  const auto n = placeholder_neighbors();
  const auto p = build_eie_prompt(builtin_profile("FHM"), n);
  ASSERT_EQ(p.slots.size(), 5u);
  EXPECT_EQ(p.stage, Stage::eie);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(p.slots[i].placeholder, "<image" + std::to_string(i) + ">");
    EXPECT_EQ(p.slots[i].image_ref, n[i].image_ref);
  }
  EXPECT_NE(p.text.find("<image4>"), std::string::npos);
}

TEST(Prompt, SingleNeighbor) {
  const std::vector<MemeRecord> n{{"a", "a.png", "x", 0, Split::pool}};
  const auto p = build_eie_prompt(builtin_profile("FHM"), n);
  EXPECT_EQ(p.slots.size(), 1u);
  EXPECT_NE(p.text.find("image 0 : <image0>, caption 0 : x]"), std::string::npos);
  EXPECT_EQ(p.text.find("<image1>"), std::string::npos);
}

TEST(Prompt, ExtractionNeighborLimits) {
  EXPECT_THROW(build_eie_prompt(builtin_profile("FHM"), std::vector<MemeRecord>{}), PromptError);
  EXPECT_NO_THROW(build_eie_prompt(builtin_profile("FHM"), placeholder_neighbors(16)));
  EXPECT_THROW(build_eie_prompt(builtin_profile("FHM"), placeholder_neighbors(17)), PromptError);
}

TEST(Prompt, ExtractionWithoutRules) {
  const auto n = placeholder_neighbors();
  const auto p = build_eie_prompt(builtin_profile("FHM"), n, {false, false});
  EXPECT_TRUE(p.text.starts_with("Extract the common harmful feature of these image caption pairs.\n\nInput: ["));
  EXPECT_EQ(p.text.find("rules"), std::string::npos);
}

TEST(Prompt, ExtractionTextOnly) {
  const auto n = placeholder_neighbors(2);
  const auto p = build_eie_prompt(builtin_profile("FHM"), n, {true, true});
  EXPECT_TRUE(p.slots.empty());
  EXPECT_NE(p.text.find("Input: [caption 0 : {texts[0]}, caption 1 : {texts[1]}]"), std::string::npos);
}

TEST(Prompt, CaptionInjectionIsEscaped) {
  std::vector<MemeRecord> n{{"a", "a.png", "look <image0> here <image7>", 0, Split::pool}};
  const auto p = build_eie_prompt(builtin_profile("FHM"), n);
  EXPECT_EQ(p.slots.size(), 1u);
  EXPECT_EQ(placeholder_ordinals(p.text), std::vector<std::size_t>{0});
  EXPECT_NE(p.text.find("look < image0> here < image7>"), std::string::npos);

  MemeRecord t{"t", "t.png", "<image0><image1>", 0, Split::test};
  FinalPromptInputs in;
  in.info = "info mentions <image3>";
  const auto f = build_final_prompt(builtin_profile("MAMI"), t, in);
  EXPECT_EQ(placeholder_ordinals(f.text), std::vector<std::size_t>{0});
}

TEST(Prompt, EmptyCaptionMarker) {
  MemeRecord t{"t", "t.png", "", 0, Split::test};
  const auto f = build_final_prompt(builtin_profile("FHM"), t, {});
  EXPECT_NE(f.text.find("with its caption: [no caption] is"), std::string::npos);
}

TEST(Prompt, MamiFinalContents) {
  FinalPromptInputs in;
  in.info = "I";
  const auto f = build_final_prompt(builtin_profile("MAMI"), placeholder_target(), in);
  EXPECT_NE(f.text.find("is misogynous or not misogynous"), std::string::npos);
  EXPECT_NE(f.text.find("Evolution: I\n"), std::string::npos);
  ASSERT_EQ(f.slots.size(), 1u);
  EXPECT_EQ(f.slots[0].image_ref, "t.png");
}

TEST(Prompt, HarmRequirementLine) {
  const auto f = build_final_prompt(builtin_profile("HarM"), placeholder_target(), {});
  EXPECT_NE(f.text.find("1. The output should be a word of either 'harmful' or 'not harmful'."), std::string::npos);
}

TEST(Prompt, BaselineIsBareQuestion) {
  FinalPromptInputs in;
  in.include_amplifier = false;
  const auto f = build_final_prompt(builtin_profile("FHM"), placeholder_target(), in);
  EXPECT_EQ(f.text,
            "Determine if an image <image0> with its caption: {ocr_text} is hateful or not hateful.\n\n"
            "Requirement:\n1. The output should be a word of either 'hateful' or 'not hateful'.\n\n"
            "[Here is your expert response]");
}

TEST(Prompt, RawNeighborListing) {
  FinalPromptInputs in;
  in.raw_neighbors = placeholder_neighbors(2);
  in.include_amplifier = false;
  const auto f = build_final_prompt(builtin_profile("FHM"), placeholder_target(), in);
  EXPECT_NE(f.text.find("Below are the captions of 2 evolutional image text pairs"), std::string::npos);
  EXPECT_NE(f.text.find("Evolution: [caption 0 : {texts[0]}, caption 1 : {texts[1]}]"), std::string::npos);
  EXPECT_EQ(f.slots.size(), 1u);
}

TEST(Prompt, InfoAndNeighborsExclusive) {
  FinalPromptInputs in;
  in.info = "x";
  in.raw_neighbors = placeholder_neighbors(1);
  EXPECT_THROW(build_final_prompt(builtin_profile("FHM"), placeholder_target(), in), PromptError);
}

TEST(Prompt, Deterministic) {
  const auto n = placeholder_neighbors();
  const auto a = build_eie_prompt(builtin_profile("MAMI"), n);
  const auto b = build_eie_prompt(builtin_profile("MAMI"), n);
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.slots.size(), b.slots.size());
}

TEST(Prompt, GenericTemplatesForCustomProfiles) {
  DatasetProfile p = profile_from_json(
      {{"name", "Toxic"}, {"positive_word", "toxic"}, {"negative_word", "not toxic"}, {"amplifier_text", "mean"}});
  const auto e = build_eie_prompt(p, placeholder_neighbors(1));
  EXPECT_NE(e.text.find("toxic"), std::string::npos);
  const auto f = build_final_prompt(p, placeholder_target(), info_inputs());
  EXPECT_NE(f.text.find("'toxic' or 'not toxic'"), std::string::npos);
  EXPECT_NE(f.text.find("mean"), std::string::npos);
}

// --- budget ------------------------------------------------------------------

DatasetProfile custom_with_words(std::size_t n) {
  std::string def;
  for (std::size_t i = 0; i < n; ++i) def += (i ? " w" : "w") + std::to_string(i);
  return profile_from_json(
      {{"name", "Custom"}, {"positive_word", "bad"}, {"negative_word", "not bad"}, {"amplifier_text", def}});
}

TEST(Budget, ThirtyOneWordsWarns) {
  const auto w = check_instruction_budget(custom_with_words(31));
  ASSERT_EQ(w.size(), 1u);
  EXPECT_EQ(w[0].field, "amplifier_text");
  EXPECT_EQ(w[0].words, 31u);
  EXPECT_NE(w[0].message.find("31"), std::string::npos);
}

TEST(Budget, ThirtyWordsIsFine) { EXPECT_TRUE(check_instruction_budget(custom_with_words(30)).empty()); }

TEST(Budget, BuiltinsExempt) {
  for (const auto& name : builtin_profile_names()) {
    const auto p = builtin_profile(name);
    if (name == "FHM") {
      EXPECT_GT(count_words(p.amplifier_text), 30u);
    }
    EXPECT_TRUE(check_instruction_budget(p).empty()) << name;
  }
}
