#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "support.hpp"

using namespace semgrad;
using support::slurp;
using support::source_path;

TEST(Template, RenderSemantics) {
  Template t("t", "a {x} b {y} {{literal}}");
  EXPECT_EQ(t.render({{"x", "1"}, {"y", "{x}"}, {"unused", "z"}}), "a 1 b {x} {literal}");
  EXPECT_THROW(t.render({{"x", "1"}}), TemplateError);
}

TEST(Template, FeedbackString) {
  EXPECT_EQ(feedback_string("42"), "The answer should be 42.");
  EXPECT_EQ(feedback_string("Yes"), slurp(source_path("tests/golden/feedback_yes.txt")));
}

TEST(Template, OptimizerContainsRequiredSentences) {
  TemplateSet ts;
  auto s = ts.render(templates::kOptimizer,
                     {{"prompt", "Solve the problem"}, {"examples", list_gradients({"g"})}});
  EXPECT_NE(s.find("Based on the above examples, write an improved prompt."), std::string::npos);
  EXPECT_NE(s.find("Do not include the keyword \"feedback\" or any example-specific content in "
                   "the prompt."),
            std::string::npos);
  EXPECT_NE(s.find("<prompt> and </prompt>"), std::string::npos);
}

TEST(Template, EveryPlaceholderIsSubstituted) {
  TemplateSet ts;
  for (auto &name : ts.names()) {
    Bindings b;
    for (auto &p : ts.get(name).placeholders())
      b[p] = "<" + p + ">";
    auto s = ts.render(name, b);
    for (auto &p : ts.get(name).placeholders())
      EXPECT_EQ(s.find("{" + p + "}"), std::string::npos) << name;
  }
}

TEST(ListGradients, Layout) {
  EXPECT_EQ(list_gradients({"g"}), "## Example 1\ng");
  EXPECT_EQ(list_gradients({"a", "b"}), "## Example 1\na\n\n## Example 2\nb");
  EXPECT_THROW(list_gradients({}), TemplateError);
  std::string b1 = "Input:\nq1\nMy output:\no1\nFeedback received on my output:\nf1";
  std::string b2 = "Input:\nq2\nMy output:\no2\nFeedback received on my output:\nf2";
  auto s = list_gradients({b1, b2});
  EXPECT_NE(s.find(b1), std::string::npos);
  EXPECT_NE(s.find(b2), std::string::npos);
}

TEST(ExtractPrompt, Cases) {
  EXPECT_EQ(extract_prompt("text <prompt>Do X</prompt> tail"), "Do X");
  EXPECT_EQ(extract_prompt("<prompt>A</prompt><prompt>B</prompt>"), "A");
  EXPECT_EQ(extract_prompt("<prompt>\n  spaced  \n</prompt>"), "spaced");
  EXPECT_EQ(extract_prompt("<prompt>outer <prompt>inner</prompt>"), "inner");
  EXPECT_THROW(extract_prompt("no tags here"), ExtractionError);
  EXPECT_THROW(extract_prompt("<prompt>never closed"), ExtractionError);
  EXPECT_THROW(extract_prompt("</prompt><prompt>"), ExtractionError);
}

TEST(ExtractPrompt, RoundTrip) {
  for (std::string s : {"x", "Solve it.", "multi\nline", "a < b > c", "<answer>7</answer>"})
    EXPECT_EQ(extract_prompt("<prompt>" + s + "</prompt>"), s);
}

// The bundled templates/ directory is a byte copy of the built-in defaults.
TEST(TemplateAssets, DirectoryMatchesDefaults) {
  auto dir = TemplateSet::from_directory(source_path("templates"));
  TemplateSet defaults;
  EXPECT_EQ(dir.names(), defaults.names());
  for (auto &[name, body] : templates::defaults()) {
    EXPECT_EQ(dir.get(name).body(), body) << name;
    EXPECT_EQ(sha256_hex(slurp(source_path("templates/" + name + ".txt"))), sha256_hex(body + "\n"))
        << name;
  }
}

TEST(TemplateAssets, OverrideDirectoryAndCrlf) {
  auto dir = support::fresh_dir("templates_override");
  std::ofstream(dir / "feedback.txt", std::ios::binary) << "Expected: {desire}\r\n";
  auto ts = TemplateSet::from_directory(dir);
  EXPECT_EQ(feedback_string("4", ts), "Expected: 4");
  EXPECT_EQ(ts.get(templates::kOptimizer).body(), templates::defaults().at("optimizer"));
  EXPECT_THROW(TemplateSet::from_directory(dir / "missing"), TemplateError);
}

TEST(Goldens, OptimizerPromptAndListing) {
  std::string ex1 = "Input:\nQuestion: What is 2 + 3?\nMy output:\nThe answer depends on the "
                    "numbers.\nFeedback received on my output:\n" + feedback_string("5");
  std::string ex2 = "Input:\nQuestion: What is 6 * 7?\nMy output:\nThe answer depends on the "
                    "numbers.\nFeedback received on my output:\n" + feedback_string("42");
  auto listing = list_gradients({ex1, ex2});
  EXPECT_EQ(listing, slurp(source_path("tests/golden/gradient_listing.txt")));
  auto rendered = TemplateSet{}.render(templates::kOptimizer,
                                       {{"prompt", "Solve the problem"}, {"examples", listing}});
  EXPECT_EQ(rendered, slurp(source_path("tests/golden/optimizer_rendered.txt")));
}

TEST(Goldens, LiarBackwardPrompts) {
  auto j = nlohmann::json::parse(slurp(source_path("tests/golden/liar_worked_example.json")));
  Sample s;
  s.id = "c3";
  for (auto &f : liar_attributes())
    s.fields[f] = j["sample"][f].get<std::string>();
  s.target = j["sample"]["target"].get<std::string>();
  auto hints = j["hints"].get<std::vector<std::string>>();
  TemplateSet ts;
  auto full = ts.render(templates::kBackwardLiar,
                        {{"instruction", j["instruction"].get<std::string>()},
                         {"query", query_text(s, Schema::liar)},
                         {"hints", numbered_list(hints)},
                         {"output", j["output"].get<std::string>()},
                         {"feedback", j["feedback"].get<std::string>()}});
  EXPECT_EQ(full, slurp(source_path("tests/golden/liar_backward_full.txt")));
  auto nn = ts.render(templates::kBackwardLiarNoNeighbor,
                      {{"hint", hints[1]},
                       {"output", j["output"].get<std::string>()},
                       {"feedback", j["feedback"].get<std::string>()}});
  EXPECT_EQ(nn, slurp(source_path("tests/golden/liar_backward_no_neighbor.txt")));
}
