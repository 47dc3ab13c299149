#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ccl/dataset.hpp"

namespace {

namespace fs = std::filesystem;
using ccl::CorpusSpec;
using ccl::Domain;
using ccl::QARecord;
using ccl::Split;
using ccl::TemplateLibrary;
using ccl::Tokenizer;

fs::path templates_dir() { return fs::path(CCL_SOURCE_DIR) / "data" / "templates"; }

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("ccl_dataset_test_" + name);
}

CorpusSpec small_spec() {
  CorpusSpec spec;
  spec.n_contexts = 40;
  spec.n_pairs_per_context = 5;
  spec.n_keys = 12;
  spec.n_values = 10;
  spec.two_hop_fraction = 0.3;
  spec.seed = 77;
  return spec;
}

// Rule-based reference reader: parses the context pairs and resolves the
// question, following one indirection for chain questions.
std::string extract_answer(const QARecord& rec) {
  std::istringstream ctx(rec.context);
  std::map<std::string, std::string> pairs;
  std::string key, connective, value, terminator;
  while (ctx >> key >> connective >> value >> terminator) pairs[key] = value;

  std::istringstream q(rec.question);
  std::vector<std::string> words;
  std::string w;
  while (q >> w) words.push_back(w);
  const std::string& asked = words[words.size() - 2];  // "... <key> ?"
  std::string result = pairs.at(asked);
  if (ccl::is_two_hop_question(rec.question)) result = pairs.at(result);
  return result;
}

Tokenizer test_tokenizer() {
  std::vector<std::string> texts;
  for (const char* file : {"single_hop.txt", "two_hop.txt"}) {
    TemplateLibrary lib = TemplateLibrary::load(templates_dir() / file);
    texts.insert(texts.end(), lib.templates.begin(), lib.templates.end());
  }
  return Tokenizer::build(ccl::vocabulary_symbols(12, 10, texts));
}

TEST(GenerateCorpus, DeterministicForFixedSeed) {
  auto a = ccl::generate_corpus(small_spec());
  auto b = ccl::generate_corpus(small_spec());
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);

  CorpusSpec other = small_spec();
  other.seed = 78;
  auto c = ccl::generate_corpus(other);
  bool any_differ = false;
  for (size_t i = 0; i < a.size(); ++i) any_differ = any_differ || !(a[i] == c[i]);
  EXPECT_TRUE(any_differ);
}

TEST(GenerateCorpus, AnswerAlwaysInContext) {
  for (Domain domain : {Domain::In, Domain::Out}) {
    CorpusSpec spec = small_spec();
    spec.domain_tag = domain;
    for (const QARecord& rec : ccl::generate_corpus(spec)) {
      EXPECT_NE(rec.context.find(rec.answer), std::string::npos);
      EXPECT_EQ(extract_answer(rec), rec.answer);
    }
  }
}

TEST(GenerateCorpus, DisjointAnswerVocabularies) {
  CorpusSpec in_spec = small_spec();
  CorpusSpec out_spec = small_spec();
  out_spec.domain_tag = Domain::Out;
  std::set<std::string> in_answers, out_answers;
  for (const auto& r : ccl::generate_corpus(in_spec)) in_answers.insert(r.answer);
  for (const auto& r : ccl::generate_corpus(out_spec)) out_answers.insert(r.answer);
  for (const auto& a : in_answers) EXPECT_EQ(out_answers.count(a), 0u);
}

TEST(GenerateCorpus, CapacityErrors) {
  CorpusSpec spec = small_spec();
  spec.n_contexts = 0;
  EXPECT_THROW(ccl::generate_corpus(spec), ccl::CapacityError);

  spec = small_spec();
  spec.n_keys = 3;  // fewer keys than pairs per context
  EXPECT_THROW(ccl::generate_corpus(spec), ccl::CapacityError);
}

TEST(TokenizerChecks, RoundTripAndErrors) {
  Tokenizer tok = test_tokenizer();
  EXPECT_EQ(tok.detokenize(tok.tokenize("key3 is val7 .")), "key3 is val7 .");
  EXPECT_TRUE(tok.tokenize("").empty());
  EXPECT_THROW(tok.tokenize("unknownword"), ccl::VocabularyError);
  EXPECT_THROW(tok.detokenize(std::vector<int>{tok.vocab_size()}),
               ccl::VocabularyError);
  EXPECT_EQ(tok.symbol(Tokenizer::kPadId), Tokenizer::kPadSymbol);
  EXPECT_EQ(tok.symbol(Tokenizer::kEndOfAnswerId), Tokenizer::kEndOfAnswerSymbol);
}

TEST(TokenizerChecks, SaveLoadPreservesIds) {
  Tokenizer tok = test_tokenizer();
  const fs::path path = temp_path("vocab.txt");
  tok.save(path);
  Tokenizer loaded = Tokenizer::load(path);
  EXPECT_EQ(loaded.vocab_size(), tok.vocab_size());
  EXPECT_EQ(loaded.id("key3"), tok.id("key3"));
  fs::remove(path);
}

TEST(GenerateCorpus, EveryRecordTokenizes) {
  Tokenizer tok = test_tokenizer();
  for (Domain domain : {Domain::In, Domain::Out}) {
    CorpusSpec spec = small_spec();
    spec.domain_tag = domain;
    for (const QARecord& rec : ccl::generate_corpus(spec)) {
      EXPECT_NO_THROW(tok.tokenize(rec.context));
      EXPECT_NO_THROW(tok.tokenize(rec.question));
      EXPECT_NO_THROW(tok.tokenize(rec.answer));
      EXPECT_EQ(tok.tokenize(rec.context).size(),
                static_cast<size_t>(4 * spec.n_pairs_per_context));
    }
  }
}

TEST(Templates, ShippedLibrariesValidate) {
  for (const char* file : {"single_hop.txt", "two_hop.txt"}) {
    TemplateLibrary lib = TemplateLibrary::load(templates_dir() / file);
    EXPECT_GE(lib.templates.size(), 8u);
  }
}

TEST(Templates, MalformedTemplatesRejected) {
  EXPECT_THROW(TemplateLibrary::validate_template("no placeholders"),
               ccl::TemplateError);
  EXPECT_THROW(TemplateLibrary::validate_template("{C} only context"),
               ccl::TemplateError);
  EXPECT_THROW(TemplateLibrary::validate_template("{C} {C} {Q}"),
               ccl::TemplateError);
  EXPECT_THROW(TemplateLibrary::validate_template("{Q} before {C}"),
               ccl::TemplateError);
  TemplateLibrary empty;
  EXPECT_THROW(empty.validate(), ccl::TemplateError);
}

TEST(RenderPrompt, SubstitutesAndSplits) {
  Tokenizer tok = test_tokenizer();
  TemplateLibrary lib;
  lib.templates = {"facts : {C} question : {Q} answer :"};
  QARecord rec;
  rec.context = "key1 is val1 .";
  rec.question = "value of key1 ?";
  ccl::Rng rng(0);
  auto rendered = ccl::render_prompt(rec, lib, tok, rng);
  EXPECT_EQ(rendered.context_text, "facts : key1 is val1 .");
  EXPECT_EQ(rendered.prompt_text, "question : value of key1 ? answer :");
  EXPECT_EQ(rendered.template_id, 0);
  EXPECT_EQ(tok.detokenize(rendered.context_tokens), rendered.context_text);
  EXPECT_EQ(tok.detokenize(rendered.prompt_tokens), rendered.prompt_text);
}

TEST(RenderPrompt, SingleTemplateAlwaysIdZero) {
  Tokenizer tok = test_tokenizer();
  TemplateLibrary lib;
  lib.templates = {"{C} question : {Q} answer :"};
  QARecord rec;
  rec.context = "key1 is val1 .";
  rec.question = "value of key1 ?";
  ccl::Rng rng(5);
  for (int i = 0; i < 20; ++i)
    EXPECT_EQ(ccl::render_prompt(rec, lib, tok, rng).template_id, 0);
}

TEST(RenderPrompt, SamplesTemplatesUniformly) {
  Tokenizer tok = test_tokenizer();
  TemplateLibrary lib;
  lib.templates = {"{C} question : {Q} answer :", "facts : {C} query : {Q} result :",
                   "{C} use the facts above . {Q} answer :",
                   "record : {C} question : {Q} reply :"};
  QARecord rec;
  rec.context = "key1 is val1 .";
  rec.question = "value of key1 ?";
  ccl::Rng rng(9);
  std::map<int, int> counts;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i)
    counts[ccl::render_prompt(rec, lib, tok, rng).template_id]++;
  for (const auto& [tid, count] : counts) {
    const double freq = static_cast<double>(count) / draws;
    EXPECT_NEAR(freq, 0.25, 0.03) << "template " << tid;
  }
  EXPECT_EQ(counts.size(), 4u);
}

TEST(Jsonl, RoundTripsRecords) {
  auto records = ccl::generate_corpus(small_spec());
  records.resize(100 < records.size() ? 100 : records.size());
  const fs::path path = temp_path("roundtrip.jsonl");
  ccl::write_jsonl(records, path);
  auto loaded = ccl::read_jsonl(path);
  ASSERT_EQ(loaded.size(), records.size());
  for (size_t i = 0; i < records.size(); ++i) EXPECT_EQ(loaded[i], records[i]);
  fs::remove(path);
}

TEST(Jsonl, EmptyFileGivesEmptyList) {
  const fs::path path = temp_path("empty.jsonl");
  std::ofstream(path).close();
  EXPECT_TRUE(ccl::read_jsonl(path).empty());
  fs::remove(path);
}

TEST(Jsonl, MissingFieldNamesLine) {
  const fs::path path = temp_path("missing.jsonl");
  {
    std::ofstream out(path);
    out << R"({"context":"c","question":"q","answer":"a","split":"train","domain_tag":"in","template_id":0})"
        << '\n';
    out << R"({"context":"c","question":"q","split":"train","domain_tag":"in","template_id":0})"
        << '\n';
  }
  try {
    ccl::read_jsonl(path);
    FAIL() << "expected ParseError";
  } catch (const ccl::ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos);
  }
  fs::remove(path);
}

TEST(Jsonl, MalformedLineNamesLine) {
  const fs::path path = temp_path("malformed.jsonl");
  {
    std::ofstream out(path);
    out << "not json\n";
  }
  try {
    ccl::read_jsonl(path);
    FAIL() << "expected ParseError";
  } catch (const ccl::ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":1"), std::string::npos);
  }
  fs::remove(path);
}

}  // namespace
