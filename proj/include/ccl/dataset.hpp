#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccl/errors.hpp"
#include "ccl/rng.hpp"

// Synthetic key-value lookup QA. Contexts list key-value pairs; questions
// ask for one key's value, either directly (single hop) or through one level
// of indirection (two hop: the asked key's value is itself a key whose value
// is the final answer). Contexts always contain the evidence, so a
// rule-based scan of the context recovers every gold answer. The in- and
// out-of-domain variants use disjoint value alphabets and different pair /
// question phrasing.

namespace ccl {

enum class Split { Train, Eval };
enum class Domain { In, Out };

inline const char* to_string(Split s) { return s == Split::Train ? "train" : "eval"; }
inline const char* to_string(Domain d) { return d == Domain::In ? "in" : "out"; }

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "eval") return Split::Eval;
  throw ParseError("unknown split: " + s);
}

inline Domain domain_from_string(const std::string& s) {
  if (s == "in") return Domain::In;
  if (s == "out") return Domain::Out;
  throw ParseError("unknown domain tag: " + s);
}

struct QARecord {
  std::string context;
  std::string question;
  std::string answer;
  Split split = Split::Train;
  Domain domain_tag = Domain::In;
  int template_id = -1;  // assigned when a prompt template is sampled

  bool operator==(const QARecord&) const = default;
};

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

// Whitespace-delimited symbol vocabulary. Ids 0 and 1 are reserved for the
// padding and end-of-answer symbols. Round trips are lossless for any
// single-space-separated string of known symbols, which covers everything
// the generator and template files produce.
class Tokenizer {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kEndOfAnswerId = 1;
  static constexpr const char* kPadSymbol = "<pad>";
  static constexpr const char* kEndOfAnswerSymbol = "<eoa>";

  static Tokenizer build(const std::vector<std::string>& symbols) {
    Tokenizer tok;
    tok.add_symbol(kPadSymbol);
    tok.add_symbol(kEndOfAnswerSymbol);
    std::vector<std::string> sorted = symbols;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (const std::string& s : sorted) {
      if (s.empty()) throw InvalidArgumentError("Tokenizer: empty symbol");
      if (s.find_first_of(" \t\n\r") != std::string::npos)
        throw InvalidArgumentError("Tokenizer: symbol contains whitespace: " + s);
      if (s == kPadSymbol || s == kEndOfAnswerSymbol) continue;
      tok.add_symbol(s);
    }
    return tok;
  }

  int vocab_size() const { return static_cast<int>(id_to_symbol_.size()); }

  bool contains(const std::string& symbol) const {
    return symbol_to_id_.count(symbol) != 0;
  }

  int id(const std::string& symbol) const {
    auto it = symbol_to_id_.find(symbol);
    if (it == symbol_to_id_.end())
      throw VocabularyError("unknown symbol: " + symbol);
    return it->second;
  }

  const std::string& symbol(int id) const {
    if (id < 0 || id >= vocab_size())
      throw VocabularyError("token id out of range: " + std::to_string(id));
    return id_to_symbol_[static_cast<size_t>(id)];
  }

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> out;
    std::istringstream iss(text);
    std::string word;
    while (iss >> word) out.push_back(id(word));
    return out;
  }

  std::string detokenize(std::span<const int> ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i > 0) out.push_back(' ');
      out += symbol(ids[i]);
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write vocabulary: " + path.string());
    for (const std::string& s : id_to_symbol_) out << s << '\n';
  }

  static Tokenizer load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read vocabulary: " + path.string());
    Tokenizer tok;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      tok.add_symbol(line);
    }
    if (tok.vocab_size() < 2 || tok.id_to_symbol_[0] != kPadSymbol ||
        tok.id_to_symbol_[1] != kEndOfAnswerSymbol)
      throw ParseError("vocabulary file lacks reserved symbols: " + path.string());
    return tok;
  }

 private:
  void add_symbol(const std::string& s) {
    if (symbol_to_id_.count(s))
      throw InvalidArgumentError("Tokenizer: duplicate symbol " + s);
    symbol_to_id_[s] = vocab_size();
    id_to_symbol_.push_back(s);
  }

  std::map<std::string, int> symbol_to_id_;
  std::vector<std::string> id_to_symbol_;
};

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

struct CorpusSpec {
  int n_contexts = 0;
  int n_pairs_per_context = 6;
  int n_keys = 40;    // size of the shared key alphabet
  int n_values = 40;  // per-domain value alphabet size
  double two_hop_fraction = 0.0;
  uint64_t seed = 0;
  Domain domain_tag = Domain::In;
  Split split = Split::Train;
};

namespace alphabets {

inline std::string key_symbol(int i) {
  std::ostringstream oss;
  oss << "key" << i;
  return oss.str();
}

inline std::string value_symbol(Domain domain, int i) {
  std::ostringstream oss;
  oss << (domain == Domain::In ? "val" : "wug") << i;
  return oss.str();
}

// Pair and question phrasing differ per domain.
struct Phrasing {
  std::string pair_connective;
  std::string pair_terminator;
  std::string single_hop_prefix;  // "<prefix> <key> ?"
  std::string two_hop_prefix;
};

inline Phrasing phrasing(Domain domain) {
  if (domain == Domain::In) return {"is", ".", "value of", "follow"};
  return {"maps", ";", "target of", "trace"};
}

inline std::vector<std::string> phrase_symbols() {
  return {"is", ".", "value", "of", "?", "follow",
          "maps", ";", "target", "trace"};
}

}  // namespace alphabets

// True when the question asks for a chained (two hop) lookup.
inline bool is_two_hop_question(const std::string& question) {
  return question.rfind("follow ", 0) == 0 || question.rfind("trace ", 0) == 0;
}

// Deterministic generator: the output is a pure function of the spec
// (including its seed). Every context contains the asked key's pair, so the
// gold answer is always recoverable from the context alone.
inline std::vector<QARecord> generate_corpus(const CorpusSpec& spec) {
  if (spec.n_contexts < 1)
    throw CapacityError("generate_corpus: n_contexts must be >= 1");
  if (spec.n_pairs_per_context < 1)
    throw CapacityError("generate_corpus: n_pairs_per_context must be >= 1");
  if (spec.n_keys < spec.n_pairs_per_context)
    throw CapacityError("generate_corpus: key alphabet smaller than pairs per context");
  if (spec.n_values < 1) throw CapacityError("generate_corpus: empty value alphabet");
  if (spec.two_hop_fraction < 0.0 || spec.two_hop_fraction > 1.0)
    throw InvalidArgumentError("generate_corpus: two_hop_fraction outside [0, 1]");
  if (spec.two_hop_fraction > 0.0 && spec.n_pairs_per_context < 2)
    throw CapacityError("generate_corpus: two-hop contexts need at least two pairs");

  const auto phrasing = alphabets::phrasing(spec.domain_tag);
  Rng rng(spec.seed);
  std::vector<QARecord> records;
  records.reserve(static_cast<size_t>(spec.n_contexts));

  for (int c = 0; c < spec.n_contexts; ++c) {
    const bool two_hop = rng.uniform() < spec.two_hop_fraction;
    const std::vector<int> keys =
        rng.sample_distinct(spec.n_keys, spec.n_pairs_per_context);

    // pair_value[i] holds the textual value of keys[i].
    std::vector<std::string> pair_value(keys.size());
    for (size_t i = 0; i < keys.size(); ++i)
      pair_value[i] =
          alphabets::value_symbol(spec.domain_tag, rng.uniform_int(spec.n_values));
    int asked = rng.uniform_int(static_cast<int>(keys.size()));
    if (two_hop) {
      // keys[0] points at keys[1]; the chain ends at keys[1]'s value.
      pair_value[0] = alphabets::key_symbol(keys[1]);
      asked = 0;
    }

    // Pairs are listed in a shuffled order so the asked pair's position
    // varies within the context.
    std::vector<int> order(keys.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);

    std::string context;
    for (size_t oi = 0; oi < order.size(); ++oi) {
      const int i = order[oi];
      if (oi > 0) context.push_back(' ');
      context += alphabets::key_symbol(keys[static_cast<size_t>(i)]);
      context.push_back(' ');
      context += phrasing.pair_connective;
      context.push_back(' ');
      context += pair_value[static_cast<size_t>(i)];
      context.push_back(' ');
      context += phrasing.pair_terminator;
    }

    QARecord rec;
    rec.context = std::move(context);
    const std::string asked_key = alphabets::key_symbol(keys[static_cast<size_t>(asked)]);
    if (two_hop) {
      rec.question = phrasing.two_hop_prefix + " " + asked_key + " ?";
      rec.answer = pair_value[1];
    } else {
      rec.question = phrasing.single_hop_prefix + " " + asked_key + " ?";
      rec.answer = pair_value[static_cast<size_t>(asked)];
    }
    rec.split = spec.split;
    rec.domain_tag = spec.domain_tag;
    records.push_back(std::move(rec));
  }
  return records;
}

// Symbols needed to tokenize everything a pair of in/out corpora plus the
// template files can produce.
inline std::vector<std::string> vocabulary_symbols(
    int n_keys, int n_values, const std::vector<std::string>& template_texts) {
  std::vector<std::string> symbols = alphabets::phrase_symbols();
  for (int i = 0; i < n_keys; ++i) symbols.push_back(alphabets::key_symbol(i));
  for (int i = 0; i < n_values; ++i) {
    symbols.push_back(alphabets::value_symbol(Domain::In, i));
    symbols.push_back(alphabets::value_symbol(Domain::Out, i));
  }
  for (const std::string& text : template_texts) {
    std::istringstream iss(text);
    std::string word;
    while (iss >> word)
      if (word != "{C}" && word != "{Q}") symbols.push_back(word);
  }
  return symbols;
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

struct TemplateLibrary {
  std::vector<std::string> templates;

  void validate() const {
    if (templates.empty()) throw TemplateError("template library is empty");
    for (const std::string& t : templates) validate_template(t);
  }

  static void validate_template(const std::string& t) {
    const size_t c_pos = t.find("{C}");
    const size_t q_pos = t.find("{Q}");
    if (c_pos == std::string::npos || q_pos == std::string::npos)
      throw TemplateError("template missing placeholder: " + t);
    if (t.find("{C}", c_pos + 1) != std::string::npos ||
        t.find("{Q}", q_pos + 1) != std::string::npos)
      throw TemplateError("template repeats a placeholder: " + t);
    if (q_pos < c_pos)
      throw TemplateError("template places {Q} before {C}: " + t);
  }

  static TemplateLibrary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read templates: " + path.string());
    TemplateLibrary lib;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      lib.templates.push_back(line);
    }
    lib.validate();
    return lib;
  }
};

struct RenderedPrompt {
  std::string context_text;  // template prefix + substituted context
  std::string prompt_text;   // substituted remainder after the context
  std::vector<int> context_tokens;
  std::vector<int> prompt_tokens;
  int template_id = 0;
};

namespace detail {
inline std::string trim(const std::string& s) {
  const size_t begin = s.find_first_not_of(' ');
  if (begin == std::string::npos) return "";
  const size_t end = s.find_last_not_of(' ');
  return s.substr(begin, end - begin + 1);
}
}  // namespace detail

// Samples a template and splits the rendered text at the end of the
// substituted context: everything through the context is the compressible
// part, everything after it is the prompt the decoder keeps as tokens.
inline RenderedPrompt render_prompt(const QARecord& rec, const TemplateLibrary& lib,
                                    const Tokenizer& tokenizer, Rng& rng) {
  if (lib.templates.empty()) throw TemplateError("template library is empty");
  const int tid = rng.uniform_int(static_cast<int>(lib.templates.size()));
  const std::string& tpl = lib.templates[static_cast<size_t>(tid)];
  TemplateLibrary::validate_template(tpl);

  const size_t c_pos = tpl.find("{C}");
  std::string context_text =
      detail::trim(tpl.substr(0, c_pos) + rec.context);
  std::string tail = tpl.substr(c_pos + 3);
  const size_t q_pos = tail.find("{Q}");
  std::string prompt_text =
      detail::trim(tail.substr(0, q_pos) + rec.question + tail.substr(q_pos + 3));

  RenderedPrompt out;
  out.context_text = std::move(context_text);
  out.prompt_text = std::move(prompt_text);
  out.context_tokens = tokenizer.tokenize(out.context_text);
  out.prompt_tokens = tokenizer.tokenize(out.prompt_text);
  out.template_id = tid;
  return out;
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

inline void write_jsonl(const std::vector<QARecord>& records,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot write: " + path.string());
  for (const QARecord& rec : records) {
    nlohmann::json j;
    j["context"] = rec.context;
    j["question"] = rec.question;
    j["answer"] = rec.answer;
    j["split"] = to_string(rec.split);
    j["domain_tag"] = to_string(rec.domain_tag);
    j["template_id"] = rec.template_id;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<QARecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read: " + path.string());
  std::vector<QARecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                       ": malformed JSON: " + e.what());
    }
    QARecord rec;
    try {
      rec.context = j.at("context").get<std::string>();
      rec.question = j.at("question").get<std::string>();
      rec.answer = j.at("answer").get<std::string>();
      rec.split = split_from_string(j.at("split").get<std::string>());
      rec.domain_tag = domain_from_string(j.at("domain_tag").get<std::string>());
      rec.template_id = j.at("template_id").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                       ": missing or invalid field: " + e.what());
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace ccl
