#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ccl/compressor.hpp"
#include "ccl/dataset.hpp"
#include "ccl/distill.hpp"
#include "ccl/metrics.hpp"
#include "ccl/model.hpp"

// QA evaluation. Each dataset is scored under three conditions: the teacher
// with the full context, the teacher with no context at all, and the student
// decoding from the compressed context at each requested ratio. Decoding is
// greedy and stops at the end-of-answer token or the answer budget.

namespace ccl {

// Greedy continuation after [vector_prefix?][context?][prompt]. Returns the
// generated tokens without the terminating end-of-answer token.
inline std::vector<int> greedy_decode(const ModelWeights& w,
                                      const LowRankAdapter* adapter,
                                      const std::optional<Tensor>& vector_prefix,
                                      std::span<const int> context_tokens,
                                      std::span<const int> prompt_tokens,
                                      int max_new_tokens,
                                      int stop_token = Tokenizer::kEndOfAnswerId) {
  NoGradScope no_grad;
  std::vector<int> generated;
  for (int step = 0; step < max_new_tokens; ++step) {
    InputSeq seq;
    if (vector_prefix.has_value()) seq.add_vectors(*vector_prefix);
    if (!context_tokens.empty()) seq.add_tokens(context_tokens);
    seq.add_tokens(prompt_tokens);
    if (!generated.empty()) seq.add_tokens(generated);
    AttentionMask mask = build_mask(MaskKind::Causal, seq.length(), 0);
    Tensor hidden = forward_hidden(w, adapter, seq, mask);
    Tensor last = slice(hidden, 0, seq.length() - 1, 1);
    Tensor logits = project_to_vocab(w, last);
    int best = 0;
    for (int v = 1; v < w.config.vocab_size; ++v)
      if (logits.at(0, v) > logits.at(0, best)) best = v;
    if (best == stop_token) break;
    generated.push_back(best);
  }
  return generated;
}

struct EvalExample {
  QARecord record;
  std::vector<int> context_tokens;  // rendered template prefix + context
  std::vector<int> prompt_tokens;
};

// Renders every record once (template sampled from the seeded rng), so all
// conditions see identical prompts.
inline std::vector<EvalExample> prepare_eval_examples(
    const std::vector<QARecord>& records, const TemplateLibrary& single_hop,
    const TemplateLibrary& two_hop, const Tokenizer& tokenizer, Rng& rng,
    int max_examples = 0) {
  std::vector<EvalExample> out;
  for (const QARecord& rec : records) {
    if (max_examples > 0 && static_cast<int>(out.size()) >= max_examples) break;
    const TemplateLibrary& lib =
        is_two_hop_question(rec.question) ? two_hop : single_hop;
    RenderedPrompt rendered = render_prompt(rec, lib, tokenizer, rng);
    EvalExample ex;
    ex.record = rec;
    ex.record.template_id = rendered.template_id;
    ex.context_tokens = std::move(rendered.context_tokens);
    ex.prompt_tokens = std::move(rendered.prompt_tokens);
    out.push_back(std::move(ex));
  }
  return out;
}

// A student bundle scheduled for evaluation at specific ratios.
struct EvalStudent {
  Student student;
  std::string system;
  std::string regime;  // "single" or "multi"
  std::vector<int> ratios;
};

namespace detail {

inline MetricSet score_prediction(MetricSet& acc, const std::string& pred,
                                  const std::string& gold) {
  acc.em += exact_match(pred, gold);
  acc.f1 += token_f1(pred, gold);
  acc.substring += substring_accuracy(pred, gold);
  return acc;
}

}  // namespace detail

// Scores one dataset under all conditions.
inline DatasetEval evaluate_dataset(const std::string& dataset_name, Domain domain,
                                    const ModelWeights& teacher,
                                    const std::vector<EvalStudent>& students,
                                    const std::vector<EvalExample>& examples,
                                    const Tokenizer& tokenizer,
                                    int max_answer_tokens) {
  if (examples.empty())
    throw InvalidArgumentError("evaluate_dataset: empty evaluation set");
  DatasetEval result;
  result.dataset = dataset_name;
  result.domain = domain;

  MetricSet teacher_full, teacher_noctx;
  // Student scores indexed [student][ratio].
  std::vector<std::vector<MetricSet>> student_scores(students.size());
  for (size_t s = 0; s < students.size(); ++s)
    student_scores[s].resize(students[s].ratios.size());

  for (const EvalExample& ex : examples) {
    const std::string& gold = ex.record.answer;
    const std::string full_pred = tokenizer.detokenize(greedy_decode(
        teacher, nullptr, std::nullopt, ex.context_tokens, ex.prompt_tokens,
        max_answer_tokens));
    detail::score_prediction(teacher_full, full_pred, gold);

    const std::string noctx_pred = tokenizer.detokenize(
        greedy_decode(teacher, nullptr, std::nullopt, {}, ex.prompt_tokens,
                      max_answer_tokens));
    detail::score_prediction(teacher_noctx, noctx_pred, gold);

    for (size_t s = 0; s < students.size(); ++s) {
      const EvalStudent& es = students[s];
      NoGradScope no_grad;
      MultiCompressResult compressed = es.student.compress(
          ex.context_tokens, RatioSet(es.ratios));
      for (size_t ri = 0; ri < es.ratios.size(); ++ri) {
        const CompressedContext& ctx = compressed.by_ratio.at(es.ratios[ri]);
        const std::string pred = tokenizer.detokenize(greedy_decode(
            es.student.base, &es.student.decoder_adapter, ctx.vectors, {},
            ex.prompt_tokens, max_answer_tokens));
        detail::score_prediction(student_scores[s][ri], pred, gold);
      }
    }
  }

  const double n = static_cast<double>(examples.size());
  result.teacher_full = teacher_full / n;
  result.teacher_noctx = teacher_noctx / n;
  for (size_t s = 0; s < students.size(); ++s) {
    for (size_t ri = 0; ri < students[s].ratios.size(); ++ri) {
      StudentScore score;
      score.system = students[s].system;
      score.ratio = students[s].ratios[ri];
      score.regime = students[s].regime;
      score.raw = student_scores[s][ri] / n;
      result.students.push_back(std::move(score));
    }
  }
  return result;
}

}  // namespace ccl
