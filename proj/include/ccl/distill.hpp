#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ccl/checkpoint.hpp"
#include "ccl/compressor.hpp"
#include "ccl/dataset.hpp"
#include "ccl/model.hpp"
#include "ccl/tensor.hpp"

// Knowledge-distillation training. The frozen teacher (the base model
// finetuned on the task and merged) defines per-answer-position target
// distributions by teacher forcing over the gold prefix. The student -- an
// encoder/compressor feeding a decoder through the learned projection --
// minimizes the token-level KL to those targets, summed over the ratio set.
// One optimizer update is applied per batch regardless of how many ratios
// contributed.

namespace ccl {

// ---------------------------------------------------------------------------
// Examples and teacher targets
// ---------------------------------------------------------------------------

struct TrainingExample {
  std::vector<int> context;  // compressible part (template prefix + context)
  std::vector<int> prompt;   // stays tokens on the decoder side
  std::vector<int> answer;   // gold answer tokens plus end-of-answer, m >= 1
  Domain domain_tag = Domain::In;
  int template_id = -1;
};

struct TeacherOutput {
  Tensor distributions;  // [m x vocab], each row sums to 1

  int positions() const { return distributions.dim(0); }
};

namespace detail {

// Causal forward over a mixed sequence, returning logits at the positions
// that predict each answer token (the answer starts `prefix_len` items in).
inline Tensor answer_logits(const ModelWeights& w, const LowRankAdapter* adapter,
                            const InputSeq& seq, int prefix_len, int answer_len) {
  AttentionMask mask = build_mask(MaskKind::Causal, seq.length(), 0);
  Tensor hidden = forward_hidden(w, adapter, seq, mask);
  Tensor rows = slice(hidden, 0, prefix_len - 1, answer_len);
  return project_to_vocab(w, rows);
}

}  // namespace detail

// One teacher-forced pass over context + prompt + gold answer. Row i is the
// teacher's distribution for answer position i given the gold prefix.
inline TeacherOutput teacher_distributions(const ModelWeights& teacher,
                                           const TrainingExample& ex) {
  if (ex.answer.empty())
    throw InvalidArgumentError("teacher_distributions: empty answer");
  if (ex.context.empty())
    throw InvalidArgumentError("teacher_distributions: empty context");
  NoGradScope no_grad;
  InputSeq seq;
  seq.add_tokens(ex.context);
  seq.add_tokens(ex.prompt);
  seq.add_tokens(ex.answer);
  const int prefix_len =
      static_cast<int>(ex.context.size() + ex.prompt.size());
  Tensor logits = detail::answer_logits(teacher, nullptr, seq, prefix_len,
                                        static_cast<int>(ex.answer.size()));
  TeacherOutput out;
  out.distributions = softmax(logits);
  return out;
}

// Sum over answer positions of KL(teacher_i || softmax(student_logits_i)).
inline Tensor kd_loss(const TeacherOutput& teacher_out, const Tensor& student_logits) {
  if (student_logits.rank() != 2)
    throw ShapeError("kd_loss: student logits must be [m x vocab]");
  const int m = teacher_out.positions();
  if (student_logits.dim(0) != m)
    throw InvalidArgumentError("kd_loss: position counts differ");
  if (student_logits.dim(1) != teacher_out.distributions.dim(1))
    throw ShapeError("kd_loss: vocabulary sizes differ");
  Tensor total;
  for (int i = 0; i < m; ++i) {
    Tensor q = slice(teacher_out.distributions, 0, i, 1);
    Tensor p = softmax(slice(student_logits, 0, i, 1));
    Tensor term = kl_divergence(q, p);
    total = i == 0 ? term : add(total, term);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Student bundle and ablations
// ---------------------------------------------------------------------------

struct AblationFlags {
  bool fixed_decoder = false;
  bool fixed_encoder = false;
  bool no_encoder = false;
  bool no_linear = false;
  bool ratio_sampling = false;
};

// Encoder and decoder share the frozen base weights and differ only in
// their adapters. The compression-token embedding lives in the base and is
// trainable for the compression-token variants.
struct Student {
  ModelWeights base;
  LowRankAdapter encoder_adapter;
  LowRankAdapter decoder_adapter;
  ProjectionWeights projection;
  CompressVariant variant = CompressVariant::MeanPool;
  bool no_encoder = false;

  MultiCompressResult compress(std::span<const int> context,
                               const RatioSet& ratios) const {
    if (no_encoder) {
      Tensor states = embedding_lookup_states(base, context);
      MultiCompressResult result;
      for (int r : ratios.ratios)
        result.by_ratio.emplace(
            r, compress_states(states, r, projection,
                               static_cast<long>(context.size())));
      result.encoder_positions = static_cast<long>(context.size());
      return result;
    }
    return compress_multi(base, &encoder_adapter, context, ratios, variant,
                          projection);
  }
};

// Student logits at the answer positions for one compressed context.
inline Tensor student_answer_logits(const Student& student,
                                    const CompressedContext& ctx,
                                    const TrainingExample& ex) {
  InputSeq seq;
  seq.add_vectors(ctx.vectors);
  seq.add_tokens(ex.prompt);
  seq.add_tokens(ex.answer);
  const int prefix_len = ctx.compressed_len() + static_cast<int>(ex.prompt.size());
  return detail::answer_logits(student.base, &student.decoder_adapter, seq,
                               prefix_len, static_cast<int>(ex.answer.size()));
}

// L over one example: sum over the ratio set of the per-ratio KD loss. The
// encoder pass is shared across ratios for the pooling variant.
inline Tensor multi_ratio_loss(const Student& student,
                               const TeacherOutput& teacher_out,
                               const TrainingExample& ex, const RatioSet& ratios) {
  MultiCompressResult compressed = student.compress(ex.context, ratios);
  Tensor total;
  bool first = true;
  for (int r : ratios.ratios) {
    Tensor logits = student_answer_logits(student, compressed.by_ratio.at(r), ex);
    Tensor term = kd_loss(teacher_out, logits);
    total = first ? term : add(total, term);
    first = false;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double clip_norm = 1.0;
  double peak_lr = 2e-4;
  double final_lr = 2e-5;
  double warmup_ratio = 0.05;
  double weight_decay = 0.0;
  int64_t steps = 48000;
  int64_t teacher_steps = 0;  // 0: reuse `steps` for teacher finetuning
  int batch_size = 32;
  int max_context_len = 1024;
  int max_answer_tokens = 256;
  int adapter_rank = 16;
  double adapter_alpha = 16.0;
  double adapter_up_std = 0.0;  // 0: exact-identity adapter start
  double init_std = 0.02;   // layer matrices
  double embed_std = 0.0;   // embeddings + output projection; 0 = 1/sqrt(d)
  RatioSet ratio_set = RatioSet::default_set();
  bool multi_ratio = true;
  CompressVariant variant = CompressVariant::MeanPool;
  AblationFlags ablations;
  uint64_t seed = 0;
  int64_t save_every = 0;  // 0: only the final checkpoint

  void validate() const {
    if (!(peak_lr > final_lr && final_lr > 0.0))
      throw ConfigError("TrainConfig: need peak_lr > final_lr > 0");
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0)
      throw ConfigError("TrainConfig: warmup_ratio outside [0, 1)");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (steps < 1) throw ConfigError("TrainConfig: steps must be >= 1");
    ratio_set.validate();
    if (!multi_ratio && ratio_set.ratios.size() != 1)
      throw ConfigError("TrainConfig: single-ratio training needs exactly one ratio");
    if (ablations.no_encoder && variant != CompressVariant::MeanPool)
      throw ConfigError("TrainConfig: no_encoder requires the mean-pool variant");
    if (ablations.no_encoder && ablations.fixed_encoder)
      throw ConfigError("TrainConfig: no_encoder and fixed_encoder conflict");
  }

  // Table-8 values are the construction defaults; this profile shrinks the
  // run to desk scale.
  static TrainConfig desk_profile() {
    TrainConfig c;
    c.steps = 3000;
    c.batch_size = 16;
    c.max_context_len = 64;
    c.max_answer_tokens = 8;
    return c;
  }
};

// Linear warmup to peak_lr, then cosine decay to final_lr.
inline double lr_at_step(const TrainConfig& config, int64_t step, int64_t total_steps) {
  const int64_t warmup =
      static_cast<int64_t>(std::llround(config.warmup_ratio * static_cast<double>(total_steps)));
  if (step < warmup)
    return config.peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total_steps <= warmup) return config.peak_lr;
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(total_steps - warmup);
  return config.final_lr +
         0.5 * (config.peak_lr - config.final_lr) * (1.0 + std::cos(M_PI * progress));
}

// AdamW with decoupled weight decay and global-norm gradient clipping.
class AdamW {
 public:
  AdamW() = default;

  AdamW(std::vector<std::pair<std::string, Tensor>> params, double beta1,
        double beta2, double weight_decay, double eps = 1e-8)
      : params_(std::move(params)),
        beta1_(beta1),
        beta2_(beta2),
        weight_decay_(weight_decay),
        eps_(eps) {
    for (const auto& [name, t] : params_) {
      slots_.push_back({std::vector<double>(t.numel(), 0.0),
                        std::vector<double>(t.numel(), 0.0)});
    }
  }

  const std::vector<std::pair<std::string, Tensor>>& params() const {
    return params_;
  }

  // One update from the gradients currently stored on the parameters.
  // Returns the post-clip global gradient norm; clears gradients.
  double step(double lr, double clip_norm) {
    double sq_norm = 0.0;
    for (auto& [name, t] : params_) {
      if (!t.has_grad()) continue;
      for (double g : t.grad()) sq_norm += g * g;
    }
    const double norm = std::sqrt(sq_norm);
    const double scale_factor =
        (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;
    ++t_;
    const double bias1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& t = params_[i].second;
      auto values = t.mutable_data();
      Slot& slot = slots_[i];
      if (t.has_grad()) {
        auto grads = t.grad();
        for (size_t j = 0; j < values.size(); ++j) {
          const double g = grads[j] * scale_factor;
          slot.m[j] = beta1_ * slot.m[j] + (1.0 - beta1_) * g;
          slot.v[j] = beta2_ * slot.v[j] + (1.0 - beta2_) * g * g;
          const double m_hat = slot.m[j] / bias1;
          const double v_hat = slot.v[j] / bias2;
          values[j] -= lr * (m_hat / (std::sqrt(v_hat) + eps_) +
                             weight_decay_ * values[j]);
        }
      } else {
        for (size_t j = 0; j < values.size(); ++j) {
          slot.m[j] = beta1_ * slot.m[j];
          slot.v[j] = beta2_ * slot.v[j];
          const double m_hat = slot.m[j] / bias1;
          const double v_hat = slot.v[j] / bias2;
          values[j] -= lr * (m_hat / (std::sqrt(v_hat) + eps_) +
                             weight_decay_ * values[j]);
        }
      }
      t.zero_grad();
    }
    return norm * scale_factor;
  }

  int64_t ticks() const { return t_; }

  void append_state(TensorFile& file) const {
    file.meta.emplace_back("opt.t", std::to_string(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      const auto& shape = params_[i].second.shape();
      file.tensors.emplace_back("opt.m." + params_[i].first,
                                Tensor::from_data(shape, slots_[i].m));
      file.tensors.emplace_back("opt.v." + params_[i].first,
                                Tensor::from_data(shape, slots_[i].v));
    }
  }

 private:
  struct Slot {
    std::vector<double> m, v;
  };

  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<Slot> slots_;
  double beta1_ = 0.9, beta2_ = 0.95, weight_decay_ = 0.0, eps_ = 1e-8;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Train state and steps
// ---------------------------------------------------------------------------

// The trainable set under the given flags. Base weights stay frozen; the
// compression-token embedding trains only for the token variants (it feeds
// the encoder, so a frozen encoder freezes it too).
inline std::vector<std::pair<std::string, Tensor>> trainable_parameters(
    Student& student, const AblationFlags& flags) {
  std::vector<std::pair<std::string, Tensor>> out;
  if (!flags.no_encoder && !flags.fixed_encoder) {
    for (auto& [name, t] : student.encoder_adapter.named_tensors())
      out.emplace_back("enc_adapter." + name, t);
    if (student.variant != CompressVariant::MeanPool)
      out.emplace_back("comp_tok", student.base.comp_tok);
  }
  if (!flags.fixed_decoder) {
    for (auto& [name, t] : student.decoder_adapter.named_tensors())
      out.emplace_back("dec_adapter." + name, t);
  }
  if (!flags.no_linear) out.emplace_back("projection.w", student.projection.w);
  for (auto& [name, t] : out) t.set_requires_grad(true);
  return out;
}

struct TrainState {
  int64_t step = 0;
  Student student;
  AdamW optimizer;
  Rng rng;
};

struct PreparedExample {
  TrainingExample example;
  TeacherOutput teacher;
};

struct StepStats {
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

// One aggregated update over the batch: per-example losses are summed over
// the active ratio set, averaged over the batch, then a single clipped
// AdamW step is applied. With ratio sampling each example contributes one
// uniformly drawn ratio instead of the full sum.
inline StepStats train_step(TrainState& state, std::span<const PreparedExample> batch,
                            const TrainConfig& config, int64_t total_steps) {
  if (batch.empty()) throw InvalidArgumentError("train_step: empty batch");
  const double lr = lr_at_step(config, state.step, total_steps);

  Tape tape;
  Tensor total;
  for (size_t i = 0; i < batch.size(); ++i) {
    RatioSet ratios = config.ratio_set;
    if (config.ablations.ratio_sampling) {
      const int pick = state.rng.uniform_int(
          static_cast<int>(config.ratio_set.ratios.size()));
      ratios = RatioSet({config.ratio_set.ratios[static_cast<size_t>(pick)]});
    }
    Tensor loss =
        multi_ratio_loss(state.student, batch[i].teacher, batch[i].example, ratios);
    total = i == 0 ? loss : add(total, loss);
  }
  Tensor batch_loss = scale(total, 1.0 / static_cast<double>(batch.size()));

  if (!std::isfinite(batch_loss.value())) {
    backward(batch_loss);
    std::string diag = "NaN loss at step " + std::to_string(state.step) +
                       "; lr=" + std::to_string(lr) + "; grad norms:";
    for (const auto& [name, t] : state.optimizer.params()) {
      double sq = 0.0;
      if (t.has_grad())
        for (double g : t.grad()) sq += g * g;
      diag += " " + name + "=" + std::to_string(std::sqrt(sq));
    }
    throw TrainAbortError(diag);
  }

  backward(batch_loss);
  StepStats stats;
  stats.loss = batch_loss.value();
  stats.lr = lr;
  stats.grad_norm = state.optimizer.step(lr, config.clip_norm);
  ++state.step;
  return stats;
}

// ---------------------------------------------------------------------------
// Full runs
// ---------------------------------------------------------------------------

enum class TrainMode { TeacherFinetune, Distill };

struct RunSetup {
  ModelConfig model;
  TrainConfig train;
  std::vector<TrainingExample> corpus;
  std::filesystem::path out_dir;
  // Distill mode inputs; teacher finetuning produces them.
  std::optional<std::filesystem::path> base_checkpoint;
  std::optional<std::filesystem::path> teacher_checkpoint;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path log_path;
  int64_t steps_run = 0;
  double final_loss = 0.0;
};

namespace detail {

inline void write_log(const std::filesystem::path& path,
                      const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write log: " + path.string());
  for (const std::string& line : lines) out << line << '\n';
}

inline std::string log_line(int64_t step, const StepStats& stats, double wall_ms) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%lld\t%.8e\t%.8e\t%.8e\t%.3f",
                static_cast<long long>(step), stats.lr, stats.loss,
                stats.grad_norm, wall_ms);
  return buf;
}

// Deterministic epoch-shuffled batch stream.
class BatchStream {
 public:
  BatchStream(size_t corpus_size, int batch_size, Rng& rng)
      : corpus_size_(corpus_size), batch_size_(batch_size), rng_(rng) {}

  std::vector<size_t> next() {
    std::vector<size_t> batch;
    while (batch.size() < static_cast<size_t>(batch_size_)) {
      if (cursor_ == order_.size()) {
        order_.resize(corpus_size_);
        for (size_t i = 0; i < corpus_size_; ++i) order_[i] = i;
        rng_.shuffle(order_);
        cursor_ = 0;
      }
      batch.push_back(order_[cursor_++]);
    }
    return batch;
  }

 private:
  size_t corpus_size_;
  int batch_size_;
  Rng& rng_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
};

inline void validate_corpus(const std::vector<TrainingExample>& corpus,
                            const ModelConfig& model, const TrainConfig& train) {
  if (corpus.empty()) throw ConfigError("run_training: empty corpus");
  for (const TrainingExample& ex : corpus) {
    if (ex.answer.empty()) throw ConfigError("run_training: example with empty answer");
    const int context_len = static_cast<int>(ex.context.size());
    const int answer_len = static_cast<int>(ex.answer.size());
    if (context_len > train.max_context_len)
      throw ConfigError("run_training: context exceeds max_context_len");
    if (answer_len > train.max_answer_tokens)
      throw ConfigError("run_training: answer exceeds max_answer_tokens");
    const int total = context_len + static_cast<int>(ex.prompt.size()) + answer_len;
    if (total > model.max_positions)
      throw ConfigError("run_training: teacher sequence exceeds max_positions");
  }
}

}  // namespace detail

// Teacher finetuning: next-token cross-entropy on the answer tokens only
// (context and prompt positions carry no loss), trained through a LoRA
// adapter on the attention projections of the seed-initialized base model,
// then merged. Writes base.ckpt (pre-finetune) and teacher.ckpt (merged).
inline TrainResult run_teacher_finetune(const RunSetup& setup) {
  setup.model.validate();
  setup.train.validate();
  detail::validate_corpus(setup.corpus, setup.model, setup.train);
  std::filesystem::create_directories(setup.out_dir);

  Rng init_rng(setup.train.seed);
  ModelWeights base = init_weights(setup.model, init_rng, setup.train.init_std,
                                   setup.train.embed_std);
  LowRankAdapter adapter =
      init_adapter(setup.model, setup.train.adapter_rank,
                   setup.train.adapter_alpha, init_rng, 0.02,
                   setup.train.adapter_up_std);

  std::vector<std::pair<std::string, Tensor>> trainable;
  for (auto& [name, t] : adapter.named_tensors()) {
    t.set_requires_grad(true);
    trainable.emplace_back("teacher_adapter." + name, t);
  }
  AdamW optimizer(trainable, setup.train.beta1, setup.train.beta2,
                  setup.train.weight_decay);
  Rng run_rng(setup.train.seed + 1);

  // One-hot targets let the cross-entropy flow through the same KD path:
  // KL(onehot(a_i) || p) = -log p[a_i].
  const int vocab = setup.model.vocab_size;
  auto onehot_targets = [vocab](const TrainingExample& ex) {
    const int m = static_cast<int>(ex.answer.size());
    std::vector<double> rows(static_cast<size_t>(m) * vocab, 0.0);
    for (int i = 0; i < m; ++i)
      rows[static_cast<size_t>(i) * vocab + ex.answer[static_cast<size_t>(i)]] = 1.0;
    TeacherOutput out;
    out.distributions = Tensor::from_data({m, vocab}, std::move(rows));
    return out;
  };

  const int64_t total_steps =
      setup.train.teacher_steps > 0 ? setup.train.teacher_steps : setup.train.steps;
  detail::BatchStream stream(setup.corpus.size(), setup.train.batch_size, run_rng);
  std::vector<std::string> log_lines;
  double last_loss = 0.0;

  for (int64_t step = 0; step < total_steps; ++step) {
    const auto started = std::chrono::steady_clock::now();
    const double lr = lr_at_step(setup.train, step, total_steps);
    Tape tape;
    Tensor total;
    const auto batch = stream.next();
    for (size_t bi = 0; bi < batch.size(); ++bi) {
      const TrainingExample& ex = setup.corpus[batch[bi]];
      InputSeq seq;
      seq.add_tokens(ex.context);
      seq.add_tokens(ex.prompt);
      seq.add_tokens(ex.answer);
      const int prefix_len = static_cast<int>(ex.context.size() + ex.prompt.size());
      Tensor logits = detail::answer_logits(base, &adapter, seq, prefix_len,
                                            static_cast<int>(ex.answer.size()));
      Tensor loss = kd_loss(onehot_targets(ex), logits);
      total = bi == 0 ? loss : add(total, loss);
    }
    Tensor batch_loss = scale(total, 1.0 / static_cast<double>(batch.size()));
    if (!std::isfinite(batch_loss.value()))
      throw TrainAbortError("NaN loss in teacher finetune at step " +
                            std::to_string(step) + "; lr=" + std::to_string(lr));
    backward(batch_loss);
    StepStats stats;
    stats.loss = batch_loss.value();
    stats.lr = lr;
    stats.grad_norm = optimizer.step(lr, setup.train.clip_norm);
    last_loss = stats.loss;
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                  started)
            .count();
    log_lines.push_back(detail::log_line(step + 1, stats, wall_ms));
  }

  ModelWeights teacher = merge_adapter(base, adapter);

  TensorFile base_file = pack_model(base);
  base_file.meta.emplace_back("role", "base");
  write_tensor_file(setup.out_dir / "base.ckpt", base_file);

  TensorFile teacher_file = pack_model(teacher);
  teacher_file.meta.emplace_back("role", "teacher");
  write_tensor_file(setup.out_dir / "teacher.ckpt", teacher_file);

  TrainResult result;
  result.final_checkpoint = setup.out_dir / "teacher.ckpt";
  result.log_path = setup.out_dir / "train_log.tsv";
  result.steps_run = total_steps;
  result.final_loss = last_loss;
  detail::write_log(result.log_path, log_lines);
  return result;
}

// Student checkpoint layout: the (frozen) base tensors, both adapters, the
// projection, and the training regime metadata. comp_tok rides inside the
// base block and carries any training it received.
inline TensorFile pack_student(const Student& student, const TrainConfig& config) {
  TensorFile file = pack_model(student.base, "base.");
  file.meta.emplace_back("role", "student");
  file.meta.emplace_back("variant", to_string(student.variant));
  std::string ratios;
  for (size_t i = 0; i < config.ratio_set.ratios.size(); ++i) {
    if (i) ratios.push_back(',');
    ratios += std::to_string(config.ratio_set.ratios[i]);
  }
  file.meta.emplace_back("ratios", ratios);
  file.meta.emplace_back("multi_ratio", config.multi_ratio ? "1" : "0");
  file.meta.emplace_back("no_encoder", config.ablations.no_encoder ? "1" : "0");
  file.meta.emplace_back("no_linear", config.ablations.no_linear ? "1" : "0");
  append_adapter(file, student.encoder_adapter, "enc_adapter.");
  append_adapter(file, student.decoder_adapter, "dec_adapter.");
  file.tensors.emplace_back("projection.w", student.projection.w);
  return file;
}

inline Student unpack_student(const TensorFile& file) {
  Student student;
  student.base = unpack_model(file, "base.");
  student.encoder_adapter =
      extract_adapter(file, student.base.config.n_layers, "enc_adapter.");
  student.decoder_adapter =
      extract_adapter(file, student.base.config.n_layers, "dec_adapter.");
  student.projection.w = file.tensor_or_throw("projection.w");
  student.variant = variant_from_string(file.meta_or_throw("variant"));
  student.no_encoder = file.meta_or_throw("no_encoder") == "1";
  return student;
}

inline RatioSet student_trained_ratios(const TensorFile& file) {
  std::vector<int> ratios;
  std::istringstream iss(file.meta_or_throw("ratios"));
  std::string part;
  while (std::getline(iss, part, ',')) ratios.push_back(std::stoi(part));
  return RatioSet(std::move(ratios));
}

// Distillation run. Teacher targets are computed once per example (the
// teacher is frozen, so they never change) and reused across epochs. The
// teacher weight hash is checked after training.
inline TrainResult run_distillation(const RunSetup& setup) {
  setup.model.validate();
  setup.train.validate();
  detail::validate_corpus(setup.corpus, setup.model, setup.train);
  if (!setup.teacher_checkpoint.has_value())
    throw ConfigError("distill mode requires a teacher checkpoint");
  if (!setup.base_checkpoint.has_value())
    throw ConfigError("distill mode requires the base checkpoint");
  std::filesystem::create_directories(setup.out_dir);

  ModelWeights teacher = unpack_model(read_tensor_file(*setup.teacher_checkpoint));
  const uint64_t teacher_hash_before = hash_tensors(teacher.named_tensors());

  TrainState state;
  state.student.base = unpack_model(read_tensor_file(*setup.base_checkpoint));
  if (state.student.base.config.vocab_size != setup.model.vocab_size ||
      state.student.base.config.d_model != setup.model.d_model)
    throw ConfigError("distill: base checkpoint does not match model config");
  Rng init_rng(setup.train.seed + 2);
  state.student.encoder_adapter =
      init_adapter(setup.model, setup.train.adapter_rank, setup.train.adapter_alpha,
                   init_rng, 0.02, setup.train.adapter_up_std);
  state.student.decoder_adapter =
      init_adapter(setup.model, setup.train.adapter_rank, setup.train.adapter_alpha,
                   init_rng, 0.02, setup.train.adapter_up_std);
  state.student.projection = ProjectionWeights::identity(setup.model.d_model);
  state.student.variant = setup.train.variant;
  state.student.no_encoder = setup.train.ablations.no_encoder;
  state.rng = Rng(setup.train.seed + 3);

  auto trainable = trainable_parameters(state.student, setup.train.ablations);
  state.optimizer = AdamW(trainable, setup.train.beta1, setup.train.beta2,
                          setup.train.weight_decay);

  // Teacher targets, one pass per distinct example.
  std::vector<PreparedExample> prepared;
  prepared.reserve(setup.corpus.size());
  for (const TrainingExample& ex : setup.corpus)
    prepared.push_back({ex, teacher_distributions(teacher, ex)});

  detail::BatchStream stream(prepared.size(), setup.train.batch_size, state.rng);
  std::vector<std::string> log_lines;
  double last_loss = 0.0;

  for (int64_t step = 0; step < setup.train.steps; ++step) {
    const auto started = std::chrono::steady_clock::now();
    const auto batch_ids = stream.next();
    std::vector<PreparedExample> batch;
    batch.reserve(batch_ids.size());
    for (size_t id : batch_ids) batch.push_back(prepared[id]);
    StepStats stats = train_step(state, batch, setup.train, setup.train.steps);
    last_loss = stats.loss;
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                  started)
            .count();
    log_lines.push_back(detail::log_line(step + 1, stats, wall_ms));
    if (setup.train.save_every > 0 && (step + 1) % setup.train.save_every == 0 &&
        step + 1 < setup.train.steps) {
      TensorFile snapshot = pack_student(state.student, setup.train);
      snapshot.meta.emplace_back("step", std::to_string(step + 1));
      write_tensor_file(setup.out_dir /
                            ("student_step" + std::to_string(step + 1) + ".ckpt"),
                        snapshot);
    }
  }

  if (hash_tensors(teacher.named_tensors()) != teacher_hash_before)
    throw Error("teacher weights changed during distillation");

  TensorFile student_file = pack_student(state.student, setup.train);
  student_file.meta.emplace_back("step", std::to_string(state.step));
  write_tensor_file(setup.out_dir / "student.ckpt", student_file);

  TensorFile state_file;
  state_file.meta.emplace_back("kind", "train_state");
  state_file.meta.emplace_back("step", std::to_string(state.step));
  state_file.meta.emplace_back("rng", state.rng.serialize());
  state.optimizer.append_state(state_file);
  write_tensor_file(setup.out_dir / "student.state", state_file);

  TrainResult result;
  result.final_checkpoint = setup.out_dir / "student.ckpt";
  result.log_path = setup.out_dir / "train_log.tsv";
  result.steps_run = setup.train.steps;
  result.final_loss = last_loss;
  detail::write_log(result.log_path, log_lines);
  return result;
}

inline TrainResult run_training(const RunSetup& setup, TrainMode mode) {
  if (mode == TrainMode::TeacherFinetune) return run_teacher_finetune(setup);
  return run_distillation(setup);
}

// ---------------------------------------------------------------------------
// Example preparation
// ---------------------------------------------------------------------------

// Renders a record with a template sampled from the task-matching library
// and tokenizes all three parts. The end-of-answer token is appended to the
// answer so models learn to terminate.
inline TrainingExample make_training_example(const QARecord& rec,
                                             const TemplateLibrary& single_hop,
                                             const TemplateLibrary& two_hop,
                                             const Tokenizer& tokenizer, Rng& rng) {
  const TemplateLibrary& lib =
      is_two_hop_question(rec.question) ? two_hop : single_hop;
  RenderedPrompt rendered = render_prompt(rec, lib, tokenizer, rng);
  TrainingExample ex;
  ex.context = std::move(rendered.context_tokens);
  ex.prompt = std::move(rendered.prompt_tokens);
  ex.answer = tokenizer.tokenize(rec.answer);
  ex.answer.push_back(Tokenizer::kEndOfAnswerId);
  ex.domain_tag = rec.domain_tag;
  ex.template_id = rendered.template_id;
  return ex;
}

}  // namespace ccl
