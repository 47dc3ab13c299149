#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ccl/compressor.hpp"
#include "ccl/dataset.hpp"
#include "ccl/distill.hpp"
#include "ccl/errors.hpp"

// Run configuration: a flat key = value document with a closed key set.
// CLI flags override file values; the fully resolved document is echoed
// into every run's output directory.

namespace ccl {

class RunConfig {
 public:
  RunConfig() { values_ = defaults(); }

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> kDefaults = {
        {"seed", "0"},
        {"variant", "mean-pool"},
        {"ratios", "4,8,16,32,64,128"},
        {"multi_ratio", "true"},
        {"data_dir", "data"},
        {"out_dir", "out"},
        {"templates_dir", "data/templates"},
        {"teacher_ckpt", ""},
        {"base_ckpt", ""},
        {"student_ckpt", ""},
        {"data.n_contexts_train", "2000"},
        {"data.n_contexts_eval", "200"},
        {"data.n_pairs_per_context", "6"},
        {"data.n_keys", "40"},
        {"data.n_values", "40"},
        {"data.two_hop_fraction", "0.25"},
        {"model.d_model", "64"},
        {"model.n_layers", "2"},
        {"model.n_heads", "4"},
        {"model.d_ff", "256"},
        {"model.max_positions", "256"},
        {"model.vocab_size", "0"},
        {"adapter.rank", "16"},
        {"adapter.alpha", "16"},
        {"adapter.up_std", "0"},
        {"train.init_std", "0.02"},
        {"train.embed_std", "0"},
        {"train.steps", "48000"},
        {"train.teacher_steps", "0"},
        {"train.batch_size", "32"},
        {"train.peak_lr", "2e-4"},
        {"train.final_lr", "2e-5"},
        {"train.warmup_ratio", "0.05"},
        {"train.weight_decay", "0"},
        {"train.clip_norm", "1"},
        {"train.beta1", "0.9"},
        {"train.beta2", "0.95"},
        {"train.max_context_len", "1024"},
        {"train.max_answer_tokens", "256"},
        {"train.save_every", "0"},
        {"ablation.fixed_decoder", "false"},
        {"ablation.fixed_encoder", "false"},
        {"ablation.no_encoder", "false"},
        {"ablation.no_linear", "false"},
        {"ablation.ratio_sampling", "false"},
        {"eval.seed", "1234"},
        {"eval.max_examples", "0"},
    };
    return kDefaults;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config: " + path.string());
    RunConfig config;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string trimmed = trim(line);
      if (trimmed.empty() || trimmed[0] == '#') continue;
      const size_t eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ParseError(path.string() + ":" + std::to_string(line_no) +
                         ": expected key = value");
      config.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
    return config;
  }

  void set(const std::string& key, const std::string& value) {
    if (defaults().count(key) == 0)
      throw ConfigError("unknown configuration key: " + key);
    values_[key] = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown configuration key: " + key);
    return it->second;
  }

  int get_int(const std::string& key) const {
    try {
      return std::stoi(get(key));
    } catch (const std::exception&) {
      throw ConfigError("key " + key + " is not an integer: " + get(key));
    }
  }

  int64_t get_int64(const std::string& key) const {
    try {
      return std::stoll(get(key));
    } catch (const std::exception&) {
      throw ConfigError("key " + key + " is not an integer: " + get(key));
    }
  }

  double get_double(const std::string& key) const {
    try {
      return std::stod(get(key));
    } catch (const std::exception&) {
      throw ConfigError("key " + key + " is not a number: " + get(key));
    }
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key " + key + " is not a boolean: " + v);
  }

  uint64_t get_seed(const std::string& key) const {
    try {
      return static_cast<uint64_t>(std::stoull(get(key)));
    } catch (const std::exception&) {
      throw ConfigError("key " + key + " is not a seed: " + get(key));
    }
  }

  std::vector<int> get_ratios() const {
    std::vector<int> ratios;
    std::istringstream iss(get("ratios"));
    std::string part;
    while (std::getline(iss, part, ',')) {
      try {
        ratios.push_back(std::stoi(trim(part)));
      } catch (const std::exception&) {
        throw ConfigError("ratios entry is not an integer: " + part);
      }
    }
    if (ratios.empty()) throw ConfigError("ratios is empty");
    return ratios;
  }

  // Paths resolve against the working directory unless absolute.
  std::filesystem::path get_path(const std::string& key,
                                 const std::filesystem::path& workdir) const {
    const std::filesystem::path p = get(key);
    if (p.empty()) return p;
    return p.is_absolute() ? p : workdir / p;
  }

  ModelConfig model_config(int derived_vocab_size) const {
    ModelConfig m;
    m.vocab_size = get_int("model.vocab_size");
    if (m.vocab_size == 0) m.vocab_size = derived_vocab_size;
    if (m.vocab_size < derived_vocab_size)
      throw ConfigError("model.vocab_size smaller than the tokenizer vocabulary");
    m.d_model = get_int("model.d_model");
    m.n_layers = get_int("model.n_layers");
    m.n_heads = get_int("model.n_heads");
    m.d_ff = get_int("model.d_ff");
    m.max_positions = get_int("model.max_positions");
    m.validate();
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.beta1 = get_double("train.beta1");
    t.beta2 = get_double("train.beta2");
    t.clip_norm = get_double("train.clip_norm");
    t.peak_lr = get_double("train.peak_lr");
    t.final_lr = get_double("train.final_lr");
    t.warmup_ratio = get_double("train.warmup_ratio");
    t.weight_decay = get_double("train.weight_decay");
    t.steps = get_int64("train.steps");
    t.teacher_steps = get_int64("train.teacher_steps");
    t.batch_size = get_int("train.batch_size");
    t.max_context_len = get_int("train.max_context_len");
    t.max_answer_tokens = get_int("train.max_answer_tokens");
    t.adapter_rank = get_int("adapter.rank");
    t.adapter_alpha = get_double("adapter.alpha");
    t.adapter_up_std = get_double("adapter.up_std");
    t.init_std = get_double("train.init_std");
    t.embed_std = get_double("train.embed_std");
    t.ratio_set = RatioSet(get_ratios());
    t.multi_ratio = get_bool("multi_ratio");
    t.variant = variant_from_string(get("variant"));
    t.ablations.fixed_decoder = get_bool("ablation.fixed_decoder");
    t.ablations.fixed_encoder = get_bool("ablation.fixed_encoder");
    t.ablations.no_encoder = get_bool("ablation.no_encoder");
    t.ablations.no_linear = get_bool("ablation.no_linear");
    t.ablations.ratio_sampling = get_bool("ablation.ratio_sampling");
    t.seed = get_seed("seed");
    t.save_every = get_int64("train.save_every");
    t.validate();
    return t;
  }

  CorpusSpec corpus_spec(Split split, Domain domain) const {
    CorpusSpec spec;
    spec.n_contexts = split == Split::Train ? get_int("data.n_contexts_train")
                                            : get_int("data.n_contexts_eval");
    spec.n_pairs_per_context = get_int("data.n_pairs_per_context");
    spec.n_keys = get_int("data.n_keys");
    spec.n_values = get_int("data.n_values");
    spec.two_hop_fraction = get_double("data.two_hop_fraction");
    // Distinct streams per (split, domain).
    const uint64_t base = get_seed("seed");
    const uint64_t lane = (split == Split::Train ? 0 : 2) +
                          (domain == Domain::In ? 0 : 1);
    spec.seed = base * 1000003ull + lane;
    spec.domain_tag = domain;
    spec.split = split;
    return spec;
  }

  // Stable, fully resolved document (sorted keys).
  std::string resolved_text() const {
    std::string out;
    for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
    return out;
  }

  void write_resolved(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write resolved config: " + path.string());
    out << resolved_text();
  }

 private:
  static std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace ccl
