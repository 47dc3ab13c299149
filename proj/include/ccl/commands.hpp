#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccl/config.hpp"
#include "ccl/dataset.hpp"
#include "ccl/distill.hpp"
#include "ccl/eval.hpp"
#include "ccl/metrics.hpp"
#include "ccl/verify.hpp"

// The operator surface behind the CLI subcommands. Each command takes the
// resolved configuration and a working directory, writes its artifacts, and
// returns a process exit code. Logs go to stderr, data to files.

namespace ccl {

namespace cmd_detail {

struct DataBundle {
  Tokenizer tokenizer;
  TemplateLibrary single_hop;
  TemplateLibrary two_hop;
};

inline DataBundle load_data_bundle(const std::filesystem::path& data_dir) {
  DataBundle bundle{Tokenizer::load(data_dir / "vocab.txt"),
                    TemplateLibrary::load(data_dir / "templates_single_hop.txt"),
                    TemplateLibrary::load(data_dir / "templates_two_hop.txt")};
  return bundle;
}

inline std::vector<TrainingExample> prepare_training_corpus(
    const std::vector<QARecord>& records, const DataBundle& bundle, Rng& rng) {
  std::vector<TrainingExample> out;
  out.reserve(records.size());
  for (const QARecord& rec : records)
    out.push_back(make_training_example(rec, bundle.single_hop, bundle.two_hop,
                                        bundle.tokenizer, rng));
  return out;
}

}  // namespace cmd_detail

// Generates the four corpus files (train/eval x in/out), the shared
// vocabulary, copies of the template libraries, and a manifest.
inline int cmd_gen_data(const RunConfig& config,
                        const std::filesystem::path& workdir) {
  const std::filesystem::path data_dir = config.get_path("data_dir", workdir);
  std::filesystem::create_directories(data_dir);

  const std::filesystem::path templates_dir =
      config.get_path("templates_dir", workdir);
  TemplateLibrary single_hop = TemplateLibrary::load(templates_dir / "single_hop.txt");
  TemplateLibrary two_hop = TemplateLibrary::load(templates_dir / "two_hop.txt");

  std::vector<std::string> template_texts = single_hop.templates;
  template_texts.insert(template_texts.end(), two_hop.templates.begin(),
                        two_hop.templates.end());
  Tokenizer tokenizer = Tokenizer::build(vocabulary_symbols(
      config.get_int("data.n_keys"), config.get_int("data.n_values"),
      template_texts));
  tokenizer.save(data_dir / "vocab.txt");

  auto save_templates = [&](const TemplateLibrary& lib, const std::string& name) {
    std::ofstream out(data_dir / name, std::ios::trunc);
    if (!out) throw IoError("cannot write " + name);
    for (const std::string& t : lib.templates) out << t << '\n';
  };
  save_templates(single_hop, "templates_single_hop.txt");
  save_templates(two_hop, "templates_two_hop.txt");

  nlohmann::json manifest;
  manifest["seed"] = config.get_seed("seed");
  manifest["generator"] = {
      {"n_pairs_per_context", config.get_int("data.n_pairs_per_context")},
      {"n_keys", config.get_int("data.n_keys")},
      {"n_values", config.get_int("data.n_values")},
      {"two_hop_fraction", config.get_double("data.two_hop_fraction")},
      {"vocab_size", tokenizer.vocab_size()}};
  for (Split split : {Split::Train, Split::Eval}) {
    for (Domain domain : {Domain::In, Domain::Out}) {
      const auto records = generate_corpus(config.corpus_spec(split, domain));
      const std::string name =
          std::string(to_string(split)) + "_" + to_string(domain) + ".jsonl";
      write_jsonl(records, data_dir / name);
      manifest["files"][name] = records.size();
    }
  }
  std::ofstream mf(data_dir / "manifest.json", std::ios::trunc);
  if (!mf) throw IoError("cannot write manifest");
  mf << manifest.dump(2) << '\n';

  config.write_resolved(data_dir / "config_resolved.cfg");
  std::cerr << "gen-data: wrote 4 corpus files + vocab (" << tokenizer.vocab_size()
            << " symbols) to " << data_dir << "\n";
  return 0;
}

// Teacher finetuning or compressor distillation over the generated data.
inline int cmd_train(const RunConfig& config, const std::filesystem::path& workdir,
                     const std::string& mode) {
  if (mode != "teacher" && mode != "distill")
    throw ConfigError("train mode must be 'teacher' or 'distill', got: " + mode);
  const std::filesystem::path data_dir = config.get_path("data_dir", workdir);
  const std::filesystem::path out_dir = config.get_path("out_dir", workdir);
  std::filesystem::create_directories(out_dir);

  auto bundle = cmd_detail::load_data_bundle(data_dir);
  const auto records = read_jsonl(data_dir / "train_in.jsonl");
  if (records.empty()) throw ConfigError("train_in.jsonl is empty");

  RunSetup setup;
  setup.train = config.train_config();
  setup.model = config.model_config(bundle.tokenizer.vocab_size());
  Rng render_rng(config.get_seed("seed") * 1000003ull + 17);
  setup.corpus = cmd_detail::prepare_training_corpus(records, bundle, render_rng);
  setup.out_dir = out_dir;

  TrainMode train_mode;
  if (mode == "teacher") {
    train_mode = TrainMode::TeacherFinetune;
  } else {
    train_mode = TrainMode::Distill;
    const auto teacher = config.get_path("teacher_ckpt", workdir);
    const auto base = config.get_path("base_ckpt", workdir);
    if (teacher.empty() || !std::filesystem::exists(teacher))
      throw ConfigError("distill mode requires an existing teacher_ckpt");
    if (base.empty() || !std::filesystem::exists(base))
      throw ConfigError("distill mode requires an existing base_ckpt");
    setup.teacher_checkpoint = teacher;
    setup.base_checkpoint = base;
  }

  config.write_resolved(out_dir / "config_resolved.cfg");
  TrainResult result = run_training(setup, train_mode);
  std::cerr << "train(" << mode << "): " << result.steps_run
            << " steps, final loss " << result.final_loss << ", checkpoint "
            << result.final_checkpoint << "\n";
  return 0;
}

// Evaluates teacher-with-context, teacher-without-context, and the student
// at every requested ratio, then emits the CSV and comparison table.
inline int cmd_eval(const RunConfig& config, const std::filesystem::path& workdir) {
  const std::filesystem::path data_dir = config.get_path("data_dir", workdir);
  const std::filesystem::path out_dir = config.get_path("out_dir", workdir);
  std::filesystem::create_directories(out_dir);

  const auto teacher_path = config.get_path("teacher_ckpt", workdir);
  const auto student_path = config.get_path("student_ckpt", workdir);
  if (teacher_path.empty() || !std::filesystem::exists(teacher_path))
    throw ConfigError("eval requires an existing teacher_ckpt");
  if (student_path.empty() || !std::filesystem::exists(student_path))
    throw ConfigError("eval requires an existing student_ckpt");

  auto bundle = cmd_detail::load_data_bundle(data_dir);
  ModelWeights teacher = unpack_model(read_tensor_file(teacher_path));

  TensorFile student_file = read_tensor_file(student_path);
  EvalStudent student;
  student.student = unpack_student(student_file);
  student.system = to_string(student.student.variant);
  if (student.student.no_encoder) student.system += "+no-encoder";
  student.regime =
      student_file.meta_or_throw("multi_ratio") == "1" ? "multi" : "single";
  const RatioSet trained = student_trained_ratios(student_file);
  student.ratios = config.get_ratios();
  for (int r : student.ratios) {
    if (std::find(trained.ratios.begin(), trained.ratios.end(), r) ==
        trained.ratios.end())
      throw ConfigError("requested ratio " + std::to_string(r) +
                        " was not part of the student's training set");
  }

  const int max_answer = config.get_int("train.max_answer_tokens");
  const int max_examples = config.get_int("eval.max_examples");
  Rng eval_rng(config.get_seed("eval.seed"));

  std::vector<DatasetEval> datasets;
  for (Domain domain : {Domain::In, Domain::Out}) {
    const std::string file = std::string("eval_") + to_string(domain) + ".jsonl";
    const auto records = read_jsonl(data_dir / file);
    if (records.empty()) throw InvalidArgumentError("empty eval set: " + file);
    auto examples = prepare_eval_examples(records, bundle.single_hop,
                                          bundle.two_hop, bundle.tokenizer,
                                          eval_rng, max_examples);
    datasets.push_back(evaluate_dataset(std::string("synthetic-") + to_string(domain),
                                        domain, teacher, {student}, examples,
                                        bundle.tokenizer, max_answer));
  }

  EvalReport report = aggregate(datasets);
  {
    std::ofstream csv(out_dir / "report.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write report.csv");
    csv << to_csv(report);
  }
  {
    std::ofstream table(out_dir / "report_table.txt", std::ios::trunc);
    if (!table) throw IoError("cannot write report_table.txt");
    table << to_table(report);
  }
  config.write_resolved(out_dir / "config_resolved.cfg");
  std::cerr << "eval: report for " << datasets.size() << " datasets written to "
            << out_dir << "\n";
  return 0;
}

// Runs the verification suites and prints a machine-readable summary.
inline int cmd_verify() {
  const std::vector<SuiteResult> suites = run_verification_suites();
  std::cout << verification_report_json(suites) << "\n";
  bool all_passed = true;
  for (const SuiteResult& s : suites) {
    std::cerr << (s.passed ? "[PASS] " : "[FAIL] ") << s.suite << ": " << s.detail
              << "\n";
    all_passed = all_passed && s.passed;
  }
  return all_passed ? 0 : 1;
}

}  // namespace ccl
