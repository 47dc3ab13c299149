// Command-line front end: data generation, teacher finetuning, compressor
// distillation, evaluation, and the verification suites. All paths resolve
// against --workdir; flags override config-file values.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ccl/commands.hpp"
#include "ccl/compressor.hpp"
#include "ccl/config.hpp"

namespace {

struct CommonArgs {
  std::string workdir = ".";
  std::string config_path;
  std::string seed;
  std::string data_dir;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--workdir", args.workdir, "Directory paths resolve against");
  cmd->add_option("--config", args.config_path, "Run configuration file");
  cmd->add_option("--seed", args.seed, "Override the run seed");
  cmd->add_option("--data", args.data_dir, "Data directory (config: data_dir)");
  cmd->add_option("--out", args.out_dir, "Output directory (config: out_dir)");
}

ccl::RunConfig resolve_config(const CommonArgs& args) {
  ccl::RunConfig config;
  if (!args.config_path.empty()) {
    std::filesystem::path p = args.config_path;
    if (!p.is_absolute()) p = std::filesystem::path(args.workdir) / p;
    config = ccl::RunConfig::from_file(p);
  }
  if (!args.seed.empty()) config.set("seed", args.seed);
  if (!args.data_dir.empty()) config.set("data_dir", args.data_dir);
  if (!args.out_dir.empty()) config.set("out_dir", args.out_dir);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Soft context compression lab"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate the synthetic QA corpus");
  add_common(gen, gen_args);

  CommonArgs train_args;
  std::string train_mode = "teacher";
  std::string variant;
  std::string ratios;
  int single_ratio = 0;
  bool multi_ratio_flag = false;
  long long steps_override = -1;
  std::string teacher_ckpt, base_ckpt;
  bool fixed_decoder = false, fixed_encoder = false, no_encoder = false,
       no_linear = false, ratio_sampling = false;
  CLI::App* train = app.add_subcommand("train", "Teacher finetune or distill");
  add_common(train, train_args);
  train->add_option("--mode", train_mode, "teacher | distill")
      ->check(CLI::IsMember({"teacher", "distill"}));
  train->add_option("--variant", variant,
                    "mean-pool | ctok-causal | ctok-bidir");
  train->add_option("--ratios", ratios, "Comma-separated ratio set");
  train->add_option("--single-ratio", single_ratio,
                    "Train at one ratio (implies single-ratio regime)");
  train->add_flag("--multi-ratio", multi_ratio_flag,
                  "Sum the loss over the whole ratio set");
  train->add_option("--steps", steps_override, "Override train.steps");
  train->add_option("--teacher", teacher_ckpt, "Teacher checkpoint (distill)");
  train->add_option("--base", base_ckpt, "Base checkpoint (distill)");
  train->add_flag("--fixed-decoder", fixed_decoder, "Freeze the decoder adapter");
  train->add_flag("--fixed-encoder", fixed_encoder, "Freeze the encoder adapter");
  train->add_flag("--no-encoder", no_encoder,
                  "Compress decoder token embeddings directly");
  train->add_flag("--no-linear", no_linear, "Replace the projection with identity");
  train->add_flag("--ratio-sampling", ratio_sampling,
                  "One sampled ratio per example instead of the full sum");

  CommonArgs eval_args;
  std::string eval_teacher, eval_student, eval_ratios;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Score teacher and student");
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--teacher", eval_teacher, "Teacher checkpoint");
  eval_cmd->add_option("--student", eval_student, "Student checkpoint");
  eval_cmd->add_option("--ratios", eval_ratios, "Ratios to evaluate");

  CommonArgs verify_args;
  std::string inject_fault;
  CLI::App* verify = app.add_subcommand("verify", "Run the property suites");
  add_common(verify, verify_args);
  verify->add_option("--inject-fault", inject_fault, "")->group("");  // test hook

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return ccl::cmd_gen_data(resolve_config(gen_args), gen_args.workdir);
    }
    if (train->parsed()) {
      ccl::RunConfig config = resolve_config(train_args);
      if (!variant.empty()) {
        ccl::variant_from_string(variant);  // reject unknown names early
        config.set("variant", variant);
      }
      if (single_ratio > 0 && (!ratios.empty() || multi_ratio_flag))
        throw ccl::ConfigError("--single-ratio conflicts with --ratios/--multi-ratio");
      if (!ratios.empty()) config.set("ratios", ratios);
      if (single_ratio > 0) {
        config.set("ratios", std::to_string(single_ratio));
        config.set("multi_ratio", "false");
      }
      if (multi_ratio_flag) config.set("multi_ratio", "true");
      if (steps_override >= 0) config.set("train.steps", std::to_string(steps_override));
      if (!teacher_ckpt.empty()) config.set("teacher_ckpt", teacher_ckpt);
      if (!base_ckpt.empty()) config.set("base_ckpt", base_ckpt);
      if (fixed_decoder) config.set("ablation.fixed_decoder", "true");
      if (fixed_encoder) config.set("ablation.fixed_encoder", "true");
      if (no_encoder) config.set("ablation.no_encoder", "true");
      if (no_linear) config.set("ablation.no_linear", "true");
      if (ratio_sampling) config.set("ablation.ratio_sampling", "true");
      return ccl::cmd_train(config, train_args.workdir, train_mode);
    }
    if (eval_cmd->parsed()) {
      ccl::RunConfig config = resolve_config(eval_args);
      if (!eval_teacher.empty()) config.set("teacher_ckpt", eval_teacher);
      if (!eval_student.empty()) config.set("student_ckpt", eval_student);
      if (!eval_ratios.empty()) config.set("ratios", eval_ratios);
      return ccl::cmd_eval(config, eval_args.workdir);
    }
    if (verify->parsed()) {
      if (!inject_fault.empty()) {
        if (inject_fault == "pooling-stride") {
          ccl::testhook::pool_stride_offset() = 1;
        } else {
          throw ccl::ConfigError("unknown fault: " + inject_fault);
        }
      }
      return ccl::cmd_verify();
    }
  } catch (const ccl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
