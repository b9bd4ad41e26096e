#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sdcot/experiment.hpp"

namespace {

sdcot::ExperimentConfig build_config(const std::string& config_path, std::uint64_t* seed,
                                     const std::string* data_dir, const std::string* out_dir,
                                     const std::vector<std::string>& overrides) {
  sdcot::ExperimentConfig cfg;
  if (!config_path.empty()) cfg = sdcot::ExperimentConfig::from_file(config_path);
  if (seed) cfg.seed = *seed;
  if (data_dir && !data_dir->empty()) cfg.data_dir = *data_dir;
  if (out_dir && !out_dir->empty()) cfg.out_dir = *out_dir;
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::runtime_error("--set expects key=value, got " + kv);
    cfg.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Static-dynamic co-teaching for class-incremental 3D object detection"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  std::string data_dir, out_dir;
  std::uint64_t seed = 7;
  bool seed_given = false;
  app.add_option("--config", config_path, "flat key=value config file")->capture_default_str();
  app.add_option("--set", overrides, "override config entries, key=value")->take_all();
  app.add_option("--data", data_dir, "dataset directory");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed, "master seed")->each([&](const std::string&) { seed_given = true; });

  auto* gen = app.add_subcommand("gen-data", "generate synthetic scenes and the split index");

  auto* train = app.add_subcommand("train", "train one model");
  std::string mode = "base";
  std::string base_ckpt;
  std::string run_name;
  int seq_round = -1;
  double replay = -1.0;
  train->add_option("--mode", mode,
                    "base|joint|freeze_add|finetune|sdcot|sdcot_no_dis|sdcot_no_con|sdcot_no_both")
      ->required();
  train->add_option("--base-ckpt", base_ckpt, "starting checkpoint for incremental modes");
  train->add_option("--run-name", run_name, "output subdirectory (default: <mode>_seed<seed>)");
  train->add_option("--sequential-round", seq_round, "round index into sequential_rounds");
  train->add_option("--replay-ratio", replay, "override replay exemplar ratio");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  std::string ckpt, report_csv;
  eval->add_option("--ckpt", ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--report", report_csv, "output CSV path (default <ckpt dir>/eval_val.csv)");

  auto* suite = app.add_subcommand("suite", "run the full comparison suite across seeds");

  CLI11_PARSE(app, argc, argv);

  try {
    sdcot::ExperimentConfig cfg =
        build_config(config_path, seed_given ? &seed : nullptr, &data_dir, &out_dir, overrides);

    if (gen->parsed()) {
      sdcot::cmd_gen_data(cfg, std::cout);
    } else if (train->parsed()) {
      if (run_name.empty()) run_name = mode + "_seed" + std::to_string(cfg.seed);
      const double ratio = replay >= 0.0 ? replay : cfg.replay_ratio;
      std::optional<int> round;
      if (seq_round >= 0) round = seq_round;
      sdcot::cmd_train(cfg, mode, base_ckpt, round, ratio, run_name, std::cout);
    } else if (eval->parsed()) {
      if (report_csv.empty()) {
        const auto slash = ckpt.find_last_of('/');
        report_csv = (slash == std::string::npos ? std::string(".")
                                                 : ckpt.substr(0, slash)) + "/eval_val.csv";
      }
      sdcot::cmd_eval(cfg, ckpt, report_csv, std::cout);
    } else if (suite->parsed()) {
      sdcot::cmd_suite(cfg, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
