// made: command-line driver for data generation, training, zero-shot
// evaluation and few-shot transfer.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "made/pipeline.hpp"

namespace {

int report_error(const std::string& kind, const std::string& message, int code) {
  std::cerr << "error: " << nlohmann::json{{"error", kind}, {"message", message}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-adapter dataset experts for extractive QA"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  std::int64_t seed = -1;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "Override a config key, e.g. --set train.batch_size=4");
    sub->add_option("-o,--output-dir", output_dir, "Output directory (overrides output_dir)");
    sub->add_option("--seed", seed, "Experiment seed (overrides seed)");
  };

  auto* gen = app.add_subcommand("gen-data", "Write synthetic JSONL corpora");
  add_common(gen);

  made::TrainOptions train_opts;
  auto* train = app.add_subcommand("train", "Train single, multi, multi-dynamic, made-joint or single-adapters");
  add_common(train);
  train->add_option("--mode", train_opts.mode, "Training regime")
      ->required()
      ->check(CLI::IsMember(made::train_modes()));
  train->add_option("--dataset", train_opts.dataset, "Dataset for single mode");
  train->add_option("--resume-from", train_opts.resume_from, "Resume from a saved .state file")
      ->check(CLI::ExistingFile);
  train->add_option("--stop-after", train_opts.stop_after, "Pause after this many total steps");
  train->add_option("--name", train_opts.name, "Output file stem");

  std::string checkpoint, dataset, output, target, method;
  auto* tune = app.add_subcommand("adapter-tune", "Tune one expert with the backbone frozen");
  add_common(tune);
  tune->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  tune->add_option("--dataset", dataset)->required();
  tune->add_option("--output", output, "Output checkpoint (default <output_dir>/made.ckpt)");

  std::string tag;
  auto* zero = app.add_subcommand("zero-shot", "Evaluate on target datasets without target labels");
  add_common(zero);
  zero->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  zero->add_option("--target", target, "Target dataset or 'all'")->default_val("all");
  zero->add_option("--method", method, "avg | ensemble | expert:<id> | grid")->default_val("avg");
  zero->add_option("--tag", tag, "Report file suffix (default: checkpoint stem)");

  std::size_t k = 0, seeds = 0;
  auto* transfer = app.add_subcommand("transfer", "Few-shot transfer with K target examples");
  add_common(transfer);
  transfer->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  transfer->add_option("--target", target, "Target dataset or 'all'")->default_val("all");
  transfer->add_option("-k,--k", k, "Labeled target examples (default transfer.k)");
  transfer->add_option("--method", method, "pre-avg | post-avg")
      ->required()
      ->check(CLI::IsMember({"pre-avg", "post-avg"}));
  transfer->add_option("--seeds", seeds, "Number of seeds (default transfer.seeds)");
  transfer->add_option("--tag", tag, "Report file suffix (default: checkpoint stem)");

  auto* pipeline = app.add_subcommand("pipeline", "gen-data, made-joint, adapter-tune, zero-shot and transfer");
  add_common(pipeline);

  auto* stats = app.add_subcommand("param-stats", "Parameter counts of the configured model");
  add_common(stats);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report_error("UsageError", e.what(), 64);
  }

  try {
    if (!output_dir.empty()) overrides.push_back("output_dir=\"" + output_dir + "\"");
    if (seed >= 0) overrides.push_back("seed=" + std::to_string(seed));
    const made::ExperimentConfig cfg = made::load_experiment_config(config_path, overrides);
    nlohmann::json result;
    if (*gen) {
      result = made::cmd_gen_data(cfg);
    } else if (*train) {
      result = made::cmd_train(cfg, train_opts);
    } else if (*tune) {
      result = made::cmd_adapter_tune(cfg, checkpoint, dataset, output);
    } else if (*zero) {
      result = made::cmd_zero_shot(cfg, checkpoint, target, method, tag);
    } else if (*transfer) {
      result = made::cmd_transfer(cfg, checkpoint, target, k ? k : cfg.transfer.base.k, method,
                                  seeds ? seeds : cfg.transfer.seeds, tag);
    } else if (*pipeline) {
      result = made::cmd_pipeline(cfg);
    } else if (*stats) {
      const auto s = made::param_stats(cfg.model);
      result = {{"backbone", s.backbone_count},
                {"per_adapter", s.per_adapter_count},
                {"per_head", s.per_head_count},
                {"overhead_ratio", s.overhead_ratio}};
    }
    std::cout << result.dump(2) << '\n';
    return 0;
  } catch (const made::ConfigError& e) {
    return report_error("ConfigError", e.what(), 2);
  } catch (const made::UnknownExpertError& e) {
    return report_error("UnknownExpertError", e.what(), 2);
  } catch (const made::DimensionError& e) {
    return report_error("DimensionError", e.what(), 3);
  } catch (const made::DataError& e) {
    return report_error("DataError", e.what(), 4);
  } catch (const made::FormatError& e) {
    return report_error("FormatError", e.what(), 5);
  } catch (const made::NumericError& e) {
    return report_error("NumericError", e.what(), 6);
  } catch (const std::exception& e) {
    return report_error("Error", e.what(), 1);
  }
}
