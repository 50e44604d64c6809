// usdc -- train, compress, and inspect gated vision transformers at desk
// scale. Every verb is driven by one JSON config file; individual flags
// override the file. Exit codes: 0 success, 1 runtime failure, 2 usage or
// configuration error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "usdc/experiments.hpp"

namespace {

using namespace usdc;

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::string checkpoint;
  std::string dataset;
  long long seed = -1;
  bool seed_given = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "JSON experiment config file");
  cmd->add_option("--out-dir", o.out_dir, "artifact directory (overrides paths.out_dir)");
  cmd->add_option("--checkpoint", o.checkpoint, "input checkpoint (overrides paths.checkpoint)");
  cmd->add_option("--dataset", o.dataset, "dataset directory (overrides paths.dataset)");
  cmd->add_option_function<long long>(
         "--seed", [&o](const long long v) { o.seed = v; o.seed_given = true; },
         "experiment seed (overrides USDC_SEED and the config file)")
      ->check(CLI::NonNegativeNumber);
}

ExperimentConfig resolve(const CommonOpts& o) {
  ExperimentConfig cfg =
      o.config_path.empty() ? ExperimentConfig{} : load_experiment_file(o.config_path);
  if (const char* env = std::getenv("USDC_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') {
      throw ConfigError(std::string("USDC_SEED is not a number: '") + env + "'");
    }
    cfg.train.seed = static_cast<uint64_t>(v);
  }
  if (o.seed_given) cfg.train.seed = static_cast<uint64_t>(o.seed);
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  if (!o.checkpoint.empty()) cfg.checkpoint = o.checkpoint;
  if (!o.dataset.empty()) cfg.dataset = o.dataset;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "usdc: unified static and dynamic compression of small vision transformers.\n"
      "Two-stage pipeline: search-and-compress training, then prune and fine-tune\n"
      "under input-conditioned block gating."};
  app.require_subcommand(1);
  app.footer(
      "Environment:\n"
      "  USDC_SEED   overrides train.seed from the config file; the --seed flag\n"
      "              overrides both.");

  CommonOpts train_o, prune_o, finetune_o, eval_o, ablate_o, report_o, gen_o;
  bool dry_run = false;
  std::string ablation_which;
  std::string gen_out;

  CLI::App* cmd_train = app.add_subcommand(
      "train", "run the full pipeline: stage 1, prune, stage 2; writes checkpoints and logs");
  add_common(cmd_train, train_o);
  cmd_train->add_flag("--dry-run", dry_run,
                      "print the resolved config and the planned uncompressed cost, write nothing");
  cmd_train->callback([&] {
    const ExperimentConfig cfg = resolve(train_o);
    if (dry_run) {
      cfg.validate();
      nlohmann::json out;
      out["config"] = experiment_to_json(cfg);
      out["planned_flops"] = planned_flops_json(cfg.vit);
      std::cout << out.dump(2) << "\n";
      return;
    }
    const TrainOutcome out = run_training(cfg);
    std::cout << out.summary.dump(2) << "\n";
  });

  CLI::App* cmd_prune = app.add_subcommand(
      "prune", "discretize a stage-1 checkpoint: select gates, prune, verify equivalence");
  add_common(cmd_prune, prune_o);
  cmd_prune->callback([&] { std::cout << run_prune(resolve(prune_o)).dump(2) << "\n"; });

  CLI::App* cmd_finetune =
      app.add_subcommand("finetune", "fine-tune a pruned checkpoint under dynamic gating");
  add_common(cmd_finetune, finetune_o);
  cmd_finetune->callback([&] { std::cout << run_finetune(resolve(finetune_o)).dump(2) << "\n"; });

  CLI::App* cmd_eval =
      app.add_subcommand("eval", "measure accuracy and realized cost of a checkpoint");
  add_common(cmd_eval, eval_o);
  cmd_eval->callback([&] { std::cout << run_eval(resolve(eval_o)).dump(2) << "\n"; });

  CLI::App* cmd_ablate = app.add_subcommand(
      "ablate", "train variants and tabulate one comparison as CSV");
  add_common(cmd_ablate, ablate_o);
  cmd_ablate
      ->add_option("--which", ablation_which,
                   "one of: batch-size, gate-arch, prune-options, group-split")
      ->required();
  cmd_ablate->callback([&] {
    const ExperimentConfig cfg = resolve(ablate_o);
    const std::string csv = run_ablation_csv(cfg, ablation_which);
    std::filesystem::create_directories(cfg.out_dir);
    const std::string path =
        (std::filesystem::path(cfg.out_dir) / ("ablate_" + ablation_which + ".csv")).string();
    write_text_file(path, csv);
    std::cout << csv;
  });

  CLI::App* cmd_report = app.add_subcommand(
      "report", "per-layer architecture report of a stage-2 checkpoint (execute rates, costs)");
  add_common(cmd_report, report_o);
  cmd_report->callback([&] {
    const ExperimentConfig cfg = resolve(report_o);
    const nlohmann::json rep = run_report(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    write_text_file((std::filesystem::path(cfg.out_dir) / "report.json").string(),
                    rep.dump(2) + "\n");
    std::cout << rep.dump(2) << "\n";
  });

  CLI::App* cmd_gen = app.add_subcommand(
      "dataset-gen", "write the synthetic shapes dataset as PGM files (train/ and eval/ splits)");
  add_common(cmd_gen, gen_o);
  cmd_gen->add_option("--out", gen_out, "output directory (defaults to paths.dataset)");
  cmd_gen->callback([&] {
    const ExperimentConfig cfg = resolve(gen_o);
    cfg.validate();
    const std::string dir = gen_out.empty() ? cfg.dataset : gen_out;
    if (dir.empty()) throw ConfigError("dataset-gen needs --out or paths.dataset");
    namespace fs = std::filesystem;
    save_dataset_dir(make_shapes10(cfg.train_count, cfg.vit.image_size,
                                   train_data_seed(cfg.train.seed)),
                     (fs::path(dir) / "train").string());
    save_dataset_dir(make_shapes10(cfg.eval_count, cfg.vit.image_size,
                                   eval_data_seed(cfg.train.seed)),
                     (fs::path(dir) / "eval").string());
    nlohmann::json out{{"dir", dir},
                       {"train_images", cfg.train_count},
                       {"eval_images", cfg.eval_count},
                       {"image_size", cfg.vit.image_size}};
    std::cout << out.dump(2) << "\n";
  });

  try {
    app.parse(argc, argv);
    return 0;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ValueError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
