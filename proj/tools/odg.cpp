#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "odg/runner.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool no_style = false, no_hcl = false, no_rac = false, no_sec = false;
  std::string sec_metric;
  std::string style_blocks;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_toggles) {
  cmd->add_option("--config", args.config_path, "run configuration JSON");
  cmd->add_option("--data", args.data_dir, "dataset directory");
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--seed", args.seed, "master seed")->each([&](const std::string&) {
    args.seed_set = true;
  });
  if (with_toggles) {
    cmd->add_flag("--no-style", args.no_style, "disable style hallucination");
    cmd->add_flag("--no-hcl", args.no_hcl, "disable the HRoI consistency loss");
    cmd->add_flag("--no-rac", args.no_rac, "disable the RRoI consistency loss");
    cmd->add_flag("--no-sec", args.no_sec, "disable the style consistency loss");
    cmd->add_option("--sec-metric", args.sec_metric, "style consistency metric: l2|kl|jsd");
    cmd->add_option("--style-blocks", args.style_blocks,
                    "comma-separated backbone blocks to hallucinate, e.g. 1,2,3,4");
  }
}

odg::RunConfig resolve_config(const CommonArgs& args) {
  odg::RunConfig cfg =
      args.config_path.empty() ? odg::RunConfig{} : odg::load_run_config(args.config_path);
  if (args.seed_set) cfg.seed = args.seed;
  if (args.no_style) cfg.detector.style = false;
  if (args.no_hcl) cfg.detector.hcl = false;
  if (args.no_rac) cfg.detector.rac = false;
  if (args.no_sec) cfg.detector.sec = false;
  if (!args.sec_metric.empty()) cfg.detector.sec_metric = odg::parse_sec_metric(args.sec_metric);
  if (!args.style_blocks.empty()) {
    cfg.detector.style_blocks = {false, false, false, false};
    std::stringstream ss(args.style_blocks);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      const int b = std::stoi(tok);
      if (b < 1 || b > 4) throw odg::ConfigError("--style-blocks entries must be in 1..4");
      cfg.detector.style_blocks[static_cast<std::size_t>(b - 1)] = true;
    }
  }
  cfg.detector.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale domain-generalized oriented object detection"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, ablate_args;
  std::string eval_ckpt, plot_csv, plot_out, ablate_matrix = "all";
  double eval_iou = 0.5;
  int ablate_seeds = 5;
  int ablate_jobs = 2;

  CLI::App* gen = app.add_subcommand("gen", "generate source and target datasets (styles A/B/C)");
  add_common(gen, gen_args, false);
  gen->callback([&] {
    if (gen_args.out_dir.empty()) throw CLI::ValidationError("gen", "--out is required");
    odg::cmd_gen(resolve_config(gen_args), gen_args.out_dir);
  });

  CLI::App* train = app.add_subcommand("train", "train on the source domain");
  add_common(train, train_args, true);
  train->callback([&] {
    if (train_args.data_dir.empty() || train_args.out_dir.empty())
      throw CLI::ValidationError("train", "--data and --out are required");
    odg::cmd_train(resolve_config(train_args), train_args.data_dir, train_args.out_dir);
  });

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset directory");
  add_common(eval, eval_args, false);
  eval->add_option("--ckpt", eval_ckpt, "checkpoint directory (from train --out)")->required();
  eval->add_option("--iou", eval_iou, "matching IoU threshold");
  eval->callback([&] {
    if (eval_args.data_dir.empty()) throw CLI::ValidationError("eval", "--data is required");
    odg::cmd_eval(eval_ckpt, eval_args.data_dir, eval_iou, std::filesystem::path(eval_args.out_dir));
  });

  CLI::App* ablate = app.add_subcommand("ablate", "run the component/scale/metric ablation matrices");
  add_common(ablate, ablate_args, true);
  ablate->add_option("--seeds", ablate_seeds, "seeds per matrix row");
  ablate->add_option("--jobs", ablate_jobs, "parallel worker threads");
  ablate->add_option("--matrix", ablate_matrix, "component|scale|metric|all");
  ablate->callback([&] {
    if (ablate_args.data_dir.empty() || ablate_args.out_dir.empty())
      throw CLI::ValidationError("ablate", "--data and --out are required");
    odg::cmd_ablate(resolve_config(ablate_args), ablate_args.data_dir, ablate_args.out_dir,
                    ablate_seeds, ablate_jobs, ablate_matrix);
  });

  CLI::App* plot = app.add_subcommand("plot", "render loss/ablation CSVs as SVG charts");
  plot->add_option("--csv", plot_csv, "input CSV")->required();
  plot->add_option("--out", plot_out, "output directory")->required();
  plot->callback([&] { odg::cmd_plot(plot_csv, plot_out); });

  try {
    CLI11_PARSE(app, argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
