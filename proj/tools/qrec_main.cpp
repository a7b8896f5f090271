// Command-line front end: one subcommand per pipeline stage plus end-to-end
// and sweep drivers. Exit codes: 0 success, 2 configuration problem, 3 missing
// or stale upstream artifact, 1 anything else.
#include <CLI11.hpp>

#include <iostream>

#include "qrec/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_override;
  uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "run configuration JSON file")
      ->required();
  sub->add_option("--seed", args.seed,
                  "override the run seed (also reseeds synthetic data)")
      ->each([&](const std::string&) { args.seed_set = true; });
  sub->add_option("--out", args.out_override, "override the output directory");
}

qrec::pipe::RunConfig resolve(const CommonArgs& args) {
  qrec::pipe::RunConfig cfg = qrec::pipe::load_config(args.config_path);
  if (args.seed_set) {
    cfg.seed = args.seed;
    cfg.synth.seed = args.seed;
  }
  if (!args.out_override.empty()) cfg.out_dir = args.out_override;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semantic-id sequential recommendation pipeline"};
  app.require_subcommand(1);

  CommonArgs args;
  std::vector<std::string> grid_specs;
  std::string tokens_dest;

  CLI::App* c_synth = app.add_subcommand("synth", "generate synthetic interactions and features");
  CLI::App* c_inject = app.add_subcommand("inject", "fuse modality features into item embeddings");
  CLI::App* c_quantize = app.add_subcommand("quantize", "learn codebooks and assign semantic ids");
  CLI::App* c_pretrain = app.add_subcommand("pretrain", "masked pretraining of the sequence encoder");
  CLI::App* c_finetune = app.add_subcommand("finetune", "next-item fine-tuning of the sequence encoder");
  CLI::App* c_eval = app.add_subcommand("eval", "rank held-out items and report HR/NDCG");
  CLI::App* c_export = app.add_subcommand("export-tokens", "write the item -> token-string table");
  CLI::App* c_pipeline = app.add_subcommand("pipeline", "run all stages in order");
  CLI::App* c_sweep = app.add_subcommand("sweep", "grid sweep over config keys, one CSV row per cell");

  for (CLI::App* sub : {c_synth, c_inject, c_quantize, c_pretrain, c_finetune,
                        c_eval, c_export, c_pipeline, c_sweep})
    add_common(sub, args);
  c_export->add_option("--dest", tokens_dest, "destination file (default <out>/tokens.tsv)");
  c_sweep
      ->add_option("--grid", grid_specs,
                   "axis as key=v1,v2,... (repeatable; cells are the cross product)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // 0 covers --help / --version
  }

  try {
    using namespace qrec::pipe;
    const RunConfig cfg = resolve(args);
    if (c_synth->parsed()) cmd_synth(cfg);
    if (c_inject->parsed()) cmd_inject(cfg);
    if (c_quantize->parsed()) cmd_quantize(cfg);
    if (c_pretrain->parsed()) cmd_pretrain(cfg);
    if (c_finetune->parsed()) cmd_finetune(cfg);
    if (c_eval->parsed()) cmd_eval(cfg);
    if (c_export->parsed()) cmd_export_tokens(cfg, tokens_dest);
    if (c_pipeline->parsed()) cmd_pipeline(cfg);
    if (c_sweep->parsed()) {
      std::vector<SweepAxis> grid;
      for (const auto& spec : grid_specs) grid.push_back(parse_axis(spec));
      cmd_sweep(cfg, grid);
    }
  } catch (const qrec::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const qrec::ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const qrec::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
