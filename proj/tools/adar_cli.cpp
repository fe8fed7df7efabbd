#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "adar/cli.hpp"

int main(int argc, char** argv) {
  namespace cli = adar::cli;
  CLI::App app{"Score-aware diffusion negative sampling for implicit-feedback recommenders"};
  app.require_subcommand(1);
  const cli::Streams io{std::cout, std::cerr};

  cli::PrepareOptions prep;
  std::string prep_format = "tsv";
  auto* prepare = app.add_subcommand("prepare", "Split an interaction file into train/test with id maps");
  prepare->add_option("-i,--input", prep.input, "Interaction file (user, item[, timestamp])")->required();
  prepare->add_option("-f,--format", prep_format, "tsv or csv")->capture_default_str();
  prepare->add_option("-r,--ratio", prep.ratio, "Share of each user's interactions kept for training")
      ->capture_default_str();
  prepare->add_option("-s,--seed", prep.seed, "Split seed")->capture_default_str();
  prepare->add_option("-o,--out", prep.out_dir, "Output directory")->capture_default_str();

  std::string config;
  auto* train = app.add_subcommand("train", "Train from a config file and write checkpoints, losses and metrics");
  train->add_option("-c,--config", config, "key = value config file")->required();

  std::string checkpoint, eval_out;
  auto* eval = app.add_subcommand("eval", "Evaluate an encoder checkpoint on the config's data");
  eval->add_option("-c,--config", config, "key = value config file")->required();
  eval->add_option("--checkpoint", checkpoint, "Encoder checkpoint (default: <out_dir>/encoder.ckpt)");
  eval->add_option("-o,--out", eval_out, "Also write the report to this file");

  unsigned parallel = 1;
  auto* sweep = app.add_subcommand("sweep", "Train every lambda_grid x T_grid point and write sweep.csv");
  sweep->add_option("-c,--config", config, "key = value config file")->required();
  sweep->add_option("-j,--parallel", parallel, "Grid points trained concurrently")->capture_default_str();

  std::uint64_t verify_seed = 2024;
  auto* verify = app.add_subcommand("verify", "Run the numerical property checks");
  verify->add_option("-s,--seed", verify_seed, "Seed for the randomized checks")->capture_default_str();

  std::string export_dir;
  auto* exp = app.add_subcommand("export-embeddings", "Write user and item tables in the ADAR binary format");
  exp->add_option("--checkpoint", checkpoint, "Encoder checkpoint")->required();
  exp->add_option("-o,--out", export_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kConfig;
  }

  if (*prepare) {
    try {
      prep.format = adar::parse_text_format(prep_format);
    } catch (const adar::Error& e) {
      std::cerr << "error: " << e.what() << '\n';
      return cli::kConfig;
    }
    return cli::cmd_prepare(prep, io);
  }
  if (*train) return cli::cmd_train(config, io);
  if (*eval) return cli::cmd_eval(config, checkpoint, eval_out, io);
  if (*sweep) return cli::cmd_sweep(config, parallel, io);
  if (*verify) return cli::cmd_verify(verify_seed, io);
  if (*exp) return cli::cmd_export_embeddings(checkpoint, export_dir, io);
  return cli::kOther;
}
