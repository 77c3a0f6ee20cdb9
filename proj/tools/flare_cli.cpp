// flare: data generation, training, evaluation, spectral probing and mixer
// benchmarks. Exit codes: 0 success, 2 validation error, 3 runtime error.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "flare/commands.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  using namespace flare::cli;

  CLI::App app{"FLARE latent-token attention toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic Darcy dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--grid", gen.grid, "Grid points per side (>= 8)");
  gen_cmd->add_option("--n-train", gen.n_train, "Training samples");
  gen_cmd->add_option("--n-test", gen.n_test, "Test samples");
  gen_cmd->add_option("--seed", gen.seed, "Base generator seed");
  gen_cmd->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  TrainOptions tr;
  std::string tr_config, tr_data, tr_out, tr_resume;
  std::uint64_t tr_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", tr_config, "JSON config file with dotted keys");
  train_cmd->add_option("--data", tr_data, "Dataset directory (overrides data.dir)");
  train_cmd->add_option("--out", tr_out, "Output directory (overrides out.dir)");
  auto* seed_opt = train_cmd->add_option("--seed", tr_seed, "Seed for init and shuffling");
  train_cmd->add_option("--set", tr.overrides, "Config override key=value (repeatable)");
  train_cmd->add_option("--resume", tr_resume, "Continue from a checkpoint");
  train_cmd->add_option("--stop-after", tr.stop_after,
                        "Stop after this many completed epochs (0 = all)");

  EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--split", ev.split, "train or test");

  SpectraOptions sp;
  auto* spectra_cmd = app.add_subcommand("spectra", "Eigenvalues of each head's mixing matrix");
  spectra_cmd->add_option("--checkpoint", sp.checkpoint, "Checkpoint file")->required();
  spectra_cmd->add_option("--data", sp.data, "Dataset directory")->required();
  spectra_cmd->add_option("--split", sp.split, "train or test");
  spectra_cmd->add_option("--sample", sp.sample, "Sample index within the split");
  spectra_cmd->add_option("--block", sp.block, "Block index");
  spectra_cmd->add_flag("--check", sp.check, "Compare against the dense N×N oracle (N <= 512)");
  spectra_cmd->add_option("--out", sp.out, "CSV output file")->required();

  BenchOptions be;
  std::string be_out;
  auto* bench_cmd = app.add_subcommand("bench", "Time mixer forward+backward");
  bench_cmd->set_help_flag("--help", "Print this help message and exit");
  bench_cmd->add_option("--mixer", be.mixer, "flare or vanilla");
  bench_cmd->add_option("--n", be.n, "Comma-separated sequence lengths")
      ->delimiter(',')
      ->required();
  bench_cmd->add_option("--m", be.m, "Latent tokens (flare)");
  bench_cmd->add_option("--c", be.c, "Feature width");
  bench_cmd->add_option("--h", be.h, "Heads");
  bench_cmd->add_option("--reps", be.reps, "Timed repetitions after one warm-up");
  bench_cmd->add_option("--threads", be.threads, "Worker threads (only 1 is supported)");
  bench_cmd->add_option("--out", be_out, "CSV output file (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*gen_cmd) {
      cmd_gen_data(gen);
    } else if (*train_cmd) {
      if (!tr_config.empty()) tr.config = tr_config;
      if (!tr_data.empty()) tr.data = tr_data;
      if (!tr_out.empty()) tr.out = tr_out;
      if (!tr_resume.empty()) tr.resume = tr_resume;
      if (seed_opt->count()) tr.seed = tr_seed;
      const TrainSummary s = cmd_train(tr);
      nlohmann::json j = {{"epochs_completed", s.epochs_completed},
                          {"checkpoint", s.checkpoint.string()}};
      if (!s.history.empty()) {
        j["final_train_rel_l2"] = s.history.back().train_rel_l2;
        j["final_test_rel_l2"] = s.history.back().test_rel_l2;
      }
      print_json(j);
    } else if (*eval_cmd) {
      print_json(cmd_eval(ev));
    } else if (*spectra_cmd) {
      print_json(cmd_spectra(sp));
    } else if (*bench_cmd) {
      if (!be_out.empty()) be.out = be_out;
      const BenchReport r = cmd_bench(be);
      if (!be.out) std::cout << flare::bench_csv(r.points);
      if (r.slope) std::cerr << "loglog_slope " << *r.slope << "\n";
    }
  } catch (const flare::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
