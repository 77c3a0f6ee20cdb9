#pragma once

// Command implementations behind the `flare` executable. Each validates its
// inputs before touching the filesystem; ConfigError signals a validation
// failure, any other Error a runtime failure.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flare/bench.hpp"
#include "flare/checkpoint.hpp"
#include "flare/data.hpp"
#include "flare/io.hpp"
#include "flare/run_config.hpp"
#include "flare/spectral.hpp"
#include "flare/train.hpp"

namespace flare::cli {

namespace fs = std::filesystem;

inline bool is_nonempty_dir(const fs::path& p) {
  return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p));
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOptions {
  fs::path out;
  std::size_t grid = 32;
  std::size_t n_train = 200;
  std::size_t n_test = 50;
  std::uint64_t seed = 0;
  bool force = false;
};

inline void cmd_gen_data(const GenDataOptions& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  if (o.grid < kMinGrid) {
    throw ConfigError("--grid " + std::to_string(o.grid) + " is below the minimum of " +
                      std::to_string(kMinGrid));
  }
  if (o.n_train == 0) throw ConfigError("--n-train must be >= 1");
  if (is_nonempty_dir(o.out) && !o.force) {
    throw ConfigError("output directory " + o.out.string() +
                      " exists and is not empty (use --force to overwrite)");
  }

  const DarcyParams dp;
  Dataset train, test;
  nlohmann::json train_seeds = nlohmann::json::array(), test_seeds = nlohmann::json::array();
  for (std::size_t i = 0; i < o.n_train; ++i) {
    const auto s = sample_seed(o.seed, 0, i);
    train.push_back(generate_darcy_sample(o.grid, s, dp));
    train_seeds.push_back(s);
  }
  for (std::size_t i = 0; i < o.n_test; ++i) {
    const auto s = sample_seed(o.seed, 1, i);
    test.push_back(generate_darcy_sample(o.grid, s, dp));
    test_seeds.push_back(s);
  }
  const NormStats stats = compute_norm_stats(train);

  nlohmann::json meta = {
      {"generator",
       {{"problem", "darcy"},
        {"grid", o.grid},
        {"seed", o.seed},
        {"coefficient_low", dp.low},
        {"coefficient_high", dp.high},
        {"smoothing_radius", smoothing_radius(o.grid)},
        {"cg_tol", dp.cg_tol}}},
      {"splits",
       {{"train", {{"file", "train.pcf"}, {"count", o.n_train}, {"sample_seeds", train_seeds}}},
        {"test", {{"file", "test.pcf"}, {"count", o.n_test}, {"sample_seeds", test_seeds}}}}},
      {"norm", stats}};

  fs::create_directories(o.out);
  write_pcf(o.out / "train.pcf", train);
  write_pcf(o.out / "test.pcf", test);
  io::write_text(o.out / "train.meta.json", meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Data directory helpers.

inline Dataset load_split(const fs::path& dir, const std::string& split) {
  if (split != "train" && split != "test") {
    throw ConfigError("--split must be \"train\" or \"test\", got \"" + split + "\"");
  }
  if (dir.empty()) throw ConfigError("a data directory is required");
  return read_pcf(dir / (split + ".pcf"));
}

// Feature and label widths shared by every sample.
inline std::pair<std::size_t, std::size_t> data_widths(const Dataset& ds, const std::string& what) {
  if (ds.empty()) throw InvalidValueError(what + " split is empty");
  const std::size_t d_in = ds.front().features.cols(), d_out = ds.front().labels.cols();
  for (const auto& s : ds) {
    if (s.features.cols() != d_in || s.labels.cols() != d_out) {
      throw FormatError(what + " split mixes feature widths");
    }
  }
  return {d_in, d_out};
}

inline void check_model_matches_data(const ModelConfig& m, const Dataset& ds,
                                     const std::string& what) {
  const auto [d_in, d_out] = data_widths(ds, what);
  if (d_in != m.d_in) {
    throw ConfigError("checkpoint expects d_in = " + std::to_string(m.d_in) + " but the " + what +
                      " data has " + std::to_string(d_in) + " input features");
  }
  if (d_out != m.d_out) {
    throw ConfigError("checkpoint expects d_out = " + std::to_string(m.d_out) + " but the " +
                      what + " data has " + std::to_string(d_out) + " label features");
  }
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::optional<fs::path> config;
  std::optional<fs::path> data;
  std::optional<fs::path> out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;  // key=value
  std::optional<fs::path> resume;
  std::size_t stop_after = 0;  // 0: run every configured epoch
};

struct TrainSummary {
  RunConfig config;
  std::size_t epochs_completed = 0;
  std::vector<EpochMetrics> history;
  fs::path checkpoint;
};

// Resolves the run configuration without touching the filesystem beyond reads.
inline RunConfig resolve_train_config(const TrainOptions& o, const Checkpoint* resume) {
  RunConfig c;
  if (resume) {
    if (o.config || o.seed || !o.overrides.empty()) {
      throw ConfigError("--resume takes its configuration from the checkpoint; "
                        "--config, --seed and --set cannot be combined with it");
    }
    c.model = resume->model;
    c.train = train_config_from_checkpoint(*resume);
    c.d_in = c.model.d_in;
    c.d_out = c.model.d_out;
  } else {
    if (o.config) apply_config_file(c, *o.config);
    apply_seed_env(c);
    if (o.seed) set_seed(c, *o.seed);
    for (const auto& kv : o.overrides) apply_override(c, kv);
  }
  if (o.data) c.data_dir = o.data->string();
  if (o.out) c.out_dir = o.out->string();
  if (c.data_dir.empty()) throw ConfigError("no data directory (--data or data.dir)");
  if (c.out_dir.empty()) throw ConfigError("no output directory (--out or out.dir)");
  return c;
}

namespace detail {

template <class T>
TrainSummary run_training(RunConfig cfg, const Dataset& train_ds, const Dataset& test_ds,
                          const Checkpoint* resume, std::size_t stop_after) {
  const NormStats stats = resume ? norm_from_checkpoint(*resume) : compute_norm_stats(train_ds);
  const auto train = prepare_split<T>(train_ds, stats);
  const auto test = prepare_split<T>(test_ds, stats);
  TrainState<T> state = resume ? state_from_checkpoint<T>(*resume) : initial_state<T>(cfg.model);
  if (stop_after && stop_after <= state.epoch) {
    throw ConfigError("--stop-after " + std::to_string(stop_after) +
                      " does not exceed the checkpoint's " + std::to_string(state.epoch) +
                      " completed epochs");
  }

  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  nlohmann::json resolved = resolved_json(cfg);
  if (resume) resolved["resumed_from_epoch"] = state.epoch;
  io::write_text(out / "resolved.json", resolved.dump(2) + "\n");

  FitOptions<T> fo;
  fo.stop_after = stop_after;
  fo.on_epoch = [&](const TrainState<T>& s) {
    io::write_text(out / "run.csv", run_csv(s.history));
    const std::size_t every = cfg.train.checkpoint_every;
    if (every && s.epoch % every == 0 && s.epoch < cfg.train.epochs) {
      save_checkpoint(out / "checkpoint.flck", make_checkpoint(cfg.model, cfg.train, stats, s));
    }
  };
  fit(cfg.model, cfg.train, train, test, stats, state, fo);

  TrainSummary sum;
  const bool complete = state.epoch == cfg.train.epochs;
  sum.checkpoint = out / (complete ? "final.flck" : "checkpoint.flck");
  save_checkpoint(sum.checkpoint, make_checkpoint(cfg.model, cfg.train, stats, state));
  io::write_text(out / "run.csv", run_csv(state.history));
  sum.config = std::move(cfg);
  sum.epochs_completed = state.epoch;
  sum.history = state.history;
  return sum;
}

}  // namespace detail

inline TrainSummary cmd_train(const TrainOptions& o) {
  std::optional<Checkpoint> resume;
  if (o.resume) resume = load_checkpoint(*o.resume);
  RunConfig cfg = resolve_train_config(o, resume ? &*resume : nullptr);

  const Dataset train = load_split(cfg.data_dir, "train");
  const Dataset test = load_split(cfg.data_dir, "test");
  const auto [d_in, d_out] = data_widths(train, "train");
  finalize_config(cfg, d_in, d_out);
  if (!test.empty()) check_model_matches_data(cfg.model, test, "test");

  if (cfg.train.precision == Precision::double_) {
    return detail::run_training<double>(std::move(cfg), train, test, resume ? &*resume : nullptr,
                                        o.stop_after);
  }
  return detail::run_training<float>(std::move(cfg), train, test, resume ? &*resume : nullptr,
                                     o.stop_after);
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  fs::path checkpoint;
  fs::path data;
  std::string split = "test";
};

namespace detail {

template <class T>
std::vector<double> evaluate_checkpoint(const Checkpoint& ck, const Dataset& ds) {
  const NormStats stats = norm_from_checkpoint(ck);
  return evaluate(params_from_checkpoint<T>(ck), ck.model, prepare_split<T>(ds, stats), stats);
}

}  // namespace detail

inline nlohmann::json cmd_eval(const EvalOptions& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (o.split != "train" && o.split != "test") {
    throw ConfigError("--split must be \"train\" or \"test\", got \"" + o.split + "\"");
  }
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Dataset ds = load_split(o.data, o.split);
  check_model_matches_data(ck.model, ds, o.split);
  const Precision prec = ck.run.contains("train") ? train_config_from_checkpoint(ck).precision
                                                  : Precision::single;
  const auto per_sample = prec == Precision::double_ ? detail::evaluate_checkpoint<double>(ck, ds)
                                                     : detail::evaluate_checkpoint<float>(ck, ds);
  return {{"split", o.split}, {"mean_rel_l2", mean_of(per_sample)}, {"per_sample", per_sample}};
}

// ---------------------------------------------------------------------------
// spectra

struct SpectraOptions {
  fs::path checkpoint;
  fs::path data;
  std::string split = "test";
  std::size_t sample = 0;
  std::size_t block = 0;
  bool check = false;
  fs::path out;
};

inline constexpr std::size_t kDenseCheckMaxPoints = 512;
inline constexpr double kSpectrumCheckTolerance = 1e-8;
inline const std::vector<double> kEffectiveRankTaus = {1e-2, 1e-3};

inline std::string spectra_csv(const std::vector<std::vector<double>>& per_head) {
  std::string out = "head,index,eigenvalue\n";
  for (std::size_t h = 0; h < per_head.size(); ++h)
    for (std::size_t i = 0; i < per_head[h].size(); ++i)
      out += std::to_string(h) + ',' + std::to_string(i) + ',' + format_number(per_head[h][i]) +
             '\n';
  return out;
}

inline nlohmann::json cmd_spectra(const SpectraOptions& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (o.out.empty()) throw ConfigError("--out is required");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Dataset ds = load_split(o.data, o.split);
  check_model_matches_data(ck.model, ds, o.split);
  if (o.sample >= ds.size()) {
    throw ConfigError("--sample " + std::to_string(o.sample) + " out of range; the " + o.split +
                      " split has " + std::to_string(ds.size()) + " samples");
  }
  if (o.block >= ck.model.blocks) {
    throw ConfigError("--block " + std::to_string(o.block) + " out of range for " +
                      std::to_string(ck.model.blocks) + " blocks");
  }
  const std::size_t n = ds[o.sample].points();
  if (o.check && n > kDenseCheckMaxPoints) {
    throw ConfigError("--check builds an N×N oracle and needs N <= " +
                      std::to_string(kDenseCheckMaxPoints) + " (sample has " + std::to_string(n) +
                      " points)");
  }
  if (ck.model.latents > n) {
    throw ConfigError("sample has fewer points than latent tokens");
  }

  const NormStats stats = norm_from_checkpoint(ck);
  const auto params = params_from_checkpoint<double>(ck);
  const Tensor<double> x =
      normalize_columns<double>(ds[o.sample].features, stats.feature_mean, stats.feature_std);
  const MixerInputs<double> in = mixer_inputs(params, x, ck.model, o.block);
  const std::size_t heads = ck.model.heads;
  const Tensor<double> qh = head_split(in.queries, heads), kh = head_split(in.keys, heads);

  std::vector<std::vector<double>> eig(heads);
  nlohmann::json ranks = nlohmann::json::array();
  double worst_check = 0;
  for (std::size_t h = 0; h < heads; ++h) {
    const auto q = flare::detail::head_slice(qh, h), k = flare::detail::head_slice(kh, h);
    eig[h] = flare_spectrum(q, k).eigenvalues;
    nlohmann::json r = {{"head", h}};
    for (double tau : kEffectiveRankTaus)
      r["tau_" + format_number(tau)] = effective_rank(eig[h], tau);
    ranks.push_back(r);
    if (o.check) {
      const auto dense = dense_spectrum_oracle(q, k).eigenvalues;
      for (std::size_t i = 0; i < eig[h].size(); ++i) {
        const double scale = std::max(std::abs(dense[i]), dense.front());
        worst_check = std::max(worst_check, std::abs(eig[h][i] - dense[i]) / scale);
      }
    }
  }
  io::write_text(o.out, spectra_csv(eig));

  nlohmann::json summary = {{"split", o.split},        {"sample", o.sample},
                            {"block", o.block},        {"points", n},
                            {"effective_rank", ranks}, {"csv", o.out.string()}};
  if (o.check) {
    summary["check_max_rel_diff"] = worst_check;
    if (!(worst_check <= kSpectrumCheckTolerance)) {
      throw Error("spectrum disagrees with the dense oracle: max relative difference " +
                  format_number(worst_check));
    }
  }
  return summary;
}

// ---------------------------------------------------------------------------
// bench

struct BenchOptions {
  std::string mixer = "flare";
  std::vector<std::size_t> n;
  std::size_t m = 64;
  std::size_t c = 64;
  std::size_t h = 8;
  std::size_t reps = 3;
  std::size_t threads = 1;
  std::optional<fs::path> out;
};

struct BenchReport {
  std::vector<BenchPoint> points;
  std::optional<double> slope;  // log-log slope of median time vs N
};

inline BenchReport cmd_bench(const BenchOptions& o) {
  const MixerKind kind = parse_mixer(o.mixer);
  if (o.n.empty()) throw ConfigError("--n needs at least one size");
  for (std::size_t n : o.n)
    if (n == 0) throw ConfigError("--n sizes must be positive");
  if (o.reps == 0) throw ConfigError("--reps must be >= 1");
  if (o.threads != 1) throw ConfigError("--threads: only single-threaded runs are supported");
  if (kind == MixerKind::flare && o.m == 0) throw ConfigError("--m must be >= 1");
  head_dim(o.c, o.h);

  BenchReport rep;
  for (std::size_t n : o.n) rep.points.push_back(bench_mixer(kind, n, o.m, o.c, o.h, o.reps));
  if (rep.points.size() >= 2) {
    std::vector<double> xs, ys;
    for (const auto& p : rep.points) {
      xs.push_back(static_cast<double>(p.n));
      ys.push_back(p.seconds_median);
    }
    rep.slope = loglog_slope(xs, ys);
  }
  if (o.out) io::write_text(*o.out, bench_csv(rep.points));
  return rep;
}

}  // namespace flare::cli
