// Acceptance runner: one PASS/FAIL line per criterion on stdout, progress and
// detail on stderr. Arguments select criteria by number (default: all).
// Exit status is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "flare/bench.hpp"
#include "flare/checkpoint.hpp"
#include "flare/commands.hpp"
#include "flare/data.hpp"
#include "flare/grad_check.hpp"
#include "flare/mixer.hpp"
#include "flare/model.hpp"
#include "flare/spectral.hpp"
#include "flare/train.hpp"

namespace fs = std::filesystem;
using namespace flare;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::ostream& log() { return std::cerr; }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

template <class T = double>
Tensor<T> randn(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(fs::temp_directory_path() /
              ("flare_accept_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// ---------------------------------------------------------------------------
// 1. Fused and materialized paths agree.

Outcome fused_vs_materialized() {
  std::mt19937_64 rng(1001);
  double worst_d = 0, worst_f = 0;
  std::string worst_cfg;
  for (int t = 0; t < 20; ++t) {
    std::size_t n = 1024, m = 64, h = 8, d = 8;
    if (t > 0) {
      m = std::uniform_int_distribution<std::size_t>(1, 64)(rng);
      n = std::uniform_int_distribution<std::size_t>(m, 1024)(rng);
      h = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
      d = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    }
    const auto q = randn({h, m, d}, rng), k = randn({h, n, d}, rng), v = randn({h, n, d}, rng);
    const double ed = max_abs_diff(flare_mix_fused(q, k, v), flare_mix_materialized(q, k, v).first);
    const auto qf = q.cast<float>(), kf = k.cast<float>(), vf = v.cast<float>();
    const double ef =
        max_abs_diff(flare_mix_fused(qf, kf, vf), flare_mix_materialized(qf, kf, vf).first);
    log() << "  [1] N=" << n << " M=" << m << " H=" << h << " D=" << d << "  double " << fmt(ed)
          << "  single " << fmt(ef) << "\n";
    if (ed > worst_d || ef > worst_f) {
      worst_cfg = "(" + std::to_string(n) + "," + std::to_string(m) + "," + std::to_string(h) +
                  "," + std::to_string(d) + ")";
    }
    worst_d = std::max(worst_d, ed);
    worst_f = std::max(worst_f, ef);
  }
  return {worst_d <= 1e-12 && worst_f <= 1e-5,
          "20 configs, max |diff| double " + fmt(worst_d) + " (<= 1e-12), single " + fmt(worst_f) +
              " (<= 1e-5), worst at " + worst_cfg};
}

// ---------------------------------------------------------------------------
// 2. Low-rank invariants of the communication matrix.

Outcome low_rank_invariants() {
  const std::size_t n = 64, m = 8, d = 4;
  std::mt19937_64 rng(2002);
  const auto q = randn({1, m, d}, rng), k = randn({1, n, d}, rng), v = randn({1, n, d}, rng);
  const auto qh = detail::head_slice(q, 0), kh = detail::head_slice(k, 0);
  const auto w = communication_matrix(qh, kh);

  double row_err = 0, min_entry = 1;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      s += w(i, j);
      min_entry = std::min(min_entry, w(i, j));
    }
    row_err = std::max(row_err, std::abs(s - 1));
  }
  const std::size_t rank = numerical_rank(w, 1e-8);
  const auto wv = matmul(w, detail::head_slice(v, 0));
  const auto y = detail::head_slice(flare_mix_fused(q, k, v), 0);
  const double wv_err = max_abs_diff(wv, y);

  const bool ok = row_err <= 1e-6 && min_entry >= -1e-12 && rank <= m && wv_err <= 1e-12;
  return {ok, "max |row sum - 1| " + fmt(row_err) + ", min entry " + fmt(min_entry) +
                  ", numerical rank " + std::to_string(rank) + " (<= 8), |WV - mix| " +
                  fmt(wv_err)};
}

// ---------------------------------------------------------------------------
// 3. Spectrum from the M×M route matches the dense N×N oracle.

Outcome spectrum_oracle() {
  bool ok = true;
  std::string detail;
  for (auto [n, m] : {std::pair<std::size_t, std::size_t>{50, 4}, {200, 16}, {512, 32}}) {
    std::mt19937_64 rng(3000 + n);
    const auto q = randn({m, 8}, rng), k = randn({n, 8}, rng);
    const auto fast = flare_spectrum(q, k);
    const auto dense = dense_spectrum_oracle(q, k);
    const auto w = communication_matrix(q, k);
    const double lead = fast.eigenvalues.front();
    double eig_err = 0, resid = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double scale = std::max(std::abs(dense.eigenvalues[i]), lead);
      eig_err = std::max(eig_err, std::abs(fast.eigenvalues[i] - dense.eigenvalues[i]) / scale);
      if (fast.null_columns[i]) continue;
      std::vector<double> vec(n), wv(n, 0.0);
      double vn = 0, rn = 0;
      for (std::size_t r = 0; r < n; ++r) {
        vec[r] = fast.eigenvectors(r, i);
        vn += vec[r] * vec[r];
      }
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < n; ++c) wv[r] += w(r, c) * vec[c];
        const double e = wv[r] - fast.eigenvalues[i] * vec[r];
        rn += e * e;
      }
      resid = std::max(resid, std::sqrt(rn) / std::sqrt(vn));
    }
    const bool case_ok = eig_err <= 1e-8 && resid <= 1e-6 && std::abs(lead - 1) <= 1e-8;
    ok = ok && case_ok;
    if (!detail.empty()) detail += "; ";
    detail += "(" + std::to_string(n) + "," + std::to_string(m) + "): rel " + fmt(eig_err) +
              ", resid " + fmt(resid) + ", |top-1| " + fmt(std::abs(lead - 1));
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 4. End-to-end central-difference gradient check.

Outcome gradient_check() {
  ModelConfig cfg;
  cfg.blocks = 1;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.latents = 3;
  cfg.d_in = 2;
  cfg.d_out = 1;
  cfg.kv_layers = cfg.mlp_layers = cfg.io_layers = 1;

  std::mt19937_64 rng(4004);
  auto layout = make_params<double>(cfg);
  std::vector<Tensor<double>> leaves;
  for_each_param(layout, [&](const std::string& name, Tensor<double>& t) {
    t = randn(t.shape(), rng, 0.5);
    if (name.ends_with("gamma"))
      for (double& v : t.values()) v += 1.0;
    leaves.push_back(t);
  });
  const auto x = randn({7, 2}, rng);
  const auto weights = randn({7, 1}, rng);

  const auto report = grad_check(
      [&](Tape<double>& tape, std::span<const Var<double>> v) {
        std::size_t i = 0;
        auto p = map_params(layout, [&](const std::string&, const Tensor<double>&) { return v[i++]; });
        return ad::weighted_sum(model_forward(tape.constant(x), p, cfg), weights);
      },
      leaves, 1e-4);
  std::size_t count = 0;
  for (const auto& t : leaves) count += t.size();
  return {report.max_rel_error <= 1e-4,
          std::to_string(count) + " parameters, max relative error " + fmt(report.max_rel_error) +
              " (<= 1e-4, h = 1e-4)"};
}

// ---------------------------------------------------------------------------
// 5. Permutation equivariance of the full model.

Outcome permutation_equivariance() {
  ModelConfig cfg;
  cfg.blocks = 2;
  cfg.channels = 32;
  cfg.heads = 4;
  cfg.latents = 16;
  cfg.d_in = 3;
  cfg.d_out = 2;
  const auto params = init_params<float>(cfg, 5005);
  std::mt19937_64 rng(5005);
  const std::size_t n = 300;
  const auto x = randn<float>({n, 3}, rng);
  const auto y = predict(params, x, cfg);
  double worst = 0;
  for (int t = 0; t < 5; ++t) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<float> px({n, 3}), py({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < 3; ++j) px(i, j) = x(perm[i], j);
      for (std::size_t j = 0; j < 2; ++j) py(i, j) = y(perm[i], j);
    }
    worst = std::max(worst, max_abs_diff(predict(params, px, cfg), py));
  }
  return {worst <= 1e-5, "5 permutations of N=300, max |model(PX) - P model(X)| " + fmt(worst) +
                             " (<= 1e-5, single)"};
}

// ---------------------------------------------------------------------------
// 6. Complexity scaling of the bare mixers.

std::vector<BenchPoint> bench_series(MixerKind kind, const std::vector<std::size_t>& ns,
                                     std::size_t m, std::size_t reps) {
  std::vector<BenchPoint> out;
  for (std::size_t n : ns) {
    out.push_back(bench_mixer(kind, n, m, 64, 8, reps));
    log() << "  [6] " << to_string(kind) << " N=" << n << " M=" << m << "  median "
          << fmt(out.back().seconds_median) << " s\n";
  }
  return out;
}

double series_slope(const std::vector<BenchPoint>& pts) {
  std::vector<double> x, y;
  for (const auto& p : pts) {
    x.push_back(static_cast<double>(p.n));
    y.push_back(p.seconds_median);
  }
  return loglog_slope(x, y);
}

Outcome complexity_scaling() {
  const auto flare_pts = bench_series(MixerKind::flare, {4096, 8192, 16384, 32768, 65536}, 64, 3);
  const auto vanilla_pts = bench_series(MixerKind::vanilla, {1024, 2048, 4096, 8192}, 0, 3);
  const double fs_ = series_slope(flare_pts), vs = series_slope(vanilla_pts);

  const double flare_16k = flare_pts[2].seconds_median;
  const BenchPoint vanilla_16k = bench_mixer(MixerKind::vanilla, 16384, 0, 64, 8, 1);
  log() << "  [6] vanilla N=16384  " << fmt(vanilla_16k.seconds_median) << " s\n";
  const double speedup = vanilla_16k.seconds_median / flare_16k;

  // Time at fixed N against M, relative to linear growth.
  const auto m32 = bench_mixer(MixerKind::flare, 16384, 32, 64, 8, 3);
  const auto m128 = bench_mixer(MixerKind::flare, 16384, 128, 64, 8, 3);
  const double r_lo = flare_16k / m32.seconds_median / 2.0;
  const double r_hi = m128.seconds_median / flare_16k / 2.0;
  const bool m_ok = r_lo >= 0.7 && r_lo <= 1.4 && r_hi >= 0.7 && r_hi <= 1.4;

  const bool ok = fs_ <= 1.3 && vs >= 1.7 && speedup >= 10 && m_ok;
  return {ok, "slope flare " + fmt(fs_) + " (<= 1.3), vanilla " + fmt(vs) +
                  " (>= 1.7), speedup at N=16384 " + fmt(speedup) +
                  "x (>= 10), M 32->64 / 64->128 vs linear " + fmt(r_lo) + " / " + fmt(r_hi) +
                  " (in [0.7, 1.4])"};
}

// ---------------------------------------------------------------------------
// 7. Training efficacy on synthetic Darcy.

struct RunResult {
  double test_rel_l2 = 0;
  double seconds = 0;
};

RunResult train_darcy(const RunConfig& rc, const PreparedSplit<float>& train,
                      const PreparedSplit<float>& test, const NormStats& stats,
                      const std::string& tag) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainState<float> state = initial_state<float>(rc.model);
  FitOptions<float> fo;
  fo.on_epoch = [&](const TrainState<float>& s) {
    const auto& m = s.history.back();
    if (m.epoch % 10 == 0 || m.epoch == 1) {
      log() << "  [7] " << tag << " epoch " << m.epoch << "  train " << fmt(m.train_rel_l2)
            << "  test " << fmt(m.test_rel_l2) << "  (" << fmt(m.seconds) << " s)\n";
    }
  };
  fit(rc.model, rc.train, train, test, stats, state, fo);
  RunResult r;
  r.test_rel_l2 = mean_of(evaluate(state.params, rc.model, test, stats));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

Outcome darcy_training() {
  TempDir tmp("darcy");
  cli::GenDataOptions g;
  g.out = tmp.path() / "data";
  g.grid = 32;
  g.n_train = 200;
  g.n_test = 50;
  g.seed = 0;
  cli::cmd_gen_data(g);
  const Dataset train_ds = read_pcf(g.out / "train.pcf");
  const Dataset test_ds = read_pcf(g.out / "test.pcf");

  RunConfig rc;  // B=2, C=32, H=8, M=32, 100 epochs, batch 4
  finalize_config(rc, train_ds.front().features.cols(), train_ds.front().labels.cols());
  const NormStats stats = compute_norm_stats(train_ds);
  const auto train = prepare_split<float>(train_ds, stats);
  const auto test = prepare_split<float>(test_ds, stats);

  const double baseline = mean_of(mean_baseline(test, stats));
  log() << "  [7] mean baseline test rel L2 " << fmt(baseline) << "\n";
  const RunResult full = train_darcy(rc, train, test, stats, "flare");
  RunConfig ablation = rc;
  ablation.model.mixer_enabled = false;
  const RunResult none = train_darcy(ablation, train, test, stats, "no-mix");

  const bool ok = full.test_rel_l2 <= 0.5 * baseline && full.test_rel_l2 <= 0.8 * none.test_rel_l2;
  return {ok, "test rel L2 " + fmt(full.test_rel_l2) + " vs mean baseline " + fmt(baseline) +
                  " (ratio " + fmt(full.test_rel_l2 / baseline) + " <= 0.5) and no-mix ablation " +
                  fmt(none.test_rel_l2) + " (ratio " + fmt(full.test_rel_l2 / none.test_rel_l2) +
                  " <= 0.8); " + fmt((full.seconds + none.seconds) / 60) + " min"};
}

// ---------------------------------------------------------------------------
// 8. Parameter count of the elasticity configuration.

Outcome parameter_count() {
  ModelConfig cfg;
  cfg.blocks = 8;
  cfg.channels = 64;
  cfg.heads = 8;
  cfg.latents = 64;
  cfg.d_in = 2;
  cfg.d_out = 1;
  const ParamBreakdown b = param_breakdown(cfg);
  const std::vector<std::pair<std::string, std::size_t>> rows = {
      {"input_projection", b.input_projection},
      {"per block: mix_norm", b.mix_norm},
      {"per block: latent_queries", b.latent_queries},
      {"per block: key_proj", b.key_proj},
      {"per block: value_proj", b.value_proj},
      {"per block: out_proj", b.out_proj},
      {"per block: mlp_norm", b.mlp_norm},
      {"per block: block_mlp", b.block_mlp},
      {"per block total", b.per_block},
      {"blocks", b.blocks},
      {"output_norm", b.output_norm},
      {"output_projection", b.output_projection},
      {"total", b.total}};
  for (const auto& [name, v] : rows) log() << "  [8] " << name << " " << v << "\n";
  std::size_t allocated = 0;
  for (const auto& t : flatten_params(init_params<float>(cfg, 1))) allocated += t.size();
  const bool counted = b.total == param_count(cfg) && b.total == allocated;
  const double rel = std::abs(static_cast<double>(b.total) - 592000.0) / 592000.0;
  return {counted && rel <= 0.15, "total " + std::to_string(b.total) + " vs 592000 (" +
                                      fmt(100 * rel) + "% off, <= 15%); allocated tensors " +
                                      (counted ? "agree" : "DISAGREE")};
}

// ---------------------------------------------------------------------------
// 9. Format robustness.

template <class Decode>
std::string classify(Decode&& decode, std::vector<char> bytes) {
  try {
    decode(std::move(bytes));
  } catch (const BadMagicError&) {
    return "BadMagic";
  } catch (const UnsupportedVersionError&) {
    return "UnsupportedVersion";
  } catch (const TruncatedError&) {
    return "Truncated";
  } catch (const std::exception& e) {
    return std::string("other: ") + e.what();
  }
  return "accepted";
}

template <class Decode>
bool corruption_checks(Decode&& decode, const std::vector<char>& good, std::string& detail) {
  auto magic = good;
  magic[0] = 'X';
  auto version = good;
  version[4] = 9;
  auto cut = good;
  cut.resize(good.size() - 5);
  const std::string a = classify(decode, magic), b = classify(decode, version),
                    c = classify(decode, cut);
  detail += "magic->" + a + ", version->" + b + ", truncation->" + c;
  return a == "BadMagic" && b == "UnsupportedVersion" && c == "Truncated";
}

Outcome format_robustness() {
  std::string detail;
  Dataset ds;
  for (std::uint64_t s = 0; s < 3; ++s) ds.push_back(generate_darcy_sample(8, 900 + s));
  const auto pcf = encode_pcf(ds);
  const Dataset back = decode_pcf(pcf);
  const bool pcf_rt = back == ds && encode_pcf(back) == pcf;
  detail += std::string("PCF roundtrip ") + (pcf_rt ? "bitwise" : "DIFFERS") + "; ";
  const bool pcf_err = corruption_checks([](std::vector<char> b) { decode_pcf(std::move(b)); }, pcf, detail);

  ModelConfig mc;
  mc.blocks = 1;
  mc.channels = 16;
  mc.heads = 2;
  mc.latents = 4;
  mc.d_in = 3;
  mc.d_out = 1;
  TrainConfig tc;
  const auto state = initial_state<float>(mc);
  const Checkpoint ck = make_checkpoint(mc, tc, compute_norm_stats(ds), state);
  const auto flck = encode_checkpoint(ck);
  const Checkpoint ck2 = decode_checkpoint(flck);
  const auto restored = named_tensors(params_from_checkpoint<float>(ck2), "");
  bool params_same = restored.size() == ck.params.size();
  for (std::size_t i = 0; params_same && i < restored.size(); ++i)
    params_same = restored[i].name == ck.params[i].name && restored[i].value == ck.params[i].value;
  const bool flck_rt = params_same && encode_checkpoint(ck2) == flck;
  detail += std::string("; FLCK roundtrip ") + (flck_rt ? "bitwise" : "DIFFERS") + "; ";
  const bool flck_err =
      corruption_checks([](std::vector<char> b) { decode_checkpoint(std::move(b)); }, flck, detail);
  return {pcf_rt && pcf_err && flck_rt && flck_err, detail};
}

// ---------------------------------------------------------------------------
// 10. Determinism of cmd_train and resume equivalence.

std::string metrics_only(const fs::path& csv) {
  std::ifstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + '\n';
  return out;
}

Outcome train_determinism() {
  TempDir tmp("determinism");
  cli::GenDataOptions g;
  g.out = tmp.path() / "data";
  g.grid = 8;
  g.n_train = 10;
  g.n_test = 4;
  g.seed = 3;
  cli::cmd_gen_data(g);

  auto options = [&](const std::string& out) {
    cli::TrainOptions o;
    o.data = g.out;
    o.out = tmp.path() / out;
    o.seed = 42;
    o.overrides = {"model.blocks=1",    "model.channels=16", "model.heads=2",
                   "model.latents=4",   "train.epochs=6",    "train.batch_size=3"};
    return o;
  };
  cli::cmd_train(options("a"));
  cli::cmd_train(options("b"));
  auto part = options("part");
  part.stop_after = 3;
  cli::cmd_train(part);
  cli::TrainOptions resume;
  resume.resume = tmp.path() / "part" / "checkpoint.flck";
  resume.data = g.out;
  resume.out = tmp.path() / "resumed";
  cli::cmd_train(resume);

  const std::string a = metrics_only(tmp.path() / "a" / "run.csv");
  const bool repeat = a == metrics_only(tmp.path() / "b" / "run.csv");
  const bool resumed = a == metrics_only(tmp.path() / "resumed" / "run.csv");
  const auto pa = load_checkpoint(tmp.path() / "a" / "final.flck");
  const auto pr = load_checkpoint(tmp.path() / "resumed" / "final.flck");
  bool same_params = pa.params.size() == pr.params.size();
  for (std::size_t i = 0; same_params && i < pa.params.size(); ++i)
    same_params = pa.params[i].value == pr.params[i].value;
  return {repeat && resumed && same_params,
          std::string("repeat run.csv ") + (repeat ? "identical" : "DIFFERS") +
              ", resumed-after-3-of-6 run.csv " + (resumed ? "identical" : "DIFFERS") +
              ", final parameters " + (same_params ? "identical" : "DIFFER")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "fused/materialized equivalence", fused_vs_materialized},
      {2, "communication matrix low-rank invariants", low_rank_invariants},
      {3, "spectrum vs dense oracle", spectrum_oracle},
      {4, "end-to-end gradient check", gradient_check},
      {5, "permutation equivariance", permutation_equivariance},
      {6, "complexity scaling", complexity_scaling},
      {7, "Darcy training efficacy", darcy_training},
      {8, "parameter count", parameter_count},
      {9, "format robustness", format_robustness},
      {10, "training determinism and resume", train_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    log() << "criterion " << c.id << ": " << c.name << "\n";
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << c.id << " " << c.name << ": " << o.detail
              << " [" << fmt(secs) << " s]" << std::endl;
  }
  return failed;
}
