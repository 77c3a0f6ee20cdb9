#pragma once

// Forward+backward timing of the bare mixers and log-log slope fitting.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "flare/autodiff.hpp"
#include "flare/errors.hpp"
#include "flare/mixer.hpp"

namespace flare {

enum class MixerKind { flare, vanilla };

inline std::string to_string(MixerKind k) { return k == MixerKind::flare ? "flare" : "vanilla"; }

inline MixerKind parse_mixer(const std::string& s) {
  if (s == "flare") return MixerKind::flare;
  if (s == "vanilla") return MixerKind::vanilla;
  throw ConfigError("mixer must be \"flare\" or \"vanilla\", got \"" + s + "\"");
}

struct BenchPoint {
  std::size_t n = 0;
  MixerKind mixer = MixerKind::flare;
  std::size_t m = 0;  // latents; 0 for vanilla
  double seconds_mean = 0;
  double seconds_std = 0;
  double seconds_median = 0;
  std::vector<double> samples;
};

namespace detail {

inline Tensor<float> bench_tensor(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Tensor<float> t(std::move(shape));
  for (float& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace detail

// One untimed warm-up call, then `reps` timed forward+backward passes in
// single precision. Population standard deviation; the median is what the
// slope fits use.
inline BenchPoint bench_mixer(MixerKind kind, std::size_t n, std::size_t m, std::size_t c,
                              std::size_t h, std::size_t reps, std::uint64_t seed = 0) {
  if (n == 0 || c == 0 || reps == 0) throw ConfigError("bench: n, c and reps must be positive");
  if (kind == MixerKind::flare && m == 0) throw ConfigError("bench: m must be positive");
  head_dim(c, h);
  std::mt19937_64 rng(seed);
  const std::size_t q_rows = kind == MixerKind::flare ? m : n;
  const Tensor<float> q = detail::bench_tensor({q_rows, c}, rng);
  const Tensor<float> k = detail::bench_tensor({n, c}, rng);
  const Tensor<float> v = detail::bench_tensor({n, c}, rng);
  const Tensor<float> dy = detail::bench_tensor({n, c}, rng);
  const float scale = std::sqrt(static_cast<float>(c / h));

  auto once = [&] {
    Tape<float> tape;
    Var<float> qv = tape.leaf(q), kv = tape.leaf(k), vv = tape.leaf(v);
    Var<float> y = kind == MixerKind::flare ? ad::flare_mix(qv, kv, vv, h)
                                            : ad::vanilla_mix(qv, kv, vv, h, scale);
    tape.backward(y, dy);
  };

  once();
  BenchPoint p;
  p.n = n;
  p.mixer = kind;
  p.m = kind == MixerKind::flare ? m : 0;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    once();
    p.samples.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  double s = 0;
  for (double x : p.samples) s += x;
  p.seconds_mean = s / static_cast<double>(reps);
  double var = 0;
  for (double x : p.samples) var += (x - p.seconds_mean) * (x - p.seconds_mean);
  p.seconds_std = std::sqrt(var / static_cast<double>(reps));
  std::vector<double> sorted = p.samples;
  std::sort(sorted.begin(), sorted.end());
  p.seconds_median = reps % 2 ? sorted[reps / 2] : 0.5 * (sorted[reps / 2 - 1] + sorted[reps / 2]);
  return p;
}

// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw InvalidValueError("loglog_slope: need at least two (x, y) pairs");
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0 && y[i] > 0)) throw InvalidValueError("loglog_slope: values must be positive");
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double den = n * sxx - sx * sx;
  if (!(den > 0)) throw InvalidValueError("loglog_slope: x values are all equal");
  return (n * sxy - sx * sy) / den;
}

inline std::string bench_csv(const std::vector<BenchPoint>& points) {
  std::string out = "n,mixer,m,seconds_mean,seconds_std\n";
  for (const auto& p : points) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%s,%zu,%.9g,%.9g\n", p.n, to_string(p.mixer).c_str(), p.m,
                  p.seconds_mean, p.seconds_std);
    out += buf;
  }
  return out;
}

}  // namespace flare
