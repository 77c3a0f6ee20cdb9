#pragma once

// Synthetic Darcy-flow samples, normalization statistics and the PCF dataset
// format.
//
// PCF layout (little-endian): "PCF1", u32 version = 1, u64 n_samples, then per
// sample u64 n_points, u32 d_pos, u32 d_in, u32 d_out and f32 arrays coords
// [n_points×d_pos], features [n_points×d_in], labels [n_points×d_out].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flare/errors.hpp"
#include "flare/io.hpp"
#include "flare/tensor.hpp"

namespace flare {

// ---------------------------------------------------------------------------
// Conjugate gradients.

struct CgResult {
  std::vector<double> x;
  std::size_t iterations = 0;
  double relative_residual = 0;  // ‖b − A x‖ / ‖b‖, recomputed from x
};

using LinearOperator = std::function<void(const std::vector<double>&, std::vector<double>&)>;

// Solves A x = b for SPD A, starting from zero. Stops when the recursive
// residual falls below tol·‖b‖; throws ConvergenceError after max_iters.
inline CgResult cg_solve(const LinearOperator& apply_a, const std::vector<double>& b, double tol,
                         std::size_t max_iters) {
  const std::size_t n = b.size();
  auto dot = [n](const std::vector<double>& u, const std::vector<double>& w) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += u[i] * w[i];
    return s;
  };
  CgResult res;
  res.x.assign(n, 0.0);
  const double bnorm = std::sqrt(dot(b, b));
  if (bnorm == 0.0) return res;

  std::vector<double> r = b, p = b, ap(n);
  double rr = dot(r, r);
  while (std::sqrt(rr) > tol * bnorm) {
    if (res.iterations == max_iters) {
      throw ConvergenceError("cg_solve: no convergence after " + std::to_string(max_iters) +
                                 " iterations, relative residual " +
                                 std::to_string(std::sqrt(rr) / bnorm),
                             std::sqrt(rr) / bnorm);
    }
    apply_a(p, ap);
    const double pap = dot(p, ap);
    if (!(pap > 0)) {
      throw ConvergenceError("cg_solve: operator is not positive definite", std::sqrt(rr) / bnorm);
    }
    const double alpha = rr / pap;
    for (std::size_t i = 0; i < n; ++i) {
      res.x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    const double rr_new = dot(r, r);
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    ++res.iterations;
  }
  apply_a(res.x, ap);
  double true_rr = 0;
  for (std::size_t i = 0; i < n; ++i) true_rr += (b[i] - ap[i]) * (b[i] - ap[i]);
  res.relative_residual = std::sqrt(true_rr) / bnorm;
  return res;
}

// ---------------------------------------------------------------------------
// Darcy problem −∇·(a∇u) = 1 on the unit square, u = 0 on the boundary.

struct DarcyParams {
  double low = 3.0;
  double high = 12.0;
  double cg_tol = 1e-10;
};

inline constexpr std::size_t kMinGrid = 8;

inline std::size_t smoothing_radius(std::size_t g) { return std::max<std::size_t>(1, g / 8); }

// Seeded uniform noise, separable box blur of radius max(1, g/8), thresholded
// at its median: values above become `high`, the rest `low`. Row-major g×g.
inline std::vector<double> darcy_coefficient(std::size_t g, std::uint64_t seed,
                                             const DarcyParams& dp = {}) {
  if (g < kMinGrid) {
    throw ConfigError("grid size " + std::to_string(g) + " below minimum " +
                      std::to_string(kMinGrid));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> noise(g * g);
  for (double& x : noise) x = uni(rng);

  const auto r = static_cast<std::ptrdiff_t>(smoothing_radius(g));
  const auto gi = static_cast<std::ptrdiff_t>(g);
  auto blur = [&](const std::vector<double>& in, bool along_rows) {
    std::vector<double> out(g * g);
    for (std::ptrdiff_t i = 0; i < gi; ++i)
      for (std::ptrdiff_t j = 0; j < gi; ++j) {
        double s = 0;
        int count = 0;
        for (std::ptrdiff_t o = -r; o <= r; ++o) {
          const std::ptrdiff_t ii = along_rows ? i : i + o;
          const std::ptrdiff_t jj = along_rows ? j + o : j;
          if (ii < 0 || jj < 0 || ii >= gi || jj >= gi) continue;
          s += in[ii * gi + jj];
          ++count;
        }
        out[i * gi + j] = s / count;
      }
    return out;
  };
  std::vector<double> smooth = blur(blur(noise, true), false);

  std::vector<double> sorted = smooth;
  const std::size_t mid = (sorted.size() - 1) / 2;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(mid), sorted.end());
  const double median = sorted[mid];
  for (double& x : smooth) x = x > median ? dp.high : dp.low;
  return smooth;
}

// 5-point operator with harmonic-mean face coefficients on the (g−2)² interior
// nodes, scaled by 1/h².
class DarcyOperator {
 public:
  DarcyOperator(std::vector<double> a, std::size_t g) : a_(std::move(a)), g_(g) {
    if (a_.size() != g * g) throw DimensionError("DarcyOperator: coefficient is not g×g");
    const double h = 1.0 / static_cast<double>(g - 1);
    inv_h2_ = 1.0 / (h * h);
  }

  std::size_t interior() const { return g_ - 2; }
  std::size_t unknowns() const { return interior() * interior(); }

  void apply(const std::vector<double>& u, std::vector<double>& out) const {
    const std::size_t m = interior();
    out.assign(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double ac = coef(i + 1, j + 1), uc = u[i * m + j];
        double s = 0;
        auto face = [&](std::size_t gi, std::size_t gj, bool inside, std::size_t idx) {
          const double an = coef(gi, gj);
          const double w = 2.0 * ac * an / (ac + an);
          s += w * (uc - (inside ? u[idx] : 0.0));
        };
        face(i, j + 1, i > 0, (i - 1) * m + j);
        face(i + 2, j + 1, i + 1 < m, (i + 1) * m + j);
        face(i + 1, j, j > 0, i * m + j - 1);
        face(i + 1, j + 2, j + 1 < m, i * m + j + 1);
        out[i * m + j] = s * inv_h2_;
      }
  }

 private:
  double coef(std::size_t i, std::size_t j) const { return a_[i * g_ + j]; }

  std::vector<double> a_;
  std::size_t g_;
  double inv_h2_;
};

struct DarcySolution {
  std::size_t grid = 0;
  std::vector<double> a;  // g×g
  std::vector<double> u;  // g×g, zero on the boundary
  std::size_t iterations = 0;
  double relative_residual = 0;
};

inline DarcySolution solve_darcy(std::vector<double> a, std::size_t g, double cg_tol = 1e-10) {
  DarcyOperator op(a, g);
  const std::vector<double> rhs(op.unknowns(), 1.0);
  CgResult cg;
  try {
    cg = cg_solve([&](const std::vector<double>& x, std::vector<double>& y) { op.apply(x, y); },
                  rhs, cg_tol, 20 * op.unknowns() + 100);
  } catch (const ConvergenceError& e) {
    throw ConvergenceError(std::string("Darcy generation failed: ") + e.what(), e.residual());
  }
  DarcySolution s;
  s.grid = g;
  s.a = std::move(a);
  s.u.assign(g * g, 0.0);
  const std::size_t m = g - 2;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) s.u[(i + 1) * g + j + 1] = cg.x[i * m + j];
  s.iterations = cg.iterations;
  s.relative_residual = cg.relative_residual;
  return s;
}

// ---------------------------------------------------------------------------
// Samples and datasets.

struct Sample {
  Tensor<float> coords;    // N×d_pos
  Tensor<float> features;  // N×d_in
  Tensor<float> labels;    // N×d_out

  std::size_t points() const { return coords.rows(); }
  friend bool operator==(const Sample&, const Sample&) = default;
};

using Dataset = std::vector<Sample>;

// Node (i, j) sits at x = j/(g−1), y = i/(g−1); features (x, y, a), label u.
inline Sample darcy_sample(const DarcySolution& s) {
  const std::size_t g = s.grid, n = g * g;
  Sample out{Tensor<float>({n, 2}), Tensor<float>({n, 3}), Tensor<float>({n, 1})};
  const double h = 1.0 / static_cast<double>(g - 1);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      const std::size_t k = i * g + j;
      const auto x = static_cast<float>(static_cast<double>(j) * h);
      const auto y = static_cast<float>(static_cast<double>(i) * h);
      out.coords(k, 0) = out.features(k, 0) = x;
      out.coords(k, 1) = out.features(k, 1) = y;
      out.features(k, 2) = static_cast<float>(s.a[k]);
      out.labels(k, 0) = static_cast<float>(s.u[k]);
    }
  return out;
}

inline Sample generate_darcy_sample(std::size_t g, std::uint64_t seed, const DarcyParams& dp = {}) {
  return darcy_sample(solve_darcy(darcy_coefficient(g, seed, dp), g, dp.cg_tol));
}

// Per-sample generator seed for index i of a split ("train" = 0, "test" = 1).
inline std::uint64_t sample_seed(std::uint64_t base, std::uint32_t split, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32), split,
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// ---------------------------------------------------------------------------
// Normalization.

struct NormStats {
  std::vector<double> feature_mean, feature_std;
  std::vector<double> label_mean, label_std;
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline void to_json(nlohmann::json& j, const NormStats& s) {
  j = nlohmann::json{{"feature_mean", s.feature_mean},
                     {"feature_std", s.feature_std},
                     {"label_mean", s.label_mean},
                     {"label_std", s.label_std}};
}

inline void from_json(const nlohmann::json& j, NormStats& s) {
  j.at("feature_mean").get_to(s.feature_mean);
  j.at("feature_std").get_to(s.feature_std);
  j.at("label_mean").get_to(s.label_mean);
  j.at("label_std").get_to(s.label_std);
}

namespace detail {

// Pooled mean and population std over every point of every sample; a zero
// std is replaced by 1.
inline void column_stats(const Dataset& ds, const Tensor<float> Sample::*field,
                         std::vector<double>& mean, std::vector<double>& sd) {
  const std::size_t c = (ds.front().*field).cols();
  mean.assign(c, 0.0);
  sd.assign(c, 0.0);
  std::size_t count = 0;
  for (const auto& s : ds) {
    const auto& t = s.*field;
    if (t.cols() != c) throw DimensionError("normalize: samples disagree on feature width");
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) mean[j] += t(i, j);
    count += t.rows();
  }
  for (double& m : mean) m /= static_cast<double>(count);
  for (const auto& s : ds) {
    const auto& t = s.*field;
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = t(i, j) - mean[j];
        sd[j] += d * d;
      }
  }
  for (double& v : sd) {
    v = std::sqrt(v / static_cast<double>(count));
    if (!(v > 0)) v = 1.0;
  }
}

}  // namespace detail

inline NormStats compute_norm_stats(const Dataset& train) {
  if (train.empty()) throw InvalidValueError("normalize: empty training split");
  NormStats s;
  detail::column_stats(train, &Sample::features, s.feature_mean, s.feature_std);
  detail::column_stats(train, &Sample::labels, s.label_mean, s.label_std);
  return s;
}

// z-score of each column, computed in double.
template <class T>
Tensor<T> normalize_columns(const Tensor<float>& x, const std::vector<double>& mean,
                            const std::vector<double>& sd) {
  if (x.cols() != mean.size()) {
    throw DimensionError("normalize: data has " + std::to_string(x.cols()) +
                         " columns, statistics have " + std::to_string(mean.size()));
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j)
      out(i, j) = static_cast<T>((static_cast<double>(x(i, j)) - mean[j]) / sd[j]);
  return out;
}

template <class T>
Tensor<T> denormalize_columns(const Tensor<T>& z, const std::vector<double>& mean,
                              const std::vector<double>& sd) {
  if (z.cols() != mean.size()) throw DimensionError("denormalize: column count mismatch");
  Tensor<T> out(z.shape());
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = 0; j < z.cols(); ++j)
      out(i, j) = static_cast<T>(static_cast<double>(z(i, j)) * sd[j] + mean[j]);
  return out;
}

// Z-scored copy of a dataset (features and labels). Statistics are computed
// from `ds` when `stats` is null, otherwise reused verbatim.
struct NormalizedDataset {
  std::vector<Tensor<double>> features;
  std::vector<Tensor<double>> labels;
  NormStats stats;
};

inline NormalizedDataset normalize(const Dataset& ds, const NormStats* stats = nullptr) {
  NormalizedDataset out;
  out.stats = stats ? *stats : compute_norm_stats(ds);
  for (const auto& s : ds) {
    out.features.push_back(
        normalize_columns<double>(s.features, out.stats.feature_mean, out.stats.feature_std));
    out.labels.push_back(
        normalize_columns<double>(s.labels, out.stats.label_mean, out.stats.label_std));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCF files.

inline constexpr char kPcfMagic[4] = {'P', 'C', 'F', '1'};
inline constexpr std::uint32_t kPcfVersion = 1;

inline std::vector<char> encode_pcf(const Dataset& ds) {
  io::ByteWriter w;
  w.bytes(kPcfMagic, 4);
  w.put<std::uint32_t>(kPcfVersion);
  w.put<std::uint64_t>(ds.size());
  for (const auto& s : ds) {
    const std::size_t n = s.points();
    if (s.features.rows() != n || s.labels.rows() != n) {
      throw DimensionError("write_pcf: coords, features and labels disagree on point count");
    }
    w.put<std::uint64_t>(n);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.coords.cols()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.features.cols()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.labels.cols()));
    w.array(s.coords.storage());
    w.array(s.features.storage());
    w.array(s.labels.storage());
  }
  return w.buffer();
}

inline Dataset decode_pcf(std::vector<char> bytes, const std::string& origin = "PCF data") {
  io::ByteReader r(std::move(bytes));
  if (r.remaining() < 4 || r.str(4, "magic") != std::string(kPcfMagic, 4)) {
    throw BadMagicError(origin + ": not a PCF file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kPcfVersion) {
    throw UnsupportedVersionError(origin + ": unsupported PCF version " + std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>("sample count");
  Dataset ds;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string where = "sample index " + std::to_string(i);
    try {
      const auto n = r.get<std::uint64_t>(where + " header");
      const auto d_pos = r.get<std::uint32_t>(where + " header");
      const auto d_in = r.get<std::uint32_t>(where + " header");
      const auto d_out = r.get<std::uint32_t>(where + " header");
      Sample s;
      s.coords = Tensor<float>({n, d_pos}, r.array<float>(n * d_pos, where + " coords"));
      s.features = Tensor<float>({n, d_in}, r.array<float>(n * d_in, where + " features"));
      s.labels = Tensor<float>({n, d_out}, r.array<float>(n * d_out, where + " labels"));
      ds.push_back(std::move(s));
    } catch (const TruncatedError& e) {
      throw TruncatedError(origin + ": file declares " + std::to_string(count) +
                           " samples but is truncated at " + where + " (" + e.what() + ")");
    }
  }
  if (!r.at_end()) {
    throw FormatError(origin + ": " + std::to_string(r.remaining()) + " trailing bytes");
  }
  return ds;
}

inline void write_pcf(const std::filesystem::path& path, const Dataset& ds) {
  io::write_file(path, encode_pcf(ds));
}

inline Dataset read_pcf(const std::filesystem::path& path) {
  return decode_pcf(io::read_file(path), path.string());
}

}  // namespace flare
