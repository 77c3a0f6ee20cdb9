#pragma once

// Eigenanalysis of the FLARE communication matrix W = W_decode · W_encode.
//
// With A = exp(Q Kᵀ − max), Λ_M = diag(1/rowsum A), Λ_N = diag(1/colsum A),
// and J = Λ_M^{1/2} A Λ_N^{1/2}, W = Λ_N^{1/2} (JᵀJ) Λ_N^{-1/2}. Its M nonzero
// eigenvalues are those of the M×M matrix JJᵀ = U Σ² Uᵀ, with eigenvectors
// Λ_N^{1/2} Jᵀ U Σ⁻¹. Cost O(M³ + M²N); nothing N×N is allocated.
//
// Everything here runs in double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "flare/errors.hpp"
#include "flare/linalg.hpp"
#include "flare/mixer.hpp"
#include "flare/tensor.hpp"

namespace flare {

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Tensor<double> vectors;      // column i pairs with values[i]
  int sweeps = 0;
};

// Cyclic Jacobi. Stops when the off-diagonal Frobenius norm falls below
// 1e-12·‖S‖_F; throws ConvergenceError after `max_sweeps`.
inline SymmetricEigen symmetric_eig(const Tensor<double>& s, int max_sweeps = 100) {
  require_rank(s.shape(), 2, "symmetric_eig");
  const std::size_t n = s.rows();
  if (s.cols() != n) throw DimensionError("symmetric_eig: matrix must be square");
  require_finite(s, "symmetric_eig");

  // Work on the symmetrized matrix.
  std::vector<double> a(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] = 0.5 * (s(i, j) + s(j, i));
  std::vector<double> vt(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) vt[i * n + i] = 1.0;

  double frob2 = 0;
  for (double x : a) frob2 += x * x;
  const double tol = 1e-12 * std::sqrt(frob2);
  const double skip = tol / (2.0 * static_cast<double>(std::max<std::size_t>(n, 1)));

  auto off_norm = [&] {
    double off = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) off += a[i * n + j] * a[i * n + j];
    return std::sqrt(off);
  };

  int sweep = 0;
  double off = off_norm();
  for (; off > tol; off = off_norm()) {
    if (sweep == max_sweeps) {
      throw ConvergenceError("symmetric_eig: no convergence after " +
                                 std::to_string(max_sweeps) + " sweeps, off-diagonal norm " +
                                 std::to_string(off),
                             off);
    }
    ++sweep;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        // Entries this small cannot keep the off-diagonal norm above tol.
        if (std::abs(apq) <= skip) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = std::abs(theta) > 1e150
                             ? 0.5 / theta
                             : std::copysign(1.0, theta) /
                                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        // Symmetric update: rotate rows p and q, mirror into the columns.
        double* rp = a.data() + p * n;
        double* rq = a.data() + q * n;
        const double app = rp[p], aqq = rq[q];
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = rp[k], aqk = rq[k];
          rp[k] = c * apk - sn * aqk;
          rq[k] = sn * apk + c * aqk;
        }
        rp[p] = app - t * apq;
        rq[q] = aqq + t * apq;
        rp[q] = rq[p] = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          if (k == p || k == q) continue;
          a[k * n + p] = rp[k];
          a[k * n + q] = rq[k];
        }
        // vt holds eigenvectors as rows.
        double* vp = vt.data() + p * n;
        double* vq = vt.data() + q * n;
        for (std::size_t k = 0; k < n; ++k) {
          const double x = vp[k], y = vq[k];
          vp[k] = c * x - sn * y;
          vq[k] = sn * x + c * y;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return a[i * n + i] > a[j * n + j];
  });
  SymmetricEigen out;
  out.sweeps = sweep;
  out.values.resize(n);
  out.vectors = Tensor<double>({n, n});
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = a[order[c] * n + order[c]];
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = vt[order[c] * n + r];
  }
  return out;
}

// Singular values (descending) by one-sided Jacobi: rotates the rows of the
// wide orientation of `a` until they are mutually orthogonal. Accurate to
// O(ε·σ₁) for every singular value, including the trailing zeros.
inline std::vector<double> singular_values(const Tensor<double>& a, int max_sweeps = 100) {
  require_rank(a.shape(), 2, "singular_values");
  require_finite(a, "singular_values");
  const Tensor<double> b = a.rows() <= a.cols() ? a : transpose(a);
  const std::size_t k = b.rows(), len = b.cols();
  std::vector<double> r(b.values().begin(), b.values().end());

  for (int sweep = 0;; ++sweep) {
    if (sweep == max_sweeps) {
      throw ConvergenceError("singular_values: no convergence after " +
                                 std::to_string(max_sweeps) + " sweeps",
                             0.0);
    }
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < k; ++p) {
      for (std::size_t q = p + 1; q < k; ++q) {
        double* x = r.data() + p * len;
        double* y = r.data() + q * len;
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < len; ++i) {
          alpha += x[i] * x[i];
          beta += y[i] * y[i];
          gamma += x[i] * y[i];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t =
            std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < len; ++i) {
          const double xi = x[i], yi = y[i];
          x[i] = c * xi - s * yi;
          y[i] = s * xi + c * yi;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(k);
  for (std::size_t p = 0; p < k; ++p) {
    double nrm = 0;
    for (std::size_t i = 0; i < len; ++i) nrm += r[p * len + i] * r[p * len + i];
    sv[p] = std::sqrt(nrm);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

// Number of singular values at or above rel_tol·σ₁.
inline std::size_t numerical_rank(const Tensor<double>& a, double rel_tol) {
  auto sv = singular_values(a);
  if (sv.empty() || sv[0] == 0.0) return 0;
  return static_cast<std::size_t>(
      std::count_if(sv.begin(), sv.end(), [&](double s) { return s >= rel_tol * sv[0]; }));
}

struct ScaledScores {
  Tensor<double> a;               // M×N, exp(QKᵀ − max), strictly positive
  std::vector<double> lambda_m;  // 1 / row sums of a
  std::vector<double> lambda_n;  // 1 / column sums of a
  Tensor<double> j;               // Λ_M^{1/2} a Λ_N^{1/2}
};

inline ScaledScores scaled_scores(const Tensor<double>& qh, const Tensor<double>& kh) {
  require_rank(qh.shape(), 2, "spectral queries");
  require_rank(kh.shape(), 2, "spectral keys");
  if (qh.cols() != kh.cols()) throw DimensionError("spectral: head dims differ");
  require_finite(qh, "spectral queries");
  require_finite(kh, "spectral keys");

  ScaledScores s;
  s.a = shifted_exp_scores(qh, kh);
  const std::size_t m = s.a.rows(), n = s.a.cols();
  s.lambda_m.assign(m, 0.0);
  s.lambda_n.assign(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      s.lambda_m[i] += s.a(i, k);
      s.lambda_n[k] += s.a(i, k);
    }
  for (double& x : s.lambda_m) x = 1.0 / x;
  for (double& x : s.lambda_n) x = 1.0 / x;
  s.j = Tensor<double>({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double lm = std::sqrt(s.lambda_m[i]);
    for (std::size_t k = 0; k < n; ++k) s.j(i, k) = lm * s.a(i, k) * std::sqrt(s.lambda_n[k]);
  }
  return s;
}

struct SpectralResult {
  std::vector<double> eigenvalues;  // descending
  Tensor<double> eigenvectors;      // N×M, column i pairs with eigenvalues[i]
  std::vector<bool> null_columns;   // true where Σ⁻¹ is undefined; column left zero
};

// Relative singular-value floor below which an eigenvector column is null.
inline constexpr double kNullSingularTolerance = 1e-12;

// Eigenvalues of JJᵀ carry absolute error ~M·ε·λ₁, so σ = √λ cannot resolve
// anything below √(M·ε)·σ₁. Eigenvalues under that floor are treated as zero.
inline double null_eigenvalue_floor(std::size_t m, double lambda_max) {
  return static_cast<double>(std::max<std::size_t>(m, 1)) *
         std::numeric_limits<double>::epsilon() * lambda_max;
}

inline SpectralResult flare_spectrum(const Tensor<double>& qh, const Tensor<double>& kh) {
  const std::size_t m = qh.rows(), n = kh.rows();
  if (m > n) {
    throw DimensionError("flare_spectrum: needs M <= N (M = " + std::to_string(m) +
                         ", N = " + std::to_string(n) + ")");
  }
  ScaledScores sc = scaled_scores(qh, kh);

  Tensor<double> gram({m, m});
  std::vector<double> scratch(n * m);
  kernel::gemm_nt(sc.j.data(), sc.j.data(), gram.data(), m, n, m, scratch.data());
  SymmetricEigen eig = symmetric_eig(gram);

  SpectralResult out;
  out.eigenvalues = eig.values;
  out.null_columns.assign(m, false);
  out.eigenvectors = Tensor<double>({n, m});

  // Jᵀ U: N×M
  Tensor<double> jtu({n, m});
  kernel::gemm_tn(sc.j.data(), eig.vectors.data(), jtu.data(), n, m, m);
  const double sigma_max = std::sqrt(std::max(eig.values.front(), 0.0));
  const double floor = null_eigenvalue_floor(m, eig.values.front());
  for (std::size_t c = 0; c < m; ++c) {
    const double sigma = std::sqrt(std::max(eig.values[c], 0.0));
    if (!(sigma > kNullSingularTolerance * sigma_max) || eig.values[c] <= floor) {
      out.null_columns[c] = true;
      continue;
    }
    for (std::size_t r = 0; r < n; ++r)
      out.eigenvectors(r, c) = std::sqrt(sc.lambda_n[r]) * jtu(r, c) / sigma;
  }
  return out;
}

// Brute-force route: eigendecomposes the N×N matrix JᵀJ and maps its
// eigenvectors through Λ_N^{1/2}. Returns the top-M pairs. Test use only.
inline SpectralResult dense_spectrum_oracle(const Tensor<double>& qh, const Tensor<double>& kh,
                                            std::vector<double>* all_eigenvalues = nullptr) {
  ScaledScores sc = scaled_scores(qh, kh);
  const std::size_t m = qh.rows(), n = kh.rows();
  Tensor<double> jtj({n, n});
  kernel::gemm_tn(sc.j.data(), sc.j.data(), jtj.data(), n, m, n);
  SymmetricEigen eig = symmetric_eig(jtj);
  if (all_eigenvalues) *all_eigenvalues = eig.values;

  const std::size_t top = std::min(m, n);
  SpectralResult out;
  out.eigenvalues.assign(eig.values.begin(), eig.values.begin() + top);
  out.null_columns.assign(top, false);
  out.eigenvectors = Tensor<double>({n, top});
  for (std::size_t c = 0; c < top; ++c)
    for (std::size_t r = 0; r < n; ++r)
      out.eigenvectors(r, c) = std::sqrt(sc.lambda_n[r]) * eig.vectors(r, c);
  return out;
}

// Count of eigenvalues ≥ tau·λ₁ for a descending spectrum with λ₁ > 0.
inline std::size_t effective_rank(const std::vector<double>& eigenvalues, double tau) {
  if (eigenvalues.empty() || !(eigenvalues.front() > 0)) {
    throw InvalidValueError("effective_rank: needs a descending spectrum with a positive lead");
  }
  const double cut = tau * eigenvalues.front();
  return static_cast<std::size_t>(std::count_if(eigenvalues.begin(), eigenvalues.end(),
                                                [&](double l) { return l >= cut; }));
}

}  // namespace flare
