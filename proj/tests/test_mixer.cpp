#include <gtest/gtest.h>

#include <cmath>
#include <tuple>

#include "flare/mixer.hpp"
#include "flare/spectral.hpp"
#include "test_util.hpp"

using namespace flare;
using flare::testing::random_tensor;

namespace {

// [H×N×D] slice for one head as a matrix.
template <class T>
Tensor<T> head(const Tensor<T>& x, std::size_t h) {
  const std::size_t n = x.dim(1), d = x.dim(2);
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = x(h, i, j);
  return out;
}

template <class T>
Tensor<T> permute_tokens(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  Tensor<T> out(x.shape());
  for (std::size_t h = 0; h < x.dim(0); ++h)
    for (std::size_t i = 0; i < perm.size(); ++i)
      for (std::size_t j = 0; j < x.dim(2); ++j) out(h, i, j) = x(h, perm[i], j);
  return out;
}

}  // namespace

TEST(HeadSplit, RoundTrip) {
  auto x = random_tensor({5, 8}, 1);
  EXPECT_EQ(head_merge(head_split(x, 2)), x);
}

TEST(HeadSplit, Layout) {
  Tensor<double> x({3, 8});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j) x(i, j) = static_cast<double>(j);
  auto s = head_split(x, 4);
  ASSERT_EQ(s.shape(), (Shape{4, 3, 2}));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(s(1, i, 0), 2.0);
    EXPECT_EQ(s(1, i, 1), 3.0);
  }
}

TEST(HeadSplit, IndivisibleWidthIsConfigError) {
  EXPECT_THROW(head_split(Tensor<double>({2, 8}), 3), ConfigError);
}

TEST(FlareFused, ZeroKeysAverageValues) {
  const std::size_t h = 2, m = 3, n = 11, d = 4;
  auto q = random_tensor({h, m, d}, 2);
  auto v = random_tensor({h, n, d}, 3);
  auto y = flare_mix_fused(q, Tensor<double>({h, n, d}), v);
  for (std::size_t hh = 0; hh < h; ++hh)
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += v(hh, i, j) / n;
      for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(y(hh, i, j), mean, 1e-14);
    }
}

TEST(FlareFused, SingleLatentGivesIdenticalRows) {
  const std::size_t h = 3, n = 9, d = 2;
  auto y = flare_mix_fused(random_tensor({h, 1, d}, 4), random_tensor({h, n, d}, 5),
                           random_tensor({h, n, d}, 6));
  for (std::size_t hh = 0; hh < h; ++hh)
    for (std::size_t i = 1; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(y(hh, i, j), y(hh, 0, j));
}

TEST(FlareFused, ShapeMismatchThrows) {
  EXPECT_THROW(flare_mix_fused(Tensor<double>({2, 3, 4}), Tensor<double>({2, 5, 4}),
                               Tensor<double>({2, 6, 4})),
               DimensionError);
  EXPECT_THROW(flare_mix_fused(Tensor<double>({2, 3, 4}), Tensor<double>({2, 5, 3}),
                               Tensor<double>({2, 5, 3})),
               DimensionError);
}

class FusedVsMaterialized
    : public ::testing::TestWithParam<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> {};

TEST_P(FusedVsMaterialized, AgreeInBothPrecisions) {
  auto [n, m, h, d] = GetParam();
  auto q = random_tensor({h, m, d}, 10 + n);
  auto k = random_tensor({h, n, d}, 20 + n);
  auto v = random_tensor({h, n, d}, 30 + n);
  EXPECT_LE(max_abs_diff(flare_mix_fused(q, k, v), flare_mix_materialized(q, k, v).first), 1e-12);

  auto qf = q.cast<float>(), kf = k.cast<float>(), vf = v.cast<float>();
  EXPECT_LE(max_abs_diff(flare_mix_fused(qf, kf, vf), flare_mix_materialized(qf, kf, vf).first),
            1e-5);
}

INSTANTIATE_TEST_SUITE_P(Sizes, FusedVsMaterialized,
                         ::testing::Values(std::make_tuple(33, 4, 1, 4),
                                           std::make_tuple(257, 16, 4, 8),
                                           std::make_tuple(1024, 64, 8, 8)));

TEST(FlareMaterialized, TraceRowsAreStochastic) {
  const std::size_t h = 2, m = 5, n = 40, d = 4;
  auto [y, trace] = flare_mix_materialized(random_tensor({h, m, d}, 40), random_tensor({h, n, d}, 41),
                                           random_tensor({h, n, d}, 42));
  ASSERT_EQ(trace.encode.size(), h);
  for (std::size_t hh = 0; hh < h; ++hh) {
    for (const auto* w : {&trace.encode[hh], &trace.decode[hh]}) {
      for (std::size_t i = 0; i < w->rows(); ++i) {
        double total = 0;
        for (std::size_t j = 0; j < w->cols(); ++j) {
          EXPECT_GE((*w)(i, j), 0.0);
          total += (*w)(i, j);
        }
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
    }
    EXPECT_EQ(trace.latent[hh].shape(), (Shape{m, d}));
  }
}

TEST(FlareMaterialized, EncodeAndDecodeAreScaledAdjoints) {
  const std::size_t m = 6, n = 30, d = 4;
  auto q = random_tensor({1, m, d}, 50);
  auto k = random_tensor({1, n, d}, 51);
  auto [y, trace] = flare_mix_materialized(q, k, random_tensor({1, n, d}, 52));

  // Independent A = exp(QKᵀ − max) and its row/column normalizers.
  auto qh = head(q, 0), kh = head(k, 0);
  Tensor<double> a({m, n});
  double mx = -INFINITY;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < d; ++p) s += qh(i, p) * kh(j, p);
      a(i, j) = s;
      mx = std::max(mx, s);
    }
  std::vector<double> lam_m(m, 0), lam_n(n, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      a(i, j) = std::exp(a(i, j) - mx);
      lam_m[i] += a(i, j);
      lam_n[j] += a(i, j);
    }
  const auto& enc = trace.encode[0];
  const auto& dec = trace.decode[0];
  double worst = 0;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < m; ++i) {
      // Λ_N W_encᵀ Λ_M⁻¹ with Λ_M = diag(1/rowsum), Λ_N = diag(1/colsum).
      const double rhs = (1.0 / lam_n[j]) * enc(i, j) * lam_m[i];
      worst = std::max(worst, std::abs(dec(j, i) - rhs));
    }
  EXPECT_LT(worst, 1e-10);
}

TEST(FlareMaterialized, OutputIsCommunicationMatrixTimesValues) {
  const std::size_t h = 3, m = 4, n = 25, d = 5;
  auto q = random_tensor({h, m, d}, 60);
  auto k = random_tensor({h, n, d}, 61);
  auto v = random_tensor({h, n, d}, 62);
  auto [y, trace] = flare_mix_materialized(q, k, v);
  auto fused = flare_mix_fused(q, k, v);
  for (std::size_t hh = 0; hh < h; ++hh) {
    auto w = matmul(trace.decode[hh], trace.encode[hh]);
    auto expect = matmul(w, head(v, hh));
    EXPECT_LE(max_abs_diff(head(y, hh), expect), 1e-12);
    auto w2 = communication_matrix(head(q, hh), head(k, hh));
    EXPECT_LE(max_abs_diff(matmul(w2, head(v, hh)), head(fused, hh)), 1e-12);
  }
}

TEST(CommunicationMatrix, RowStochasticAndLowRank) {
  const std::size_t m = 8, n = 64, d = 4;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto w = communication_matrix(random_tensor({m, d}, 70 + seed), random_tensor({n, d}, 80 + seed));
    ASSERT_EQ(w.shape(), (Shape{n, n}));
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_GE(w(i, j), -1e-12);
        total += w(i, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
    EXPECT_LE(numerical_rank(w, 1e-8), m);
  }
}

TEST(CommunicationMatrix, EigenvaluesRealAndInUnitInterval) {
  // W is similar to the symmetric PSD matrix JᵀJ, so its spectrum is read
  // from the spectral module rather than a nonsymmetric solver.
  auto q = random_tensor({8, 4}, 90);
  auto k = random_tensor({64, 4}, 91);
  std::vector<double> all;
  dense_spectrum_oracle(q, k, &all);
  for (double l : all) {
    EXPECT_GE(l, -1e-8);
    EXPECT_LE(l, 1 + 1e-8);
  }
  EXPECT_NEAR(all.front(), 1.0, 1e-8);
}

TEST(FlareFused, PermutationEquivariant) {
  const std::size_t h = 2, m = 4, n = 37, d = 3;
  auto q = random_tensor({h, m, d}, 100);
  auto k = random_tensor({h, n, d}, 101);
  auto v = random_tensor({h, n, d}, 102);
  auto perm = flare::testing::random_permutation(n, 103);
  auto y = flare_mix_fused(q, k, v);
  auto yp = flare_mix_fused(q, permute_tokens(k, perm), permute_tokens(v, perm));
  EXPECT_LE(max_abs_diff(yp, permute_tokens(y, perm)), 1e-13);
}

TEST(VanillaAttention, SingleTokenReturnsValue) {
  auto v = random_tensor({2, 1, 4}, 110);
  auto y = vanilla_attention(random_tensor({2, 1, 4}, 111), random_tensor({2, 1, 4}, 112), v, 1.0);
  EXPECT_LE(max_abs_diff(y, v), 1e-15);
}

TEST(VanillaAttention, ZeroKeysAverageValues) {
  const std::size_t n = 70, d = 3;
  auto v = random_tensor({1, n, d}, 113);
  auto y = vanilla_attention(random_tensor({1, n, d}, 114), Tensor<double>({1, n, d}), v, 2.0);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += v(0, i, j) / n;
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(y(0, i, j), mean, 1e-14);
  }
}

TEST(VanillaAttention, MatchesLoopOracle) {
  const std::size_t h = 2, n = 33, d = 8;
  const double s = std::sqrt(8.0);
  auto q = random_tensor({h, n, d}, 120);
  auto k = random_tensor({h, n, d}, 121);
  auto v = random_tensor({h, n, d}, 122);
  auto y = vanilla_attention(q, k, v, s);
  for (std::size_t hh = 0; hh < h; ++hh)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> w(n);
      double mx = -INFINITY, z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0;
        for (std::size_t p = 0; p < d; ++p) dot += q(hh, i, p) * k(hh, j, p);
        w[j] = dot / s;
        mx = std::max(mx, w[j]);
      }
      for (auto& x : w) z += (x = std::exp(x - mx));
      for (std::size_t p = 0; p < d; ++p) {
        double acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += w[j] / z * v(hh, j, p);
        EXPECT_NEAR(y(hh, i, p), acc, 1e-12);
      }
    }
}

TEST(VanillaAttention, NonPositiveScaleThrows) {
  Tensor<double> x({1, 2, 2});
  EXPECT_THROW(vanilla_attention(x, x, x, 0.0), InvalidValueError);
}
