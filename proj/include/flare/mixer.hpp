#pragma once

// FLARE token mixing and the quadratic attention baseline.
//
// Per head h with latent queries Q_h [M×D] and keys/values K_h, V_h [N×D]:
//   encode  Z_h = softmax(Q_h K_hᵀ) V_h          (M×D)
//   decode  Y_h = softmax(K_h Q_hᵀ) Z_h          (N×D)
// Both softmaxes are row-wise with scale 1. The fused path never holds more
// than the M×N encode and N×M decode weights per head.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "flare/autodiff.hpp"
#include "flare/errors.hpp"
#include "flare/linalg.hpp"
#include "flare/tensor.hpp"

namespace flare {

inline std::size_t head_dim(std::size_t channels, std::size_t heads) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("feature width " + std::to_string(channels) +
                      " is not divisible by head count " + std::to_string(heads));
  }
  return channels / heads;
}

// [N×C] → [H×N×D]; head h holds columns [hD, (h+1)D).
template <class T>
Tensor<T> head_split(const Tensor<T>& x, std::size_t heads) {
  require_rank(x.shape(), 2, "head_split");
  const std::size_t n = x.rows(), c = x.cols(), d = head_dim(c, heads);
  Tensor<T> out({heads, n, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(x.data() + i * c + h * d, d, out.data() + (h * n + i) * d);
  return out;
}

template <class T>
Tensor<T> head_merge(const Tensor<T>& x) {
  require_rank(x.shape(), 3, "head_merge");
  const std::size_t heads = x.dim(0), n = x.dim(1), d = x.dim(2), c = heads * d;
  Tensor<T> out({n, c});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(x.data() + (h * n + i) * d, d, out.data() + i * c + h * d);
  return out;
}

namespace detail {

template <class T>
void gather_head(const T* src, std::size_t rows, std::size_t c, std::size_t h,
                 std::size_t d, T* dst) {
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(src + i * c + h * d, d, dst + i * d);
}

template <class T>
void scatter_add_head(const T* src, std::size_t rows, std::size_t c, std::size_t h,
                      std::size_t d, T* dst) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) dst[i * c + h * d + j] += src[i * d + j];
}

// Saved activations of one FLARE head. Both weight matrices share the score
// matrix S = Q Kᵀ [M×N]; decode is kept transposed so every loop runs over N.
template <class T>
struct FlareHeadCache {
  std::vector<T> encode;    // M×N, row softmax of S
  std::vector<T> decode_t;  // M×N, column softmax of S (W_decodeᵀ)
  std::vector<T> latent;    // M×D
};

// One head of the two-SDPA mixer. `y` receives N×D.
template <class T>
void flare_head_forward(const T* q, const T* k, const T* v, std::size_t m, std::size_t n,
                        std::size_t d, T* y, FlareHeadCache<T>& cache) {
  std::vector<T> kt(d * n), vt(d * n), yt(d * n);
  kernel::transpose(k, kt.data(), n, d);
  kernel::transpose(v, vt.data(), n, d);
  cache.encode.resize(m * n);
  cache.latent.resize(m * d);

  kernel::gemm(q, kt.data(), cache.encode.data(), m, d, n);
  cache.decode_t = cache.encode;
  kernel::softmax_rows(cache.encode.data(), m, n);
  kernel::softmax_cols(cache.decode_t.data(), m, n);

  kernel::gemm_nt_dot(cache.encode.data(), vt.data(), cache.latent.data(), m, n, d);
  kernel::gemm_tn(cache.latent.data(), cache.decode_t.data(), yt.data(), d, m, n);
  kernel::transpose(yt.data(), y, d, n);
}

// Accumulates dq [M×D], dk, dv [N×D] for one head given dy [N×D].
template <class T>
void flare_head_backward(const T* q, const T* k, const T* v, const T* dy,
                         const FlareHeadCache<T>& cache, std::size_t m, std::size_t n,
                         std::size_t d, T* dq, T* dk, T* dv) {
  std::vector<T> kt(d * n), vt(d * n), dyt(d * n), tmp_t(d * n);
  kernel::transpose(k, kt.data(), n, d);
  kernel::transpose(v, vt.data(), n, d);
  kernel::transpose(dy, dyt.data(), n, d);

  // Decode: Yᵀ = Zᵀ · decode_t.
  std::vector<T> d_latent(m * d), d_scores(m * n), d_encode(m * n);
  kernel::gemm_nt_dot(cache.decode_t.data(), dyt.data(), d_latent.data(), m, n, d);
  kernel::gemm(cache.latent.data(), dyt.data(), d_scores.data(), m, d, n);
  kernel::softmax_cols_backward(cache.decode_t.data(), d_scores.data(), m, n);

  // Encode: Z = encode · V.
  kernel::gemm(d_latent.data(), vt.data(), d_encode.data(), m, d, n);
  if (dv) {
    kernel::gemm_tn(d_latent.data(), cache.encode.data(), tmp_t.data(), d, m, n);
    kernel::add_transposed(tmp_t.data(), dv, d, n);
  }
  kernel::softmax_rows_backward(cache.encode.data(), d_encode.data(), m, n);
  for (std::size_t i = 0; i < m * n; ++i) d_scores[i] += d_encode[i];

  // S = Q Kᵀ.
  if (dq) kernel::gemm_nt_dot(d_scores.data(), kt.data(), dq, m, n, d, true);
  if (dk) {
    kernel::gemm_tn(q, d_scores.data(), tmp_t.data(), d, m, n);
    kernel::add_transposed(tmp_t.data(), dk, d, n);
  }
}

template <class T>
void check_mixer_shapes(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  require_rank(q.shape(), 3, "mixer queries");
  require_rank(k.shape(), 3, "mixer keys");
  require_rank(v.shape(), 3, "mixer values");
  if (k.shape() != v.shape() || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw DimensionError("mixer: incompatible shapes q" + shape_str(q.shape()) + " k" +
                         shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
}

}  // namespace detail

// Fused path: two softmax-attention calls per head, O(N·M) memory.
// q: [H×M×D], k, v: [H×N×D] → [H×N×D].
template <class T>
Tensor<T> flare_mix_fused(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  detail::check_mixer_shapes(q, k, v);
  const std::size_t heads = q.dim(0), m = q.dim(1), n = k.dim(1), d = q.dim(2);
  Tensor<T> y({heads, n, d});
  detail::FlareHeadCache<T> cache;
  for (std::size_t h = 0; h < heads; ++h) {
    detail::flare_head_forward(q.data() + h * m * d, k.data() + h * n * d,
                               v.data() + h * n * d, m, n, d, y.data() + h * n * d, cache);
  }
  return y;
}

// Explicit encode/decode weights and latent sequence for every head.
template <class T>
struct MixerTrace {
  std::vector<Tensor<T>> encode;  // per head M×N
  std::vector<Tensor<T>> decode;  // per head N×M
  std::vector<Tensor<T>> latent;  // per head M×D
};

// Exponentiated scores A = exp(Q_h K_hᵀ − max) with a single global shift.
// A scalar shift cancels in both the row and the column normalization, which
// a per-row shift would not.
template <class T>
Tensor<T> shifted_exp_scores(const Tensor<T>& qh, const Tensor<T>& kh) {
  Tensor<T> a = matmul(qh, transpose(kh));
  const T mx = *std::max_element(a.values().begin(), a.values().end());
  for (T& s : a.values()) s = std::exp(s - mx);
  return a;
}

// Returns (W_encode [M×N], W_decode [N×M]) for one head from a single score matrix.
template <class T>
std::pair<Tensor<T>, Tensor<T>> encode_decode_weights(const Tensor<T>& qh,
                                                      const Tensor<T>& kh) {
  Tensor<T> a = shifted_exp_scores(qh, kh);
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> enc({m, n}), dec({n, m});
  std::vector<T> col_sum(n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T row_sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row_sum += a(i, j);
      col_sum[j] += a(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) enc(i, j) = a(i, j) / row_sum;
  }
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < m; ++i) dec(j, i) = a(i, j) / col_sum[j];
  return {std::move(enc), std::move(dec)};
}

namespace detail {

template <class T>
Tensor<T> head_slice(const Tensor<T>& x, std::size_t h) {
  const std::size_t rows = x.dim(1), d = x.dim(2);
  return Tensor<T>({rows, d}, std::vector<T>(x.data() + h * rows * d,
                                             x.data() + (h + 1) * rows * d));
}

}  // namespace detail

// Materialized path: builds W_encode and W_decode explicitly per head.
template <class T>
std::pair<Tensor<T>, MixerTrace<T>> flare_mix_materialized(const Tensor<T>& q,
                                                           const Tensor<T>& k,
                                                           const Tensor<T>& v) {
  detail::check_mixer_shapes(q, k, v);
  const std::size_t heads = q.dim(0), n = k.dim(1), d = q.dim(2);
  Tensor<T> y({heads, n, d});
  MixerTrace<T> trace;
  for (std::size_t h = 0; h < heads; ++h) {
    auto [enc, dec] = encode_decode_weights(detail::head_slice(q, h), detail::head_slice(k, h));
    Tensor<T> z = matmul(enc, detail::head_slice(v, h));
    Tensor<T> yh = matmul(dec, z);
    std::copy(yh.values().begin(), yh.values().end(), y.data() + h * n * d);
    trace.encode.push_back(std::move(enc));
    trace.decode.push_back(std::move(dec));
    trace.latent.push_back(std::move(z));
  }
  return {std::move(y), std::move(trace)};
}

// W_h = W_decode · W_encode, the N×N row-stochastic communication matrix.
// Test/diagnostic use only: allocates N².
template <class T>
Tensor<T> communication_matrix(const Tensor<T>& qh, const Tensor<T>& kh) {
  require_rank(qh.shape(), 2, "communication_matrix queries");
  require_rank(kh.shape(), 2, "communication_matrix keys");
  if (qh.cols() != kh.cols()) throw DimensionError("communication_matrix: head dims differ");
  auto [enc, dec] = encode_decode_weights(qh, kh);
  return matmul(dec, enc);
}

namespace detail {

inline constexpr std::size_t kAttentionRowBlock = 64;

// Row-blocked softmax attention for one head; stores the row log-sum-exp so
// that backward can recompute probabilities without an N×N buffer.
template <class T>
void vanilla_head_forward(const T* q, const T* k, const T* v, std::size_t n, std::size_t d,
                          T inv_scale, T* out, T* lse) {
  std::vector<T> kt(d * n), vt(d * n);
  kernel::transpose(k, kt.data(), n, d);
  kernel::transpose(v, vt.data(), n, d);
  std::vector<T> s(kAttentionRowBlock * n);
  for (std::size_t r0 = 0; r0 < n; r0 += kAttentionRowBlock) {
    const std::size_t rb = std::min(kAttentionRowBlock, n - r0);
    kernel::gemm(q + r0 * d, kt.data(), s.data(), rb, d, n);
    for (std::size_t i = 0; i < rb; ++i) {
      T* row = s.data() + i * n;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        row[j] *= inv_scale;
        mx = std::max(mx, row[j]);
      }
      T sum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
      lse[r0 + i] = mx + std::log(sum);
    }
    kernel::gemm_nt_dot(s.data(), vt.data(), out + r0 * d, rb, n, d, false);
  }
}

template <class T>
void vanilla_head_backward(const T* q, const T* k, const T* v, const T* out, const T* lse,
                           const T* dout, std::size_t n, std::size_t d, T inv_scale, T* dq,
                           T* dk, T* dv) {
  std::vector<T> kt(d * n), vt(d * n);
  kernel::transpose(k, kt.data(), n, d);
  kernel::transpose(v, vt.data(), n, d);
  std::vector<T> p(kAttentionRowBlock * n), dp(kAttentionRowBlock * n);
  std::vector<T> delta(kAttentionRowBlock);
  std::vector<T> dkt(dk ? d * n : 0), dvt(dv ? d * n : 0);
  for (std::size_t r0 = 0; r0 < n; r0 += kAttentionRowBlock) {
    const std::size_t rb = std::min(kAttentionRowBlock, n - r0);
    kernel::gemm(q + r0 * d, kt.data(), p.data(), rb, d, n);
    for (std::size_t i = 0; i < rb; ++i) {
      T* row = p.data() + i * n;
      const T l = lse[r0 + i];
      for (std::size_t j = 0; j < n; ++j) row[j] = std::exp(row[j] * inv_scale - l);
      T acc = 0;
      for (std::size_t j = 0; j < d; ++j)
        acc += dout[(r0 + i) * d + j] * out[(r0 + i) * d + j];
      delta[i] = acc;
    }
    if (dv) kernel::gemm_tn(dout + r0 * d, p.data(), dvt.data(), d, rb, n, true);
    kernel::gemm(dout + r0 * d, vt.data(), dp.data(), rb, d, n);
    for (std::size_t i = 0; i < rb; ++i) {
      const T* pi = p.data() + i * n;
      T* di = dp.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) di[j] = pi[j] * (di[j] - delta[i]) * inv_scale;
    }
    if (dq) kernel::gemm_nt_dot(dp.data(), kt.data(), dq + r0 * d, rb, n, d, true);
    if (dk) kernel::gemm_tn(q + r0 * d, dp.data(), dkt.data(), d, rb, n, true);
  }
  if (dv) kernel::add_transposed(dvt.data(), dv, d, n);
  if (dk) kernel::add_transposed(dkt.data(), dk, d, n);
}

}  // namespace detail

// softmax(Q_h K_hᵀ / s) V_h per head. q, k, v: [H×N×D].
template <class T>
Tensor<T> vanilla_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            T s) {
  if (!(s > T(0))) throw InvalidValueError("vanilla_attention: scale must be positive");
  require_rank(q.shape(), 3, "attention queries");
  if (q.shape() != k.shape() || k.shape() != v.shape()) {
    throw DimensionError("vanilla_attention: q, k, v shapes differ");
  }
  const std::size_t heads = q.dim(0), n = q.dim(1), d = q.dim(2);
  Tensor<T> y({heads, n, d});
  std::vector<T> lse(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * n * d;
    detail::vanilla_head_forward(q.data() + off, k.data() + off, v.data() + off, n, d,
                                 T(1) / s, y.data() + off, lse.data());
  }
  return y;
}

namespace ad {

// FLARE mixing on merged layouts: q [M×C] latent queries, k, v [N×C]; → [N×C].
template <class T>
Var<T> flare_mix(Var<T> q, Var<T> k, Var<T> v, std::size_t heads) {
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  require_rank(qv.shape(), 2, "flare_mix queries");
  require_rank(kv.shape(), 2, "flare_mix keys");
  if (kv.shape() != vv.shape() || qv.cols() != kv.cols()) {
    throw DimensionError("flare_mix: q" + shape_str(qv.shape()) + " k" +
                         shape_str(kv.shape()) + " v" + shape_str(vv.shape()));
  }
  const std::size_t m = qv.rows(), n = kv.rows(), c = kv.cols(), d = head_dim(c, heads);

  std::vector<detail::FlareHeadCache<T>> caches(heads);
  Tensor<T> y({n, c});
  {
    std::vector<T> qh(m * d), kh(n * d), vh(n * d), yh(n * d, T(0));
    for (std::size_t h = 0; h < heads; ++h) {
      detail::gather_head(qv.data(), m, c, h, d, qh.data());
      detail::gather_head(kv.data(), n, c, h, d, kh.data());
      detail::gather_head(vv.data(), n, c, h, d, vh.data());
      detail::flare_head_forward(qh.data(), kh.data(), vh.data(), m, n, d, yh.data(),
                                 caches[h]);
      detail::scatter_add_head(yh.data(), n, c, h, d, y.data());
    }
  }

  return q.tape->record(
      std::move(y), {q, k, v},
      [q, k, v, heads, m, n, c, d, caches = std::move(caches)](Tape<T>& t,
                                                               const Tensor<T>& gy) {
        const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
        std::vector<T> qh(m * d), kh(n * d), vh(n * d), dyh(n * d);
        std::vector<T> dqh(m * d), dkh(n * d), dvh(n * d);
        for (std::size_t h = 0; h < heads; ++h) {
          detail::gather_head(t.value(q).data(), m, c, h, d, qh.data());
          detail::gather_head(t.value(k).data(), n, c, h, d, kh.data());
          detail::gather_head(t.value(v).data(), n, c, h, d, vh.data());
          detail::gather_head(gy.data(), n, c, h, d, dyh.data());
          std::fill(dqh.begin(), dqh.end(), T(0));
          std::fill(dkh.begin(), dkh.end(), T(0));
          std::fill(dvh.begin(), dvh.end(), T(0));
          detail::flare_head_backward(qh.data(), kh.data(), vh.data(), dyh.data(), caches[h],
                                      m, n, d, gq ? dqh.data() : nullptr,
                                      gk ? dkh.data() : nullptr, gv ? dvh.data() : nullptr);
          if (gq) detail::scatter_add_head(dqh.data(), m, c, h, d, t.grad_buffer(q).data());
          if (gk) detail::scatter_add_head(dkh.data(), n, c, h, d, t.grad_buffer(k).data());
          if (gv) detail::scatter_add_head(dvh.data(), n, c, h, d, t.grad_buffer(v).data());
        }
      });
}

// Quadratic multi-head attention on merged layouts: q, k, v [N×C] → [N×C].
template <class T>
Var<T> vanilla_mix(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, T s) {
  if (!(s > T(0))) throw InvalidValueError("vanilla_mix: scale must be positive");
  const Tensor<T>& qv = q.value();
  require_rank(qv.shape(), 2, "vanilla_mix queries");
  if (qv.shape() != k.value().shape() || qv.shape() != v.value().shape()) {
    throw DimensionError("vanilla_mix: q, k, v shapes differ");
  }
  const std::size_t n = qv.rows(), c = qv.cols(), d = head_dim(c, heads);
  const T inv_scale = T(1) / s;

  Tensor<T> y({n, c});
  std::vector<T> lse(heads * n);
  {
    std::vector<T> qh(n * d), kh(n * d), vh(n * d), yh(n * d);
    for (std::size_t h = 0; h < heads; ++h) {
      detail::gather_head(qv.data(), n, c, h, d, qh.data());
      detail::gather_head(k.value().data(), n, c, h, d, kh.data());
      detail::gather_head(v.value().data(), n, c, h, d, vh.data());
      detail::vanilla_head_forward(qh.data(), kh.data(), vh.data(), n, d, inv_scale,
                                   yh.data(), lse.data() + h * n);
      detail::scatter_add_head(yh.data(), n, c, h, d, y.data());
    }
  }
  Tensor<T> saved_out = y;
  return q.tape->record(
      std::move(y), {q, k, v},
      [q, k, v, heads, n, c, d, inv_scale, lse = std::move(lse),
       saved_out = std::move(saved_out)](Tape<T>& t, const Tensor<T>& gy) {
        const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
        std::vector<T> qh(n * d), kh(n * d), vh(n * d), oh(n * d), dyh(n * d);
        std::vector<T> dqh(n * d), dkh(n * d), dvh(n * d);
        for (std::size_t h = 0; h < heads; ++h) {
          detail::gather_head(t.value(q).data(), n, c, h, d, qh.data());
          detail::gather_head(t.value(k).data(), n, c, h, d, kh.data());
          detail::gather_head(t.value(v).data(), n, c, h, d, vh.data());
          detail::gather_head(saved_out.data(), n, c, h, d, oh.data());
          detail::gather_head(gy.data(), n, c, h, d, dyh.data());
          std::fill(dqh.begin(), dqh.end(), T(0));
          std::fill(dkh.begin(), dkh.end(), T(0));
          std::fill(dvh.begin(), dvh.end(), T(0));
          detail::vanilla_head_backward(qh.data(), kh.data(), vh.data(), oh.data(),
                                        lse.data() + h * n, dyh.data(), n, d, inv_scale,
                                        gq ? dqh.data() : nullptr, gk ? dkh.data() : nullptr,
                                        gv ? dvh.data() : nullptr);
          if (gq) detail::scatter_add_head(dqh.data(), n, c, h, d, t.grad_buffer(q).data());
          if (gk) detail::scatter_add_head(dkh.data(), n, c, h, d, t.grad_buffer(k).data());
          if (gv) detail::scatter_add_head(dvh.data(), n, c, h, d, t.grad_buffer(v).data());
        }
      });
}

}  // namespace ad

}  // namespace flare
