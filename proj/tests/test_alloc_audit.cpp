// Replaces global operator new/delete to audit heap use of the fused mixer and
// the model forward pass: no allocation may approach N×N, and peak live bytes
// must grow linearly in N.

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <new>

#include <gtest/gtest.h>

#include "flare/autodiff.hpp"
#include "flare/mixer.hpp"
#include "flare/model.hpp"
#include "test_util.hpp"

namespace {

struct AllocStats {
  std::size_t live = 0;
  std::size_t peak = 0;
  std::size_t largest = 0;
};

AllocStats g_stats;
constexpr std::size_t kHeader = alignof(std::max_align_t);

void* tracked_alloc(std::size_t n) {
  void* raw = std::malloc(n + kHeader);
  if (!raw) throw std::bad_alloc();
  *static_cast<std::size_t*>(raw) = n;
  g_stats.live += n;
  g_stats.peak = std::max(g_stats.peak, g_stats.live);
  g_stats.largest = std::max(g_stats.largest, n);
  return static_cast<char*>(raw) + kHeader;
}

void tracked_free(void* p) noexcept {
  if (!p) return;
  void* raw = static_cast<char*>(p) - kHeader;
  g_stats.live -= *static_cast<std::size_t*>(raw);
  std::free(raw);
}

}  // namespace

void* operator new(std::size_t n) { return tracked_alloc(n); }
void* operator new[](std::size_t n) { return tracked_alloc(n); }
void operator delete(void* p) noexcept { tracked_free(p); }
void operator delete[](void* p) noexcept { tracked_free(p); }
void operator delete(void* p, std::size_t) noexcept { tracked_free(p); }
void operator delete[](void* p, std::size_t) noexcept { tracked_free(p); }

namespace {

using flare::Tensor;
using flare::testing::random_tensor;

struct Usage {
  std::size_t peak_extra = 0;  // above the live bytes at entry
  std::size_t largest = 0;
};

template <class F>
Usage measure(F&& f) {
  const std::size_t base = g_stats.live;
  g_stats.peak = base;
  g_stats.largest = 0;
  f();
  return {g_stats.peak - base, g_stats.largest};
}

constexpr std::size_t kHeads = 8, kDim = 8, kLatents = 64, kChannels = kHeads * kDim;

Usage fused_usage(std::size_t n) {
  const auto q = random_tensor<float>({kHeads, kLatents, kDim}, 1);
  const auto k = random_tensor<float>({kHeads, n, kDim}, 2);
  const auto v = random_tensor<float>({kHeads, n, kDim}, 3);
  return measure([&] { volatile float sink = flare::flare_mix_fused(q, k, v)[0]; (void)sink; });
}

Usage tape_usage(std::size_t n) {
  const auto q = random_tensor<float>({kLatents, kChannels}, 1);
  const auto k = random_tensor<float>({n, kChannels}, 2);
  const auto v = random_tensor<float>({n, kChannels}, 3);
  const auto dy = random_tensor<float>({n, kChannels}, 4);
  return measure([&] {
    flare::Tape<float> tape;
    auto qv = tape.leaf(q), kv = tape.leaf(k), vv = tape.leaf(v);
    tape.backward(flare::ad::flare_mix(qv, kv, vv, kHeads), dy);
  });
}

flare::ModelConfig audit_model() {
  flare::ModelConfig c;
  c.blocks = 2;
  c.channels = kChannels;
  c.heads = kHeads;
  c.latents = kLatents;
  c.d_in = 3;
  c.d_out = 1;
  return c;
}

Usage model_usage(std::size_t n) {
  const auto cfg = audit_model();
  const auto params = flare::init_params<float>(cfg, 7);
  const auto x = random_tensor<float>({n, 3}, 5);
  return measure([&] { volatile float sink = flare::predict(params, x, cfg)[0]; (void)sink; });
}

// N large enough that one N×N float buffer (1 GiB) dwarfs every O(N·C) term.
constexpr std::size_t kN = 16384;
constexpr std::size_t kNSquaredBytes = kN * kN * sizeof(float);
constexpr std::size_t kRowBytes = kN * std::max(kLatents, kChannels) * sizeof(float);

void expect_linear(const char* what, Usage (*usage)(std::size_t), std::size_t cap_rows) {
  const Usage u = usage(kN);
  const Usage half = usage(kN / 2);
  EXPECT_LT(u.largest, kNSquaredBytes / 64) << what;
  EXPECT_LE(u.peak_extra, cap_rows * kRowBytes) << what << " peak " << u.peak_extra;
  const double ratio = static_cast<double>(u.peak_extra) / static_cast<double>(half.peak_extra);
  EXPECT_GT(ratio, 1.6) << what;
  EXPECT_LT(ratio, 2.4) << what;
}

TEST(AllocAudit, FusedForwardHasNoQuadraticBuffer) { expect_linear("fused", fused_usage, 4); }

TEST(AllocAudit, TapeForwardBackwardHasNoQuadraticBuffer) {
  expect_linear("tape", tape_usage, 32);
}

// The inference tape keeps every intermediate of both blocks alive; the cap
// is still a fixed number of N×max(M, C) rows.
TEST(AllocAudit, ModelForwardHasNoQuadraticBuffer) { expect_linear("model", model_usage, 128); }

TEST(AllocAudit, TrackerSeesLargeAllocations) {
  const Usage u = measure([] { std::vector<float> big(kN * 64); volatile float s = big[1]; (void)s; });
  EXPECT_GE(u.largest, kN * 64 * sizeof(float));
  EXPECT_GE(u.peak_extra, kN * 64 * sizeof(float));
}

// Positive control: the explicit N×N communication matrix must register.
TEST(AllocAudit, DenseCommunicationMatrixIsDetected) {
  constexpr std::size_t n = 2048;
  const auto qh = random_tensor<float>({kLatents, kDim}, 1);
  const auto kh = random_tensor<float>({n, kDim}, 2);
  const Usage u = measure([&] { volatile float s = flare::communication_matrix(qh, kh)[0]; (void)s; });
  EXPECT_GE(u.largest, n * n * sizeof(float));
}

}  // namespace
