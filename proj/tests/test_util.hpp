#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "flare/tensor.hpp"

namespace flare::testing {

template <class T = double>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

template <class T>
Tensor<T> permute_rows(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  Tensor<T> out(x.shape());
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = x(perm[i], j);
  return out;
}

}  // namespace flare::testing
