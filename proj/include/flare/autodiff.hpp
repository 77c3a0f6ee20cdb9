#pragma once

// Tape-based reverse-mode differentiation over a fixed op set.
//
// Nodes are appended in forward order; backward() walks them in exact reverse
// order, so every node's gradient is complete before its own rule runs and a
// leaf ends up with exactly one accumulated gradient. First-order only.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <utility>
#include <vector>

#include "flare/errors.hpp"
#include "flare/linalg.hpp"
#include "flare/tensor.hpp"

namespace flare {

template <class T>
class Tape;

// Handle to a tape node. Cheap to copy; valid while its tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value) { return push(std::move(value), true, {}); }
  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  // Appends an op result. The node requires grad iff any input does; the
  // backward rule is dropped otherwise.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward rule) {
    bool needs = false;
    for (const Var<T>& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(rule) : Backward{});
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

  // Accumulated gradient; zeros when nothing flowed into the node.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad ? *n.grad : Tensor<T>(n.value.shape());
  }

  // Mutable gradient buffer for backward rules to add into.
  Tensor<T>& grad_buffer(Var<T> v) {
    Node& n = nodes_[v.id];
    if (!n.grad) n.grad.emplace(n.value.shape());
    return *n.grad;
  }

  void accumulate(Var<T> v, const Tensor<T>& g) {
    if (!requires_grad(v)) return;
    Tensor<T>& buf = grad_buffer(v);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }

  void backward(Var<T> root) {
    if (value(root).size() != 1) {
      throw DimensionError("backward: root must be a scalar, got " +
                           shape_str(value(root).shape()));
    }
    backward(root, Tensor<T>(value(root).shape(), T(1)));
  }

  void backward(Var<T> root, Tensor<T> seed) {
    if (seed.shape() != value(root).shape()) {
      throw DimensionError("backward: seed shape " + shape_str(seed.shape()) +
                           " does not match root " + shape_str(value(root).shape()));
    }
    if (!requires_grad(root)) return;
    nodes_[root.id].grad = std::move(seed);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.rule || !n.grad) continue;
      n.rule(*this, *n.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    Backward rule;
    std::optional<Tensor<T>> grad;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Backward rule) {
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(rule), std::nullopt});
    return Var<T>{this, nodes_.size() - 1};
  }

  // deque keeps references to earlier nodes stable while new ones are pushed.
  std::deque<Node> nodes_;
};

namespace ad {

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tensor<T> y = flare::matmul(a.value(), b.value());
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& gy) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (t.requires_grad(a)) {
      Tensor<T> bt = transpose(bv);
      kernel::gemm(gy.data(), bt.data(), t.grad_buffer(a).data(), m, n, k, true);
    }
    if (t.requires_grad(b)) {
      kernel::gemm_tn(av.data(), gy.data(), t.grad_buffer(b).data(), k, m, n, true);
    }
  });
}

// y = x · w + bias, with bias broadcast over rows.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require_rank(xv.shape(), 2, "linear input");
  require_rank(wv.shape(), 2, "linear weight");
  if (xv.cols() != wv.rows() || bias.value().size() != wv.cols()) {
    throw DimensionError("linear: input " + shape_str(xv.shape()) + ", weight " +
                         shape_str(wv.shape()) + ", bias " +
                         shape_str(bias.value().shape()));
  }
  const std::size_t n = xv.rows(), cin = xv.cols(), cout = wv.cols();
  Tensor<T> y({n, cout});
  const T* bv = bias.value().data();
  for (std::size_t i = 0; i < n; ++i) std::copy(bv, bv + cout, y.data() + i * cout);
  kernel::gemm(xv.data(), wv.data(), y.data(), n, cin, cout, true);
  return x.tape->record(std::move(y), {x, w, bias},
                        [x, w, bias, n, cin, cout](Tape<T>& t, const Tensor<T>& gy) {
                          if (t.requires_grad(x)) {
                            Tensor<T> wt = transpose(t.value(w));
                            kernel::gemm(gy.data(), wt.data(), t.grad_buffer(x).data(),
                                         n, cout, cin, true);
                          }
                          if (t.requires_grad(w)) {
                            kernel::gemm_tn(t.value(x).data(), gy.data(),
                                            t.grad_buffer(w).data(), cin, n, cout, true);
                          }
                          if (t.requires_grad(bias)) {
                            T* gb = t.grad_buffer(bias).data();
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < cout; ++j)
                                gb[j] += gy[i * cout + j];
                          }
                        });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("add: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor<T> y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& gy) {
    t.accumulate(a, gy);
    t.accumulate(b, gy);
  });
}

template <class T>
Var<T> scale(Var<T> x, T alpha) {
  Tensor<T> y = x.value();
  for (T& v : y.values()) v *= alpha;
  return x.tape->record(std::move(y), {x}, [x, alpha](Tape<T>& t, const Tensor<T>& gy) {
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += alpha * gy[i];
  });
}

template <class T>
Var<T> gelu(Var<T> x) {
  Tensor<T> y = flare::gelu(x.value());
  return x.tape->record(std::move(y), {x}, [x](Tape<T>& t, const Tensor<T>& gy) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * gelu_derivative(xv[i]);
  });
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Tensor<T>& xv = x.value();
  require_rank(xv.shape(), 2, "layer_norm");
  const std::size_t n = xv.rows(), c = xv.cols();
  if (c == 0) throw DimensionError("layer_norm: zero feature width");
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw DimensionError("layer_norm: affine parameters do not match width " +
                         std::to_string(c));
  }
  Tensor<T> xhat({n, c});
  std::vector<T> rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = xv.row(i);
    T mean = 0;
    for (T v : r) mean += v;
    mean /= T(c);
    T var = 0;
    for (T v : r) var += (v - mean) * (v - mean);
    var /= T(c);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) xhat(i, j) = (r[j] - mean) * rstd[i];
  }
  const Tensor<T>& g = gamma.value();
  const Tensor<T>& b = beta.value();
  Tensor<T> y({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) y(i, j) = g[j] * xhat(i, j) + b[j];

  return x.tape->record(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), n, c](
          Tape<T>& t, const Tensor<T>& gy) {
        if (t.requires_grad(gamma)) {
          T* gg = t.grad_buffer(gamma).data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += gy[i * c + j] * xhat(i, j);
        }
        if (t.requires_grad(beta)) {
          T* gb = t.grad_buffer(beta).data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += gy[i * c + j];
        }
        if (t.requires_grad(x)) {
          const Tensor<T>& g = t.value(gamma);
          Tensor<T>& gx = t.grad_buffer(x);
          std::vector<T> dxhat(c);
          for (std::size_t i = 0; i < n; ++i) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < c; ++j) {
              dxhat[j] = gy[i * c + j] * g[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat(i, j);
            }
            mean_d /= T(c);
            mean_dx /= T(c);
            for (std::size_t j = 0; j < c; ++j)
              gx(i, j) += rstd[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
          }
        }
      });
}

template <class T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (T v : x.value().values()) s += v;
  return x.tape->record(Tensor<T>({1}, s), {x}, [x](Tape<T>& t, const Tensor<T>& gy) {
    Tensor<T>& gx = t.grad_buffer(x);
    for (T& v : gx.values()) v += gy[0];
  });
}

// Σ x ⊙ weights, weights held constant.
template <class T>
Var<T> weighted_sum(Var<T> x, Tensor<T> weights) {
  if (weights.shape() != x.shape()) {
    throw DimensionError("weighted_sum: weight shape " + shape_str(weights.shape()) +
                         " vs " + shape_str(x.shape()));
  }
  T s = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += x.value()[i] * weights[i];
  return x.tape->record(Tensor<T>({1}, s), {x},
                        [x, w = std::move(weights)](Tape<T>& t, const Tensor<T>& gy) {
                          Tensor<T>& gx = t.grad_buffer(x);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[0] * w[i];
                        });
}

// y[:, j] = x[:, j] · scale[j] + shift[j] with constant scale/shift.
template <class T>
Var<T> affine_columns(Var<T> x, std::vector<T> scale, std::vector<T> shift) {
  const Tensor<T>& xv = x.value();
  require_rank(xv.shape(), 2, "affine_columns");
  const std::size_t n = xv.rows(), c = xv.cols();
  if (scale.size() != c || shift.size() != c) {
    throw DimensionError("affine_columns: expected " + std::to_string(c) + " columns");
  }
  Tensor<T> y({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) y(i, j) = xv(i, j) * scale[j] + shift[j];
  return x.tape->record(std::move(y), {x},
                        [x, s = std::move(scale), n, c](Tape<T>& t, const Tensor<T>& gy) {
                          Tensor<T>& gx = t.grad_buffer(x);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < c; ++j)
                              gx(i, j) += gy[i * c + j] * s[j];
                        });
}

// ‖pred − target‖₂ / ‖target‖₂ over the flattened arrays.
template <class T>
Var<T> relative_l2(Var<T> pred, const Tensor<T>& target) {
  const Tensor<T>& pv = pred.value();
  if (pv.shape() != target.shape()) {
    throw DimensionError("relative_l2: prediction " + shape_str(pv.shape()) +
                         " vs target " + shape_str(target.shape()));
  }
  T tn = 0, dn = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    tn += target[i] * target[i];
    const T d = pv[i] - target[i];
    dn += d * d;
  }
  if (!(tn > T(0))) throw InvalidValueError("relative_l2: target has zero norm");
  tn = std::sqrt(tn);
  dn = std::sqrt(dn);
  const T loss = dn / tn;
  // The gradient of ‖d‖ is undefined at d = 0; use 0 there.
  Tensor<T> dir(pv.shape());
  if (dn > T(0)) {
    const T inv = T(1) / (dn * tn);
    for (std::size_t i = 0; i < pv.size(); ++i) dir[i] = (pv[i] - target[i]) * inv;
  }
  return pred.tape->record(Tensor<T>({1}, loss), {pred},
                           [pred, dir = std::move(dir)](Tape<T>& t, const Tensor<T>& gy) {
                             Tensor<T>& gp = t.grad_buffer(pred);
                             for (std::size_t i = 0; i < gp.size(); ++i)
                               gp[i] += gy[0] * dir[i];
                           });
}

}  // namespace ad

}  // namespace flare
