#pragma once

// AdamW, one-cycle learning-rate schedule and global-norm gradient clipping.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flare/errors.hpp"
#include "flare/tensor.hpp"

namespace flare {

enum class Precision { single, double_ };

inline std::string to_string(Precision p) { return p == Precision::single ? "single" : "double"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "single") return Precision::single;
  if (s == "double") return Precision::double_;
  throw ConfigError("train.precision must be \"single\" or \"double\", got \"" + s + "\"");
}

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 1;
  double lr_max = 1e-3;
  double warmup_frac = 0.1;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_max_norm = 1.0;
  std::uint64_t seed = 0;
  Precision precision = Precision::single;
  std::size_t checkpoint_every = 0;  // epochs; 0 disables intermediate checkpoints

  void validate() const {
    if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr_max > 0)) throw ConfigError("train.lr_max must be > 0");
    if (!(warmup_frac > 0 && warmup_frac < 1)) {
      throw ConfigError("train.warmup_frac must lie in (0, 1)");
    }
    if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
      throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
    }
    if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be > 0");
    if (!(clip_max_norm > 0)) throw ConfigError("train.clip_max_norm must be > 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr_max", c.lr_max},
                     {"warmup_frac", c.warmup_frac},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"clip_max_norm", c.clip_max_norm},
                     {"seed", c.seed},
                     {"precision", to_string(c.precision)},
                     {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr_max").get_to(c.lr_max);
  j.at("warmup_frac").get_to(c.warmup_frac);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("adam_eps").get_to(c.adam_eps);
  j.at("clip_max_norm").get_to(c.clip_max_norm);
  j.at("seed").get_to(c.seed);
  c.precision = parse_precision(j.at("precision").get<std::string>());
  j.at("checkpoint_every").get_to(c.checkpoint_every);
}

// Number of warmup steps: round(warmup_frac·total), at least one.
inline std::size_t warmup_steps(std::size_t total_steps, double warmup_frac) {
  const auto w = static_cast<std::size_t>(std::llround(warmup_frac * static_cast<double>(total_steps)));
  return std::max<std::size_t>(w, 1);
}

// Linear ramp 0 → lr_max over the warmup steps, then cosine decay to 0 at the
// final step.
inline double onecycle_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (step >= total_steps) {
    throw InvalidValueError("onecycle_lr: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + ")");
  }
  const std::size_t w = warmup_steps(total_steps, cfg.warmup_frac);
  if (step < w) return cfg.lr_max * static_cast<double>(step) / static_cast<double>(w);
  if (total_steps <= w + 1) return cfg.lr_max;
  const double t = static_cast<double>(step - w) / static_cast<double>(total_steps - 1 - w);
  return cfg.lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template <class T>
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;  // first moments, canonical parameter order
  std::vector<Tensor<T>> v;  // second moments
};

template <class T>
OptimizerState<T> make_optimizer_state(const std::vector<Tensor<T>*>& params) {
  OptimizerState<T> s;
  for (const Tensor<T>* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

// Decoupled weight decay p ← p·(1 − lr·wd), then the bias-corrected Adam update.
template <class T>
void adamw_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads,
                OptimizerState<T>& state, double lr, const TrainConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size()) {
    throw DimensionError("adamw_step: parameter, gradient and state counts differ");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = grads[i];
    if (p.shape() != g.shape() || p.shape() != state.m[i].shape()) {
      throw DimensionError("adamw_step: shape mismatch at parameter " + std::to_string(i));
    }
    T* pm = state.m[i].data();
    T* pv = state.v[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] *= decay;
      pm[k] = b1 * pm[k] + (T(1) - b1) * g[k];
      pv[k] = b2 * pv[k] + (T(1) - b2) * g[k] * g[k];
      const double mhat = static_cast<double>(pm[k]) / c1;
      const double vhat = static_cast<double>(pv[k]) / c2;
      p[k] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

template <class T>
double global_norm(const std::vector<Tensor<T>>& grads) {
  double s = 0;
  for (const auto& g : grads)
    for (T x : g.values()) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

// Rescales all gradients by max_norm/g when the global L2 norm g exceeds
// max_norm. Returns the norm before clipping.
template <class T>
double clip_grad_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  if (!(max_norm > 0)) throw InvalidValueError("clip_grad_norm: max_norm must be > 0");
  const double g = global_norm(grads);
  if (g > max_norm) {
    const T scale = static_cast<T>(max_norm / g);
    for (auto& t : grads)
      for (T& x : t.values()) x *= scale;
  }
  return g;
}

}  // namespace flare
