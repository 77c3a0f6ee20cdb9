#pragma once

// Training loop: per-sample relative L2 on denormalized predictions, batch
// mean, global-norm clipping, AdamW under the one-cycle schedule.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flare/autodiff.hpp"
#include "flare/checkpoint.hpp"
#include "flare/data.hpp"
#include "flare/errors.hpp"
#include "flare/model.hpp"
#include "flare/optim.hpp"

namespace flare {

// ‖pred − target‖₂ / ‖target‖₂ over the flattened arrays, in double.
template <class A, class B>
double relative_l2(const Tensor<A>& pred, const Tensor<B>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("relative_l2: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  double tn = 0, dn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double t = static_cast<double>(target[i]);
    const double d = static_cast<double>(pred[i]) - t;
    tn += t * t;
    dn += d * d;
  }
  if (!(tn > 0)) throw InvalidValueError("relative_l2: target has zero norm");
  return std::sqrt(dn) / std::sqrt(tn);
}

// Model inputs (normalized features) and raw targets for one split.
template <class T>
struct PreparedSplit {
  std::vector<Tensor<T>> inputs;
  std::vector<Tensor<T>> targets;
  std::size_t size() const { return inputs.size(); }
};

template <class T>
PreparedSplit<T> prepare_split(const Dataset& ds, const NormStats& stats) {
  PreparedSplit<T> out;
  for (const auto& s : ds) {
    out.inputs.push_back(normalize_columns<T>(s.features, stats.feature_mean, stats.feature_std));
    out.targets.push_back(s.labels.cast<T>());
  }
  return out;
}

template <class T>
std::vector<T> as_scalars(const std::vector<double>& v) {
  return std::vector<T>(v.begin(), v.end());
}

// Denormalized prediction on the tape.
template <class T>
Var<T> predict_physical(Var<T> x, const ModelParams<Var<T>>& p, const ModelConfig& cfg,
                        const NormStats& stats) {
  return ad::affine_columns(model_forward(x, p, cfg), as_scalars<T>(stats.label_std),
                            as_scalars<T>(stats.label_mean));
}

template <class T>
Tensor<T> predict_physical(const ModelParams<Tensor<T>>& params, const Tensor<T>& x,
                           const ModelConfig& cfg, const NormStats& stats) {
  return denormalize_columns(predict(params, x, cfg), stats.label_mean, stats.label_std);
}

// Per-sample relative L2 of the denormalized predictions.
template <class T>
std::vector<double> evaluate(const ModelParams<Tensor<T>>& params, const ModelConfig& cfg,
                             const PreparedSplit<T>& split, const NormStats& stats) {
  std::vector<double> out;
  for (std::size_t i = 0; i < split.size(); ++i)
    out.push_back(relative_l2(predict_physical(params, split.inputs[i], cfg, stats),
                              split.targets[i]));
  return out;
}

// Relative L2 of predicting the training label mean at every point.
template <class T>
std::vector<double> mean_baseline(const PreparedSplit<T>& split, const NormStats& stats) {
  std::vector<double> out;
  for (const auto& y : split.targets) {
    Tensor<double> pred(y.shape());
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < y.cols(); ++j) pred(i, j) = stats.label_mean[j];
    out.push_back(relative_l2(pred, y));
  }
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;          // learning rate of the epoch's last step
  double train_rel_l2 = 0;  // mean per-sample loss seen during the epoch
  double test_rel_l2 = 0;
  double seconds = 0;     // wall clock; not part of determinism comparisons
};

inline void to_json(nlohmann::json& j, const EpochMetrics& m) {
  j = nlohmann::json{{"epoch", m.epoch},
                     {"lr", m.lr},
                     {"train_rel_l2", m.train_rel_l2},
                     {"test_rel_l2", m.test_rel_l2},
                     {"seconds", m.seconds}};
}

inline void from_json(const nlohmann::json& j, EpochMetrics& m) {
  j.at("epoch").get_to(m.epoch);
  j.at("lr").get_to(m.lr);
  j.at("train_rel_l2").get_to(m.train_rel_l2);
  j.at("test_rel_l2").get_to(m.test_rel_l2);
  j.at("seconds").get_to(m.seconds);
}

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string seconds_str(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", s);
  return buf;
}

inline std::string run_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,lr,train_rel_l2,test_rel_l2,seconds\n";
  for (const auto& m : history) {
    out += std::to_string(m.epoch) + ',' + format_number(m.lr) + ',' +
           format_number(m.train_rel_l2) + ',' + format_number(m.test_rel_l2) + ',' +
           seconds_str(m.seconds) + '\n';
  }
  return out;
}

template <class T>
struct TrainState {
  ModelParams<Tensor<T>> params;
  OptimizerState<T> optimizer;
  std::size_t epoch = 0;  // completed epochs
  std::uint64_t schedule_step = 0;
  std::vector<EpochMetrics> history;
};

template <class T>
TrainState<T> initial_state(const ModelConfig& cfg) {
  TrainState<T> s;
  s.params = init_params<T>(cfg, cfg.seed);
  s.optimizer = make_optimizer_state(param_pointers(s.params));
  return s;
}

inline std::size_t steps_per_epoch(std::size_t n_train, std::size_t batch_size) {
  return (n_train + batch_size - 1) / batch_size;
}

// Training-set order for one epoch; depends only on (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Loss and summed gradients of a batch; each sample has its own tape and the
// gradients are reduced in batch order.
template <class T>
struct BatchResult {
  double loss = 0;  // mean over samples
  std::vector<double> sample_losses;
  std::vector<Tensor<T>> grads;
};

template <class T>
BatchResult<T> batch_gradients(const ModelParams<Tensor<T>>& params, const ModelConfig& cfg,
                               const PreparedSplit<T>& split,
                               const std::vector<std::size_t>& indices, const NormStats& stats) {
  if (indices.empty()) throw InvalidValueError("batch_gradients: empty batch");
  BatchResult<T> r;
  for (std::size_t idx : indices) {
    Tape<T> tape;
    auto p = bind_leaves(tape, params);
    Var<T> loss = ad::relative_l2(predict_physical(tape.constant(split.inputs[idx]), p, cfg, stats),
                                  split.targets[idx]);
    const double lv = static_cast<double>(loss.value()[0]);
    r.sample_losses.push_back(lv);
    if (!std::isfinite(lv)) return r;
    tape.backward(loss);
    std::vector<Tensor<T>> g = flatten_params(collect_grads(tape, p));
    if (r.grads.empty()) {
      r.grads = std::move(g);
    } else {
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t k = 0; k < g[i].size(); ++k) r.grads[i][k] += g[i][k];
    }
  }
  const T inv = T(1) / static_cast<T>(indices.size());
  for (auto& g : r.grads)
    for (T& v : g.values()) v *= inv;
  r.loss = mean_of(r.sample_losses);
  return r;
}

template <class T>
struct FitOptions {
  // Called after every completed epoch with the updated state.
  std::function<void(const TrainState<T>&)> on_epoch;
  // Stop once this many epochs are complete (0: run to cfg.epochs).
  std::size_t stop_after = 0;
};

// Continues training from `state` (fresh or resumed) up to cfg.epochs.
template <class T>
void fit(const ModelConfig& mcfg, const TrainConfig& tcfg, const PreparedSplit<T>& train,
         const PreparedSplit<T>& test, const NormStats& stats, TrainState<T>& state,
         const FitOptions<T>& opts = {}) {
  mcfg.validate();
  tcfg.validate();
  if (train.size() == 0) throw InvalidValueError("fit: empty training split");
  const std::size_t per_epoch = steps_per_epoch(train.size(), tcfg.batch_size);
  const std::size_t total = per_epoch * tcfg.epochs;
  const std::size_t last = opts.stop_after ? std::min(opts.stop_after, tcfg.epochs) : tcfg.epochs;
  if (state.schedule_step != state.epoch * per_epoch) {
    throw InvalidValueError("fit: schedule step " + std::to_string(state.schedule_step) +
                            " inconsistent with " + std::to_string(state.epoch) +
                            " completed epochs");
  }
  auto ptrs = param_pointers(state.params);

  for (std::size_t epoch = state.epoch; epoch < last; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(train.size(), tcfg.seed, epoch);
    std::vector<double> losses;
    double lr = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const auto first = order.begin() + static_cast<std::ptrdiff_t>(b * tcfg.batch_size);
      const auto end = order.begin() + static_cast<std::ptrdiff_t>(
                                           std::min(order.size(), (b + 1) * tcfg.batch_size));
      BatchResult<T> br = batch_gradients(state.params, mcfg, train, {first, end}, stats);
      for (double l : br.sample_losses) {
        if (!std::isfinite(l)) {
          throw TrainingError("non-finite loss " + format_number(l) + " at epoch " +
                              std::to_string(epoch + 1) + ", batch " + std::to_string(b + 1));
        }
      }
      losses.insert(losses.end(), br.sample_losses.begin(), br.sample_losses.end());
      clip_grad_norm(br.grads, tcfg.clip_max_norm);
      lr = onecycle_lr(state.schedule_step, total, tcfg);
      adamw_step(ptrs, br.grads, state.optimizer, lr, tcfg);
      ++state.schedule_step;
    }
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = lr;
    m.train_rel_l2 = mean_of(losses);
    m.test_rel_l2 = mean_of(evaluate(state.params, mcfg, test, stats));
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.history.push_back(m);
    state.epoch = epoch + 1;
    if (opts.on_epoch) opts.on_epoch(state);
  }
}

// ---------------------------------------------------------------------------
// Checkpoint bridging.

template <class T>
Checkpoint make_checkpoint(const ModelConfig& mcfg, const TrainConfig& tcfg,
                           const NormStats& stats, const TrainState<T>& state) {
  Checkpoint c;
  c.model = mcfg;
  c.schedule_step = state.schedule_step;
  c.run = {{"train", tcfg}, {"norm", stats}, {"epoch", state.epoch}, {"history", state.history}};
  c.params = named_tensors(state.params);
  c.optimizer = snapshot_optimizer(state.params, state.optimizer);
  return c;
}

template <class T>
TrainState<T> state_from_checkpoint(const Checkpoint& c) {
  TrainState<T> s;
  s.params = params_from_checkpoint<T>(c);
  if (c.optimizer) {
    s.optimizer = optimizer_from_snapshot<T>(c.model, *c.optimizer);
  } else {
    s.optimizer = make_optimizer_state(param_pointers(s.params));
  }
  s.schedule_step = c.schedule_step;
  try {
    s.epoch = c.run.value("epoch", std::size_t{0});
    if (c.run.contains("history")) c.run.at("history").get_to(s.history);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint run state is malformed: ") + e.what());
  }
  return s;
}

inline NormStats norm_from_checkpoint(const Checkpoint& c) {
  try {
    return c.run.at("norm").get<NormStats>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint has no normalization statistics: ") + e.what());
  }
}

inline TrainConfig train_config_from_checkpoint(const Checkpoint& c) {
  try {
    return c.run.at("train").get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint has no training config: ") + e.what());
  }
}

}  // namespace flare
