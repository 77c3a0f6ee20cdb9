#pragma once

// ResMLP, FLARE layer/block, and the full B-block network.
//
// Parameter structs are templated on their leaf type so one layout serves
// both stored weights (Tensor<T>) and tape handles (Var<T>).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "flare/autodiff.hpp"
#include "flare/errors.hpp"
#include "flare/mixer.hpp"
#include "flare/tensor.hpp"

namespace flare {

struct ResMLPConfig {
  std::size_t c_in = 1;
  std::size_t c_hidden = 1;
  std::size_t c_out = 1;
  std::size_t n_layers = 0;
  bool input_residual = false;
  bool output_residual = false;

  void validate() const {
    if (c_in == 0 || c_hidden == 0 || c_out == 0) {
      throw ConfigError("ResMLP widths must be positive");
    }
    if (input_residual && c_in != c_hidden) {
      throw ConfigError("ResMLP input residual needs c_in == c_hidden (" +
                        std::to_string(c_in) + " vs " + std::to_string(c_hidden) + ")");
    }
    if (output_residual && c_hidden != c_out) {
      throw ConfigError("ResMLP output residual needs c_hidden == c_out (" +
                        std::to_string(c_hidden) + " vs " + std::to_string(c_out) + ")");
    }
  }
};

struct ModelConfig {
  std::size_t blocks = 1;
  std::size_t channels = 64;
  std::size_t heads = 8;
  std::size_t latents = 64;
  std::size_t d_in = 2;
  std::size_t d_out = 1;
  std::size_t kv_layers = 3;
  std::size_t mlp_layers = 3;
  std::size_t io_layers = 2;
  double layer_norm_eps = 1e-5;
  std::uint64_t seed = 0;
  // Ablation switch: when false the token-mixing sublayer contributes zero.
  bool mixer_enabled = true;

  void validate() const {
    if (blocks == 0) throw ConfigError("model.blocks must be >= 1");
    if (latents == 0) throw ConfigError("model.latents must be >= 1");
    if (channels == 0) throw ConfigError("model.channels must be >= 1");
    if (d_in == 0 || d_out == 0) throw ConfigError("model.d_in and model.d_out must be >= 1");
    if (!(layer_norm_eps > 0)) throw ConfigError("model.layer_norm_eps must be > 0");
    head_dim(channels, heads);
  }

  std::size_t head_width() const { return head_dim(channels, heads); }

  ResMLPConfig input_projection() const {
    return {d_in, channels, channels, io_layers, false, true};
  }
  ResMLPConfig output_projection() const {
    return {channels, channels, d_out, io_layers, true, false};
  }
  ResMLPConfig kv_projection() const {
    return {channels, channels, channels, kv_layers, true, true};
  }
  ResMLPConfig block_mlp() const {
    return {channels, channels, channels, mlp_layers, true, true};
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"blocks", c.blocks},         {"channels", c.channels},
                     {"heads", c.heads},           {"latents", c.latents},
                     {"d_in", c.d_in},             {"d_out", c.d_out},
                     {"kv_layers", c.kv_layers},   {"mlp_layers", c.mlp_layers},
                     {"io_layers", c.io_layers},   {"layer_norm_eps", c.layer_norm_eps},
                     {"seed", c.seed},             {"mixer_enabled", c.mixer_enabled}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("blocks").get_to(c.blocks);
  j.at("channels").get_to(c.channels);
  j.at("heads").get_to(c.heads);
  j.at("latents").get_to(c.latents);
  j.at("d_in").get_to(c.d_in);
  j.at("d_out").get_to(c.d_out);
  j.at("kv_layers").get_to(c.kv_layers);
  j.at("mlp_layers").get_to(c.mlp_layers);
  j.at("io_layers").get_to(c.io_layers);
  j.at("layer_norm_eps").get_to(c.layer_norm_eps);
  j.at("seed").get_to(c.seed);
  j.at("mixer_enabled").get_to(c.mixer_enabled);
}

template <class P>
struct LinearParams {
  P weight;  // [in×out]
  P bias;    // [out]
};

template <class P>
struct LayerNormParams {
  P gamma;
  P beta;
};

template <class P>
struct ResMLPParams {
  LinearParams<P> in;
  std::vector<LinearParams<P>> hidden;
  LinearParams<P> out;
};

template <class P>
struct MixerParams {
  P latent_queries;  // [M×C]
  ResMLPParams<P> key_proj;
  ResMLPParams<P> value_proj;
  LinearParams<P> out_proj;
};

template <class P>
struct BlockParams {
  LayerNormParams<P> mix_norm;
  MixerParams<P> mixer;
  LayerNormParams<P> mlp_norm;
  ResMLPParams<P> mlp;
};

template <class P>
struct ModelParams {
  ResMLPParams<P> input;
  std::vector<BlockParams<P>> blocks;
  LayerNormParams<P> output_norm;
  ResMLPParams<P> output;
};

namespace detail {

template <class S, template <class> class Tmpl>
struct is_instance : std::false_type {};
template <template <class> class Tmpl, class P>
struct is_instance<Tmpl<P>, Tmpl> : std::true_type {};
template <class S, template <class> class Tmpl>
inline constexpr bool is_instance_v = is_instance<std::remove_cv_t<S>, Tmpl>::value;

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace detail

// Calls f(name, leaf) for every leaf in a fixed canonical order. Works on
// const and mutable structs alike.
template <class S, class F>
void for_each_param(S& p, F&& f, const std::string& prefix = "") {
  using detail::join;
  if constexpr (detail::is_instance_v<S, LinearParams>) {
    f(join(prefix, "weight"), p.weight);
    f(join(prefix, "bias"), p.bias);
  } else if constexpr (detail::is_instance_v<S, LayerNormParams>) {
    f(join(prefix, "gamma"), p.gamma);
    f(join(prefix, "beta"), p.beta);
  } else if constexpr (detail::is_instance_v<S, ResMLPParams>) {
    for_each_param(p.in, f, join(prefix, "in"));
    for (std::size_t i = 0; i < p.hidden.size(); ++i)
      for_each_param(p.hidden[i], f, join(prefix, "hidden." + std::to_string(i)));
    for_each_param(p.out, f, join(prefix, "out"));
  } else if constexpr (detail::is_instance_v<S, MixerParams>) {
    f(join(prefix, "latent_queries"), p.latent_queries);
    for_each_param(p.key_proj, f, join(prefix, "key_proj"));
    for_each_param(p.value_proj, f, join(prefix, "value_proj"));
    for_each_param(p.out_proj, f, join(prefix, "out_proj"));
  } else if constexpr (detail::is_instance_v<S, BlockParams>) {
    for_each_param(p.mix_norm, f, join(prefix, "mix_norm"));
    for_each_param(p.mixer, f, join(prefix, "mixer"));
    for_each_param(p.mlp_norm, f, join(prefix, "mlp_norm"));
    for_each_param(p.mlp, f, join(prefix, "mlp"));
  } else if constexpr (detail::is_instance_v<S, ModelParams>) {
    for_each_param(p.input, f, join(prefix, "input"));
    for (std::size_t i = 0; i < p.blocks.size(); ++i)
      for_each_param(p.blocks[i], f, join(prefix, "blocks." + std::to_string(i)));
    for_each_param(p.output_norm, f, join(prefix, "output_norm"));
    for_each_param(p.output, f, join(prefix, "output"));
  } else {
    static_assert(sizeof(S) == 0, "for_each_param: unsupported parameter struct");
  }
}

// Structure-preserving transform: returns the same layout with every leaf
// replaced by f(name, leaf).
template <template <class> class S, class A, class F>
auto map_params(const S<A>& p, F&& f, const std::string& prefix = "") {
  using detail::join;
  using B = std::invoke_result_t<F&, const std::string&, const A&>;
  if constexpr (std::is_same_v<S<A>, LinearParams<A>>) {
    return LinearParams<B>{f(join(prefix, "weight"), p.weight), f(join(prefix, "bias"), p.bias)};
  } else if constexpr (std::is_same_v<S<A>, LayerNormParams<A>>) {
    return LayerNormParams<B>{f(join(prefix, "gamma"), p.gamma),
                              f(join(prefix, "beta"), p.beta)};
  } else if constexpr (std::is_same_v<S<A>, ResMLPParams<A>>) {
    ResMLPParams<B> out;
    out.in = map_params(p.in, f, join(prefix, "in"));
    for (std::size_t i = 0; i < p.hidden.size(); ++i)
      out.hidden.push_back(map_params(p.hidden[i], f, join(prefix, "hidden." + std::to_string(i))));
    out.out = map_params(p.out, f, join(prefix, "out"));
    return out;
  } else if constexpr (std::is_same_v<S<A>, MixerParams<A>>) {
    MixerParams<B> out;
    out.latent_queries = f(join(prefix, "latent_queries"), p.latent_queries);
    out.key_proj = map_params(p.key_proj, f, join(prefix, "key_proj"));
    out.value_proj = map_params(p.value_proj, f, join(prefix, "value_proj"));
    out.out_proj = map_params(p.out_proj, f, join(prefix, "out_proj"));
    return out;
  } else if constexpr (std::is_same_v<S<A>, BlockParams<A>>) {
    BlockParams<B> out;
    out.mix_norm = map_params(p.mix_norm, f, join(prefix, "mix_norm"));
    out.mixer = map_params(p.mixer, f, join(prefix, "mixer"));
    out.mlp_norm = map_params(p.mlp_norm, f, join(prefix, "mlp_norm"));
    out.mlp = map_params(p.mlp, f, join(prefix, "mlp"));
    return out;
  } else {
    static_assert(std::is_same_v<S<A>, ModelParams<A>>, "map_params: unsupported struct");
    ModelParams<B> out;
    out.input = map_params(p.input, f, join(prefix, "input"));
    for (std::size_t i = 0; i < p.blocks.size(); ++i)
      out.blocks.push_back(map_params(p.blocks[i], f, join(prefix, "blocks." + std::to_string(i))));
    out.output_norm = map_params(p.output_norm, f, join(prefix, "output_norm"));
    out.output = map_params(p.output, f, join(prefix, "output"));
    return out;
  }
}

template <template <class> class S, class T>
S<Var<T>> bind_leaves(Tape<T>& tape, const S<Tensor<T>>& p) {
  return map_params(p, [&](const std::string&, const Tensor<T>& t) { return tape.leaf(t); });
}

template <template <class> class S, class T>
S<Var<T>> bind_constants(Tape<T>& tape, const S<Tensor<T>>& p) {
  return map_params(p, [&](const std::string&, const Tensor<T>& t) { return tape.constant(t); });
}

template <template <class> class S, class T>
S<Tensor<T>> collect_grads(const Tape<T>& tape, const S<Var<T>>& p) {
  return map_params(p, [&](const std::string&, const Var<T>& v) { return tape.grad(v); });
}

template <class S>
std::size_t scalar_count(const S& p) {
  std::size_t n = 0;
  for_each_param(p, [&](const std::string&, const auto& t) { n += t.size(); });
  return n;
}

// ---------------------------------------------------------------------------
// Shapes and initialization.

template <class T>
LinearParams<Tensor<T>> make_linear(std::size_t in, std::size_t out) {
  return {Tensor<T>({in, out}), Tensor<T>({out})};
}

template <class T>
LayerNormParams<Tensor<T>> make_layer_norm(std::size_t c) {
  return {Tensor<T>({c}, T(1)), Tensor<T>({c})};
}

template <class T>
ResMLPParams<Tensor<T>> make_resmlp(const ResMLPConfig& cfg) {
  cfg.validate();
  ResMLPParams<Tensor<T>> p;
  p.in = make_linear<T>(cfg.c_in, cfg.c_hidden);
  for (std::size_t i = 0; i < cfg.n_layers; ++i)
    p.hidden.push_back(make_linear<T>(cfg.c_hidden, cfg.c_hidden));
  p.out = make_linear<T>(cfg.c_hidden, cfg.c_out);
  return p;
}

template <class T>
MixerParams<Tensor<T>> make_mixer(const ModelConfig& cfg) {
  return {Tensor<T>({cfg.latents, cfg.channels}), make_resmlp<T>(cfg.kv_projection()),
          make_resmlp<T>(cfg.kv_projection()), make_linear<T>(cfg.channels, cfg.channels)};
}

// Zero weights, unit LayerNorm gains; the layout of init_params without the draws.
template <class T>
ModelParams<Tensor<T>> make_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams<Tensor<T>> p;
  p.input = make_resmlp<T>(cfg.input_projection());
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    p.blocks.push_back({make_layer_norm<T>(cfg.channels), make_mixer<T>(cfg),
                        make_layer_norm<T>(cfg.channels), make_resmlp<T>(cfg.block_mlp())});
  }
  p.output_norm = make_layer_norm<T>(cfg.channels);
  p.output = make_resmlp<T>(cfg.output_projection());
  return p;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Weights and latent queries ~ N(0, 0.02²) truncated at ±2σ; biases 0;
// LayerNorm gamma 1, beta 0. Deterministic in (config, seed).
template <class T>
ModelParams<Tensor<T>> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  constexpr double kStd = 0.02;
  ModelParams<Tensor<T>> p = make_params<T>(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for_each_param(p, [&](const std::string& name, Tensor<T>& t) {
    if (ends_with(name, ".weight") || ends_with(name, "latent_queries")) {
      for (T& v : t.values()) {
        double z;
        do {
          z = normal(rng);
        } while (std::abs(z) > 2.0);
        v = static_cast<T>(kStd * z);
      }
    }
  });
  return p;
}

// ---------------------------------------------------------------------------
// Parameter counting.

inline std::size_t linear_count(std::size_t in, std::size_t out) { return in * out + out; }

inline std::size_t resmlp_count(const ResMLPConfig& c) {
  return linear_count(c.c_in, c.c_hidden) + c.n_layers * linear_count(c.c_hidden, c.c_hidden) +
         linear_count(c.c_hidden, c.c_out);
}

struct ParamBreakdown {
  std::size_t input_projection = 0;
  std::size_t mix_norm = 0;        // per block
  std::size_t latent_queries = 0;  // per block
  std::size_t key_proj = 0;        // per block
  std::size_t value_proj = 0;      // per block
  std::size_t out_proj = 0;        // per block
  std::size_t mlp_norm = 0;        // per block
  std::size_t block_mlp = 0;       // per block
  std::size_t per_block = 0;
  std::size_t blocks = 0;
  std::size_t output_norm = 0;
  std::size_t output_projection = 0;
  std::size_t total = 0;
};

inline ParamBreakdown param_breakdown(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels;
  ParamBreakdown b;
  b.input_projection = resmlp_count(cfg.input_projection());
  b.mix_norm = 2 * c;
  b.latent_queries = cfg.latents * c;
  b.key_proj = resmlp_count(cfg.kv_projection());
  b.value_proj = resmlp_count(cfg.kv_projection());
  b.out_proj = linear_count(c, c);
  b.mlp_norm = 2 * c;
  b.block_mlp = resmlp_count(cfg.block_mlp());
  b.per_block = b.mix_norm + b.latent_queries + b.key_proj + b.value_proj + b.out_proj +
                b.mlp_norm + b.block_mlp;
  b.blocks = cfg.blocks;
  b.output_norm = 2 * c;
  b.output_projection = resmlp_count(cfg.output_projection());
  b.total = b.input_projection + cfg.blocks * b.per_block + b.output_norm + b.output_projection;
  return b;
}

inline std::size_t param_count(const ModelConfig& cfg) { return param_breakdown(cfg).total; }

// ---------------------------------------------------------------------------
// Forward passes on the tape.

template <class T>
Var<T> linear_forward(Var<T> x, const LinearParams<Var<T>>& p) {
  return ad::linear(x, p.weight, p.bias);
}

// h = Linear_in(x) [+ x]; h ← h + gelu(Linear_i(h)) for each residual layer;
// y = Linear_out(h) [+ h].
template <class T>
Var<T> resmlp_forward(Var<T> x, const ResMLPParams<Var<T>>& p, const ResMLPConfig& cfg) {
  cfg.validate();
  if (x.value().cols() != cfg.c_in) {
    throw DimensionError("ResMLP: input width " + std::to_string(x.value().cols()) +
                         " but c_in = " + std::to_string(cfg.c_in));
  }
  if (p.hidden.size() != cfg.n_layers) {
    throw ConfigError("ResMLP: parameter set has " + std::to_string(p.hidden.size()) +
                      " residual layers, config expects " + std::to_string(cfg.n_layers));
  }
  Var<T> h = linear_forward(x, p.in);
  if (cfg.input_residual) h = ad::add(h, x);
  for (const auto& layer : p.hidden) h = ad::add(h, ad::gelu(linear_forward(h, layer)));
  Var<T> y = linear_forward(h, p.out);
  if (cfg.output_residual) y = ad::add(y, h);
  return y;
}

template <class T>
Var<T> layer_norm_forward(Var<T> x, const LayerNormParams<Var<T>>& p, double eps) {
  return ad::layer_norm(x, p.gamma, p.beta, static_cast<T>(eps));
}

// Key/value ResMLPs, FLARE mixing against the learned latent queries, head
// concatenation, and the output linear projection.
template <class T>
Var<T> flare_layer_forward(Var<T> x, const MixerParams<Var<T>>& p, const ModelConfig& cfg) {
  Var<T> k = resmlp_forward(x, p.key_proj, cfg.kv_projection());
  Var<T> v = resmlp_forward(x, p.value_proj, cfg.kv_projection());
  Var<T> y = ad::flare_mix(p.latent_queries, k, v, cfg.heads);
  return linear_forward(y, p.out_proj);
}

// Pre-norm block: x ← x + FLARE(LN(x)); x ← x + ResMLP(LN(x)).
template <class T>
Var<T> flare_block_forward(Var<T> x, const BlockParams<Var<T>>& p, const ModelConfig& cfg) {
  if (cfg.mixer_enabled) {
    x = ad::add(x, flare_layer_forward(layer_norm_forward(x, p.mix_norm, cfg.layer_norm_eps),
                                       p.mixer, cfg));
  }
  return ad::add(x, resmlp_forward(layer_norm_forward(x, p.mlp_norm, cfg.layer_norm_eps),
                                   p.mlp, cfg.block_mlp()));
}

template <class T>
Var<T> input_projection_forward(Var<T> x, const ResMLPParams<Var<T>>& p,
                                const ModelConfig& cfg) {
  return resmlp_forward(x, p, cfg.input_projection());
}

template <class T>
Var<T> output_projection_forward(Var<T> x, const LayerNormParams<Var<T>>& norm,
                                 const ResMLPParams<Var<T>>& p, const ModelConfig& cfg) {
  return resmlp_forward(layer_norm_forward(x, norm, cfg.layer_norm_eps), p,
                        cfg.output_projection());
}

// Input projection → B blocks → output projection.
template <class T>
Var<T> model_forward(Var<T> x, const ModelParams<Var<T>>& p, const ModelConfig& cfg) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != cfg.d_in) {
    throw ConfigError("model input " + shape_str(xv.shape()) + " does not match d_in = " +
                      std::to_string(cfg.d_in));
  }
  if (xv.rows() == 0) throw DimensionError("model input has no points");
  if (p.blocks.size() != cfg.blocks) {
    throw ConfigError("parameter set has " + std::to_string(p.blocks.size()) +
                      " blocks, config expects " + std::to_string(cfg.blocks));
  }
  Var<T> h = input_projection_forward(x, p.input, cfg);
  for (const auto& block : p.blocks) h = flare_block_forward(h, block, cfg);
  return output_projection_forward(h, p.output_norm, p.output, cfg);
}

// Gradient-free forward for inference.
template <class T>
Tensor<T> predict(const ModelParams<Tensor<T>>& params, const Tensor<T>& x,
                  const ModelConfig& cfg) {
  Tape<T> tape;
  auto p = bind_constants(tape, params);
  return model_forward(tape.constant(x), p, cfg).value();
}


// Leaves in canonical order, for the optimizer.
template <class T>
std::vector<Tensor<T>*> param_pointers(ModelParams<Tensor<T>>& p) {
  std::vector<Tensor<T>*> out;
  for_each_param(p, [&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

template <class T>
std::vector<Tensor<T>> flatten_params(ModelParams<Tensor<T>>&& p) {
  std::vector<Tensor<T>> out;
  for_each_param(p, [&](const std::string&, Tensor<T>& t) { out.push_back(std::move(t)); });
  return out;
}

template <class T>
struct MixerInputs {
  Tensor<T> queries;  // [M×C] latent queries
  Tensor<T> keys;     // [N×C] key projection of the normalized block input
};

// Runs the model up to block `block` and returns what its mixer sees.
template <class T>
MixerInputs<T> mixer_inputs(const ModelParams<Tensor<T>>& params, const Tensor<T>& x,
                            const ModelConfig& cfg, std::size_t block) {
  if (block >= cfg.blocks) {
    throw ConfigError("block index " + std::to_string(block) + " out of range for " +
                      std::to_string(cfg.blocks) + " blocks");
  }
  if (x.rank() != 2 || x.cols() != cfg.d_in) {
    throw ConfigError("model input " + shape_str(x.shape()) + " does not match d_in = " +
                      std::to_string(cfg.d_in));
  }
  Tape<T> tape;
  auto p = bind_constants(tape, params);
  Var<T> h = input_projection_forward(tape.constant(x), p.input, cfg);
  for (std::size_t b = 0; b < block; ++b) h = flare_block_forward(h, p.blocks[b], cfg);
  const auto& bp = p.blocks[block];
  Var<T> k = resmlp_forward(layer_norm_forward(h, bp.mix_norm, cfg.layer_norm_eps),
                            bp.mixer.key_proj, cfg.kv_projection());
  return {bp.mixer.latent_queries.value(), k.value()};
}

}  // namespace flare
