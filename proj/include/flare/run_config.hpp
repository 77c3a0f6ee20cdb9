#pragma once

// Flat dotted-key run configuration shared by the CLI commands.
//
// Resolution order: defaults < config file < FLARE_SEED < command-line flags.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flare/errors.hpp"
#include "flare/model.hpp"
#include "flare/optim.hpp"

namespace flare {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  // d_in/d_out come from the data; when set here they must agree with it.
  std::optional<std::size_t> d_in;
  std::optional<std::size_t> d_out;
  std::string data_dir;
  std::string out_dir;

  RunConfig() {
    model.blocks = 2;
    model.channels = 32;
    model.heads = 8;
    model.latents = 32;
    train.batch_size = 4;
  }
};

namespace detail {

struct ConfigField {
  std::string key;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
  std::function<nlohmann::json(const RunConfig&)> get;
};

inline ConfigError bad_type(const std::string& key, const char* want, const nlohmann::json& v) {
  return ConfigError("config key \"" + key + "\" expects " + want + ", got " + v.dump());
}

template <class Member>
ConfigField count_field(std::string key, Member member) {
  return {key,
          [=](RunConfig& c, const nlohmann::json& v) {
            if (!v.is_number_unsigned()) throw bad_type(key, "a non-negative integer", v);
            const auto x = v.get<std::uint64_t>();
            member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(x);
          },
          [=](const RunConfig& c) { return nlohmann::json(member(c)); }};
}

template <class Member>
ConfigField real_field(std::string key, Member member) {
  return {key,
          [=](RunConfig& c, const nlohmann::json& v) {
            if (!v.is_number()) throw bad_type(key, "a number", v);
            member(c) = v.get<double>();
          },
          [=](const RunConfig& c) { return nlohmann::json(member(c)); }};
}

inline const std::vector<ConfigField>& config_fields() {
  using C = RunConfig;
  static const std::vector<ConfigField> fields = {
      count_field("model.blocks", [](auto& c) -> auto& { return c.model.blocks; }),
      count_field("model.channels", [](auto& c) -> auto& { return c.model.channels; }),
      count_field("model.heads", [](auto& c) -> auto& { return c.model.heads; }),
      count_field("model.latents", [](auto& c) -> auto& { return c.model.latents; }),
      count_field("model.kv_layers", [](auto& c) -> auto& { return c.model.kv_layers; }),
      count_field("model.mlp_layers", [](auto& c) -> auto& { return c.model.mlp_layers; }),
      count_field("model.io_layers", [](auto& c) -> auto& { return c.model.io_layers; }),
      real_field("model.layer_norm_eps", [](auto& c) -> auto& { return c.model.layer_norm_eps; }),
      count_field("model.seed", [](auto& c) -> auto& { return c.model.seed; }),
      {"model.mixer_enabled",
       [](C& c, const nlohmann::json& v) {
         if (!v.is_boolean()) throw bad_type("model.mixer_enabled", "a boolean", v);
         c.model.mixer_enabled = v.get<bool>();
       },
       [](const C& c) { return nlohmann::json(c.model.mixer_enabled); }},
      {"model.d_in",
       [](C& c, const nlohmann::json& v) {
         if (!v.is_number_unsigned() || v.get<std::uint64_t>() == 0)
           throw bad_type("model.d_in", "a positive integer", v);
         c.d_in = v.get<std::size_t>();
       },
       [](const C& c) { return c.d_in ? nlohmann::json(*c.d_in) : nlohmann::json(nullptr); }},
      {"model.d_out",
       [](C& c, const nlohmann::json& v) {
         if (!v.is_number_unsigned() || v.get<std::uint64_t>() == 0)
           throw bad_type("model.d_out", "a positive integer", v);
         c.d_out = v.get<std::size_t>();
       },
       [](const C& c) { return c.d_out ? nlohmann::json(*c.d_out) : nlohmann::json(nullptr); }},
      count_field("train.epochs", [](auto& c) -> auto& { return c.train.epochs; }),
      count_field("train.batch_size", [](auto& c) -> auto& { return c.train.batch_size; }),
      real_field("train.lr_max", [](auto& c) -> auto& { return c.train.lr_max; }),
      real_field("train.warmup_frac", [](auto& c) -> auto& { return c.train.warmup_frac; }),
      real_field("train.weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; }),
      real_field("train.beta1", [](auto& c) -> auto& { return c.train.beta1; }),
      real_field("train.beta2", [](auto& c) -> auto& { return c.train.beta2; }),
      real_field("train.adam_eps", [](auto& c) -> auto& { return c.train.adam_eps; }),
      real_field("train.clip_max_norm", [](auto& c) -> auto& { return c.train.clip_max_norm; }),
      count_field("train.seed", [](auto& c) -> auto& { return c.train.seed; }),
      {"train.precision",
       [](C& c, const nlohmann::json& v) {
         if (!v.is_string()) throw bad_type("train.precision", "a string", v);
         c.train.precision = parse_precision(v.get<std::string>());
       },
       [](const C& c) { return nlohmann::json(to_string(c.train.precision)); }},
      count_field("train.checkpoint_every", [](auto& c) -> auto& { return c.train.checkpoint_every; }),
      {"data.dir",
       [](C& c, const nlohmann::json& v) {
         if (!v.is_string()) throw bad_type("data.dir", "a string", v);
         c.data_dir = v.get<std::string>();
       },
       [](const C& c) { return nlohmann::json(c.data_dir); }},
      {"out.dir",
       [](C& c, const nlohmann::json& v) {
         if (!v.is_string()) throw bad_type("out.dir", "a string", v);
         c.out_dir = v.get<std::string>();
       },
       [](const C& c) { return nlohmann::json(c.out_dir); }},
  };
  return fields;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::config_fields()) keys.push_back(f.key);
  return keys;
}

inline void set_config_value(RunConfig& c, const std::string& key, const nlohmann::json& value) {
  for (const auto& f : detail::config_fields()) {
    if (f.key == key) {
      f.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key \"" + key + "\"");
}

// Applies a flat JSON object of dotted keys. Nested objects are rejected.
inline void apply_config_json(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object of dotted keys");
  for (const auto& [key, value] : j.items()) set_config_value(c, key, value);
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  apply_config_json(c, j);
}

// "key=value"; value is parsed as JSON, falling back to a bare string.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override \"" + assignment + "\" is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  set_config_value(c, key, value);
}

inline std::uint64_t parse_seed(const std::string& s, const std::string& origin) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (s.empty() || pos != s.size() || s.front() == '-') {
    throw ConfigError(origin + " must be a non-negative integer, got \"" + s + "\"");
  }
  return v;
}

inline void set_seed(RunConfig& c, std::uint64_t seed) {
  c.model.seed = seed;
  c.train.seed = seed;
}

// FLARE_SEED, when present, sets both seeds.
inline void apply_seed_env(RunConfig& c) {
  if (const char* env = std::getenv("FLARE_SEED")) set_seed(c, parse_seed(env, "FLARE_SEED"));
}

inline nlohmann::json resolved_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : detail::config_fields()) j[f.key] = f.get(c);
  return j;
}

// Fills d_in/d_out from the data and validates the whole configuration.
inline void finalize_config(RunConfig& c, std::size_t data_d_in, std::size_t data_d_out) {
  if (c.d_in && *c.d_in != data_d_in) {
    throw ConfigError("model.d_in = " + std::to_string(*c.d_in) + " but the data has " +
                      std::to_string(data_d_in) + " input features");
  }
  if (c.d_out && *c.d_out != data_d_out) {
    throw ConfigError("model.d_out = " + std::to_string(*c.d_out) + " but the data has " +
                      std::to_string(data_d_out) + " label features");
  }
  c.model.d_in = data_d_in;
  c.model.d_out = data_d_out;
  c.d_in = data_d_in;
  c.d_out = data_d_out;
  c.model.validate();
  c.train.validate();
}

}  // namespace flare
