#pragma once

// Run configuration. Every tunable lives in one registry of dotted keys so
// the JSON config loader, the command-line override parser, and --help all
// agree on what exists; an unknown key is rejected instead of ignored.

#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "retainkv/backbone.hpp"
#include "retainkv/common.hpp"
#include "retainkv/eviction.hpp"
#include "retainkv/harness.hpp"
#include "retainkv/heads.hpp"

namespace retainkv {

struct TaskConfig {
  size_t haystack_len = 10240;
  size_t needle_len = 4;
  long long needle_pos = -1;
  size_t count = 64;   // dataset size for gen-data
  size_t trials = 50;  // instances per passkey-eval row
  std::vector<size_t> budgets;
  size_t max_new = 0;  // decode length for infer
  size_t lq = 0;       // query-aware prefix length at inference
  size_t consistency_points = 8;
  std::string init = "random";  // init-model: random | matched_filter
  double match_gain = 12.0;
  std::vector<size_t> ns_values = {0, 32, 128, 512};
  size_t ablation_seeds = 10;

  PasskeyConfig passkey() const {
    PasskeyConfig p;
    p.haystack_len = haystack_len;
    p.needle_len = needle_len;
    p.needle_pos = needle_pos;
    p.count = count;
    return p;
  }
};

struct IoConfig {
  std::string model_file;
  std::string heads_file;
  std::string dataset_file;
  std::string tokens_file;
  std::string out_file;
  std::string trace_file;
};

struct RunConfig {
  ModelConfig model;
  TrainingConfig training;
  EvictionConfig eviction;
  TaskConfig task;
  IoConfig io;
  uint64_t seed = 1;
};

namespace detail {

inline uint64_t as_uint(const nlohmann::json& j, const std::string& key) {
  if (j.is_number_unsigned()) return j.get<uint64_t>();
  if (j.is_number_integer() && j.get<int64_t>() >= 0)
    return static_cast<uint64_t>(j.get<int64_t>());
  throw ConfigError("config key '" + key + "' wants a non-negative integer");
}

inline int64_t as_int(const nlohmann::json& j, const std::string& key) {
  if (j.is_number_integer() || j.is_number_unsigned())
    return j.get<int64_t>();
  throw ConfigError("config key '" + key + "' wants an integer");
}

inline double as_double(const nlohmann::json& j, const std::string& key) {
  if (j.is_number()) return j.get<double>();
  throw ConfigError("config key '" + key + "' wants a number");
}

inline bool as_bool(const nlohmann::json& j, const std::string& key) {
  if (j.is_boolean()) return j.get<bool>();
  throw ConfigError("config key '" + key + "' wants true or false");
}

inline std::string as_string(const nlohmann::json& j, const std::string& key) {
  if (j.is_string()) return j.get<std::string>();
  throw ConfigError("config key '" + key + "' wants a string");
}

inline std::vector<size_t> as_uint_array(const nlohmann::json& j,
                                         const std::string& key) {
  if (!j.is_array())
    throw ConfigError("config key '" + key +
                      "' wants an array of non-negative integers");
  std::vector<size_t> out;
  out.reserve(j.size());
  for (const auto& e : j) out.push_back(static_cast<size_t>(as_uint(e, key)));
  return out;
}

}  // namespace detail

struct ConfigKey {
  const char* name;
  const char* desc;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
  std::function<nlohmann::json(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_registry() {
  using nlohmann::json;
  static const std::vector<ConfigKey> reg = {
      {"seed", "global seed for model init, data generation and training",
       [](RunConfig& c, const json& j) {
         c.seed = detail::as_uint(j, "seed");
       },
       [](const RunConfig& c) { return json(c.seed); }},

      {"model.L", "transformer layers",
       [](RunConfig& c, const json& j) {
         c.model.L = detail::as_uint(j, "model.L");
       },
       [](const RunConfig& c) { return json(c.model.L); }},
      {"model.h", "query heads",
       [](RunConfig& c, const json& j) {
         c.model.h = detail::as_uint(j, "model.h");
       },
       [](const RunConfig& c) { return json(c.model.h); }},
      {"model.g", "query heads per KV head",
       [](RunConfig& c, const json& j) {
         c.model.g = detail::as_uint(j, "model.g");
       },
       [](const RunConfig& c) { return json(c.model.g); }},
      {"model.d_m", "per-head query width",
       [](RunConfig& c, const json& j) {
         c.model.d_m = detail::as_uint(j, "model.d_m");
       },
       [](const RunConfig& c) { return json(c.model.d_m); }},
      {"model.d_kv", "per-head key/value width",
       [](RunConfig& c, const json& j) {
         c.model.d_kv = detail::as_uint(j, "model.d_kv");
       },
       [](const RunConfig& c) { return json(c.model.d_kv); }},
      {"model.d_model", "residual stream width",
       [](RunConfig& c, const json& j) {
         c.model.d_model = detail::as_uint(j, "model.d_model");
       },
       [](const RunConfig& c) { return json(c.model.d_model); }},
      {"model.d_ff", "feedforward width",
       [](RunConfig& c, const json& j) {
         c.model.d_ff = detail::as_uint(j, "model.d_ff");
       },
       [](const RunConfig& c) { return json(c.model.d_ff); }},
      {"model.vocab", "vocabulary size",
       [](RunConfig& c, const json& j) {
         c.model.vocab = detail::as_uint(j, "model.vocab");
       },
       [](const RunConfig& c) { return json(c.model.vocab); }},
      {"model.rope_theta", "rotary base",
       [](RunConfig& c, const json& j) {
         c.model.rope_theta = detail::as_double(j, "model.rope_theta");
       },
       [](const RunConfig& c) { return json(c.model.rope_theta); }},
      {"model.norm_eps", "rmsnorm epsilon",
       [](RunConfig& c, const json& j) {
         c.model.norm_eps = detail::as_double(j, "model.norm_eps");
       },
       [](const RunConfig& c) { return json(c.model.norm_eps); }},

      {"training.lr", "peak learning rate",
       [](RunConfig& c, const json& j) {
         c.training.lr = detail::as_double(j, "training.lr");
       },
       [](const RunConfig& c) { return json(c.training.lr); }},
      {"training.warmup_steps", "linear warmup steps",
       [](RunConfig& c, const json& j) {
         c.training.warmup_steps = detail::as_uint(j, "training.warmup_steps");
       },
       [](const RunConfig& c) { return json(c.training.warmup_steps); }},
      {"training.total_steps", "total optimizer steps",
       [](RunConfig& c, const json& j) {
         c.training.total_steps = detail::as_uint(j, "training.total_steps");
       },
       [](const RunConfig& c) { return json(c.training.total_steps); }},
      {"training.alpha", "smoothness penalty weight",
       [](RunConfig& c, const json& j) {
         c.training.alpha = detail::as_double(j, "training.alpha");
       },
       [](const RunConfig& c) { return json(c.training.alpha); }},
      {"training.d_R", "retaining head hidden width",
       [](RunConfig& c, const json& j) {
         c.training.d_R = detail::as_uint(j, "training.d_R");
       },
       [](const RunConfig& c) { return json(c.training.d_R); }},
      {"training.seq_cap", "training sequence length cap",
       [](RunConfig& c, const json& j) {
         c.training.seq_cap = detail::as_uint(j, "training.seq_cap");
       },
       [](const RunConfig& c) { return json(c.training.seq_cap); }},
      {"training.label_scaling", "divide labels by sqrt(d_m)",
       [](RunConfig& c, const json& j) {
         c.training.label_scaling = detail::as_bool(j, "training.label_scaling");
       },
       [](const RunConfig& c) { return json(c.training.label_scaling); }},
      {"training.loss_mean", "average the loss instead of summing",
       [](RunConfig& c, const json& j) {
         c.training.loss_mean = detail::as_bool(j, "training.loss_mean");
       },
       [](const RunConfig& c) { return json(c.training.loss_mean); }},
      {"training.lq", "query-aware prefix length during training",
       [](RunConfig& c, const json& j) {
         c.training.lq = detail::as_uint(j, "training.lq");
       },
       [](const RunConfig& c) { return json(c.training.lq); }},

      {"eviction.b", "retained cache entries per head",
       [](RunConfig& c, const json& j) {
         c.eviction.b = detail::as_uint(j, "eviction.b");
       },
       [](const RunConfig& c) { return json(c.eviction.b); }},
      {"eviction.B", "prefill chunk length",
       [](RunConfig& c, const json& j) {
         c.eviction.B = detail::as_uint(j, "eviction.B");
       },
       [](const RunConfig& c) { return json(c.eviction.B); }},
      {"eviction.n_s", "stabilizers kept per eviction step",
       [](RunConfig& c, const json& j) {
         c.eviction.n_s = detail::as_uint(j, "eviction.n_s");
       },
       [](const RunConfig& c) { return json(c.eviction.n_s); }},
      {"eviction.n_loc", "trailing tokens exempt from eviction",
       [](RunConfig& c, const json& j) {
         c.eviction.n_loc = detail::as_uint(j, "eviction.n_loc");
       },
       [](const RunConfig& c) { return json(c.eviction.n_loc); }},
      {"eviction.policy",
       "locret | locret_q | random | sink_recent | h2o_sum | snapkv_window | "
       "sirllm_entropy",
       [](RunConfig& c, const json& j) {
         c.eviction.policy = parse_policy(detail::as_string(j, "eviction.policy"));
       },
       [](const RunConfig& c) { return json(policy_name(c.eviction.policy)); }},
      {"eviction.sink_len", "positions treated as attention sinks",
       [](RunConfig& c, const json& j) {
         c.eviction.sink_len = detail::as_uint(j, "eviction.sink_len");
       },
       [](const RunConfig& c) { return json(c.eviction.sink_len); }},
      {"eviction.recent_len", "recency window recorded with the run",
       [](RunConfig& c, const json& j) {
         c.eviction.recent_len = detail::as_uint(j, "eviction.recent_len");
       },
       [](const RunConfig& c) { return json(c.eviction.recent_len); }},
      {"eviction.snapkv_w", "observation window width",
       [](RunConfig& c, const json& j) {
         c.eviction.snapkv_w = detail::as_uint(j, "eviction.snapkv_w");
       },
       [](const RunConfig& c) { return json(c.eviction.snapkv_w); }},
      {"eviction.destructive_stabilizers",
       "write stabilizer protection into stored scores",
       [](RunConfig& c, const json& j) {
         c.eviction.destructive_stabilizers =
             detail::as_bool(j, "eviction.destructive_stabilizers");
       },
       [](const RunConfig& c) {
         return json(c.eviction.destructive_stabilizers);
       }},
      {"eviction.seed", "seed for the random scoring policy",
       [](RunConfig& c, const json& j) {
         c.eviction.seed = detail::as_uint(j, "eviction.seed");
       },
       [](const RunConfig& c) { return json(c.eviction.seed); }},

      {"task.haystack_len", "prompt length of generated instances",
       [](RunConfig& c, const json& j) {
         c.task.haystack_len = detail::as_uint(j, "task.haystack_len");
       },
       [](const RunConfig& c) { return json(c.task.haystack_len); }},
      {"task.needle_len", "passkey digits per instance",
       [](RunConfig& c, const json& j) {
         c.task.needle_len = detail::as_uint(j, "task.needle_len");
       },
       [](const RunConfig& c) { return json(c.task.needle_len); }},
      {"task.needle_pos", "fixed needle position, or -1 for uniform",
       [](RunConfig& c, const json& j) {
         c.task.needle_pos = detail::as_int(j, "task.needle_pos");
       },
       [](const RunConfig& c) { return json(c.task.needle_pos); }},
      {"task.count", "examples generated by gen-data",
       [](RunConfig& c, const json& j) {
         c.task.count = detail::as_uint(j, "task.count");
       },
       [](const RunConfig& c) { return json(c.task.count); }},
      {"task.trials", "instances per passkey-eval budget",
       [](RunConfig& c, const json& j) {
         c.task.trials = detail::as_uint(j, "task.trials");
       },
       [](const RunConfig& c) { return json(c.task.trials); }},
      {"task.budgets", "cache budgets swept by passkey-eval",
       [](RunConfig& c, const json& j) {
         c.task.budgets = detail::as_uint_array(j, "task.budgets");
       },
       [](const RunConfig& c) { return json(c.task.budgets); }},
      {"task.max_new", "tokens decoded by infer",
       [](RunConfig& c, const json& j) {
         c.task.max_new = detail::as_uint(j, "task.max_new");
       },
       [](const RunConfig& c) { return json(c.task.max_new); }},
      {"task.lq", "query-aware prefix length at inference",
       [](RunConfig& c, const json& j) {
         c.task.lq = detail::as_uint(j, "task.lq");
       },
       [](const RunConfig& c) { return json(c.task.lq); }},
      {"task.consistency_points", "prefix lengths sampled by consistency",
       [](RunConfig& c, const json& j) {
         c.task.consistency_points =
             detail::as_uint(j, "task.consistency_points");
       },
       [](const RunConfig& c) { return json(c.task.consistency_points); }},
      {"task.init", "init-model mode: random | matched_filter",
       [](RunConfig& c, const json& j) {
         c.task.init = detail::as_string(j, "task.init");
       },
       [](const RunConfig& c) { return json(c.task.init); }},
      {"task.match_gain", "matched-filter attention gain",
       [](RunConfig& c, const json& j) {
         c.task.match_gain = detail::as_double(j, "task.match_gain");
       },
       [](const RunConfig& c) { return json(c.task.match_gain); }},
      {"task.ns_values", "stabilizer counts swept by ablate-stabilizers",
       [](RunConfig& c, const json& j) {
         c.task.ns_values = detail::as_uint_array(j, "task.ns_values");
       },
       [](const RunConfig& c) { return json(c.task.ns_values); }},
      {"task.ablation_seeds", "prompts per ablation cell",
       [](RunConfig& c, const json& j) {
         c.task.ablation_seeds = detail::as_uint(j, "task.ablation_seeds");
       },
       [](const RunConfig& c) { return json(c.task.ablation_seeds); }},

      {"io.model_file", "backbone weights path",
       [](RunConfig& c, const json& j) {
         c.io.model_file = detail::as_string(j, "io.model_file");
       },
       [](const RunConfig& c) { return json(c.io.model_file); }},
      {"io.heads_file", "retaining head weights path",
       [](RunConfig& c, const json& j) {
         c.io.heads_file = detail::as_string(j, "io.heads_file");
       },
       [](const RunConfig& c) { return json(c.io.heads_file); }},
      {"io.dataset_file", "training dataset path (jsonl)",
       [](RunConfig& c, const json& j) {
         c.io.dataset_file = detail::as_string(j, "io.dataset_file");
       },
       [](const RunConfig& c) { return json(c.io.dataset_file); }},
      {"io.tokens_file", "prompt tokens path (json array)",
       [](RunConfig& c, const json& j) {
         c.io.tokens_file = detail::as_string(j, "io.tokens_file");
       },
       [](const RunConfig& c) { return json(c.io.tokens_file); }},
      {"io.out_file", "report output path",
       [](RunConfig& c, const json& j) {
         c.io.out_file = detail::as_string(j, "io.out_file");
       },
       [](const RunConfig& c) { return json(c.io.out_file); }},
      {"io.trace_file", "eviction trace output path (csv)",
       [](RunConfig& c, const json& j) {
         c.io.trace_file = detail::as_string(j, "io.trace_file");
       },
       [](const RunConfig& c) { return json(c.io.trace_file); }},
  };
  return reg;
}

inline const ConfigKey* find_config_key(const std::string& name) {
  for (const auto& k : config_registry())
    if (name == k.name) return &k;
  return nullptr;
}

inline void apply_config_value(RunConfig& cfg, const std::string& key,
                               const nlohmann::json& value) {
  const ConfigKey* k = find_config_key(key);
  if (!k) throw ConfigError("unknown config key '" + key + "'");
  k->set(cfg, value);
}

// Accepts nested sections ({"model": {"L": 4}}) and dotted keys
// ({"model.L": 4}) interchangeably.
inline void apply_config_json(RunConfig& cfg, const nlohmann::json& obj,
                              const std::string& prefix = "") {
  if (!obj.is_object())
    throw ConfigError("config must be a JSON object" +
                      (prefix.empty() ? "" : " at '" + prefix + "'"));
  for (const auto& [key, value] : obj.items()) {
    const std::string full = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object() && !find_config_key(full))
      apply_config_json(cfg, value, full);
    else
      apply_config_value(cfg, full, value);
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
  apply_config_json(cfg, j);
}

// A command-line override value is parsed as JSON when possible, else taken
// as a bare string, so --eviction.b 128 and --eviction.policy locret both
// work.
inline void apply_config_override(RunConfig& cfg, const std::string& key,
                                  const std::string& value) {
  nlohmann::json j = nlohmann::json::parse(value, nullptr, false);
  if (j.is_discarded()) j = value;
  apply_config_value(cfg, key, j);
}

inline nlohmann::ordered_json config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json out;
  for (const auto& k : config_registry()) {
    const std::string name = k.name;
    const auto dot = name.find('.');
    if (dot == std::string::npos)
      out[name] = k.get(cfg);
    else
      out[name.substr(0, dot)][name.substr(dot + 1)] = k.get(cfg);
  }
  return out;
}

// Flat key=value pairs for CSV headers, filtered to the given section
// prefixes (empty filter echoes everything).
inline ConfigEcho echo_config(const RunConfig& cfg,
                              const std::vector<std::string>& sections = {}) {
  ConfigEcho echo;
  for (const auto& k : config_registry()) {
    const std::string name = k.name;
    if (!sections.empty()) {
      bool keep = false;
      for (const auto& s : sections)
        if (name == s || name.rfind(s + ".", 0) == 0) keep = true;
      if (!keep) continue;
    }
    nlohmann::json v = k.get(cfg);
    echo.emplace_back(name, v.is_string() ? v.get<std::string>() : v.dump());
  }
  return echo;
}

}  // namespace retainkv
