// Command-line front end. Every subcommand reads the same configuration
// surface: defaults, then --config FILE (JSON, nested or dotted keys), then
// per-key flags like --eviction.b 128. Numeric precision is chosen by the
// RETAINKV_PRECISION environment variable: "double" (default) or "single".
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 1 anything
// else. Errors are printed to stderr as a single JSON line.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "retainkv/backbone.hpp"
#include "retainkv/common.hpp"
#include "retainkv/config.hpp"
#include "retainkv/eviction.hpp"
#include "retainkv/harness.hpp"
#include "retainkv/heads.hpp"
#include "retainkv/selection.hpp"

namespace {

using namespace retainkv;
using nlohmann::ordered_json;

void emit_error(const char* kind, const std::string& message) {
  ordered_json err;
  err["error"]["kind"] = kind;
  err["error"]["message"] = message;
  std::cerr << err.dump() << "\n";
}

std::string hex64(uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

std::vector<int> read_tokens_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open tokens file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("tokens file '" + path + "': " + e.what());
  }
  if (!j.is_array())
    throw DataError("tokens file '" + path + "' must be a JSON array");
  std::vector<int> out;
  out.reserve(j.size());
  for (const auto& e : j) {
    if (!e.is_number_integer() && !e.is_number_unsigned())
      throw DataError("tokens file '" + path + "' holds a non-integer");
    out.push_back(e.get<int>());
  }
  return out;
}

void write_tokens_file(const std::string& path, const std::vector<int>& t) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f << nlohmann::json(t).dump() << "\n";
}

// Reports carry the full configuration so a result file is reproducible on
// its own. With io.out_file the report goes to that file and stdout gets a
// pointer; otherwise the report itself is printed.
void emit_report(const RunConfig& cfg, ordered_json body) {
  ordered_json out;
  out["config"] = config_to_json(cfg);
  for (auto& [k, v] : body.items()) out[k] = v;
  if (cfg.io.out_file.empty()) {
    std::cout << out.dump() << "\n";
  } else {
    std::ofstream f(cfg.io.out_file, std::ios::trunc);
    if (!f) throw DataError("cannot open '" + cfg.io.out_file + "' for writing");
    f << out.dump(2) << "\n";
    ordered_json note;
    note["written"] = cfg.io.out_file;
    std::cout << note.dump() << "\n";
  }
}

template <typename T>
Weights<T> cli_load_model(const RunConfig& cfg) {
  if (cfg.io.model_file.empty())
    throw ConfigError("io.model_file is required");
  return load_weights<T>(cfg.model, cfg.io.model_file);
}

template <typename T>
HeadSet<T> cli_load_heads(const RunConfig& cfg) {
  if (cfg.io.heads_file.empty())
    throw ConfigError("io.heads_file is required for policy '" +
                      policy_name(cfg.eviction.policy) + "'");
  return load_headset<T>(cfg.model, cfg.io.heads_file);
}

// Query-aware runs copy the prompt's last task.lq tokens to the front and
// pin them in cache.
std::vector<int> maybe_query_prefix(const RunConfig& cfg,
                                    const std::vector<int>& tokens,
                                    size_t& protect_prefix) {
  protect_prefix = 0;
  if (cfg.eviction.policy != PolicyKind::locret_q || cfg.task.lq == 0)
    return tokens;
  TrainingExample ex{tokens, {}};
  protect_prefix = std::min(cfg.task.lq, tokens.size());
  return make_query_aware_example(ex, cfg.task.lq).prompt;
}

std::vector<int> prompt_for_measurement(const RunConfig& cfg) {
  if (!cfg.io.tokens_file.empty()) return read_tokens_file(cfg.io.tokens_file);
  MatchedFilterLayout layout(cfg.model.vocab);
  Rng rng(cfg.seed);
  return gen_passkey(layout, cfg.task.passkey(), rng).prompt;
}

template <typename T>
int cmd_gen_data(const RunConfig& cfg) {
  cfg.model.validate();
  if (cfg.io.dataset_file.empty())
    throw ConfigError("io.dataset_file is required");
  MatchedFilterLayout layout(cfg.model.vocab);
  Dataset ds = make_passkey_dataset(layout, cfg.task.passkey(), cfg.seed);
  save_dataset_jsonl(ds, cfg.io.dataset_file);
  if (!cfg.io.tokens_file.empty())
    write_tokens_file(cfg.io.tokens_file, ds.front().prompt);
  ordered_json body;
  body["examples"] = ds.size();
  body["prompt_len"] = ds.front().prompt.size();
  body["file"] = cfg.io.dataset_file;
  emit_report(cfg, std::move(body));
  return 0;
}

template <typename T>
int cmd_init_model(const RunConfig& cfg) {
  if (cfg.io.model_file.empty())
    throw ConfigError("io.model_file is required");
  Weights<T> w;
  if (cfg.task.init == "random")
    w = init_random<T>(cfg.model, cfg.seed);
  else if (cfg.task.init == "matched_filter")
    w = build_matched_filter<T>(cfg.model, cfg.task.match_gain);
  else
    throw ConfigError("task.init must be 'random' or 'matched_filter'");
  save_weights(w, cfg.io.model_file);
  ordered_json body;
  body["file"] = cfg.io.model_file;
  body["weights_hash"] = hex64(weights_hash(w));
  emit_report(cfg, std::move(body));
  return 0;
}

template <typename T>
int cmd_train_head(const RunConfig& cfg) {
  if (cfg.io.dataset_file.empty())
    throw ConfigError("io.dataset_file is required");
  if (cfg.io.heads_file.empty())
    throw ConfigError("io.heads_file is required");
  Weights<T> w = cli_load_model<T>(cfg);
  Dataset ds = load_dataset_jsonl(cfg.io.dataset_file);
  const uint64_t hash_before = weights_hash(w);
  HeadSet<T> heads = init_headset<T>(cfg.model, cfg.training.d_R, cfg.seed);
  TrainResult<T> res =
      train_headset(w, cfg.model, cfg.training, ds, heads, cfg.seed);
  const uint64_t hash_after = weights_hash(w);
  if (hash_before != hash_after)
    throw std::runtime_error("backbone weights changed during head training");
  save_headset(heads, cfg.io.heads_file);

  const auto& curve = res.loss_curve;
  const size_t k = std::min<size_t>(10, curve.size());
  double first = 0.0, last = 0.0;
  for (size_t i = 0; i < k; ++i) {
    first += curve[i];
    last += curve[curve.size() - 1 - i];
  }
  ordered_json body;
  body["steps"] = curve.size();
  body["initial_loss"] = curve.front();
  body["final_loss"] = curve.back();
  body["mean_loss_first10"] = first / static_cast<double>(k);
  body["mean_loss_last10"] = last / static_cast<double>(k);
  body["backbone_hash"] = hex64(hash_after);
  body["file"] = cfg.io.heads_file;
  emit_report(cfg, std::move(body));
  return 0;
}

template <typename T>
int cmd_infer(const RunConfig& cfg) {
  if (cfg.io.tokens_file.empty())
    throw ConfigError("io.tokens_file is required");
  Weights<T> w = cli_load_model<T>(cfg);
  HeadSet<T> heads;
  const bool with_heads = policy_needs_heads(cfg.eviction.policy);
  if (with_heads) heads = cli_load_heads<T>(cfg);

  std::vector<int> tokens = read_tokens_file(cfg.io.tokens_file);
  size_t protect = 0;
  tokens = maybe_query_prefix(cfg, tokens, protect);

  std::vector<TraceRow> trace;
  PrefillResult<T> pr =
      chunked_prefill(w, cfg.model, cfg.eviction, with_heads ? &heads : nullptr,
                      tokens, cfg.io.trace_file.empty() ? nullptr : &trace,
                      protect);
  std::vector<int> decoded =
      decode_greedy(w, cfg.model, pr.pool, pr.last_logits, tokens.size(),
                    cfg.task.max_new);
  if (!cfg.io.trace_file.empty())
    write_trace_csv(cfg.io.trace_file,
                    echo_config(cfg, {"seed", "model", "eviction"}), trace);

  ordered_json body;
  body["prompt_len"] = pr.prompt_len;
  body["eviction_steps"] = pr.eviction_steps;
  body["retained_per_head"] = pr.pool.max_len() - cfg.task.max_new;
  body["compression"] = compression_ratio(pr.prompt_len, cfg.eviction.b);
  body["decoded"] = decoded;
  emit_report(cfg, std::move(body));
  return 0;
}

template <typename T>
int cmd_consistency(const RunConfig& cfg) {
  Weights<T> w = cli_load_model<T>(cfg);
  HeadSet<T> heads;
  const bool with_heads = policy_needs_heads(cfg.eviction.policy);
  if (with_heads) heads = cli_load_heads<T>(cfg);
  std::vector<int> tokens = prompt_for_measurement(cfg);

  PrefixScorer<T> scorer(w, cfg.model, cfg.eviction,
                         with_heads ? &heads : nullptr, tokens);
  std::vector<size_t> ms =
      default_curve_points(tokens.size(), cfg.task.consistency_points);
  std::vector<ConsistencyPoint> curve = consistency_curve(scorer, ms);

  ordered_json body;
  body["policy"] = policy_name(cfg.eviction.policy);
  body["n"] = tokens.size();
  ordered_json points = ordered_json::array();
  for (const auto& p : curve) {
    ordered_json e;
    e["m"] = p.m;
    e["overlap"] = p.overlap;
    points.push_back(e);
  }
  body["points"] = points;
  if (!cfg.io.out_file.empty() &&
      cfg.io.out_file.size() > 4 &&
      cfg.io.out_file.rfind(".csv") == cfg.io.out_file.size() - 4) {
    write_consistency_csv(cfg.io.out_file,
                          echo_config(cfg, {"seed", "model", "eviction"}),
                          curve);
    ordered_json note;
    note["written"] = cfg.io.out_file;
    std::cout << note.dump() << "\n";
    return 0;
  }
  emit_report(cfg, std::move(body));
  return 0;
}

template <typename T>
int cmd_ablate_stabilizers(const RunConfig& cfg) {
  Weights<T> w = cli_load_model<T>(cfg);
  if (!policy_needs_heads(cfg.eviction.policy))
    throw ConfigError("ablate-stabilizers requires a head-scored policy");
  HeadSet<T> heads = cli_load_heads<T>(cfg);
  if (cfg.task.ablation_seeds == 0)
    throw ConfigError("task.ablation_seeds must be positive");
  for (size_t ns : cfg.task.ns_values)
    if (ns > cfg.eviction.b)
      throw ConfigError("task.ns_values entry exceeds the budget b");

  MatchedFilterLayout layout(cfg.model.vocab);
  std::vector<PasskeyInstance> instances;
  std::vector<uint64_t> seeds;
  for (size_t i = 0; i < cfg.task.ablation_seeds; ++i) {
    const uint64_t s = cfg.seed + i;
    Rng rng(s);
    instances.push_back(gen_passkey(layout, cfg.task.passkey(), rng));
    seeds.push_back(s);
  }
  std::vector<AblationRow> rows =
      stabilizer_ablation(w, cfg.model, cfg.eviction, heads, instances, seeds,
                          cfg.task.ns_values);
  if (!cfg.io.out_file.empty()) {
    write_ablation_csv(cfg.io.out_file,
                       echo_config(cfg, {"seed", "model", "eviction", "task"}),
                       rows);
    ordered_json note;
    note["written"] = cfg.io.out_file;
    std::cout << note.dump() << "\n";
    return 0;
  }
  ordered_json body;
  ordered_json arr = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json e;
    e["seed"] = r.seed;
    e["n_s"] = r.n_s;
    e["accuracy"] = r.accuracy;
    e["hidden_err"] = r.hidden_err;
    e["cis_err"] = r.cis_err;
    arr.push_back(e);
  }
  body["rows"] = arr;
  emit_report(cfg, std::move(body));
  return 0;
}

template <typename T>
int cmd_trace(const RunConfig& cfg) {
  if (cfg.io.trace_file.empty())
    throw ConfigError("io.trace_file is required");
  Weights<T> w = cli_load_model<T>(cfg);
  HeadSet<T> heads;
  const bool with_heads = policy_needs_heads(cfg.eviction.policy);
  if (with_heads) heads = cli_load_heads<T>(cfg);
  std::vector<int> tokens = prompt_for_measurement(cfg);
  size_t protect = 0;
  tokens = maybe_query_prefix(cfg, tokens, protect);

  std::vector<TraceRow> trace;
  chunked_prefill(w, cfg.model, cfg.eviction, with_heads ? &heads : nullptr,
                  tokens, &trace, protect);
  write_trace_csv(cfg.io.trace_file,
                  echo_config(cfg, {"seed", "model", "eviction"}), trace);
  ordered_json body;
  body["rows"] = trace.size();
  body["file"] = cfg.io.trace_file;
  emit_report(cfg, std::move(body));
  return 0;
}

template <typename T>
int cmd_passkey_eval(const RunConfig& cfg) {
  if (cfg.task.budgets.empty())
    throw ConfigError("task.budgets must list at least one cache budget");
  if (cfg.task.trials == 0) throw ConfigError("task.trials must be positive");
  Weights<T> w = cli_load_model<T>(cfg);
  HeadSet<T> heads;
  const bool with_heads = policy_needs_heads(cfg.eviction.policy);
  if (with_heads) heads = cli_load_heads<T>(cfg);

  std::vector<PasskeyEvalRow> rows =
      passkey_eval(w, cfg.model, cfg.eviction, with_heads ? &heads : nullptr,
                   cfg.task.passkey(), cfg.task.budgets, cfg.task.trials,
                   cfg.seed, cfg.task.lq);
  ordered_json body;
  ordered_json arr = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json e;
    e["b"] = r.b;
    e["trials"] = r.trials;
    e["decode_accuracy"] = r.decode_accuracy;
    e["needle_retention"] = r.needle_retention;
    e["compression"] = r.compression;
    arr.push_back(e);
  }
  body["rows"] = arr;
  emit_report(cfg, std::move(body));
  return 0;
}

template <typename T>
int cmd_theory_check(const RunConfig& cfg) {
  TheoremReport rep = theorem_check(cfg.seed);
  ordered_json body;
  body["random_trials"] = rep.random_trials;
  body["exhaustive_sequences"] = rep.exhaustive_sequences;
  body["sequences_checked"] = rep.sequences_checked;
  body["budget_violations"] = rep.budget_violations;
  body["monotonicity_violations"] = rep.monotonicity_violations;
  body["control_trials"] = rep.control_trials;
  body["control_violations"] = rep.control_violations;
  body["pass"] = rep.pass;
  emit_report(cfg, std::move(body));
  return rep.pass ? 0 : 1;
}

template <typename T>
int run_command(const std::string& name, const RunConfig& cfg) {
  if (name == "gen-data") return cmd_gen_data<T>(cfg);
  if (name == "init-model") return cmd_init_model<T>(cfg);
  if (name == "train-head") return cmd_train_head<T>(cfg);
  if (name == "infer") return cmd_infer<T>(cfg);
  if (name == "consistency") return cmd_consistency<T>(cfg);
  if (name == "ablate-stabilizers") return cmd_ablate_stabilizers<T>(cfg);
  if (name == "trace") return cmd_trace<T>(cfg);
  if (name == "passkey-eval") return cmd_passkey_eval<T>(cfg);
  if (name == "theory-check") return cmd_theory_check<T>(cfg);
  throw ConfigError("unknown subcommand '" + name + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"transformer KV cache eviction workbench"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file");

  const auto& registry = config_registry();
  std::vector<std::string> values(registry.size());
  std::vector<CLI::Option*> opts(registry.size());
  for (size_t i = 0; i < registry.size(); ++i)
    opts[i] = app.add_option("--" + std::string(registry[i].name), values[i],
                             registry[i].desc);

  const char* sub_specs[][2] = {
      {"gen-data", "generate a synthetic retrieval dataset"},
      {"init-model", "write random or matched-filter backbone weights"},
      {"train-head", "train retaining heads on a frozen backbone"},
      {"infer", "chunked prefill with eviction, then greedy decode"},
      {"consistency", "prefix-score consistency curve for a policy"},
      {"ablate-stabilizers", "sweep stabilizer counts and measure drift"},
      {"trace", "dump per-step retained-set trace as CSV"},
      {"passkey-eval", "retrieval accuracy across cache budgets"},
      {"theory-check", "verify the selection invariants on synthetic streams"},
  };
  for (const auto& s : sub_specs) app.add_subcommand(s[0], s[1])->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    emit_error("config", std::string("command line: ") + e.what());
    return 2;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) load_config_file(cfg, config_path);
    for (size_t i = 0; i < registry.size(); ++i)
      if (opts[i]->count() > 0)
        apply_config_override(cfg, registry[i].name, values[i]);

    const char* prec_env = std::getenv("RETAINKV_PRECISION");
    const std::string precision = prec_env ? prec_env : "double";
    const std::string sub = app.get_subcommands().front()->get_name();
    if (precision == "double") return run_command<double>(sub, cfg);
    if (precision == "single") return run_command<float>(sub, cfg);
    throw ConfigError("RETAINKV_PRECISION must be 'single' or 'double'");
  } catch (const ConfigError& e) {
    emit_error("config", e.what());
    return 2;
  } catch (const DataError& e) {
    emit_error("data", e.what());
    return 3;
  } catch (const std::exception& e) {
    emit_error("internal", e.what());
    return 1;
  }
}
