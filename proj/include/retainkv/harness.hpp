#pragma once

// Experiment harness: the synthetic retrieval task, prefix scorers backing
// the score-consistency metric, the stabilizer ablation, retrieval evaluation
// across cache budgets, and report emission.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "retainkv/backbone.hpp"
#include "retainkv/common.hpp"
#include "retainkv/eviction.hpp"
#include "retainkv/heads.hpp"
#include "retainkv/mat.hpp"

namespace retainkv {

inline double compression_ratio(size_t prompt_len, size_t b) {
  if (b == 0) throw ConfigError("compression_ratio: b must be positive");
  return static_cast<double>(prompt_len) / static_cast<double>(b);
}

// ---- synthetic retrieval task ----

// A passkey of needle_len digit tokens hides behind a marker somewhere in a
// filler haystack; the prompt ends with a bare marker, which is the cue to
// reproduce the digits. Digits use per-slot disjoint alphabets, so slot s of
// the answer can only be confused with other values of slot s.
struct PasskeyConfig {
  size_t haystack_len = 10240;
  size_t needle_len = 4;
  long long needle_pos = -1;  // marker position; negative draws it uniformly
  size_t count = 64;          // examples per generated dataset

  void validate() const {
    if (needle_len < 1 || needle_len > MatchedFilterLayout::n_slots)
      throw ConfigError("passkey: needle_len out of range");
    if (haystack_len < needle_len + 3)
      throw ConfigError("passkey: haystack_len too small for the needle");
    if (count == 0) throw ConfigError("passkey: count must be positive");
  }
};

struct PasskeyInstance {
  std::vector<int> prompt;
  std::vector<int> passkey;
  size_t needle_start = 0;  // position of the needle marker

  // digit positions, needle_start+1 .. needle_start+len
  size_t digits_begin() const { return needle_start + 1; }
};

inline PasskeyInstance gen_passkey(const MatchedFilterLayout& layout,
                                   const PasskeyConfig& task, Rng& rng) {
  task.validate();
  const size_t block = task.needle_len + 1;  // marker + digits
  const size_t max_start = task.haystack_len - 1 - block;
  PasskeyInstance inst;
  if (task.needle_pos >= 0) {
    inst.needle_start = static_cast<size_t>(task.needle_pos);
    if (inst.needle_start > max_start)
      throw ConfigError("passkey: fixed needle_pos does not fit");
  } else {
    inst.needle_start = rng.below(max_start + 1);
  }
  inst.passkey.resize(task.needle_len);
  for (size_t s = 0; s < task.needle_len; ++s)
    inst.passkey[s] = static_cast<int>(
        layout.digit(s, rng.below(MatchedFilterLayout::digits_per_slot)));

  inst.prompt.resize(task.haystack_len);
  for (auto& t : inst.prompt)
    t = static_cast<int>(rng.below(layout.filler_count()));
  inst.prompt[inst.needle_start] = static_cast<int>(layout.marker());
  for (size_t s = 0; s < task.needle_len; ++s)
    inst.prompt[inst.needle_start + 1 + s] = inst.passkey[s];
  inst.prompt[task.haystack_len - 1] = static_cast<int>(layout.marker());
  return inst;
}

inline Dataset make_passkey_dataset(const MatchedFilterLayout& layout,
                                    const PasskeyConfig& task, uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.reserve(task.count);
  for (size_t i = 0; i < task.count; ++i) {
    PasskeyInstance inst = gen_passkey(layout, task, rng);
    ds.push_back({std::move(inst.prompt), std::move(inst.passkey)});
  }
  return ds;
}

// ---- prefix scorers ----

// Scores a growing prefix of one sequence with full attention available, as
// opposed to the chunked pipeline. score_prefix(m) answers: if the first m
// tokens were the whole input, what would each entry's score be? Pointwise
// policies give every position a value that never moves as m grows; the
// attention-aggregating policies do not, which is exactly what the
// consistency metric measures.
template <typename T>
class PrefixScorer {
 public:
  PrefixScorer(const Weights<T>& w, const ModelConfig& cfg,
               const EvictionConfig& ecfg, const HeadSet<T>* heads,
               const std::vector<int>& tokens)
      : cfg_(cfg), ecfg_(ecfg), n_(tokens.size()) {
    cfg.validate();
    ecfg.validate();
    if (tokens.empty()) throw DataError("prefix scorer: empty sequence");
    if (policy_needs_heads(ecfg.policy) && !heads)
      throw ConfigError("policy '" + policy_name(ecfg.policy) +
                        "' requires a trained head set");
    acts_ = full_forward(w, cfg, tokens, policy_needs_attention(ecfg.policy));

    if (!policy_needs_attention(ecfg.policy)) {
      base_ = ScoreTensor<T>(cfg.L, cfg.kv_heads(), n_);
      switch (ecfg.policy) {
        case PolicyKind::locret:
        case PolicyKind::locret_q:
          for (size_t l = 0; l < cfg.L; ++l)
            for (size_t t = 0; t < n_; ++t) {
              std::vector<T> v =
                  head_token_scores(heads->layers[l], acts_, cfg, l, t);
              for (size_t j = 0; j < cfg.kv_heads(); ++j)
                base_.at(l, j)[t] = v[j];
            }
          break;
        case PolicyKind::random_uniform:
          for (size_t l = 0; l < cfg.L; ++l)
            for (size_t j = 0; j < cfg.kv_heads(); ++j)
              for (size_t t = 0; t < n_; ++t)
                base_.at(l, j)[t] =
                    static_cast<T>(hash_uniform({ecfg.seed, l, j, t}));
          break;
        case PolicyKind::sink_recent:
          for (size_t t = 0; t < n_; ++t) {
            const double p = static_cast<double>(t);
            const double v =
                (p < static_cast<double>(ecfg.sink_len) ? 2.0 : 0.0) +
                (1.0 - 1.0 / (p + 2.0));
            for (size_t l = 0; l < cfg.L; ++l)
              for (size_t j = 0; j < cfg.kv_heads(); ++j)
                base_.at(l, j)[t] = static_cast<T>(v);
          }
          break;
        case PolicyKind::sirllm_entropy:
          for (size_t t = 0; t < n_; ++t) {
            const T e =
                t == 0 ? static_cast<T>(std::log(double(cfg.vocab)))
                       : token_entropy(acts_.logits.row(t - 1), cfg.vocab,
                                       static_cast<size_t>(tokens[t]));
            for (size_t l = 0; l < cfg.L; ++l)
              for (size_t j = 0; j < cfg.kv_heads(); ++j)
                base_.at(l, j)[t] = e;
          }
          break;
        default:
          break;
      }
    }
  }

  size_t length() const { return n_; }

  ScoreTensor<T> score_prefix(size_t m) const {
    if (m == 0 || m > n_) throw ShapeError("score_prefix: bad prefix length");
    ScoreTensor<T> s(cfg_.L, cfg_.kv_heads(), m);
    if (!policy_needs_attention(ecfg_.policy)) {
      for (size_t l = 0; l < cfg_.L; ++l)
        for (size_t j = 0; j < cfg_.kv_heads(); ++j)
          std::copy(base_.at(l, j).begin(),
                    base_.at(l, j).begin() + static_cast<std::ptrdiff_t>(m),
                    s.at(l, j).begin());
      return s;
    }
    const bool windowed = ecfg_.policy == PolicyKind::snapkv_window;
    const size_t w = ecfg_.snapkv_w;
    const size_t q_from = windowed ? m - std::min(w, m) : 0;
    for (size_t l = 0; l < cfg_.L; ++l)
      for (size_t jq = 0; jq < cfg_.h; ++jq) {
        const Mat<T>& probs = acts_.layers[l].attn_probs[jq];
        std::vector<T>& dst = s.at(l, jq / cfg_.g);
        for (size_t q = q_from; q < m; ++q)
          for (size_t k = 0; k < m; ++k) dst[k] += probs(q, k);
      }
    if (windowed)
      for (size_t l = 0; l < cfg_.L; ++l)
        for (size_t j = 0; j < cfg_.kv_heads(); ++j)
          for (auto& v : s.at(l, j)) v /= static_cast<T>(w);
    return s;
  }

 private:
  ModelConfig cfg_;
  EvictionConfig ecfg_;
  size_t n_ = 0;
  Activations<T> acts_;
  ScoreTensor<T> base_;
};

// ---- score consistency ----

// Mean over heads of |top(local) n top(global)| / |top(local)| with the top
// set sized ceil(frac*m); the global scores are restricted to the first m
// positions before ranking.
template <typename T>
double topset_overlap(const ScoreTensor<T>& local, const ScoreTensor<T>& global,
                      size_t m, double frac = 0.10) {
  const size_t k = std::max<size_t>(
      1, static_cast<size_t>(std::ceil(frac * static_cast<double>(m))));
  double acc = 0.0;
  size_t cells = 0;
  for (size_t l = 0; l < local.layers; ++l)
    for (size_t j = 0; j < local.heads; ++j) {
      const std::vector<T>& lv = local.at(l, j);
      if (lv.size() != m) throw ShapeError("topset_overlap: local size");
      std::vector<T> gv(global.at(l, j).begin(),
                        global.at(l, j).begin() +
                            static_cast<std::ptrdiff_t>(m));
      std::vector<size_t> tl = top_b_indices(lv, k);
      std::vector<size_t> tg = top_b_indices(gv, k);
      size_t hit = 0, a = 0, c = 0;
      while (a < tl.size() && c < tg.size()) {
        if (tl[a] == tg[c]) {
          ++hit;
          ++a;
          ++c;
        } else if (tl[a] < tg[c]) {
          ++a;
        } else {
          ++c;
        }
      }
      acc += static_cast<double>(hit) / static_cast<double>(tl.size());
      ++cells;
    }
  return acc / static_cast<double>(cells);
}

struct ConsistencyPoint {
  size_t m = 0;
  double overlap = 0.0;
};

inline std::vector<size_t> default_curve_points(size_t n, size_t points = 8) {
  std::vector<size_t> ms;
  for (size_t i = 1; i <= points; ++i) {
    size_t m = n * i / points;
    if (m == 0) continue;
    if (ms.empty() || ms.back() != m) ms.push_back(m);
  }
  return ms;
}

template <typename T>
std::vector<ConsistencyPoint> consistency_curve(const PrefixScorer<T>& scorer,
                                                const std::vector<size_t>& ms,
                                                double frac = 0.10) {
  ScoreTensor<T> global = scorer.score_prefix(scorer.length());
  std::vector<ConsistencyPoint> curve;
  curve.reserve(ms.size());
  for (size_t m : ms) {
    ScoreTensor<T> local = scorer.score_prefix(m);
    curve.push_back({m, topset_overlap(local, global, m, frac)});
  }
  return curve;
}

// ---- stabilizer ablation ----

struct AblationRow {
  uint64_t seed = 0;
  size_t n_s = 0;
  double accuracy = 0.0;    // greedy decode reproduced the needle exactly
  double hidden_err = 0.0;  // max-abs last-position hidden drift, any layer
  double cis_err = 0.0;     // mean-abs drift of stored scores vs full-run
};

// Uncompressed reference for one prompt, shared across a whole n_s sweep.
template <typename T>
struct AblationReference {
  std::vector<std::vector<T>> last_hidden;  // per layer, last prompt position
  ScoreTensor<T> pred;                      // head scores from the full run
  size_t n = 0;
};

template <typename T>
AblationReference<T> ablation_reference(const Weights<T>& w,
                                        const ModelConfig& cfg,
                                        const HeadSet<T>& heads,
                                        const std::vector<int>& tokens) {
  Activations<T> full = full_forward(w, cfg, tokens);
  AblationReference<T> ref;
  ref.n = tokens.size();
  ref.pred = ScoreTensor<T>(cfg.L, cfg.kv_heads(), ref.n);
  for (size_t l = 0; l < cfg.L; ++l) {
    const T* h = full.layers[l].hidden_out.row(ref.n - 1);
    ref.last_hidden.emplace_back(h, h + cfg.d_model);
    for (size_t t = 0; t < ref.n; ++t) {
      std::vector<T> v = head_token_scores(heads.layers[l], full, cfg, l, t);
      for (size_t j = 0; j < cfg.kv_heads(); ++j) ref.pred.at(l, j)[t] = v[j];
    }
  }
  return ref;
}

// One sweep point: run the evicting pipeline, decode, and measure drift
// against the uncompressed reference. The score drift skips the exempt tail,
// whose entries never get a prediction.
template <typename T>
AblationRow ablation_point(const Weights<T>& w, const ModelConfig& cfg,
                           const EvictionConfig& ecfg, const HeadSet<T>& heads,
                           const PasskeyInstance& inst,
                           const AblationReference<T>& ref, uint64_t seed) {
  PrefillResult<T> pr = chunked_prefill(w, cfg, ecfg, &heads, inst.prompt);
  AblationRow row;
  row.seed = seed;
  row.n_s = ecfg.n_s;

  const size_t last = pr.last_acts.n - 1;
  for (size_t l = 0; l < cfg.L; ++l) {
    const T* h = pr.last_acts.layers[l].hidden_out.row(last);
    for (size_t c = 0; c < cfg.d_model; ++c)
      row.hidden_err = std::max(
          row.hidden_err, std::abs(static_cast<double>(h[c]) -
                                   static_cast<double>(ref.last_hidden[l][c])));
  }

  const size_t scored_end = ref.n - std::min(ecfg.n_loc, ref.n);
  double acc = 0.0;
  size_t count = 0;
  for (size_t l = 0; l < cfg.L; ++l)
    for (size_t j = 0; j < cfg.kv_heads(); ++j)
      for (const auto& u : pr.pool.head(l, j).units) {
        if (u.original_position >= scored_end) continue;
        acc += std::abs(static_cast<double>(u.score) -
                        static_cast<double>(
                            ref.pred.at(l, j)[u.original_position]));
        ++count;
      }
  row.cis_err = count ? acc / static_cast<double>(count) : 0.0;

  std::vector<int> decoded = decode_greedy(w, cfg, pr.pool, pr.last_logits,
                                           inst.prompt.size(),
                                           inst.passkey.size());
  row.accuracy = decoded == inst.passkey ? 1.0 : 0.0;
  return row;
}

template <typename T>
std::vector<AblationRow> stabilizer_ablation(
    const Weights<T>& w, const ModelConfig& cfg, EvictionConfig ecfg,
    const HeadSet<T>& heads, const std::vector<PasskeyInstance>& instances,
    const std::vector<uint64_t>& seeds, const std::vector<size_t>& ns_values) {
  if (instances.size() != seeds.size())
    throw ConfigError("ablation: instances and seeds must pair up");
  if (!policy_needs_heads(ecfg.policy))
    throw ConfigError("ablation: the sweep measures head-scored eviction");
  std::vector<AblationRow> rows;
  rows.reserve(instances.size() * ns_values.size());
  for (size_t i = 0; i < instances.size(); ++i) {
    AblationReference<T> ref =
        ablation_reference(w, cfg, heads, instances[i].prompt);
    for (size_t ns : ns_values) {
      ecfg.n_s = ns;
      rows.push_back(
          ablation_point(w, cfg, ecfg, heads, instances[i], ref, seeds[i]));
    }
  }
  return rows;
}

// ---- retrieval evaluation ----

struct PasskeyTrialOutcome {
  bool exact = false;
  double retention = 0.0;  // digit positions present in every first-layer head
  std::vector<int> decoded;
};

template <typename T>
bool cache_has_position(const std::vector<CacheUnit<T>>& units, size_t pos) {
  auto it = std::lower_bound(
      units.begin(), units.end(), pos,
      [](const CacheUnit<T>& u, size_t p) { return u.original_position < p; });
  return it != units.end() && it->original_position == pos;
}

template <typename T>
PasskeyTrialOutcome run_passkey_trial(const Weights<T>& w,
                                      const ModelConfig& cfg,
                                      const EvictionConfig& ecfg,
                                      const HeadSet<T>* heads,
                                      const PasskeyInstance& inst,
                                      size_t protect_prefix = 0) {
  PrefillResult<T> pr =
      chunked_prefill(w, cfg, ecfg, heads, inst.prompt, nullptr,
                      protect_prefix);
  PasskeyTrialOutcome out;
  size_t present = 0;
  for (size_t s = 0; s < inst.passkey.size(); ++s) {
    const size_t pos = inst.digits_begin() + s;
    bool everywhere = true;
    for (size_t j = 0; j < cfg.kv_heads() && everywhere; ++j)
      everywhere = cache_has_position(pr.pool.head(0, j).units, pos);
    if (everywhere) ++present;
  }
  out.retention =
      static_cast<double>(present) / static_cast<double>(inst.passkey.size());
  out.decoded = decode_greedy(w, cfg, pr.pool, pr.last_logits,
                              inst.prompt.size(), inst.passkey.size());
  out.exact = out.decoded == inst.passkey;
  return out;
}

struct PasskeyEvalRow {
  size_t b = 0;
  size_t trials = 0;
  double decode_accuracy = 0.0;
  double needle_retention = 0.0;
  double compression = 0.0;
};

// Runs the same generated instances at every budget so rows are paired. n_s
// is clamped to the budget, since a grid sweep would otherwise reject its
// smallest budgets.
template <typename T>
std::vector<PasskeyEvalRow> passkey_eval(
    const Weights<T>& w, const ModelConfig& cfg, const EvictionConfig& base,
    const HeadSet<T>* heads, const PasskeyConfig& task,
    const std::vector<size_t>& budgets, size_t trials, uint64_t seed,
    size_t lq = 0) {
  MatchedFilterLayout layout(cfg.vocab);
  Rng rng(seed);
  std::vector<PasskeyInstance> instances;
  instances.reserve(trials);
  for (size_t t = 0; t < trials; ++t)
    instances.push_back(gen_passkey(layout, task, rng));

  const bool query_aware = base.policy == PolicyKind::locret_q && lq > 0;
  if (query_aware)
    for (auto& inst : instances) {
      TrainingExample ex{inst.prompt, inst.passkey};
      inst.prompt = make_query_aware_example(ex, lq).prompt;
      inst.needle_start += std::min(lq, ex.prompt.size());
    }

  std::vector<PasskeyEvalRow> rows;
  rows.reserve(budgets.size());
  for (size_t b : budgets) {
    EvictionConfig ecfg = base;
    ecfg.b = b;
    ecfg.n_s = std::min(ecfg.n_s, b);
    PasskeyEvalRow row;
    row.b = b;
    row.trials = trials;
    for (const auto& inst : instances) {
      PasskeyTrialOutcome o = run_passkey_trial(
          w, cfg, ecfg, heads, inst, query_aware ? lq : size_t{0});
      row.decode_accuracy += o.exact ? 1.0 : 0.0;
      row.needle_retention += o.retention;
    }
    row.decode_accuracy /= static_cast<double>(trials);
    row.needle_retention /= static_cast<double>(trials);
    row.compression = compression_ratio(task.haystack_len, b);
    rows.push_back(row);
  }
  return rows;
}

// ---- report emission ----

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

using ConfigEcho = std::vector<std::pair<std::string, std::string>>;

inline void write_csv(const std::string& path, const ConfigEcho& echo,
                      const std::string& header,
                      const std::vector<std::string>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& [k, v] : echo) f << "# " << k << "=" << v << "\n";
  f << header << "\n";
  for (const auto& r : rows) f << r << "\n";
  if (!f) throw DataError("write failed for '" + path + "'");
}

inline void write_trace_csv(const std::string& path, const ConfigEcho& echo,
                            const std::vector<TraceRow>& rows) {
  std::vector<std::string> lines;
  lines.reserve(rows.size());
  for (const auto& r : rows)
    lines.push_back(std::to_string(r.chunk_step) + "," +
                    std::to_string(r.layer) + "," + std::to_string(r.kv_head) +
                    "," + std::to_string(r.original_position) + "," +
                    std::to_string(r.retained) + "," + format_double(r.score));
  write_csv(path, echo, "chunk_step,layer,kv_head,original_position,retained,score",
            lines);
}

inline void write_ablation_csv(const std::string& path, const ConfigEcho& echo,
                               const std::vector<AblationRow>& rows) {
  std::vector<std::string> lines;
  lines.reserve(rows.size());
  for (const auto& r : rows)
    lines.push_back(std::to_string(r.seed) + "," + std::to_string(r.n_s) +
                    "," + format_double(r.accuracy) + "," +
                    format_double(r.hidden_err) + "," +
                    format_double(r.cis_err));
  write_csv(path, echo, "seed,n_s,accuracy,hidden_err,cis_err", lines);
}

inline void write_consistency_csv(const std::string& path,
                                  const ConfigEcho& echo,
                                  const std::vector<ConsistencyPoint>& curve) {
  std::vector<std::string> lines;
  lines.reserve(curve.size());
  for (const auto& p : curve)
    lines.push_back(std::to_string(p.m) + "," + format_double(p.overlap));
  write_csv(path, echo, "m,overlap", lines);
}

}  // namespace retainkv
