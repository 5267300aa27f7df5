#pragma once

// Chunked prefill with per-head KV eviction. Long prompts are processed in
// chunks; after each chunk the new entries are scored, appended to the pool,
// and every head is pruned back to the budget b. The last n_s entries of each
// step are treated as top scorers for that step only (stabilizers), so
// entries always survive long enough to be attended by at least one later
// chunk. The final n_loc prompt tokens and everything appended during decode
// bypass eviction entirely.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "retainkv/backbone.hpp"
#include "retainkv/common.hpp"
#include "retainkv/heads.hpp"
#include "retainkv/mat.hpp"

namespace retainkv {

enum class PolicyKind {
  locret,
  locret_q,
  random_uniform,
  sink_recent,
  h2o_sum,
  snapkv_window,
  sirllm_entropy,
};

inline std::string policy_name(PolicyKind p) {
  switch (p) {
    case PolicyKind::locret: return "locret";
    case PolicyKind::locret_q: return "locret_q";
    case PolicyKind::random_uniform: return "random";
    case PolicyKind::sink_recent: return "sink_recent";
    case PolicyKind::h2o_sum: return "h2o_sum";
    case PolicyKind::snapkv_window: return "snapkv_window";
    case PolicyKind::sirllm_entropy: return "sirllm_entropy";
  }
  throw ConfigError("unknown policy");
}

inline PolicyKind parse_policy(const std::string& s) {
  if (s == "locret") return PolicyKind::locret;
  if (s == "locret_q") return PolicyKind::locret_q;
  if (s == "random") return PolicyKind::random_uniform;
  if (s == "sink_recent") return PolicyKind::sink_recent;
  if (s == "h2o_sum") return PolicyKind::h2o_sum;
  if (s == "snapkv_window") return PolicyKind::snapkv_window;
  if (s == "sirllm_entropy") return PolicyKind::sirllm_entropy;
  throw ConfigError("unknown policy '" + s + "'");
}

inline bool policy_needs_heads(PolicyKind p) {
  return p == PolicyKind::locret || p == PolicyKind::locret_q;
}

inline bool policy_needs_attention(PolicyKind p) {
  return p == PolicyKind::h2o_sum || p == PolicyKind::snapkv_window;
}

struct EvictionConfig {
  size_t b = 6000;    // retained entries per head
  size_t B = 3072;    // prefill chunk length
  size_t n_s = 2500;  // stabilizers per eviction step
  size_t n_loc = 100; // trailing tokens exempt from eviction
  PolicyKind policy = PolicyKind::locret;
  size_t sink_len = 4;
  size_t recent_len = 1000;
  size_t snapkv_w = 100;
  bool destructive_stabilizers = false;
  uint64_t seed = 1;

  void validate() const {
    if (b == 0) throw ConfigError("eviction: b must be positive");
    if (B == 0) throw ConfigError("eviction: B must be positive");
    if (n_s > b)
      throw ConfigError("eviction: n_s must not exceed the budget b");
    if (snapkv_w == 0) throw ConfigError("eviction: snapkv_w must be positive");
  }
};

// Cross-chunk scorer state: the entropy policy needs the previous chunk's
// final logits row to score the first token of the next chunk.
template <typename T>
struct ScoreState {
  std::vector<T> prev_logits;
  bool has_prev = false;
};

// Scores for one chunk's new entries, indexed [layer][kv_head][i]. Scores of
// entries already in the pool are never touched: whatever a policy wants to
// know about a token has to be computable the moment its chunk is processed.
template <typename T>
ScoreTensor<T> score_chunk(const ModelConfig& cfg, const EvictionConfig& ecfg,
                           const HeadSet<T>* heads, const Activations<T>& acts,
                           const std::vector<int>& chunk_tokens,
                           size_t chunk_start, ScoreState<T>& state) {
  const size_t n_c = chunk_tokens.size();
  if (acts.n != n_c) throw ShapeError("score_chunk: activation length");
  ScoreTensor<T> s(cfg.L, cfg.kv_heads(), n_c);

  switch (ecfg.policy) {
    case PolicyKind::locret:
    case PolicyKind::locret_q: {
      if (!heads || heads->layers.size() != cfg.L)
        throw ConfigError("policy '" + policy_name(ecfg.policy) +
                          "' requires a trained head set");
      for (size_t l = 0; l < cfg.L; ++l)
        for (size_t i = 0; i < n_c; ++i) {
          std::vector<T> v = head_token_scores(heads->layers[l], acts, cfg, l, i);
          for (size_t j = 0; j < cfg.kv_heads(); ++j) s.at(l, j)[i] = v[j];
        }
      break;
    }
    case PolicyKind::random_uniform: {
      for (size_t l = 0; l < cfg.L; ++l)
        for (size_t j = 0; j < cfg.kv_heads(); ++j)
          for (size_t i = 0; i < n_c; ++i)
            s.at(l, j)[i] = static_cast<T>(
                hash_uniform({ecfg.seed, l, j, chunk_start + i}));
      break;
    }
    case PolicyKind::sink_recent: {
      for (size_t i = 0; i < n_c; ++i) {
        const double p = static_cast<double>(chunk_start + i);
        const double v = (p < static_cast<double>(ecfg.sink_len) ? 2.0 : 0.0) +
                         (1.0 - 1.0 / (p + 2.0));
        for (size_t l = 0; l < cfg.L; ++l)
          for (size_t j = 0; j < cfg.kv_heads(); ++j)
            s.at(l, j)[i] = static_cast<T>(v);
      }
      break;
    }
    case PolicyKind::h2o_sum:
    case PolicyKind::snapkv_window: {
      const bool windowed = ecfg.policy == PolicyKind::snapkv_window;
      const size_t w = ecfg.snapkv_w;
      for (size_t l = 0; l < cfg.L; ++l) {
        const LayerActs<T>& la = acts.layers[l];
        if (la.attn_probs.size() != cfg.h)
          throw ShapeError("score_chunk: attention probabilities missing");
        for (size_t jq = 0; jq < cfg.h; ++jq) {
          const size_t j = jq / cfg.g;
          const size_t m = la.cache_len[j];
          const Mat<T>& probs = la.attn_probs[jq];
          const size_t q_from = windowed ? n_c - std::min(w, n_c) : 0;
          std::vector<T>& dst = s.at(l, j);
          for (size_t q = q_from; q < n_c; ++q)
            for (size_t i = 0; i < n_c; ++i) dst[i] += probs(q, m + i);
        }
        if (windowed)
          for (size_t j = 0; j < cfg.kv_heads(); ++j)
            for (auto& v : s.at(l, j)) v /= static_cast<T>(w);
      }
      break;
    }
    case PolicyKind::sirllm_entropy: {
      for (size_t i = 0; i < n_c; ++i) {
        T e;
        if (i == 0) {
          e = state.has_prev
                  ? token_entropy(state.prev_logits.data(), cfg.vocab,
                                  static_cast<size_t>(chunk_tokens[0]))
                  : static_cast<T>(std::log(static_cast<double>(cfg.vocab)));
        } else {
          e = token_entropy(acts.logits.row(i - 1), cfg.vocab,
                            static_cast<size_t>(chunk_tokens[i]));
        }
        for (size_t l = 0; l < cfg.L; ++l)
          for (size_t j = 0; j < cfg.kv_heads(); ++j) s.at(l, j)[i] = e;
      }
      state.prev_logits.assign(acts.logits.row(n_c - 1),
                               acts.logits.row(n_c - 1) + cfg.vocab);
      state.has_prev = true;
      break;
    }
  }
  return s;
}

// One row per cache entry per eviction step; a final snapshot step after the
// exempt tail is appended lists the exit state with every row retained.
struct TraceRow {
  size_t chunk_step = 0;
  size_t layer = 0;
  size_t kv_head = 0;
  size_t original_position = 0;
  int retained = 1;
  double score = 0.0;
};

namespace detail {

template <typename T>
void append_chunk_units(CachePool<T>& pool, const ModelConfig& cfg,
                        const Activations<T>& acts, size_t chunk_start,
                        const ScoreTensor<T>* scores) {
  for (size_t l = 0; l < cfg.L; ++l)
    for (size_t j = 0; j < cfg.kv_heads(); ++j) {
      auto& units = pool.head(l, j).units;
      for (size_t i = 0; i < acts.n; ++i) {
        CacheUnit<T> u;
        u.original_position = chunk_start + i;
        const T* kp = acts.k_head_row(l, j, i);
        const T* vp = acts.v_head_row(l, j, i);
        u.k_pre.assign(kp, kp + cfg.d_kv);
        u.v.assign(vp, vp + cfg.d_kv);
        u.score = scores ? scores->at(l, j)[i] : T(0);
        units.push_back(std::move(u));
      }
    }
}

}  // namespace detail

// Prunes every head back to b entries. The last min(n_s, m) entries count as
// top scorers for this step only; stored scores stay untouched unless
// destructive mode is on, which writes the protection into the entry and so
// makes it permanent. Entries at original positions below protect_prefix are
// always kept. On the final eviction step of a prefill the stabilizer window
// is not applied, since no later chunk needs it.
template <typename T>
void evict_step(CachePool<T>& pool, const EvictionConfig& ecfg, bool is_last,
                size_t protect_prefix, size_t step_id,
                std::vector<TraceRow>* trace) {
  const double inf = std::numeric_limits<double>::infinity();
  for (size_t l = 0; l < pool.layers; ++l)
    for (size_t j = 0; j < pool.kv_heads; ++j) {
      auto& units = pool.head(l, j).units;
      const size_t m = units.size();

      std::vector<TraceRow> snapshot;
      if (trace) {
        snapshot.reserve(m);
        for (const auto& u : units)
          snapshot.push_back({step_id, l, j, u.original_position, 0,
                              static_cast<double>(u.score)});
      }

      std::vector<double> masked(m);
      for (size_t i = 0; i < m; ++i)
        masked[i] = static_cast<double>(units[i].score);
      if (!is_last) {
        const size_t guard = m - std::min(ecfg.n_s, m);
        for (size_t i = guard; i < m; ++i) {
          masked[i] = inf;
          if (ecfg.destructive_stabilizers)
            units[i].score = std::numeric_limits<T>::infinity();
        }
      }
      for (size_t i = 0; i < m && units[i].original_position < protect_prefix;
           ++i)
        masked[i] = inf;

      std::vector<size_t> keep = top_b_indices(masked, ecfg.b);
      if (keep.size() < m) {
        std::vector<CacheUnit<T>> kept;
        kept.reserve(keep.size());
        for (size_t i : keep) kept.push_back(std::move(units[i]));
        units = std::move(kept);
      }

      if (trace) {
        size_t c = 0;
        for (auto& row : snapshot) {
          while (c < units.size() &&
                 units[c].original_position < row.original_position)
            ++c;
          if (c < units.size() &&
              units[c].original_position == row.original_position)
            row.retained = 1;
          trace->push_back(row);
        }
      }
    }
}

template <typename T>
struct PrefillResult {
  CachePool<T> pool;
  std::vector<T> last_logits;
  Activations<T> last_acts;  // the final chunk processed
  size_t eviction_steps = 0;
  size_t prompt_len = 0;
};

// Chunked prefill with eviction: chunks of B cover everything except the last
// n_loc tokens, each followed by an eviction step; the tail is then run
// through the same chunking but appended unpruned. protect_prefix exempts the
// first tokens of the prompt from eviction, which is how a query-aware prompt
// keeps its question in cache.
template <typename T>
PrefillResult<T> chunked_prefill(const Weights<T>& w, const ModelConfig& cfg,
                                 const EvictionConfig& ecfg,
                                 const HeadSet<T>* heads,
                                 const std::vector<int>& tokens,
                                 std::vector<TraceRow>* trace = nullptr,
                                 size_t protect_prefix = 0) {
  cfg.validate();
  ecfg.validate();
  if (tokens.empty()) throw DataError("prefill: empty prompt");
  if (policy_needs_heads(ecfg.policy) && !heads)
    throw ConfigError("policy '" + policy_name(ecfg.policy) +
                      "' requires a trained head set");
  if (protect_prefix > 0 && ecfg.b < protect_prefix + ecfg.n_s)
    throw ConfigError(
        "prefill: budget b too small for the protected prefix plus "
        "stabilizers");

  const size_t n = tokens.size();
  const size_t tail = std::min(ecfg.n_loc, n);
  const size_t main_len = n - tail;
  const bool want_attn = policy_needs_attention(ecfg.policy);

  PrefillResult<T> res;
  res.pool = CachePool<T>(cfg.L, cfg.kv_heads());
  res.prompt_len = n;
  ScoreState<T> state;

  for (size_t start = 0; start < main_len; start += ecfg.B) {
    const size_t n_c = std::min(ecfg.B, main_len - start);
    std::vector<int> chunk(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                           tokens.begin() +
                               static_cast<std::ptrdiff_t>(start + n_c));
    Activations<T> acts = forward_chunk(w, cfg, chunk, res.pool, want_attn);
    res.last_logits.assign(acts.logits.row(n_c - 1),
                           acts.logits.row(n_c - 1) + cfg.vocab);
    ScoreTensor<T> scores =
        score_chunk(cfg, ecfg, heads, acts, chunk, start, state);
    detail::append_chunk_units(res.pool, cfg, acts, start, &scores);
    res.last_acts = std::move(acts);
    const bool is_last = start + n_c >= main_len;
    evict_step(res.pool, ecfg, is_last, protect_prefix, res.eviction_steps,
               trace);
    ++res.eviction_steps;
  }

  for (size_t start = main_len; start < n; start += ecfg.B) {
    const size_t n_c = std::min(ecfg.B, n - start);
    std::vector<int> chunk(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                           tokens.begin() +
                               static_cast<std::ptrdiff_t>(start + n_c));
    Activations<T> acts = forward_chunk(w, cfg, chunk, res.pool, false);
    res.last_logits.assign(acts.logits.row(n_c - 1),
                           acts.logits.row(n_c - 1) + cfg.vocab);
    detail::append_chunk_units(res.pool, cfg, acts, start,
                               static_cast<const ScoreTensor<T>*>(nullptr));
    res.last_acts = std::move(acts);
  }

  if (trace)
    for (size_t l = 0; l < cfg.L; ++l)
      for (size_t j = 0; j < cfg.kv_heads(); ++j)
        for (const auto& u : res.pool.head(l, j).units)
          trace->push_back({res.eviction_steps, l, j, u.original_position, 1,
                            static_cast<double>(u.score)});

  return res;
}

// Greedy decode against the retained cache. Each emitted token's entries are
// appended with score 0 and are never evicted.
template <typename T>
std::vector<int> decode_greedy(const Weights<T>& w, const ModelConfig& cfg,
                               CachePool<T>& pool, std::vector<T> logits,
                               size_t next_position, size_t max_new) {
  if (logits.size() != cfg.vocab) throw ShapeError("decode: logits width");
  std::vector<int> out;
  out.reserve(max_new);
  for (size_t s = 0; s < max_new; ++s) {
    const int tok = static_cast<int>(argmax(logits.data(), cfg.vocab));
    out.push_back(tok);
    Activations<T> acts = forward_chunk(w, cfg, std::vector<int>{tok}, pool);
    detail::append_chunk_units(pool, cfg, acts, next_position + s,
                               static_cast<const ScoreTensor<T>*>(nullptr));
    logits.assign(acts.logits.row(0), acts.logits.row(0) + cfg.vocab);
  }
  return out;
}

}  // namespace retainkv
