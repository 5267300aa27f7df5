#pragma once

// Decoder-only toy transformer: pre-norm RMSNorm blocks, grouped-query
// attention with rotary embeddings, SiLU-gated FFN, weight-untied
// unembedding. Small enough to run full experiments on a desk machine while
// keeping the cache mechanics of the full-size setting: per-(layer, kv-head)
// caches hold pre-rotary K so retained units can be re-embedded at
// contiguous positions after eviction.

#include <cstdint>
#include <string>
#include <vector>

#include "retainkv/common.hpp"
#include "retainkv/mat.hpp"
#include "retainkv/tensor_file.hpp"

namespace retainkv {

struct ModelConfig {
  size_t L = 2;             // layers
  size_t h = 4;             // query heads
  size_t g = 2;             // query heads per KV head
  size_t d_m = 16;          // per-head query width
  size_t d_kv = 16;         // per-head key/value width
  size_t d_model = 64;
  size_t d_ff = 128;
  size_t vocab = 64;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;

  size_t kv_heads() const { return h / g; }

  void validate() const {
    if (L == 0 || h == 0 || g == 0 || d_m == 0 || d_kv == 0 || d_model == 0 ||
        d_ff == 0 || vocab == 0)
      throw ConfigError("model: all dimensions must be positive");
    if (h % g != 0) throw ConfigError("model: g must divide h");
    if (d_model != h * d_m) throw ConfigError("model: d_model must equal h*d_m");
    if (d_m != d_kv)
      throw ConfigError("model: d_m must equal d_kv (query/key dot product)");
    if (d_m % 2 != 0) throw ConfigError("model: d_m must be even for rotary");
    if (rope_theta <= 1.0) throw ConfigError("model: rope_theta must exceed 1");
    if (norm_eps < 0.0) throw ConfigError("model: norm_eps must be >= 0");
  }
};

template <typename T>
struct LayerWeights {
  Mat<T> wq;      // d_model x h*d_m
  Mat<T> wk;      // d_model x kv_heads*d_kv
  Mat<T> wv;      // d_model x kv_heads*d_kv
  Mat<T> wo;      // h*d_m x d_model
  Mat<T> w_gate;  // d_model x d_ff
  Mat<T> w_up;    // d_model x d_ff
  Mat<T> w_down;  // d_ff x d_model
  std::vector<T> attn_norm;
  std::vector<T> ffn_norm;
};

template <typename T>
struct Weights {
  Mat<T> embed;    // vocab x d_model
  Mat<T> unembed;  // d_model x vocab
  std::vector<T> final_norm;
  std::vector<LayerWeights<T>> layers;
};

// One cached attention unit: everything needed to re-embed a retained token
// at a new position. The score is written once, when the unit is first
// scored, and never changes afterwards.
template <typename T>
struct CacheUnit {
  size_t original_position = 0;
  std::vector<T> k_pre;  // pre-rotary key, d_kv
  std::vector<T> v;      // d_kv
  T score = T(0);
};

template <typename T>
struct HeadCache {
  std::vector<CacheUnit<T>> units;  // sorted by original_position
};

template <typename T>
struct CachePool {
  size_t layers = 0;
  size_t kv_heads = 0;
  std::vector<HeadCache<T>> heads;  // layers*kv_heads, row-major by layer

  CachePool() = default;
  CachePool(size_t L, size_t hkv)
      : layers(L), kv_heads(hkv), heads(L * hkv) {}

  HeadCache<T>& head(size_t l, size_t j) { return heads[l * kv_heads + j]; }
  const HeadCache<T>& head(size_t l, size_t j) const {
    return heads[l * kv_heads + j];
  }

  size_t max_len() const {
    size_t m = 0;
    for (const auto& hc : heads) m = std::max(m, hc.units.size());
    return m;
  }
};

template <typename T>
struct LayerActs {
  Mat<T> q_pre;       // n x h*d_m, before rotary
  Mat<T> k_pre;       // n x kv_heads*d_kv, before rotary
  Mat<T> v;           // n x kv_heads*d_kv
  Mat<T> hidden_out;  // n x d_model, block output
  // populated only when requested: per query head, n x (cache_len + n)
  // post-softmax attention over [cached units | chunk], zero beyond the
  // causal frontier
  std::vector<Mat<T>> attn_probs;
  std::vector<size_t> cache_len;  // per kv head, at forward time
};

template <typename T>
struct Activations {
  size_t n = 0;  // chunk length
  size_t h = 0, kv_heads = 0, d_m = 0, d_kv = 0;
  std::vector<LayerActs<T>> layers;
  Mat<T> logits;  // n x vocab

  const T* q_head_row(size_t l, size_t jq, size_t t) const {
    return layers[l].q_pre.row(t) + jq * d_m;
  }
  const T* k_head_row(size_t l, size_t j, size_t t) const {
    return layers[l].k_pre.row(t) + j * d_kv;
  }
  const T* v_head_row(size_t l, size_t j, size_t t) const {
    return layers[l].v.row(t) + j * d_kv;
  }
  const Mat<T>& final_hidden() const { return layers.back().hidden_out; }
};

// ---- forward ----

namespace detail {

template <typename T>
Mat<T> col_slice(const Mat<T>& m, size_t c0, size_t w) {
  Mat<T> out(m.rows, w);
  for (size_t r = 0; r < m.rows; ++r) {
    const T* src = m.row(r) + c0;
    T* dst = out.row(r);
    for (size_t c = 0; c < w; ++c) dst[c] = src[c];
  }
  return out;
}

template <typename T>
void softmax_span(T* p, size_t n) {
  T m = -std::numeric_limits<T>::infinity();
  for (size_t i = 0; i < n; ++i) m = std::max(m, p[i]);
  if (!(m > -std::numeric_limits<T>::infinity()))
    throw ShapeError("softmax_span: empty support");
  T sum = T(0);
  for (size_t i = 0; i < n; ++i) {
    p[i] = std::exp(p[i] - m);
    sum += p[i];
  }
  for (size_t i = 0; i < n; ++i) p[i] /= sum;
}

}  // namespace detail

// Runs one chunk of tokens on top of (and without mutating) the given cache
// pool. Cached units are embedded at contiguous positions 0..m-1 per head;
// the chunk occupies positions m..m+n-1, where m is that head's cache length
// (heads may be ragged). Attention within the chunk is causal.
template <typename T>
Activations<T> forward_chunk(const Weights<T>& w, const ModelConfig& cfg,
                             const std::vector<int>& tokens,
                             const CachePool<T>& pool,
                             bool want_attention = false) {
  const size_t n = tokens.size();
  if (n == 0) throw ShapeError("forward_chunk: empty chunk");
  for (int t : tokens)
    if (t < 0 || static_cast<size_t>(t) >= cfg.vocab)
      throw DataError("forward_chunk: token id out of range");
  if (pool.layers != cfg.L || pool.kv_heads != cfg.kv_heads())
    throw ShapeError("forward_chunk: pool shape does not match model");

  Activations<T> acts;
  acts.n = n;
  acts.h = cfg.h;
  acts.kv_heads = cfg.kv_heads();
  acts.d_m = cfg.d_m;
  acts.d_kv = cfg.d_kv;
  acts.layers.resize(cfg.L);

  Mat<T> x(n, cfg.d_model);
  for (size_t t = 0; t < n; ++t) {
    const T* e = w.embed.row(static_cast<size_t>(tokens[t]));
    T* r = x.row(t);
    for (size_t c = 0; c < cfg.d_model; ++c) r[c] = e[c];
  }

  const T inv_sqrt_dm = T(1) / static_cast<T>(std::sqrt(double(cfg.d_m)));

  for (size_t l = 0; l < cfg.L; ++l) {
    const LayerWeights<T>& lw = w.layers[l];
    LayerActs<T>& la = acts.layers[l];

    Mat<T> a = x;
    rmsnorm_rows(a, lw.attn_norm, static_cast<T>(cfg.norm_eps));
    la.q_pre = matmul(a, lw.wq);
    la.k_pre = matmul(a, lw.wk);
    la.v = matmul(a, lw.wv);
    la.cache_len.resize(cfg.kv_heads());
    if (want_attention) la.attn_probs.resize(cfg.h);

    Mat<T> attn_out(n, cfg.h * cfg.d_m, T(0));

    for (size_t j = 0; j < cfg.kv_heads(); ++j) {
      const HeadCache<T>& hc = pool.head(l, j);
      const size_t m = hc.units.size();
      la.cache_len[j] = m;

      // keys/values over [cached | chunk]; keys rotated at reassigned
      // positions 0..m-1 for the cache, m..m+n-1 for the chunk
      Mat<T> K(m + n, cfg.d_kv);
      Mat<T> V(m + n, cfg.d_kv);
      for (size_t u = 0; u < m; ++u) {
        for (size_t c = 0; c < cfg.d_kv; ++c) {
          K(u, c) = hc.units[u].k_pre[c];
          V(u, c) = hc.units[u].v[c];
        }
      }
      for (size_t t = 0; t < n; ++t) {
        const T* kp = la.k_pre.row(t) + j * cfg.d_kv;
        const T* vp = la.v.row(t) + j * cfg.d_kv;
        for (size_t c = 0; c < cfg.d_kv; ++c) {
          K(m + t, c) = kp[c];
          V(m + t, c) = vp[c];
        }
      }
      rope_apply(K, size_t{0}, cfg.rope_theta);

      for (size_t jq = j * cfg.g; jq < (j + 1) * cfg.g; ++jq) {
        Mat<T> Q = detail::col_slice(la.q_pre, jq * cfg.d_m, cfg.d_m);
        rope_apply(Q, m, cfg.rope_theta);
        Mat<T>* probs_out = nullptr;
        if (want_attention) {
          la.attn_probs[jq] = Mat<T>(n, m + n, T(0));
          probs_out = &la.attn_probs[jq];
        }

        std::vector<T> srow(m + n);
        for (size_t t = 0; t < n; ++t) {
          const size_t kmax = m + t + 1;  // causal frontier
          const T* qrow = Q.row(t);
          for (size_t k = 0; k < kmax; ++k)
            srow[k] = dot(qrow, K.row(k), cfg.d_kv) * inv_sqrt_dm;
          detail::softmax_span(srow.data(), kmax);
          T* orow = attn_out.row(t) + jq * cfg.d_m;
          for (size_t k = 0; k < kmax; ++k) {
            const T p = srow[k];
            const T* vrow = V.row(k);
            for (size_t c = 0; c < cfg.d_kv; ++c) orow[c] += p * vrow[c];
          }
          if (probs_out)
            for (size_t k = 0; k < kmax; ++k) (*probs_out)(t, k) = srow[k];
        }
      }
    }

    Mat<T> o = matmul(attn_out, lw.wo);
    add_inplace(x, o);

    Mat<T> f = x;
    rmsnorm_rows(f, lw.ffn_norm, static_cast<T>(cfg.norm_eps));
    Mat<T> gate = matmul(f, lw.w_gate);
    Mat<T> up = matmul(f, lw.w_up);
    for (size_t i = 0; i < gate.data.size(); ++i)
      gate.data[i] = silu(gate.data[i]) * up.data[i];
    Mat<T> down = matmul(gate, lw.w_down);
    add_inplace(x, down);

    la.hidden_out = x;
  }

  Mat<T> fn = x;
  rmsnorm_rows(fn, w.final_norm, static_cast<T>(cfg.norm_eps));
  acts.logits = matmul(fn, w.unembed);
  return acts;
}

// Whole-sequence forward with an empty cache: the reference path every
// eviction run is compared against.
template <typename T>
Activations<T> full_forward(const Weights<T>& w, const ModelConfig& cfg,
                            const std::vector<int>& tokens,
                            bool want_attention = false) {
  CachePool<T> empty(cfg.L, cfg.kv_heads());
  return forward_chunk(w, cfg, tokens, empty, want_attention);
}

// Post-rotary pre-softmax attention scores Q K^T for one query head of a
// full-sequence forward (positions 0..n-1). No 1/sqrt(d_m) scaling; rows
// are valid only up to the causal frontier, the rest is zero.
template <typename T>
Mat<T> attention_logits(const ModelConfig& cfg, const Activations<T>& acts,
                        size_t layer, size_t query_head) {
  const size_t n = acts.n;
  const size_t j = query_head / cfg.g;
  Mat<T> Q = detail::col_slice(acts.layers[layer].q_pre, query_head * cfg.d_m,
                               cfg.d_m);
  Mat<T> K = detail::col_slice(acts.layers[layer].k_pre, j * cfg.d_kv,
                               cfg.d_kv);
  rope_apply(Q, size_t{0}, cfg.rope_theta);
  rope_apply(K, size_t{0}, cfg.rope_theta);
  Mat<T> out(n, n, T(0));
  for (size_t p = 0; p < n; ++p)
    for (size_t k = 0; k <= p; ++k)
      out(p, k) = dot(Q.row(p), K.row(k), cfg.d_kv);
  return out;
}

// Causal post-softmax attention probabilities for one query head of a
// full-sequence forward.
template <typename T>
Mat<T> attention_probs(const ModelConfig& cfg, const Activations<T>& acts,
                       size_t layer, size_t query_head) {
  Mat<T> s = attention_logits(cfg, acts, layer, query_head);
  const T inv_sqrt_dm = T(1) / static_cast<T>(std::sqrt(double(cfg.d_m)));
  for (size_t p = 0; p < s.rows; ++p) {
    T* r = s.row(p);
    for (size_t k = 0; k <= p; ++k) r[k] *= inv_sqrt_dm;
    detail::softmax_span(r, p + 1);
    for (size_t k = p + 1; k < s.cols; ++k) r[k] = T(0);
  }
  return s;
}

// Surprisal of `token` under a logits row: -log softmax(logits)[token].
template <typename T>
T token_entropy(const T* logits, size_t n, size_t token) {
  if (token >= n) throw ShapeError("token_entropy: token id out of range");
  T m = logits[0];
  for (size_t i = 1; i < n; ++i) m = std::max(m, logits[i]);
  T sum = T(0);
  for (size_t i = 0; i < n; ++i) sum += std::exp(logits[i] - m);
  return m + std::log(sum) - logits[token];
}

// Full-attention greedy decode used as the no-eviction baseline: recomputes
// the whole sequence every step, so it shares no cache machinery with the
// chunked path.
template <typename T>
std::vector<int> greedy_decode_full(const Weights<T>& w,
                                    const ModelConfig& cfg,
                                    std::vector<int> tokens, size_t max_new) {
  std::vector<int> out;
  for (size_t s = 0; s < max_new; ++s) {
    Activations<T> acts = full_forward(w, cfg, tokens);
    const size_t next =
        argmax(acts.logits.row(acts.n - 1), cfg.vocab);
    out.push_back(static_cast<int>(next));
    tokens.push_back(static_cast<int>(next));
  }
  return out;
}

// ---- initialization, serialization, hashing ----

template <typename T>
Weights<T> init_random(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const double std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  auto fill = [&](Mat<T>& m, size_t r, size_t c) {
    m = Mat<T>(r, c);
    for (auto& v : m.data) v = static_cast<T>(rng.normal(0.0, std));
  };
  Weights<T> w;
  fill(w.embed, cfg.vocab, cfg.d_model);
  fill(w.unembed, cfg.d_model, cfg.vocab);
  w.final_norm.assign(cfg.d_model, T(1));
  w.layers.resize(cfg.L);
  for (auto& lw : w.layers) {
    fill(lw.wq, cfg.d_model, cfg.h * cfg.d_m);
    fill(lw.wk, cfg.d_model, cfg.kv_heads() * cfg.d_kv);
    fill(lw.wv, cfg.d_model, cfg.kv_heads() * cfg.d_kv);
    fill(lw.wo, cfg.h * cfg.d_m, cfg.d_model);
    fill(lw.w_gate, cfg.d_model, cfg.d_ff);
    fill(lw.w_up, cfg.d_model, cfg.d_ff);
    fill(lw.w_down, cfg.d_ff, cfg.d_model);
    lw.attn_norm.assign(cfg.d_model, T(1));
    lw.ffn_norm.assign(cfg.d_model, T(1));
  }
  return w;
}

template <typename T>
void save_weights(const Weights<T>& w, const std::string& path) {
  TensorFile tf;
  tf.put("embed", w.embed);
  tf.put("unembed", w.unembed);
  tf.put("final_norm", w.final_norm);
  for (size_t l = 0; l < w.layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const LayerWeights<T>& lw = w.layers[l];
    tf.put(p + "wq", lw.wq);
    tf.put(p + "wk", lw.wk);
    tf.put(p + "wv", lw.wv);
    tf.put(p + "wo", lw.wo);
    tf.put(p + "w_gate", lw.w_gate);
    tf.put(p + "w_up", lw.w_up);
    tf.put(p + "w_down", lw.w_down);
    tf.put(p + "attn_norm", lw.attn_norm);
    tf.put(p + "ffn_norm", lw.ffn_norm);
  }
  tf.save(path);
}

template <typename T>
Weights<T> load_weights(const ModelConfig& cfg, const std::string& path) {
  TensorFile tf = TensorFile::load(path);
  Weights<T> w;
  w.embed = tf.get_mat<T>("embed");
  w.unembed = tf.get_mat<T>("unembed");
  w.final_norm = tf.get_vec<T>("final_norm");
  w.layers.resize(cfg.L);
  for (size_t l = 0; l < cfg.L; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerWeights<T>& lw = w.layers[l];
    lw.wq = tf.get_mat<T>(p + "wq");
    lw.wk = tf.get_mat<T>(p + "wk");
    lw.wv = tf.get_mat<T>(p + "wv");
    lw.wo = tf.get_mat<T>(p + "wo");
    lw.w_gate = tf.get_mat<T>(p + "w_gate");
    lw.w_up = tf.get_mat<T>(p + "w_up");
    lw.w_down = tf.get_mat<T>(p + "w_down");
    lw.attn_norm = tf.get_vec<T>(p + "attn_norm");
    lw.ffn_norm = tf.get_vec<T>(p + "ffn_norm");
  }
  if (w.embed.rows != cfg.vocab || w.embed.cols != cfg.d_model ||
      w.unembed.rows != cfg.d_model || w.unembed.cols != cfg.vocab)
    throw DataError("weights file does not match the model config");
  return w;
}

template <typename T>
uint64_t weights_hash(const Weights<T>& w) {
  uint64_t h = 1469598103934665603ull;
  auto mix_mat = [&](const Mat<T>& m) {
    h = fnv1a64(m.data.data(), m.data.size() * sizeof(T), h);
  };
  auto mix_vec = [&](const std::vector<T>& v) {
    h = fnv1a64(v.data(), v.size() * sizeof(T), h);
  };
  mix_mat(w.embed);
  mix_mat(w.unembed);
  mix_vec(w.final_norm);
  for (const auto& lw : w.layers) {
    mix_mat(lw.wq);
    mix_mat(lw.wk);
    mix_mat(lw.wv);
    mix_mat(lw.wo);
    mix_mat(lw.w_gate);
    mix_mat(lw.w_up);
    mix_mat(lw.w_down);
    mix_vec(lw.attn_norm);
    mix_vec(lw.ffn_norm);
  }
  return h;
}

// ---- matched-filter backbone ----
//
// An analytic single-circuit model for retrieval experiments. Token
// embeddings are one-hot, and layer 0 holds two hand-built heads:
//
//   head 0  identity matcher. Query and key of token t are the same basis
//           vector, so the pre-softmax score of a query at p against a key
//           at k is ~match_gain^2 iff token_p == token_k and ~0 otherwise.
//           Its value path is zero; the head exists to shape attention
//           scores (and through them importance labels), not the output.
//
//   head 1  slot walker, which is what actually answers. The passkey layout
//           gives each needle slot s a private digit alphabet. A digit of
//           slot s queries for slot keys u_s and u_{s+1}; the question
//           marker queries for u_0. The value path copies the attended
//           token's identity into a separate output band of the residual,
//           and the unembedding reads that band while subtracting the
//           current input token, so greedy decoding walks the needle one
//           slot per step.
//
// All codes live on the low-frequency halves of the rotary pairs, so scores
// attenuate by at most ~cos(dist / sqrt(rope_theta)); with the default
// rope_theta of 1e8 the construction is usable to distances of a couple of
// thousand tokens. Layers above 0 are wired to the identity.
struct MatchedFilterLayout {
  static constexpr size_t n_slots = 5;
  static constexpr size_t digits_per_slot = 4;
  size_t vocab = 0;

  explicit MatchedFilterLayout(size_t vocab_size) : vocab(vocab_size) {
    if (vocab < n_slots * digits_per_slot + 6)
      throw ConfigError("matched filter: vocab too small for the layout");
  }

  size_t digit_base() const { return vocab - n_slots * digits_per_slot; }
  size_t marker() const { return digit_base() - 1; }
  size_t filler_count() const { return marker(); }  // filler ids [0, marker)
  size_t digit(size_t slot, size_t value) const {
    return digit_base() + slot * digits_per_slot + value;
  }
  bool is_digit(size_t t) const { return t >= digit_base() && t < vocab; }
  size_t slot_of(size_t t) const { return (t - digit_base()) / digits_per_slot; }
};

template <typename T>
Weights<T> build_matched_filter(const ModelConfig& cfg, double match_gain) {
  cfg.validate();
  MatchedFilterLayout layout(cfg.vocab);
  if (cfg.g != 1)
    throw ConfigError("matched filter: needs g == 1 (two independent heads)");
  if (cfg.h < 2) throw ConfigError("matched filter: needs at least 2 heads");
  if (cfg.d_m < 2 * cfg.vocab)
    throw ConfigError("matched filter: needs d_m >= 2*vocab");
  if (cfg.d_model < 2 * cfg.vocab)
    throw ConfigError("matched filter: needs d_model >= 2*vocab");
  if (cfg.rope_theta < 1e6)
    throw ConfigError("matched filter: needs rope_theta >= 1e6");
  if (match_gain <= 0.0) throw ConfigError("matched filter: gain must be > 0");

  Weights<T> w;
  w.embed = Mat<T>(cfg.vocab, cfg.d_model, T(0));
  for (size_t t = 0; t < cfg.vocab; ++t) w.embed(t, t) = T(1);

  // rmsnorm maps a one-hot row to rho * e_t
  const double rho =
      1.0 / std::sqrt(1.0 / static_cast<double>(cfg.d_model) + cfg.norm_eps);
  const double gamma = match_gain / rho;
  const size_t half = cfg.d_m / 2;  // low-frequency band starts here

  w.unembed = Mat<T>(cfg.d_model, cfg.vocab, T(0));
  for (size_t t = 0; t < cfg.vocab; ++t) {
    w.unembed(cfg.vocab + t, t) = T(1);               // output band
    w.unembed(t, t) = static_cast<T>(-rho);           // input-token penalty
  }
  w.final_norm.assign(cfg.d_model, T(1));

  w.layers.resize(cfg.L);
  for (size_t l = 0; l < cfg.L; ++l) {
    LayerWeights<T>& lw = w.layers[l];
    lw.wq = Mat<T>(cfg.d_model, cfg.h * cfg.d_m, T(0));
    lw.wk = Mat<T>(cfg.d_model, cfg.kv_heads() * cfg.d_kv, T(0));
    lw.wv = Mat<T>(cfg.d_model, cfg.kv_heads() * cfg.d_kv, T(0));
    lw.wo = Mat<T>(cfg.h * cfg.d_m, cfg.d_model, T(0));
    lw.w_gate = Mat<T>(cfg.d_model, cfg.d_ff, T(0));
    lw.w_up = Mat<T>(cfg.d_model, cfg.d_ff, T(0));
    lw.w_down = Mat<T>(cfg.d_ff, cfg.d_model, T(0));
    lw.attn_norm.assign(cfg.d_model, T(1));
    lw.ffn_norm.assign(cfg.d_model, T(1));
  }

  LayerWeights<T>& l0 = w.layers[0];
  const T gq = static_cast<T>(gamma);

  // head 0: identity matcher, token code t on low-frequency dim half+t
  for (size_t t = 0; t < cfg.vocab; ++t) {
    l0.wq(t, half + t) = gq;
    l0.wk(t, half + t) = gq;
  }

  // head 1: slot walker
  const size_t qc = cfg.d_m;   // head 1's query column block
  const size_t kc = cfg.d_kv;  // head 1's key/value column block
  for (size_t s = 0; s < MatchedFilterLayout::n_slots; ++s)
    for (size_t dv = 0; dv < MatchedFilterLayout::digits_per_slot; ++dv) {
      const size_t t = layout.digit(s, dv);
      l0.wk(t, kc + half + s) = gq;       // key: own slot code
      l0.wq(t, qc + half + s) = gq;       // query prong: own slot
      l0.wq(t, qc + half + s + 1) = gq;   // query prong: next slot
    }
  l0.wq(layout.marker(), qc + half + 0) = gq;  // marker asks for slot 0

  // head 1 value path: copy attended token identity; route it to the
  // output band (residual dims vocab..2*vocab)
  for (size_t t = 0; t < cfg.vocab; ++t) {
    l0.wv(t, kc + t) = T(1);
    l0.wo(cfg.d_m + t, cfg.vocab + t) = T(1);
  }
  return w;
}

}  // namespace retainkv
