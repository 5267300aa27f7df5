#pragma once

// Trained retaining heads: one two-matrix MLP per layer that predicts, from a
// token's own projections, how much future queries will attend to it. The
// prediction is pointwise per token, which is what makes scores causal and
// stable under later context growth. Training regresses the predictions onto
// labels harvested from full-attention runs; the backbone stays frozen.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "retainkv/backbone.hpp"
#include "retainkv/common.hpp"
#include "retainkv/mat.hpp"
#include "retainkv/tensor_file.hpp"

namespace retainkv {

struct TrainingExample {
  std::vector<int> prompt;
  std::vector<int> answer;
};

using Dataset = std::vector<TrainingExample>;

struct TrainingConfig {
  double lr = 5e-4;
  size_t warmup_steps = 2000;
  size_t total_steps = 3000;
  double alpha = 2.5e-3;  // weight of the adjacent-smoothness penalty
  size_t d_R = 1024;      // head hidden width
  size_t seq_cap = 10240;
  bool label_scaling = false;  // divide labels by sqrt(d_m)
  bool loss_mean = false;      // averaged loss instead of summed
  size_t lq = 0;               // query-prefix length; 0 disables

  void validate() const {
    if (lr <= 0.0) throw ConfigError("training: lr must be positive");
    if (total_steps == 0) throw ConfigError("training: total_steps must be > 0");
    if (warmup_steps > total_steps)
      throw ConfigError("training: warmup_steps must not exceed total_steps");
    if (alpha < 0.0) throw ConfigError("training: alpha must be >= 0");
    if (d_R == 0) throw ConfigError("training: d_R must be positive");
    if (seq_cap < 2) throw ConfigError("training: seq_cap too small");
  }
};

// scores indexed [layer][kv_head][position]
template <typename T>
struct ScoreTensor {
  size_t layers = 0;
  size_t heads = 0;
  std::vector<std::vector<std::vector<T>>> v;

  ScoreTensor() = default;
  ScoreTensor(size_t L, size_t H, size_t n)
      : layers(L), heads(H),
        v(L, std::vector<std::vector<T>>(H, std::vector<T>(n, T(0)))) {}

  std::vector<T>& at(size_t l, size_t j) { return v[l][j]; }
  const std::vector<T>& at(size_t l, size_t j) const { return v[l][j]; }
};

template <typename T>
struct RetainingHead {
  Mat<T> w1;  // (d_m + 2*d_kv) x d_R
  Mat<T> w2;  // d_R x kv_heads
};

template <typename T>
struct HeadSet {
  std::vector<RetainingHead<T>> layers;
};

template <typename T>
HeadSet<T> init_headset(const ModelConfig& cfg, size_t d_R, uint64_t seed) {
  cfg.validate();
  if (d_R == 0) throw ConfigError("headset: d_R must be positive");
  Rng rng(seed);
  const size_t d_in = cfg.d_m + 2 * cfg.d_kv;
  HeadSet<T> hs;
  hs.layers.resize(cfg.L);
  for (auto& head : hs.layers) {
    head.w1 = Mat<T>(d_in, d_R);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (auto& v : head.w1.data) v = static_cast<T>(rng.normal(0.0, s1));
    head.w2 = Mat<T>(d_R, cfg.kv_heads());
    const double s2 = 1.0 / std::sqrt(static_cast<double>(d_R));
    for (auto& v : head.w2.data) v = static_cast<T>(rng.normal(0.0, s2));
  }
  return hs;
}

template <typename T>
void save_headset(const HeadSet<T>& hs, const std::string& path) {
  TensorFile tf;
  for (size_t l = 0; l < hs.layers.size(); ++l) {
    tf.put("layer" + std::to_string(l) + ".W1", hs.layers[l].w1);
    tf.put("layer" + std::to_string(l) + ".W2", hs.layers[l].w2);
  }
  tf.save(path);
}

template <typename T>
HeadSet<T> load_headset(const ModelConfig& cfg, const std::string& path) {
  TensorFile tf = TensorFile::load(path);
  HeadSet<T> hs;
  hs.layers.resize(cfg.L);
  for (size_t l = 0; l < cfg.L; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    hs.layers[l].w1 = tf.get_mat<T>(p + "W1");
    hs.layers[l].w2 = tf.get_mat<T>(p + "W2");
    if (hs.layers[l].w1.rows != cfg.d_m + 2 * cfg.d_kv ||
        hs.layers[l].w1.cols != hs.layers[l].w2.rows ||
        hs.layers[l].w2.cols != cfg.kv_heads())
      throw DataError("headset file does not match the model config");
  }
  return hs;
}

// One MLP evaluation: scores = silu([q|k|v] W1) W2, one entry per KV head.
template <typename T>
std::vector<T> predict_cis(const RetainingHead<T>& head, const T* q_row,
                           const T* k_row, const T* v_row, size_t d_m,
                           size_t d_kv) {
  const size_t d_in = d_m + 2 * d_kv;
  if (head.w1.rows != d_in) throw ShapeError("predict_cis: input width");
  std::vector<T> x(d_in);
  for (size_t i = 0; i < d_m; ++i) x[i] = q_row[i];
  for (size_t i = 0; i < d_kv; ++i) x[d_m + i] = k_row[i];
  for (size_t i = 0; i < d_kv; ++i) x[d_m + d_kv + i] = v_row[i];

  const size_t d_R = head.w1.cols;
  std::vector<T> a(d_R, T(0));
  for (size_t u = 0; u < d_in; ++u) {
    const T xu = x[u];
    const T* wrow = head.w1.row(u);
    for (size_t r = 0; r < d_R; ++r) a[r] += xu * wrow[r];
  }
  for (size_t r = 0; r < d_R; ++r) a[r] = silu(a[r]);

  std::vector<T> out(head.w2.cols, T(0));
  for (size_t r = 0; r < d_R; ++r) {
    const T ar = a[r];
    const T* wrow = head.w2.row(r);
    for (size_t j = 0; j < head.w2.cols; ++j) out[j] += ar * wrow[j];
  }
  return out;
}

// Per-token scores for every KV head of one layer. For KV head j the MLP
// input row pairs the group's first query head with that head's K and V, and
// the j-th output component is taken, so each head's score can still draw on
// the shared hidden features of all heads.
template <typename T>
std::vector<T> head_token_scores(const RetainingHead<T>& head,
                                 const Activations<T>& acts,
                                 const ModelConfig& cfg, size_t layer,
                                 size_t t) {
  std::vector<T> s(cfg.kv_heads());
  for (size_t j = 0; j < cfg.kv_heads(); ++j) {
    std::vector<T> out = predict_cis(
        head, acts.q_head_row(layer, j * cfg.g, t),
        acts.k_head_row(layer, j, t), acts.v_head_row(layer, j, t), cfg.d_m,
        cfg.d_kv);
    s[j] = out[j];
  }
  return s;
}

// ---- labels ----

// Importance labels from a full-attention pass over prompt|answer: for each
// prompt position k and KV head j, the maximum post-rotary pre-softmax
// attention score any answer query in the group pays to k.
template <typename T>
ScoreTensor<T> cis_labels_from_acts(const ModelConfig& cfg,
                                    const Activations<T>& acts, size_t n_q,
                                    bool label_scaling) {
  const size_t n = acts.n;
  if (n_q == 0 || n_q >= n)
    throw ShapeError("cis_labels: need a non-empty prompt and answer");
  ScoreTensor<T> labels(cfg.L, cfg.kv_heads(), n_q);
  const T scale =
      label_scaling ? T(1) / static_cast<T>(std::sqrt(double(cfg.d_m))) : T(1);
  for (size_t l = 0; l < cfg.L; ++l) {
    for (size_t jq = 0; jq < cfg.h; ++jq) {
      Mat<T> qk = attention_logits(cfg, acts, l, jq);
      std::vector<T>& dst = labels.at(l, jq / cfg.g);
      for (size_t k = 0; k < n_q; ++k) {
        T best = -std::numeric_limits<T>::infinity();
        for (size_t p = n_q; p < n; ++p) best = std::max(best, qk(p, k));
        best *= scale;
        if (jq % cfg.g == 0)
          dst[k] = best;
        else
          dst[k] = std::max(dst[k], best);
      }
    }
  }
  return labels;
}

template <typename T>
ScoreTensor<T> cis_labels(const Weights<T>& w, const ModelConfig& cfg,
                          const TrainingExample& ex, bool label_scaling) {
  std::vector<int> tokens = ex.prompt;
  tokens.insert(tokens.end(), ex.answer.begin(), ex.answer.end());
  Activations<T> acts = full_forward(w, cfg, tokens);
  return cis_labels_from_acts(cfg, acts, ex.prompt.size(), label_scaling);
}

// ---- loss and gradients ----

template <typename T>
T smooth_l1(T x) {
  const T a = std::abs(x);
  return a < T(1) ? T(0.5) * x * x : a - T(0.5);
}

template <typename T>
T smooth_l1_grad(T x) {
  if (x > T(1)) return T(1);
  if (x < T(-1)) return T(-1);
  return x;
}

// Per-layer training batch: one MLP input row per (position, kv head).
template <typename T>
struct LayerBatch {
  size_t n_q = 0;
  size_t kv_heads = 0;
  std::vector<std::vector<T>> x;        // [k*kv_heads + j]
  std::vector<std::vector<T>> labels;   // [j][k]
};

template <typename T>
LayerBatch<T> build_layer_batch(const Activations<T>& acts,
                                const ModelConfig& cfg,
                                const ScoreTensor<T>& labels, size_t layer,
                                size_t n_q) {
  LayerBatch<T> b;
  b.n_q = n_q;
  b.kv_heads = cfg.kv_heads();
  b.x.resize(n_q * b.kv_heads);
  const size_t d_in = cfg.d_m + 2 * cfg.d_kv;
  for (size_t k = 0; k < n_q; ++k)
    for (size_t j = 0; j < b.kv_heads; ++j) {
      std::vector<T>& row = b.x[k * b.kv_heads + j];
      row.resize(d_in);
      const T* q = acts.q_head_row(layer, j * cfg.g, k);
      const T* kk = acts.k_head_row(layer, j, k);
      const T* vv = acts.v_head_row(layer, j, k);
      for (size_t i = 0; i < cfg.d_m; ++i) row[i] = q[i];
      for (size_t i = 0; i < cfg.d_kv; ++i) row[cfg.d_m + i] = kk[i];
      for (size_t i = 0; i < cfg.d_kv; ++i) row[cfg.d_m + cfg.d_kv + i] = vv[i];
    }
  b.labels.resize(b.kv_heads);
  for (size_t j = 0; j < b.kv_heads; ++j) b.labels[j] = labels.at(layer, j);
  return b;
}

// Predicted scores for a batch: pred[j][k].
template <typename T>
std::vector<std::vector<T>> layer_predictions(const RetainingHead<T>& head,
                                              const LayerBatch<T>& b) {
  std::vector<std::vector<T>> pred(b.kv_heads, std::vector<T>(b.n_q));
  for (size_t k = 0; k < b.n_q; ++k)
    for (size_t j = 0; j < b.kv_heads; ++j) {
      const std::vector<T>& x = b.x[k * b.kv_heads + j];
      const size_t d_R = head.w1.cols;
      std::vector<T> z(d_R, T(0));
      for (size_t u = 0; u < x.size(); ++u) {
        const T xu = x[u];
        const T* wrow = head.w1.row(u);
        for (size_t r = 0; r < d_R; ++r) z[r] += xu * wrow[r];
      }
      T out = T(0);
      for (size_t r = 0; r < d_R; ++r) out += silu(z[r]) * head.w2(r, j);
      pred[j][k] = out;
    }
  return pred;
}

// Smooth-L1 regression plus alpha * sum of squared adjacent differences of
// the predictions, summed over heads and positions (averaged when mean_mode).
template <typename T>
T score_loss(const std::vector<std::vector<T>>& pred,
             const std::vector<std::vector<T>>& labels, double alpha,
             bool mean_mode) {
  T total = T(0);
  size_t terms = 0;
  for (size_t j = 0; j < pred.size(); ++j) {
    const size_t n = pred[j].size();
    for (size_t k = 0; k < n; ++k) {
      total += smooth_l1(pred[j][k] - labels[j][k]);
      ++terms;
    }
    for (size_t k = 0; k + 1 < n; ++k) {
      const T d = pred[j][k] - pred[j][k + 1];
      total += static_cast<T>(alpha) * d * d;
    }
  }
  if (mean_mode && terms > 0) total /= static_cast<T>(terms);
  return total;
}

template <typename T>
struct HeadGrads {
  Mat<T> dw1;
  Mat<T> dw2;
  T loss = T(0);
};

// Analytic gradient of score_loss for one layer's head.
template <typename T>
HeadGrads<T> grad_head(const RetainingHead<T>& head, const LayerBatch<T>& b,
                       double alpha, bool mean_mode) {
  const size_t d_R = head.w1.cols;
  const size_t d_in = head.w1.rows;
  HeadGrads<T> g;
  g.dw1 = Mat<T>(d_in, d_R, T(0));
  g.dw2 = Mat<T>(d_R, head.w2.cols, T(0));

  std::vector<std::vector<T>> pred = layer_predictions(head, b);
  g.loss = score_loss(pred, b.labels, alpha, mean_mode);

  // dL/dpred
  std::vector<std::vector<T>> gp(b.kv_heads, std::vector<T>(b.n_q, T(0)));
  size_t terms = 0;
  for (size_t j = 0; j < b.kv_heads; ++j) {
    for (size_t k = 0; k < b.n_q; ++k) {
      gp[j][k] += smooth_l1_grad(pred[j][k] - b.labels[j][k]);
      ++terms;
    }
    for (size_t k = 0; k + 1 < b.n_q; ++k) {
      const T d = pred[j][k] - pred[j][k + 1];
      gp[j][k] += T(2) * static_cast<T>(alpha) * d;
      gp[j][k + 1] -= T(2) * static_cast<T>(alpha) * d;
    }
  }
  const T norm = (mean_mode && terms > 0) ? T(1) / static_cast<T>(terms) : T(1);

  std::vector<T> z(d_R), dz(d_R);
  for (size_t k = 0; k < b.n_q; ++k)
    for (size_t j = 0; j < b.kv_heads; ++j) {
      const std::vector<T>& x = b.x[k * b.kv_heads + j];
      std::fill(z.begin(), z.end(), T(0));
      for (size_t u = 0; u < d_in; ++u) {
        const T xu = x[u];
        const T* wrow = head.w1.row(u);
        for (size_t r = 0; r < d_R; ++r) z[r] += xu * wrow[r];
      }
      const T go = gp[j][k] * norm;
      if (go == T(0)) continue;
      for (size_t r = 0; r < d_R; ++r) {
        g.dw2(r, j) += silu(z[r]) * go;
        dz[r] = head.w2(r, j) * go * silu_grad(z[r]);
      }
      for (size_t u = 0; u < d_in; ++u) {
        const T xu = x[u];
        if (xu == T(0)) continue;
        T* drow = g.dw1.row(u);
        for (size_t r = 0; r < d_R; ++r) drow[r] += xu * dz[r];
      }
    }
  return g;
}

// ---- optimizer and schedule ----

template <typename T>
struct AdamWState {
  Mat<T> m;
  Mat<T> v;
  size_t t = 0;

  explicit AdamWState(size_t rows = 0, size_t cols = 0)
      : m(rows, cols, T(0)), v(rows, cols, T(0)) {}
};

// Decoupled weight decay: the decay term multiplies lr but not the adaptive
// step.
template <typename T>
void adamw_step(Mat<T>& param, const Mat<T>& grad, AdamWState<T>& st,
                double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8, double weight_decay = 0.01) {
  if (param.rows != grad.rows || param.cols != grad.cols)
    throw ShapeError("adamw_step: grad shape mismatch");
  if (st.m.data.size() != param.data.size()) {
    st.m = Mat<T>(param.rows, param.cols, T(0));
    st.v = Mat<T>(param.rows, param.cols, T(0));
    st.t = 0;
  }
  st.t += 1;
  const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
  const T bc1 = T(1) - static_cast<T>(std::pow(beta1, double(st.t)));
  const T bc2 = T(1) - static_cast<T>(std::pow(beta2, double(st.t)));
  for (size_t i = 0; i < param.data.size(); ++i) {
    const T gi = grad.data[i];
    st.m.data[i] = b1 * st.m.data[i] + (T(1) - b1) * gi;
    st.v.data[i] = b2 * st.v.data[i] + (T(1) - b2) * gi * gi;
    const T mh = st.m.data[i] / bc1;
    const T vh = st.v.data[i] / bc2;
    param.data[i] -= static_cast<T>(lr) *
                     (mh / (std::sqrt(vh) + static_cast<T>(eps)) +
                      static_cast<T>(weight_decay) * param.data[i]);
  }
}

// Linear ramp 0 -> lr over warmup steps, then linear decay to 0 at total.
inline double lr_schedule(size_t step, double lr, size_t warmup,
                          size_t total) {
  if (step >= total) return 0.0;
  if (warmup > 0 && step < warmup)
    return lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return lr;
  return lr * static_cast<double>(total - step) /
         static_cast<double>(total - warmup);
}

// ---- query-aware example transform ----

// Prepends the last min(lq, |prompt|) prompt tokens to the prompt, so the
// question is visible from the start of the sequence.
inline TrainingExample make_query_aware_example(const TrainingExample& ex,
                                                size_t lq) {
  TrainingExample out;
  const size_t take = std::min(lq, ex.prompt.size());
  out.prompt.assign(ex.prompt.end() - static_cast<std::ptrdiff_t>(take),
                    ex.prompt.end());
  out.prompt.insert(out.prompt.end(), ex.prompt.begin(), ex.prompt.end());
  out.answer = ex.answer;
  return out;
}

// ---- training loop ----

template <typename T>
struct TrainResult {
  std::vector<double> loss_curve;  // one entry per step
};

// Examples longer than seq_cap keep the answer and the front of the prompt
// (dropping the tail would destroy a query-aware prefix).
inline TrainingExample truncate_example(const TrainingExample& ex,
                                        size_t seq_cap) {
  if (ex.prompt.size() + ex.answer.size() <= seq_cap) return ex;
  if (ex.answer.size() >= seq_cap)
    throw DataError("training example: answer alone exceeds seq_cap");
  TrainingExample out;
  const size_t keep = seq_cap - ex.answer.size();
  out.prompt.assign(ex.prompt.begin(),
                    ex.prompt.begin() + static_cast<std::ptrdiff_t>(keep));
  out.answer = ex.answer;
  return out;
}

template <typename T>
TrainResult<T> train_headset(const Weights<T>& w, const ModelConfig& cfg,
                             const TrainingConfig& tcfg, const Dataset& data,
                             HeadSet<T>& heads, uint64_t seed) {
  cfg.validate();
  tcfg.validate();
  if (data.empty()) throw DataError("train: dataset is empty");
  for (const auto& ex : data)
    if (ex.prompt.empty() || ex.answer.empty())
      throw DataError("train: examples need non-empty prompt and answer");

  Rng rng(seed);
  std::vector<AdamWState<T>> st1(cfg.L), st2(cfg.L);
  TrainResult<T> res;
  res.loss_curve.reserve(tcfg.total_steps);

  for (size_t step = 1; step <= tcfg.total_steps; ++step) {
    TrainingExample ex = data[rng.below(data.size())];
    if (tcfg.lq > 0) ex = make_query_aware_example(ex, tcfg.lq);
    ex = truncate_example(ex, tcfg.seq_cap);

    std::vector<int> tokens = ex.prompt;
    tokens.insert(tokens.end(), ex.answer.begin(), ex.answer.end());
    Activations<T> acts = full_forward(w, cfg, tokens);
    ScoreTensor<T> labels =
        cis_labels_from_acts(cfg, acts, ex.prompt.size(), tcfg.label_scaling);

    const double lr =
        lr_schedule(step, tcfg.lr, tcfg.warmup_steps, tcfg.total_steps);
    double step_loss = 0.0;
    for (size_t l = 0; l < cfg.L; ++l) {
      LayerBatch<T> batch =
          build_layer_batch(acts, cfg, labels, l, ex.prompt.size());
      HeadGrads<T> g =
          grad_head(heads.layers[l], batch, tcfg.alpha, tcfg.loss_mean);
      adamw_step(heads.layers[l].w1, g.dw1, st1[l], lr);
      adamw_step(heads.layers[l].w2, g.dw2, st2[l], lr);
      step_loss += static_cast<double>(g.loss);
    }
    res.loss_curve.push_back(step_loss);
  }
  return res;
}

// ---- dataset io ----

inline Dataset load_dataset_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open dataset '" + path + "'");
  Dataset ds;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("dataset '" + path + "' line " + std::to_string(lineno) +
                      ": " + e.what());
    }
    if (!j.is_object() || !j.contains("prompt") || !j.contains("answer"))
      throw DataError("dataset '" + path + "' line " + std::to_string(lineno) +
                      ": expected {\"prompt\": [...], \"answer\": [...]}");
    TrainingExample ex;
    ex.prompt = j["prompt"].get<std::vector<int>>();
    ex.answer = j["answer"].get<std::vector<int>>();
    ds.push_back(std::move(ex));
  }
  return ds;
}

inline void save_dataset_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open dataset '" + path + "' for writing");
  for (const auto& ex : ds) {
    nlohmann::ordered_json j;
    j["prompt"] = ex.prompt;
    j["answer"] = ex.answer;
    f << j.dump() << "\n";
  }
}

}  // namespace retainkv
