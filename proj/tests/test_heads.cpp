#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "retainkv/backbone.hpp"
#include "retainkv/common.hpp"
#include "retainkv/heads.hpp"

using namespace retainkv;

namespace {

std::filesystem::path test_dir() {
  auto p = std::filesystem::temp_directory_path() / "retainkv_tests";
  std::filesystem::create_directories(p);
  return p;
}

LayerBatch<double> random_batch(Rng& rng, size_t n_q, size_t kv_heads,
                                size_t d_in) {
  LayerBatch<double> b;
  b.n_q = n_q;
  b.kv_heads = kv_heads;
  b.x.resize(n_q * kv_heads);
  for (auto& row : b.x) {
    row.resize(d_in);
    for (auto& v : row) v = rng.normal(0.0, 1.0);
  }
  b.labels.resize(kv_heads);
  for (auto& lab : b.labels) {
    lab.resize(n_q);
    for (auto& v : lab) v = rng.normal(0.0, 2.0);
  }
  return b;
}

RetainingHead<double> random_head(Rng& rng, size_t d_in, size_t d_R,
                                  size_t kv_heads) {
  RetainingHead<double> h;
  h.w1 = Mat<double>(d_in, d_R);
  h.w2 = Mat<double>(d_R, kv_heads);
  for (auto& v : h.w1.data) v = rng.normal(0.0, 0.5);
  for (auto& v : h.w2.data) v = rng.normal(0.0, 0.5);
  return h;
}

std::vector<double> pack_head(const RetainingHead<double>& h) {
  std::vector<double> x = h.w1.data;
  x.insert(x.end(), h.w2.data.begin(), h.w2.data.end());
  return x;
}

RetainingHead<double> unpack_head(const std::vector<double>& x, size_t d_in,
                                  size_t d_R, size_t kv_heads) {
  RetainingHead<double> h;
  h.w1 = Mat<double>(d_in, d_R);
  h.w2 = Mat<double>(d_R, kv_heads);
  std::memcpy(h.w1.data.data(), x.data(), h.w1.data.size() * sizeof(double));
  std::memcpy(h.w2.data.data(), x.data() + h.w1.data.size(),
              h.w2.data.size() * sizeof(double));
  return h;
}

}  // namespace

TEST_CASE("analytic head gradient matches central differences") {
  const size_t d_in = 5, d_R = 3, kv_heads = 2, n_q = 4;
  const double eps = 1e-5;
  for (uint64_t seed = 1; seed <= 6; ++seed) {
    Rng rng(seed);
    LayerBatch<double> b = random_batch(rng, n_q, kv_heads, d_in);
    RetainingHead<double> head = random_head(rng, d_in, d_R, kv_heads);
    const bool mean_mode = (seed % 2 == 0);
    const double alpha = (seed == 3) ? 0.0 : 2.5e-3;

    HeadGrads<double> g = grad_head(head, b, alpha, mean_mode);
    std::vector<double> ga = g.dw1.data;
    ga.insert(ga.end(), g.dw2.data.begin(), g.dw2.data.end());

    auto f = [&](const std::vector<double>& x) {
      RetainingHead<double> h = unpack_head(x, d_in, d_R, kv_heads);
      return score_loss(layer_predictions(h, b), b.labels, alpha, mean_mode);
    };
    std::vector<double> gf = finite_diff_grad(f, pack_head(head), eps);

    REQUIRE(ga.size() == gf.size());
    double worst = 0.0;
    for (size_t i = 0; i < ga.size(); ++i)
      worst = std::max(worst,
                       std::abs(ga[i] - gf[i]) / std::max(1.0, std::abs(gf[i])));
    CAPTURE(seed, worst);
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("optimizer follows the frozen scalar trajectory") {
  Mat<double> x(1, 1, 1.0);
  AdamWState<double> st(1, 1);
  const double grads[3] = {0.5, -0.3, 0.2};
  const double want[3] = {0.89900000199999996, 0.87895119893977505545,
                          0.84332947958994215261};
  for (int i = 0; i < 3; ++i) {
    Mat<double> g(1, 1, grads[i]);
    adamw_step(x, g, st, 0.1);
    CHECK(std::abs(x(0, 0) - want[i]) < 1e-14);
  }
  CHECK(st.t == 3);

  Mat<double> bad(2, 1, 0.0);
  CHECK_THROWS_AS(adamw_step(x, bad, st, 0.1), ShapeError);
}

TEST_CASE("learning-rate schedule hits its corner points") {
  CHECK(lr_schedule(0, 1e-3, 2000, 3000) == 0.0);
  CHECK(lr_schedule(500, 1e-3, 2000, 3000) == Catch::Approx(2.5e-4));
  CHECK(lr_schedule(2000, 1e-3, 2000, 3000) == Catch::Approx(1e-3));
  CHECK(lr_schedule(2500, 1e-3, 2000, 3000) == Catch::Approx(5e-4));
  CHECK(lr_schedule(3000, 1e-3, 2000, 3000) == 0.0);
  CHECK(lr_schedule(9000, 1e-3, 2000, 3000) == 0.0);
  CHECK(lr_schedule(1, 1e-3, 0, 100) == Catch::Approx(1e-3 * 99.0 / 100.0));
  CHECK(lr_schedule(2000, 1e-3, 2000, 2000) == 0.0);
}

TEST_CASE("score loss has closed-form values") {
  const size_t heads = 2, n = 5;
  std::vector<std::vector<double>> pred(heads, std::vector<double>(n, 3.0));
  std::vector<std::vector<double>> labels = pred;

  CHECK(score_loss(pred, labels, 2.5e-3, false) == 0.0);

  for (auto& row : pred)
    for (auto& v : row) v += 2.0;  // residual 2 -> smooth-l1 of 1.5 each
  CHECK(score_loss(pred, labels, 2.5e-3, false) ==
        Catch::Approx(1.5 * heads * n));
  CHECK(score_loss(pred, labels, 2.5e-3, true) == Catch::Approx(1.5));

  // alternating +-1 with matching labels isolates the smoothness term
  for (size_t j = 0; j < heads; ++j)
    for (size_t k = 0; k < n; ++k) {
      pred[j][k] = (k % 2 == 0) ? 1.0 : -1.0;
      labels[j][k] = pred[j][k];
    }
  CHECK(score_loss(pred, labels, 0.5, false) ==
        Catch::Approx(0.5 * 4.0 * (n - 1) * heads));
  CHECK(score_loss(pred, labels, 0.0, false) == 0.0);

  const double s = score_loss(pred, labels, 0.5, false);
  CHECK(score_loss(pred, labels, 0.5, true) ==
        Catch::Approx(s / double(heads * n)));
}

TEST_CASE("labels take the strongest answer query per head group") {
  ModelConfig cfg;  // h=4 g=2 -> 2 kv heads
  Weights<double> w = init_random<double>(cfg, 77);
  Rng rng(4);
  std::vector<int> toks(12);
  for (auto& t : toks) t = static_cast<int>(rng.below(cfg.vocab));
  const size_t n_q = 9, n = toks.size();

  Activations<double> acts = full_forward(w, cfg, toks);
  ScoreTensor<double> lab = cis_labels_from_acts(cfg, acts, n_q, false);

  // rotate-and-dot done locally, by position, straight from the raw q/k rows
  auto roped = [&](const double* src, size_t pos) {
    std::vector<double> v(src, src + cfg.d_kv);
    for (size_t i = 0; 2 * i + 1 < v.size(); ++i) {
      const double ang = double(pos) * std::pow(cfg.rope_theta,
                                                -2.0 * double(i) /
                                                    double(v.size()));
      const double a = v[2 * i], b = v[2 * i + 1];
      v[2 * i] = a * std::cos(ang) - b * std::sin(ang);
      v[2 * i + 1] = a * std::sin(ang) + b * std::cos(ang);
    }
    return v;
  };

  for (size_t l = 0; l < cfg.L; ++l)
    for (size_t j = 0; j < cfg.kv_heads(); ++j)
      for (size_t k = 0; k < n_q; ++k) {
        double best = -1e300;
        for (size_t p = n_q; p < n; ++p)
          for (size_t jq = j * cfg.g; jq < (j + 1) * cfg.g; ++jq) {
            std::vector<double> q = roped(acts.q_head_row(l, jq, p), p);
            std::vector<double> kk = roped(acts.k_head_row(l, j, k), k);
            double d = 0.0;
            for (size_t c = 0; c < cfg.d_kv; ++c) d += q[c] * kk[c];
            best = std::max(best, d);
          }
        CHECK(std::abs(lab.at(l, j)[k] - best) <=
              1e-12 * std::max(1.0, std::abs(best)));
      }

  ScoreTensor<double> scaled = cis_labels_from_acts(cfg, acts, n_q, true);
  const double inv = 1.0 / std::sqrt(double(cfg.d_m));
  for (size_t l = 0; l < cfg.L; ++l)
    for (size_t j = 0; j < cfg.kv_heads(); ++j)
      for (size_t k = 0; k < n_q; ++k)
        CHECK(scaled.at(l, j)[k] == Catch::Approx(lab.at(l, j)[k] * inv));
}

TEST_CASE("tiny scoring MLP evaluates to hand-computed values") {
  // d_in = 4, d_R = 2, 2 kv heads; weights chosen so z = (1, -1)
  RetainingHead<double> h;
  h.w1 = Mat<double>(4, 2, 0.0);
  h.w1(0, 0) = 1.0;   // x0 contributes to z0
  h.w1(2, 1) = 1.0;   // x2 contributes to z1
  h.w1(3, 0) = 0.5;   // x3 contributes to z0
  h.w2 = Mat<double>(2, 2, 0.0);
  h.w2(0, 0) = 2.0;
  h.w2(1, 0) = 1.0;
  h.w2(0, 1) = -1.0;

  const double q[2] = {2.0, 0.0};  // d_m = 2
  const double k[1] = {-1.0};      // d_kv = 1
  const double v[1] = {-2.0};      // x = (2, 0, -1, -2) -> z = (1, -1)
  std::vector<double> out = predict_cis(h, q, k, v, 2, 1);

  const double silu_p1 = 0.7310585786300049;
  const double silu_m1 = -0.2689414213699951;
  REQUIRE(out.size() == 2);
  CHECK(out[0] == Catch::Approx(2.0 * silu_p1 + silu_m1).margin(1e-15));
  CHECK(out[1] == Catch::Approx(-silu_p1).margin(1e-15));
}

TEST_CASE("training-time predictions equal inference-time scores") {
  ModelConfig cfg;
  Weights<double> w = init_random<double>(cfg, 5);
  HeadSet<double> hs = init_headset<double>(cfg, 16, 9);
  Rng rng(6);
  std::vector<int> toks(11);
  for (auto& t : toks) t = static_cast<int>(rng.below(cfg.vocab));

  Activations<double> acts = full_forward(w, cfg, toks);
  ScoreTensor<double> lab = cis_labels_from_acts(cfg, acts, 8, false);
  for (size_t l = 0; l < cfg.L; ++l) {
    LayerBatch<double> b = build_layer_batch(acts, cfg, lab, l, 8);
    auto pred = layer_predictions(hs.layers[l], b);
    for (size_t t = 0; t < 8; ++t) {
      std::vector<double> s = head_token_scores(hs.layers[l], acts, cfg, l, t);
      for (size_t j = 0; j < cfg.kv_heads(); ++j)
        CHECK(std::abs(s[j] - pred[j][t]) <=
              1e-12 * std::max(1.0, std::abs(pred[j][t])));
    }
  }
}

TEST_CASE("query-aware transform prepends the question") {
  TrainingExample ex;
  ex.prompt = {1, 2, 3, 4, 5};
  ex.answer = {9};
  TrainingExample out = make_query_aware_example(ex, 2);
  CHECK(out.prompt == std::vector<int>{4, 5, 1, 2, 3, 4, 5});
  CHECK(out.answer == ex.answer);

  out = make_query_aware_example(ex, 50);
  CHECK(out.prompt == std::vector<int>{1, 2, 3, 4, 5, 1, 2, 3, 4, 5});
}

TEST_CASE("truncation keeps the prompt head and the whole answer") {
  TrainingExample ex;
  ex.prompt = {1, 2, 3, 4, 5, 6, 7, 8};
  ex.answer = {7, 7, 7};
  TrainingExample out = truncate_example(ex, 6);
  CHECK(out.prompt == std::vector<int>{1, 2, 3});
  CHECK(out.answer == ex.answer);

  CHECK(truncate_example(ex, 11).prompt == ex.prompt);
  CHECK_THROWS_AS(truncate_example(ex, 3), DataError);
}

TEST_CASE("head sets round-trip through their container file") {
  ModelConfig cfg;
  HeadSet<double> hs = init_headset<double>(cfg, 32, 4);
  REQUIRE(hs.layers.size() == cfg.L);
  for (const auto& h : hs.layers) {
    CHECK(h.w1.rows == cfg.d_m + 2 * cfg.d_kv);
    CHECK(h.w1.cols == 32);
    CHECK(h.w2.rows == 32);
    CHECK(h.w2.cols == cfg.kv_heads());
  }
  HeadSet<double> again = init_headset<double>(cfg, 32, 4);
  CHECK(again.layers[1].w1.data == hs.layers[1].w1.data);

  const std::string path = (test_dir() / "heads_roundtrip.rkv").string();
  save_headset(hs, path);
  HeadSet<double> back = load_headset<double>(cfg, path);
  for (size_t l = 0; l < cfg.L; ++l) {
    CHECK(back.layers[l].w1.data == hs.layers[l].w1.data);
    CHECK(back.layers[l].w2.data == hs.layers[l].w2.data);
  }

  ModelConfig other = cfg;
  other.g = 1;  // kv head count changes, shapes no longer line up
  CHECK_THROWS_AS(load_headset<double>(other, path), DataError);
}

TEST_CASE("a short training run moves the heads and nothing else") {
  ModelConfig cfg;
  Weights<double> w = init_random<double>(cfg, 21);
  const uint64_t wh = weights_hash(w);

  Dataset ds;
  Rng rng(3);
  for (int i = 0; i < 4; ++i) {
    TrainingExample ex;
    ex.prompt.resize(10 + rng.below(5));
    ex.answer.resize(2 + rng.below(2));
    for (auto& t : ex.prompt) t = static_cast<int>(rng.below(cfg.vocab));
    for (auto& t : ex.answer) t = static_cast<int>(rng.below(cfg.vocab));
    ds.push_back(ex);
  }

  TrainingConfig tcfg;
  tcfg.lr = 1e-3;
  tcfg.warmup_steps = 5;
  tcfg.total_steps = 25;
  tcfg.d_R = 8;
  HeadSet<double> hs = init_headset<double>(cfg, tcfg.d_R, 1);
  const std::vector<double> before = hs.layers[0].w1.data;

  TrainResult<double> res = train_headset(w, cfg, tcfg, ds, hs, 7);
  REQUIRE(res.loss_curve.size() == 25);
  for (double v : res.loss_curve) CHECK(std::isfinite(v));
  CHECK(hs.layers[0].w1.data != before);
  CHECK(weights_hash(w) == wh);

  Dataset empty;
  CHECK_THROWS_AS(train_headset(w, cfg, tcfg, empty, hs, 7), DataError);
  Dataset bad = ds;
  bad[0].answer.clear();
  CHECK_THROWS_AS(train_headset(w, cfg, tcfg, bad, hs, 7), DataError);
}

TEST_CASE("datasets round-trip through jsonl") {
  Dataset ds;
  ds.push_back({{1, 2, 3}, {4}});
  ds.push_back({{9}, {8, 7}});
  const std::string path = (test_dir() / "dataset_roundtrip.jsonl").string();
  save_dataset_jsonl(ds, path);
  Dataset back = load_dataset_jsonl(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].prompt == ds[0].prompt);
  CHECK(back[0].answer == ds[0].answer);
  CHECK(back[1].prompt == ds[1].prompt);
  CHECK(back[1].answer == ds[1].answer);

  const std::string badpath = (test_dir() / "dataset_bad.jsonl").string();
  {
    std::ofstream f(badpath, std::ios::trunc);
    f << "{\"prompt\": [1], \"answer\": [2]}\n";
    f << "{\"prompt\": [1]}\n";
  }
  try {
    load_dataset_jsonl(badpath);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(load_dataset_jsonl((test_dir() / "nope.jsonl").string()),
                  DataError);
}
