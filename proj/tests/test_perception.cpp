#include <doctest.h>

#include <cmath>

#include "trackseg/perception.hpp"
#include "trackseg/pipeline.hpp"
#include "trackseg/presets.hpp"

using namespace trackseg;

namespace {

// Pooling head that is the exact identity on 2-dim features.
ParamStore identity_pool_store() {
  ParamStore ps;
  Rng rng(1);
  register_mlp(ps, "pool", {2, 4, 2}, rng);
  Tensor& w0 = ps.get("pool.w0");
  std::fill(w0.data.begin(), w0.data.end(), 0.0);
  w0.at(0, 0) = 1.0;
  w0.at(1, 1) = 1.0;
  w0.at(2, 0) = -1.0;
  w0.at(3, 1) = -1.0;
  ps.get("pool.b0") = Tensor(1, 4);
  Tensor& w1 = ps.get("pool.w1");
  std::fill(w1.data.begin(), w1.data.end(), 0.0);
  w1.at(0, 0) = 1.0;
  w1.at(0, 2) = -1.0;
  w1.at(1, 1) = 1.0;
  w1.at(1, 3) = -1.0;
  ps.get("pool.b1") = Tensor(1, 2);
  return ps;
}

PipelineConfig tiny_cfg() {
  PipelineConfig cfg;
  cfg.d = 8;
  cfg.f = 4;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("pool: mean pooling through an identity head") {
  ParamStore ps = identity_pool_store();
  Tape t(false);
  Tensor feats(2, 2, {1, 2, 3, 4});
  std::vector<Vec3> pts{{0, 0, 0}, {2, 0, 0}};
  PooledQueries q = pool(t, ps, t.leaf(feats), pts, {{0, 1}});
  CHECK(t.val(q.embeddings).at(0, 0) == doctest::Approx(2.0));
  CHECK(t.val(q.embeddings).at(0, 1) == doctest::Approx(3.0));
  CHECK(q.centroids[0].x == doctest::Approx(1.0));

  PooledQueries single = pool(t, ps, t.leaf(feats), pts, {{1}});
  CHECK(t.val(single.embeddings).at(0, 0) == doctest::Approx(3.0));
  CHECK(t.val(single.embeddings).at(0, 1) == doctest::Approx(4.0));

  // mask order is preserved in the query rows
  PooledQueries both = pool(t, ps, t.leaf(feats), pts, {{1}, {0}});
  CHECK(t.val(both.embeddings).at(0, 0) == doctest::Approx(3.0));
  CHECK(t.val(both.embeddings).at(1, 0) == doctest::Approx(1.0));

  CHECK_THROWS_WITH_AS(pool(t, ps, t.leaf(feats), pts, {{}}), "empty mask",
                       std::invalid_argument);
}

TEST_CASE("pool then predict_boxes is permutation equivariant") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  Rng rng(77);
  Tensor feats = uniform_init(rng, 12, cfg.f, 1);
  std::vector<Vec3> pts;
  for (int i = 0; i < 12; ++i) pts.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  std::vector<std::vector<int>> masks{{0, 1, 2}, {3, 4}, {5, 6, 7, 8}, {9, 10, 11}};
  std::vector<int> perm{2, 0, 3, 1};

  Tape t(false);
  PooledQueries a = pool(t, ps, t.leaf(feats), pts, masks);
  Var boxes_a = predict_boxes(t, ps, a.embeddings);
  std::vector<std::vector<int>> permuted;
  for (int p : perm) permuted.push_back(masks[p]);
  PooledQueries b = pool(t, ps, t.leaf(feats), pts, permuted);
  Var boxes_b = predict_boxes(t, ps, b.embeddings);
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (int c = 0; c < 6; ++c)
      CHECK(t.val(boxes_b).at(static_cast<int>(r), c) ==
            doctest::Approx(t.val(boxes_a).at(perm[r], c)).epsilon(1e-14));
}

TEST_CASE("predict_boxes: bias-only decode gives the softplus cube") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  for (const char* name : {"box.w0", "box.b0", "box.w1", "box.b1"}) {
    Tensor& p = ps.get(name);
    std::fill(p.data.begin(), p.data.end(), 0.0);
  }
  Tape t(false);
  Rng rng(3);
  Var q = t.leaf(uniform_init(rng, 3, cfg.d, 1));
  Var boxes = predict_boxes(t, ps, q);
  const double half = 0.5 * std::log(2.0);  // softplus(0)/2
  for (int i = 0; i < 3; ++i)
    for (int a = 0; a < 3; ++a) {
      CHECK(t.val(boxes).at(i, a) == doctest::Approx(-half));
      CHECK(t.val(boxes).at(i, 3 + a) == doctest::Approx(half));
    }
}

TEST_CASE("predict_boxes: identical embeddings give identical boxes; min <= max always") {
  PipelineConfig cfg = tiny_cfg();
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    cfg.seed = 1000 + trial;
    ParamStore ps = init_model_params(cfg);
    Tape t(false);
    Tensor q(100, cfg.d);
    for (double& v : q.data) v = rng.uniform(-3, 3);
    for (int j = 0; j < cfg.d; ++j) q.at(1, j) = q.at(0, j);
    Var boxes = predict_boxes(t, ps, t.leaf(q));
    const Tensor& b = t.val(boxes);
    for (int j = 0; j < 6; ++j) CHECK(b.at(0, j) == b.at(1, j));
    for (int i = 0; i < b.rows; ++i)
      for (int a = 0; a < 3; ++a) CHECK(b.at(i, a) <= b.at(i, 3 + a));
  }
}

TEST_CASE("decode: single query collapses both branches to the same output") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  Tape t(false);
  Rng rng(8);
  Var q = t.leaf(uniform_init(rng, 1, cfg.d, 1));
  Var f = t.leaf(uniform_init(rng, 5, cfg.f, 1));
  Var proj = project_point_features(t, ps, f);
  DecoderOutput one = decode(t, ps, q, proj, Branch::one_to_one);
  DecoderOutput many = decode(t, ps, q, proj, Branch::one_to_many);
  for (std::size_t k = 0; k < t.val(one.mask_logits).size(); ++k)
    CHECK(t.val(one.mask_logits).data[k] == t.val(many.mask_logits).data[k]);
  CHECK(t.val(one.objectness_logits).at(0, 0) == t.val(many.objectness_logits).at(0, 0));
}

TEST_CASE("decode: zero heads give zero logits and objectness one half") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  for (const char* name : {"maskproj.w", "maskproj.b", "obj.w", "obj.b"}) {
    Tensor& p = ps.get(name);
    std::fill(p.data.begin(), p.data.end(), 0.0);
  }
  Tape t(false);
  Rng rng(9);
  Var q = t.leaf(uniform_init(rng, 3, cfg.d, 1));
  Var f = t.leaf(uniform_init(rng, 7, cfg.f, 1));
  DecoderOutput out = decode(t, ps, q, project_point_features(t, ps, f), Branch::one_to_one);
  for (double v : t.val(out.mask_logits).data) CHECK(v == 0.0);
  for (double v : t.val(out.objectness_logits).data) CHECK(sigmoid(v) == doctest::Approx(0.5));
}

TEST_CASE("decode: branches differ for two queries under generic parameters") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  Tape t(false);
  Rng rng(10);
  Var q = t.leaf(uniform_init(rng, 2, cfg.d, 1));
  Var f = t.leaf(uniform_init(rng, 6, cfg.f, 1));
  Var proj = project_point_features(t, ps, f);
  DecoderOutput one = decode(t, ps, q, proj, Branch::one_to_one);
  DecoderOutput many = decode(t, ps, q, proj, Branch::one_to_many);
  double diff = 0.0;
  for (std::size_t k = 0; k < t.val(one.mask_logits).size(); ++k)
    diff = std::max(diff,
                    std::fabs(t.val(one.mask_logits).data[k] - t.val(many.mask_logits).data[k]));
  CHECK(diff > 1e-9);
}

TEST_CASE("decode: one_to_many output row depends only on its own query") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  Rng rng(11);
  Tensor q = uniform_init(rng, 3, cfg.d, 1);
  Tensor f = uniform_init(rng, 6, cfg.f, 1);
  auto run = [&](const Tensor& queries) {
    Tape t(false);
    DecoderOutput out =
        decode(t, ps, t.leaf(queries), project_point_features(t, ps, t.leaf(f)), Branch::one_to_many);
    Tensor row0(1, t.val(out.mask_logits).cols);
    std::copy_n(t.val(out.mask_logits).row_ptr(0), row0.cols, row0.data.begin());
    return row0;
  };
  Tensor base = run(q);
  Tensor perturbed_q = q;
  for (int j = 0; j < cfg.d; ++j) perturbed_q.at(2, j) += 0.37;
  Tensor after = run(perturbed_q);
  for (std::size_t k = 0; k < base.size(); ++k) CHECK(base.data[k] == after.data[k]);
}

TEST_CASE("decode: head weights are shared between branches") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  Rng rng(12);
  Tensor q = uniform_init(rng, 2, cfg.d, 1);
  Tensor f = uniform_init(rng, 4, cfg.f, 1);
  auto obj_many = [&] {
    Tape t(false);
    DecoderOutput out =
        decode(t, ps, t.leaf(q), project_point_features(t, ps, t.leaf(f)), Branch::one_to_many);
    return t.val(out.objectness_logits).at(0, 0);
  };
  const double before = obj_many();
  ps.get("obj.b").at(0, 0) += 1.0;  // nudging the shared head moves both branches
  CHECK(obj_many() == doctest::Approx(before + 1.0));
}

TEST_CASE("handcrafted params: pooled embedding is the padded mean feature") {
  PipelineConfig cfg;
  cfg.d = 8;
  cfg.f = 4;
  ParamStore ps = handcrafted_matcher_params(cfg);
  Tape t(false);
  Tensor feats(2, 4, {0.5, -0.25, 0.0, 1.0, 0.5, -0.25, 0.0, 1.0});
  std::vector<Vec3> pts{{0, 0, 0}, {1, 1, 1}};
  PooledQueries q = pool(t, ps, t.leaf(feats), pts, {{0, 1}});
  const Tensor& e = t.val(q.embeddings);
  CHECK(e.at(0, 0) == doctest::Approx(0.5));
  CHECK(e.at(0, 1) == doctest::Approx(-0.25));
  CHECK(e.at(0, 2) == doctest::Approx(0.0));
  CHECK(e.at(0, 3) == doctest::Approx(1.0));
  for (int j = 4; j < 8; ++j) CHECK(e.at(0, j) == 0.0);
}
