#include <doctest.h>

#include <cmath>

#include "trackseg/pipeline.hpp"
#include "trackseg/short_term.hpp"

using namespace trackseg;

namespace {
PipelineConfig tiny_cfg() {
  PipelineConfig cfg;
  cfg.d = 8;
  cfg.f = 4;
  cfg.seed = 42;
  return cfg;
}

std::vector<Vec3> random_positions(Rng& rng, int n) {
  std::vector<Vec3> out;
  for (int i = 0; i < n; ++i)
    out.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)});
  return out;
}
}  // namespace

TEST_CASE("receptive scales: zero weights give softplus(0), identical rows identical taus") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  std::fill(ps.get("stm.tau_w").data.begin(), ps.get("stm.tau_w").data.end(), 0.0);
  ps.get("stm.tau_b").at(0, 0) = 0.0;
  Tape t(false);
  Rng rng(1);
  Var q = t.leaf(uniform_init(rng, 4, cfg.d, 1));
  Var tau = predict_receptive_scales(t, ps, q);
  for (int i = 0; i < 4; ++i)
    CHECK(t.val(tau).at(i, 0) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("receptive scales are non-negative under fuzzing") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    PipelineConfig cfg = tiny_cfg();
    cfg.seed = 100 + trial;
    ParamStore ps = init_model_params(cfg);
    Tape t(false);
    Tensor q(100, cfg.d);
    for (double& v : q.data) v = rng.uniform(-10, 10);
    Var tau = predict_receptive_scales(t, ps, t.leaf(q));
    for (double v : t.val(tau).data) CHECK(v >= 0.0);
  }
}

TEST_CASE("refine: empty memory is a bit-exact identity") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  Tape t(false);
  Rng rng(3);
  Tensor q = uniform_init(rng, 3, cfg.d, 1);
  Var cur = t.leaf(q);
  Var out = short_term_refine(t, ps, cur, random_positions(rng, 3), Var{}, {});
  CHECK(out.i == cur.i);
  for (std::size_t k = 0; k < q.size(); ++k) CHECK(t.val(out).data[k] == q.data[k]);
}

TEST_CASE("refine: a single memory slot receives weight one") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  Tape t(false);
  Rng rng(4);
  Var cur = t.leaf(uniform_init(rng, 3, cfg.d, 1));
  Var prev = t.leaf(uniform_init(rng, 1, cfg.d, 1));
  auto cur_pos = random_positions(rng, 3);
  auto prev_pos = random_positions(rng, 1);
  Var attn;
  Var out = short_term_refine(t, ps, cur, cur_pos, prev, prev_pos, &attn);
  for (int i = 0; i < 3; ++i) CHECK(t.val(attn).at(i, 0) == 1.0);
  // out = cur + gain * V with V = prev * Wv^T
  Tensor v = matmul_nt(t.val(prev), ps.get("stm.wv"));
  const double gain = ps.get("stm.gain").at(0, 0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < cfg.d; ++j)
      CHECK(t.val(out).at(i, j) ==
            doctest::Approx(t.val(cur).at(i, j) + gain * v.at(0, j)).epsilon(1e-14));
}

TEST_CASE("refine: with the gate forced off it matches plain cross-attention") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  // tau == softplus(w q - 40) ~ 4e-18: effectively ungated
  std::fill(ps.get("stm.tau_w").data.begin(), ps.get("stm.tau_w").data.end(), 0.0);
  ps.get("stm.tau_b").at(0, 0) = -40.0;
  Tape t(false);
  Rng rng(5);
  Tensor qc = uniform_init(rng, 3, cfg.d, 1);
  Tensor qp = uniform_init(rng, 4, cfg.d, 1);
  auto cur_pos = random_positions(rng, 3);
  auto prev_pos = random_positions(rng, 4);
  Var out = short_term_refine(t, ps, t.leaf(qc), cur_pos, t.leaf(qp), prev_pos);

  // reference: ungated scaled dot-product attention, residual, hand loops
  Tensor keys = matmul_nt(qp, ps.get("stm.wk"));
  Tensor values = matmul_nt(qp, ps.get("stm.wv"));
  Tensor scores = matmul_nt(qc, keys);
  for (double& v : scores.data) v /= std::sqrt(static_cast<double>(cfg.d));
  Tensor attn = softmax_rows(scores);
  Tensor mix = matmul(attn, values);
  const double gain = ps.get("stm.gain").at(0, 0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < cfg.d; ++j)
      CHECK(t.val(out).at(i, j) ==
            doctest::Approx(qc.at(i, j) + gain * mix.at(i, j)).epsilon(1e-9));
}

TEST_CASE("refine: large scales put nearly all mass on the near slot") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  // equal keys: zero key projection; large tau via the bias
  std::fill(ps.get("stm.wk").data.begin(), ps.get("stm.wk").data.end(), 0.0);
  std::fill(ps.get("stm.tau_w").data.begin(), ps.get("stm.tau_w").data.end(), 0.0);
  ps.get("stm.tau_b").at(0, 0) = 10.0;
  Tape t(false);
  Rng rng(6);
  Var cur = t.leaf(uniform_init(rng, 1, cfg.d, 1));
  Var prev = t.leaf(uniform_init(rng, 2, cfg.d, 1));
  std::vector<Vec3> cur_pos{{0, 0, 0}};
  std::vector<Vec3> prev_pos{{0, 0, 0}, {10, 0, 0}};
  Var attn;
  short_term_refine(t, ps, cur, cur_pos, prev, prev_pos, &attn);
  CHECK(t.val(attn).at(0, 0) > 0.99);
}

TEST_CASE("refine: attention rows sum to one and gating is monotone in distance") {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    PipelineConfig cfg = tiny_cfg();
    cfg.seed = 5000 + trial;
    ParamStore ps = init_model_params(cfg);
    ps.get("stm.tau_b").at(0, 0) = rng.uniform(0.1, 2.0);  // keep tau clearly positive
    Tape t(false);
    Tensor qc(1, cfg.d), qp(3, cfg.d);
    for (double& v : qc.data) v = rng.uniform(-1, 1);
    for (int j = 0; j < cfg.d; ++j) {
      const double v = rng.uniform(-1, 1);
      qp.at(0, j) = qp.at(1, j) = qp.at(2, j) = v;  // equal key logits
    }
    const double d1 = rng.uniform(0.2, 3.0);
    const double d2 = d1 + rng.uniform(0.2, 3.0);
    std::vector<Vec3> cur_pos{{0, 0, 0}};
    std::vector<Vec3> prev_pos{{d1, 0, 0}, {d2, 0, 0}, {d1 * 0.5, 0, 0}};
    Var attn;
    short_term_refine(t, ps, t.leaf(qc), cur_pos, t.leaf(qp), prev_pos, &attn);
    const Tensor& a = t.val(attn);
    double sum = 0.0;
    for (int j = 0; j < 3; ++j) sum += a.at(0, j);
    CHECK(std::fabs(sum - 1.0) <= 1e-9);
    CHECK(a.at(0, 0) > a.at(0, 1));  // farther slot strictly weaker
    CHECK(a.at(0, 2) > a.at(0, 0));
  }
}

TEST_CASE("refine: translating both frames leaves the output unchanged") {
  PipelineConfig cfg = tiny_cfg();
  ParamStore ps = init_model_params(cfg);
  Rng rng(8);
  Tensor qc = uniform_init(rng, 3, cfg.d, 1);
  Tensor qp = uniform_init(rng, 2, cfg.d, 1);
  auto cur_pos = random_positions(rng, 3);
  auto prev_pos = random_positions(rng, 2);
  auto run = [&](const Vec3& shift) {
    Tape t(false);
    std::vector<Vec3> cp = cur_pos, pp = prev_pos;
    for (Vec3& p : cp) p = p + shift;
    for (Vec3& p : pp) p = p + shift;
    Var out = short_term_refine(t, ps, t.leaf(qc), cp, t.leaf(qp), pp);
    return t.val(out);
  };
  Tensor base = run({0, 0, 0});
  Tensor moved = run({5.5, -2.0, 1.0});
  for (std::size_t k = 0; k < base.size(); ++k)
    CHECK(moved.data[k] == doctest::Approx(base.data[k]).epsilon(1e-12));
}
