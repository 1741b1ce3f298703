#include <doctest.h>

#include <cmath>

#include "trackseg/long_term.hpp"
#include "trackseg/pipeline.hpp"
#include "trackseg/presets.hpp"

using namespace trackseg;

namespace {

PipelineConfig oracle_cfg() {
  PipelineConfig cfg;
  cfg.d = 8;
  cfg.f = 4;
  return cfg;
}

// Query embedding for an orthogonal-signature instance under the handcrafted
// pooling head: the one-hot signature padded with zeros.
std::vector<double> padded_signature(int inst, int d, int f) {
  std::vector<double> e(d, 0.0);
  e[inst % f] = 1.0;
  return e;
}

Aabb unit_box_at(double x) { return Aabb{{x, 0, 0}, {x + 1, 1, 1}}; }

QueryObservation make_obs(int inst, const PipelineConfig& cfg, double x = 0.0) {
  QueryObservation q;
  q.embedding = padded_signature(inst, cfg.d, cfg.f);
  q.box = unit_box_at(x);
  q.global_ids = {inst * 10, inst * 10 + 1};
  q.objectness = 0.7;
  return q;
}

AffinityFn bank_affinity(ParamStore& ps, const PipelineConfig& cfg,
                         const std::vector<QueryObservation>& obs) {
  return [&ps, &cfg, &obs](const std::vector<int>& rows,
                           const std::vector<const Tracklet*>& cands) {
    Tape t(false);
    Tensor qa(static_cast<int>(rows.size()), cfg.d);
    std::vector<Aabb> ba;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy(obs[rows[r]].embedding.begin(), obs[rows[r]].embedding.end(),
                qa.row_ptr(static_cast<int>(r)));
      ba.push_back(obs[rows[r]].box);
    }
    Tensor qb(static_cast<int>(cands.size()), cfg.d);
    std::vector<Aabb> bb;
    for (std::size_t c = 0; c < cands.size(); ++c) {
      std::copy(cands[c]->embedding.begin(), cands[c]->embedding.end(),
                qb.row_ptr(static_cast<int>(c)));
      bb.push_back(cands[c]->box);
    }
    GatedAffinity ga = compute_gated_affinity(t, ps, "assoc", t.leaf(std::move(qa)),
                                              t.leaf(std::move(qb)), t.leaf(boxes_to_tensor(ba)),
                                              t.leaf(boxes_to_tensor(bb)), true);
    return t.val(ga.a);
  };
}

}  // namespace

TEST_CASE("affinity_features: Hadamard term and zeroed overlap head") {
  ParamStore ps;
  Rng rng(1);
  register_mlp(ps, "geo", {1, 4, 4}, rng);
  for (const char* n : {"geo.w0", "geo.b0", "geo.w1", "geo.b1"}) {
    Tensor& p = ps.get(n);
    std::fill(p.data.begin(), p.data.end(), 0.0);
  }
  Tape t(false);
  Var ones = t.leaf(Tensor::full(1, 4, 1.0));
  Var iou = t.leaf(Tensor(1, 1, {0.5}));
  Var e = affinity_features(t, ps, "geo", ones, ones, iou);
  for (double v : t.val(e).data) CHECK(v == doctest::Approx(1.0));

  Tensor a(1, 4, {1, 0, 0, 0});
  Tensor b(1, 4, {0, 1, 0, 0});
  Var e2 = affinity_features(t, ps, "geo", t.leaf(a), t.leaf(b), iou);
  for (double v : t.val(e2).data) CHECK(v == 0.0);
}

TEST_CASE("affinity_features matches a hand-loop reference") {
  ParamStore ps;
  Rng rng(2);
  register_mlp(ps, "geo", {1, 6, 6}, rng);
  Mlp geo;
  geo.w = {ps.get("geo.w0"), ps.get("geo.w1")};
  geo.b = {ps.get("geo.b0"), ps.get("geo.b1")};
  Tensor qa = uniform_init(rng, 3, 6, 1);
  Tensor qb = uniform_init(rng, 2, 6, 1);
  Tensor iou(6, 1);
  for (double& v : iou.data) v = rng.uniform();
  Tape t(false);
  Var e = affinity_features(t, ps, "geo", t.leaf(qa), t.leaf(qb), t.leaf(iou));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      Tensor g = geo.forward(Tensor(1, 1, {iou.at(i * 2 + j, 0)}));
      for (int k = 0; k < 6; ++k)
        CHECK(t.val(e).at(i * 2 + j, k) ==
              doctest::Approx(qa.at(i, k) * qb.at(j, k) + g.at(0, k)).epsilon(1e-12));
    }
}

TEST_CASE("gated_affinity: single candidate column is all ones, so A equals C") {
  Tape t(true);
  Rng rng(3);
  Var e = t.leaf(uniform_init(rng, 4, 5, 1));  // 4 pairs of (rows=4, cols=1)
  Var w = t.leaf(uniform_init(rng, 1, 5, 1));
  Var wp = t.leaf(uniform_init(rng, 1, 5, 1));
  GatedAffinity ga = gated_affinity(t, e, w, wp, 4, 1, true);
  for (int i = 0; i < 4; ++i) {
    CHECK(t.val(ga.m).at(i, 0) == doctest::Approx(1.0));
    CHECK(t.val(ga.a).at(i, 0) == doctest::Approx(t.val(ga.c).at(i, 0)));
  }
}

TEST_CASE("gated_affinity: constant row scores give a uniform distribution") {
  Tape t(false);
  Var e = t.leaf(Tensor::full(6, 3, 0.7));  // 2x3 pairs, identical features
  Var w = t.leaf(Tensor::row({0.3, -0.2, 1.1}));
  Var wp = t.leaf(Tensor::row({0.5, 0.5, 0.5}));
  GatedAffinity ga = gated_affinity(t, e, w, wp, 2, 3, true);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) CHECK(t.val(ga.m).at(i, j) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("gated_affinity matches scalar recomputation on fixed values") {
  Tape t(false);
  Tensor e(4, 2, {0.2, -0.1, 0.8, 0.4, -0.3, 0.9, 0.0, 0.5});  // 2x2 pairs, d=2
  Tensor w(1, 2, {1.0, -0.5});
  Tensor wp(1, 2, {0.25, 0.75});
  GatedAffinity ga = gated_affinity(t, t.leaf(e), t.leaf(w), t.leaf(wp), 2, 2, true);
  for (int i = 0; i < 2; ++i) {
    double s0 = dot(e.row_ptr(i * 2), w.row_ptr(0), 2);
    double s1 = dot(e.row_ptr(i * 2 + 1), w.row_ptr(0), 2);
    const double m0 = std::exp(s0) / (std::exp(s0) + std::exp(s1));
    CHECK(t.val(ga.m).at(i, 0) == doctest::Approx(m0).epsilon(1e-12));
    const double c0 = sigmoid(dot(e.row_ptr(i * 2), wp.row_ptr(0), 2));
    CHECK(t.val(ga.c).at(i, 0) == doctest::Approx(c0).epsilon(1e-12));
    CHECK(t.val(ga.a).at(i, 0) == doctest::Approx(m0 * c0).epsilon(1e-12));
  }
}

TEST_CASE("gated_affinity invariants under fuzzing") {
  Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    Tape t(false);
    const int n = rng.uniform_int(1, 5), m = rng.uniform_int(1, 5), d = rng.uniform_int(1, 6);
    Tensor e(n * m, d);
    for (double& v : e.data) v = rng.uniform(-20, 20);
    Tensor w(1, d), wp(1, d);
    for (double& v : w.data) v = rng.uniform(-3, 3);
    for (double& v : wp.data) v = rng.uniform(-3, 3);
    GatedAffinity ga = gated_affinity(t, t.leaf(e), t.leaf(w), t.leaf(wp), n, m, true);
    const Tensor &M = t.val(ga.m), &C = t.val(ga.c), &A = t.val(ga.a);
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < m; ++j) {
        s += M.at(i, j);
        CHECK(C.at(i, j) > 0.0);
        CHECK(C.at(i, j) < 1.0);
        CHECK(A.at(i, j) <= M.at(i, j));
      }
      CHECK(std::fabs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("associate: empty bank turns every segment into a new track") {
  PipelineConfig cfg = oracle_cfg();
  ParamStore ps = handcrafted_matcher_params(cfg);
  TrackBank bank;
  std::vector<QueryObservation> obs{make_obs(0, cfg), make_obs(1, cfg)};
  AssocResult res = associate(bank, obs, 0, bank_affinity(ps, cfg, obs), cfg.theta_match, true, false);
  CHECK(res.track_id == std::vector<int>{0, 1});
  CHECK(res.fresh == std::vector<char>{1, 1});
  CHECK(bank.active.size() == 2);
  for (const auto& [id, tr] : bank.active) CHECK(tr.age == 1);
}

TEST_CASE("associate: an identical segment matches its tracklet") {
  PipelineConfig cfg = oracle_cfg();
  ParamStore ps = handcrafted_matcher_params(cfg);
  TrackBank bank;
  std::vector<QueryObservation> first{make_obs(0, cfg), make_obs(1, cfg)};
  AssocResult r0 = associate(bank, first, 0, bank_affinity(ps, cfg, first), cfg.theta_match, true, false);
  update_bank(bank, r0, first, 0);

  std::vector<QueryObservation> second{make_obs(1, cfg), make_obs(0, cfg)};
  AssocResult r1 =
      associate(bank, second, 1, bank_affinity(ps, cfg, second), cfg.theta_match, true, false);
  CHECK(r1.fresh == std::vector<char>{0, 0});
  CHECK(r1.track_id[0] == r0.track_id[1]);
  CHECK(r1.track_id[1] == r0.track_id[0]);
}

TEST_CASE("associate: recall restores a stale identity instead of minting a new one") {
  PipelineConfig cfg = oracle_cfg();
  cfg.t_life = 2;
  ParamStore ps = handcrafted_matcher_params(cfg);

  for (bool use_recall : {true, false}) {
    TrackBank bank;
    bank.t_life = cfg.t_life;
    bank.k_buf = cfg.k_buf;
    std::vector<QueryObservation> both{make_obs(0, cfg, 0.0), make_obs(1, cfg, 5.0)};
    AssocResult r0 =
        associate(bank, both, 0, bank_affinity(ps, cfg, both), cfg.theta_match, use_recall, false);
    update_bank(bank, r0, both, 0);
    const int id_of_1 = r0.track_id[1];

    // instance 1 vanishes long enough to go stale
    for (int t = 1; t <= cfg.t_life + 2; ++t) {
      std::vector<QueryObservation> only{make_obs(0, cfg, 0.0)};
      AssocResult r =
          associate(bank, only, t, bank_affinity(ps, cfg, only), cfg.theta_match, use_recall, false);
      update_bank(bank, r, only, t);
    }
    CHECK(bank.stale.size() == 1);
    CHECK(bank.active.count(id_of_1) == 0);

    const int t_back = cfg.t_life + 3;
    std::vector<QueryObservation> back{make_obs(0, cfg, 0.0), make_obs(1, cfg, 5.0)};
    AssocResult r =
        associate(bank, back, t_back, bank_affinity(ps, cfg, back), cfg.theta_match, use_recall, false);
    update_bank(bank, r, back, t_back);
    if (use_recall) {
      CHECK(r.track_id[1] == id_of_1);
      CHECK(r.recalled[1] == 1);
      CHECK(bank.stale.empty());
      CHECK(bank.active.count(id_of_1) == 1);
    } else {
      CHECK(r.track_id[1] != id_of_1);
      CHECK(r.fresh[1] == 1);
      CHECK(bank.stale.size() == 1);  // the old identity stays buried
    }
  }
}

TEST_CASE("update_bank: the running-average identity") {
  // age 1 plus one observation averages exactly
  TrackBank bank;
  Tracklet tr;
  tr.id = 0;
  tr.embedding = {0.0};
  tr.box = Aabb{{0, 0, 0}, {2, 2, 2}};
  tr.age = 1;
  tr.last_seen = 0;
  bank.active.emplace(0, tr);
  bank.next_id = 1;

  AssocResult res;
  res.track_id = {0};
  res.fresh = {0};
  res.recalled = {0};
  QueryObservation q;
  q.embedding = {1.0};
  q.box = Aabb{{2, 2, 2}, {4, 4, 4}};
  q.global_ids = {0};
  update_bank(bank, res, {q}, 1);
  const Tracklet& updated = bank.active.at(0);
  CHECK(updated.age == 2);
  CHECK(updated.box.mn.x == doctest::Approx(1.0));
  CHECK(updated.box.mx.x == doctest::Approx(3.0));
  CHECK(updated.embedding[0] == doctest::Approx(0.5));

  // running mean: initial 0 followed by six observations of 1.0
  for (int t = 2; t <= 6; ++t) update_bank(bank, res, {q}, t);
  CHECK(bank.active.at(0).age == 7);
  CHECK(bank.active.at(0).embedding[0] == doctest::Approx(6.0 / 7.0));

  // a constant-valued track is a fixed point of the update
  TrackBank cbank;
  Tracklet ct;
  ct.id = 0;
  ct.embedding = {0.75};
  ct.box = Aabb{{0, 0, 0}, {1, 1, 1}};
  cbank.active.emplace(0, ct);
  QueryObservation cq = q;
  cq.embedding = {0.75};
  cq.box = ct.box;
  for (int t = 1; t <= 5; ++t) update_bank(cbank, res, {cq}, t);
  CHECK(cbank.active.at(0).embedding[0] == doctest::Approx(0.75));
  CHECK(cbank.active.at(0).age == 6);

  // arbitrary stream equals the direct arithmetic mean to 1e-9
  TrackBank bank2;
  Tracklet t2;
  t2.id = 0;
  t2.embedding = {0.3};
  t2.box = Aabb{{0, 0, 0}, {1, 1, 1}};
  bank2.active.emplace(0, t2);
  Rng rng(5);
  double sum = 0.3;
  int count = 1;
  for (int t = 1; t <= 100; ++t) {
    QueryObservation qq = q;
    qq.embedding = {rng.uniform(-2, 2)};
    sum += qq.embedding[0];
    ++count;
    update_bank(bank2, res, {qq}, t);
  }
  CHECK(std::fabs(bank2.active.at(0).embedding[0] - sum / count) < 1e-9);
}

TEST_CASE("lifecycle: ids unique, stale buffer bounded, bank size bounded") {
  PipelineConfig cfg = oracle_cfg();
  ParamStore ps = handcrafted_matcher_params(cfg);
  TrackBank bank;
  bank.t_life = 1;
  bank.k_buf = 3;

  // churn: each frame shows a different singleton instance, so tracks go
  // stale quickly and the FIFO must evict
  for (int t = 0; t < 12; ++t) {
    std::vector<QueryObservation> obs{make_obs(t % 4, cfg, static_cast<double>(t))};
    // fresh embedding directions per frame defeat recall on purpose
    obs[0].embedding.assign(cfg.d, 0.0);
    obs[0].embedding[t % cfg.f] = (t % 2) ? 1.0 : -1.0;
    AssocResult r = associate(bank, obs, t, bank_affinity(ps, cfg, obs), 0.9999, false, false);
    update_bank(bank, r, obs, t);
    CHECK(static_cast<int>(bank.stale.size()) <= bank.k_buf);
    std::set<int> ids;
    for (const auto& [id, tr] : bank.active) ids.insert(id);
    for (const Tracklet& tr : bank.stale) {
      CHECK(!ids.count(tr.id));  // never simultaneously active and stale
      ids.insert(tr.id);
    }
    CHECK(bank.total_tracks() <= 2 + bank.k_buf);
  }
  CHECK(bank.next_id >= 10);  // ids keep increasing, none reused
}
