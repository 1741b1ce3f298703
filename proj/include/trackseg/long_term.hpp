#pragma once

#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "trackseg/assign.hpp"
#include "trackseg/geom.hpp"
#include "trackseg/nn.hpp"
#include "trackseg/tape.hpp"

namespace trackseg {

// Persistent instance hypothesis. `age` counts absorbed observations, so the
// running-average update keeps the embedding/box equal to the arithmetic mean
// of everything the track has seen.
struct Tracklet {
  int id = -1;
  std::vector<double> embedding;
  Aabb box;
  int age = 1;
  int last_seen = 0;
  int stored_age = 1;              // age at the moment the track went stale
  std::vector<int> accumulated;    // sorted global point ids, union over frames
  double objectness_sum = 0.0;
  int objectness_count = 0;

  double mean_objectness() const {
    return objectness_count ? objectness_sum / objectness_count : 0.0;
  }
};

// Active tracklets keyed by id plus a bounded FIFO of stale ones. Ids are
// never reused; an id lives in at most one of the two containers.
struct TrackBank {
  std::map<int, Tracklet> active;
  std::deque<Tracklet> stale;
  int next_id = 0;
  int t_life = 5;
  int k_buf = 64;

  int total_tracks() const { return static_cast<int>(active.size() + stale.size()); }
};

// ---- gated affinity (Hadamard appearance term + box-overlap term) ----

inline Tensor pairwise_iou_flat(const std::vector<Aabb>& a, const std::vector<Aabb>& b) {
  Tensor out(static_cast<int>(a.size() * b.size()), 1);
  int r = 0;
  for (const Aabb& ba : a)
    for (const Aabb& bb : b) out.at(r++, 0) = aabb_iou(ba, bb);
  return out;
}

// Fused pairwise feature rows: row i*M+j holds qa[i] (.) qb[j] plus the
// box-overlap feature expanded through a small head.
inline Var affinity_features(Tape& t, ParamStore& ps, const std::string& geo_prefix, Var qa,
                             Var qb, Var iou_flat) {
  const int n = t.val(qa).rows, m = t.val(qb).rows;
  std::vector<int> ia(static_cast<std::size_t>(n) * m), ib(static_cast<std::size_t>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      ia[static_cast<std::size_t>(i) * m + j] = i;
      ib[static_cast<std::size_t>(i) * m + j] = j;
    }
  Var app = t.mul(t.gather_rows(qa, std::move(ia)), t.gather_rows(qb, std::move(ib)));
  Var geo = mlp_forward(t, ps, geo_prefix, iou_flat);
  return t.add(app, geo);
}

struct GatedAffinity {
  int rows = 0, cols = 0;
  Var match_logits;  // w^T E, rows x cols
  Var m;             // row-stochastic
  Var log_m;
  Var gate_logits;   // w'^T E, clipped
  Var c;             // sigmoid gate in (0,1)
  Var a;             // m (.) c, or m when the gate is disabled
};

// `exclude_diagonal` (square inputs only) removes the self pair from each
// row's distribution; used when scoring a mask set against itself, where the
// self column would otherwise swallow softmax mass that belongs to genuine
// merge partners.
inline GatedAffinity gated_affinity(Tape& t, Var features, Var w, Var w_gate, int rows, int cols,
                                    bool use_gate = true, bool exclude_diagonal = false) {
  GatedAffinity out;
  out.rows = rows;
  out.cols = cols;
  if (rows == 0 || cols == 0) return out;  // nothing to associate with
  out.match_logits = t.reshape(t.matmul_nt(features, w), rows, cols);
  if (exclude_diagonal) {
    if (rows != cols) throw std::invalid_argument("exclude_diagonal needs a square affinity");
    if (cols < 2) throw std::invalid_argument("exclude_diagonal needs at least two masks");
    Tensor mask(rows, cols);
    for (int i = 0; i < rows; ++i) mask.at(i, i) = -1e30;
    out.match_logits = t.add(out.match_logits, t.leaf(std::move(mask)));
  }
  out.m = t.softmax_rows(out.match_logits);
  out.log_m = t.log_softmax_rows(out.match_logits);
  out.gate_logits = t.clip(t.reshape(t.matmul_nt(features, w_gate), rows, cols), -30.0, 30.0);
  out.c = t.sigmoid(out.gate_logits);
  out.a = use_gate ? t.mul(out.m, out.c) : out.m;
  return out;
}

// One call for the whole construction under a parameter prefix
// (<prefix>.w, <prefix>.wp, <prefix>.geo.*). Boxes enter as (min,max) row
// tensors so the overlap feature stays differentiable end to end.
inline GatedAffinity compute_gated_affinity(Tape& t, ParamStore& ps, const std::string& prefix,
                                            Var qa, Var qb, Var boxes_a, Var boxes_b,
                                            bool use_gate = true, bool exclude_diagonal = false) {
  const int n = qa.ok() ? t.val(qa).rows : 0;
  const int m = qb.ok() ? t.val(qb).rows : 0;
  if (n == 0 || m == 0) return GatedAffinity{n, m, {}, {}, {}, {}, {}, {}};
  Var iou = t.pairwise_box_iou(boxes_a, boxes_b);
  Var e = affinity_features(t, ps, prefix + ".geo", qa, qb, iou);
  return gated_affinity(t, e, ps.use(t, prefix + ".w"), ps.use(t, prefix + ".wp"), n, m, use_gate,
                        exclude_diagonal);
}

inline Tensor boxes_to_tensor(const std::vector<Aabb>& boxes) {
  Tensor out(static_cast<int>(boxes.size()), 6);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Aabb& b = boxes[i];
    double vals[6] = {b.mn.x, b.mn.y, b.mn.z, b.mx.x, b.mx.y, b.mx.z};
    std::copy_n(vals, 6, out.row_ptr(static_cast<int>(i)));
  }
  return out;
}

// ---- association ----

// Payload of one merged query for bank bookkeeping.
struct QueryObservation {
  std::vector<double> embedding;
  Aabb box;
  std::vector<int> global_ids;  // sorted
  double objectness = 0.0;
};

struct AssocResult {
  std::vector<int> track_id;    // per query
  std::vector<char> fresh;      // newly created track
  std::vector<char> recalled;   // matched out of the stale buffer
};

// Computes the gated affinity between the given query rows and candidate
// tracklets; supplied by the pipeline so this stage stays parameter-agnostic.
using AffinityFn = std::function<Tensor(const std::vector<int>& query_rows,
                                        const std::vector<const Tracklet*>& candidates)>;

// Two-stage matching: Hungarian on gated affinity against active tracks,
// then the leftovers against the stale buffer with the identical solver.
// Pairs below `theta` are rejected; whatever remains starts a new track.
inline AssocResult associate(TrackBank& bank, const std::vector<QueryObservation>& obs, int t,
                             const AffinityFn& affinity, double theta, bool use_recall,
                             bool reset_age_on_recall) {
  const int n = static_cast<int>(obs.size());
  AssocResult res;
  res.track_id.assign(n, -1);
  res.fresh.assign(n, 0);
  res.recalled.assign(n, 0);

  std::vector<int> pending(n);
  for (int i = 0; i < n; ++i) pending[i] = i;

  if (!bank.active.empty() && n > 0) {
    std::vector<const Tracklet*> cands;
    cands.reserve(bank.active.size());
    for (const auto& [id, tr] : bank.active) cands.push_back(&tr);
    const Tensor a = affinity(pending, cands);
    std::vector<int> still;
    std::vector<char> taken(n, 0);
    for (const auto& [qi, cj] : hungarian(a, /*maximize=*/true)) {
      if (a.at(qi, cj) >= theta) {
        res.track_id[pending[qi]] = cands[cj]->id;
        taken[qi] = 1;
      }
    }
    for (int qi = 0; qi < static_cast<int>(pending.size()); ++qi)
      if (!taken[qi]) still.push_back(pending[qi]);
    pending = std::move(still);
  }

  if (use_recall && !bank.stale.empty() && !pending.empty()) {
    std::vector<const Tracklet*> cands;
    cands.reserve(bank.stale.size());
    for (const Tracklet& tr : bank.stale) cands.push_back(&tr);
    const Tensor a = affinity(pending, cands);
    std::vector<int> reactivate_slots;
    std::vector<int> still;
    std::vector<char> taken(pending.size(), 0);
    for (const auto& [qi, cj] : hungarian(a, /*maximize=*/true)) {
      if (a.at(qi, cj) >= theta) {
        res.track_id[pending[qi]] = cands[cj]->id;
        res.recalled[pending[qi]] = 1;
        taken[qi] = 1;
        reactivate_slots.push_back(cj);
      }
    }
    for (std::size_t qi = 0; qi < pending.size(); ++qi)
      if (!taken[qi]) still.push_back(pending[qi]);
    // Move matched tracklets back into the active set.
    std::sort(reactivate_slots.begin(), reactivate_slots.end(), std::greater<int>());
    for (int slot : reactivate_slots) {
      Tracklet tr = std::move(bank.stale[slot]);
      bank.stale.erase(bank.stale.begin() + slot);
      tr.age = reset_age_on_recall ? 1 : tr.stored_age;
      tr.last_seen = t;
      bank.active.emplace(tr.id, std::move(tr));
    }
    pending = std::move(still);
  }

  for (int qi : pending) {
    Tracklet tr;
    tr.id = bank.next_id++;
    tr.embedding = obs[qi].embedding;
    tr.box = obs[qi].box;
    tr.age = 1;
    tr.last_seen = t;
    res.track_id[qi] = tr.id;
    res.fresh[qi] = 1;
    bank.active.emplace(tr.id, std::move(tr));
  }
  return res;
}

// Running-average update for matched tracks, mask/objectness accumulation
// for every query, then the staleness sweep into the bounded FIFO buffer.
inline void update_bank(TrackBank& bank, const AssocResult& res,
                        const std::vector<QueryObservation>& obs, int t) {
  for (std::size_t qi = 0; qi < obs.size(); ++qi) {
    Tracklet& tr = bank.active.at(res.track_id[qi]);
    if (!res.fresh[qi]) {
      const double alpha = static_cast<double>(tr.age);
      const double inv = 1.0 / (alpha + 1.0);
      for (std::size_t k = 0; k < tr.embedding.size(); ++k)
        tr.embedding[k] = (alpha * tr.embedding[k] + obs[qi].embedding[k]) * inv;
      tr.box.mn = (tr.box.mn * alpha + obs[qi].box.mn) * inv;
      tr.box.mx = (tr.box.mx * alpha + obs[qi].box.mx) * inv;
      tr.age += 1;
      tr.last_seen = t;
    }
    std::vector<int> merged;
    merged.reserve(tr.accumulated.size() + obs[qi].global_ids.size());
    std::set_union(tr.accumulated.begin(), tr.accumulated.end(), obs[qi].global_ids.begin(),
                   obs[qi].global_ids.end(), std::back_inserter(merged));
    tr.accumulated = std::move(merged);
    tr.objectness_sum += obs[qi].objectness;
    tr.objectness_count += 1;
  }

  std::vector<int> to_stale;
  for (const auto& [id, tr] : bank.active)
    if (t - tr.last_seen > bank.t_life) to_stale.push_back(id);
  for (int id : to_stale) {
    Tracklet tr = std::move(bank.active.at(id));
    bank.active.erase(id);
    tr.stored_age = tr.age;
    bank.stale.push_back(std::move(tr));
  }
  while (static_cast<int>(bank.stale.size()) > bank.k_buf) bank.stale.pop_front();
}

}  // namespace trackseg
