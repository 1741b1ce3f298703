#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "trackseg/losses.hpp"
#include "trackseg/long_term.hpp"
#include "trackseg/mask_merge.hpp"
#include "trackseg/metrics.hpp"
#include "trackseg/nn.hpp"
#include "trackseg/perception.hpp"
#include "trackseg/short_term.hpp"
#include "trackseg/sim.hpp"

namespace trackseg {

struct PipelineConfig {
  int d = 32;  // embedding dim
  int f = 16;  // point feature dim
  double delta = 0.5;        // merge acceptance threshold
  double theta_match = 0.2;  // minimum gated affinity for an association
  int t_life = 5;
  int k_buf = 64;
  int topk = 4;
  LossWeights weights;
  double lr = 1e-4;
  double weight_decay = 0.05;
  int batch_size = 4;
  int frames_per_scene = 8;
  int train_steps = 240;
  std::uint64_t seed = 1;

  // module switches; defaults reproduce the full method
  bool use_ltm = true;
  bool use_stm = true;
  bool use_merge = true;            // inference-time fragment merging
  bool merge_in_training = false;   // diagnostic: also merge inside the training path
  SupervisionMode supervision = SupervisionMode::dual;
  bool use_confidence_gate = true;
  bool use_recall = true;
  bool reset_age_on_recall = false;
  bool merge_before_stm = true;     // the two defensible stage orders
  bool share_merge_params = false;  // merge affinity reuses the association parameters
  bool merge_with_gt_affinity = false;  // diagnostic: oracle pairwise affinity from labels
};

inline std::string merge_prefix(const PipelineConfig& cfg) {
  return cfg.share_merge_params ? "assoc" : "merge";
}

inline ParamStore init_model_params(const PipelineConfig& cfg) {
  ParamStore ps;
  Rng r = Rng(cfg.seed).fork("params");
  Rng rp = r.fork("pool"), rb = r.fork("box"), rm = r.fork("maskproj"), ro = r.fork("obj");
  Rng rd = r.fork("dec"), rs = r.fork("stm"), ra = r.fork("assoc"), rg = r.fork("merge");
  register_mlp(ps, "pool", {cfg.f, cfg.d, cfg.d}, rp);
  register_mlp(ps, "box", {cfg.d, cfg.d, 6}, rb);
  ps.add("maskproj.w", uniform_init(rm, cfg.d, cfg.f, cfg.f));
  ps.add("maskproj.b", uniform_init(rm, 1, cfg.d, cfg.f));
  ps.add("obj.w", uniform_init(ro, 1, cfg.d, cfg.d));
  ps.add("obj.b", uniform_init(ro, 1, 1, cfg.d));
  ps.add("dec.wq", uniform_init(rd, cfg.d, cfg.d, cfg.d));
  ps.add("dec.wk", uniform_init(rd, cfg.d, cfg.d, cfg.d));
  ps.add("dec.wv", uniform_init(rd, cfg.d, cfg.d, cfg.d));
  ps.add("stm.wk", uniform_init(rs, cfg.d, cfg.d, cfg.d));
  ps.add("stm.wv", uniform_init(rs, cfg.d, cfg.d, cfg.d));
  ps.add("stm.tau_w", uniform_init(rs, 1, cfg.d, cfg.d));
  ps.add("stm.tau_b", Tensor(1, 1));
  ps.add("stm.gain", Tensor::full(1, 1, 1.0));
  ps.add("assoc.w", uniform_init(ra, 1, cfg.d, cfg.d));
  ps.add("assoc.wp", uniform_init(ra, 1, cfg.d, cfg.d));
  register_mlp(ps, "assoc.geo", {1, cfg.d, cfg.d}, ra);
  ps.add("merge.w", uniform_init(rg, 1, cfg.d, cfg.d));
  ps.add("merge.wp", uniform_init(rg, 1, cfg.d, cfg.d));
  register_mlp(ps, "merge.geo", {1, cfg.d, cfg.d}, rg);
  return ps;
}

// Majority ground-truth owner per mask, -1 when no instance holds a strict
// majority of the mask's points.
inline std::vector<int> mask_owners(const std::vector<std::vector<int>>& masks,
                                    const std::vector<int>& gt_labels) {
  std::vector<int> owner(masks.size(), -1);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    std::map<int, int> counts;
    for (int p : masks[i]) counts[gt_labels[p]] += 1;
    for (const auto& [inst, c] : counts)
      if (2 * c > static_cast<int>(masks[i].size())) {
        owner[i] = inst;
        break;
      }
  }
  return owner;
}

inline Tensor gt_pairwise_affinity(const std::vector<std::vector<int>>& masks,
                                   const std::vector<int>& gt_labels) {
  const auto owner = mask_owners(masks, gt_labels);
  const int n = static_cast<int>(masks.size());
  Tensor a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      a.at(i, j) = (owner[i] >= 0 && owner[i] == owner[j]) ? 1.0 : 0.0;
  return a;
}

// Per-sequence online tracker. Owns the bank and the previous-frame memory;
// one instance per sequence, never shared across concurrent sequences.
class Tracker {
 public:
  Tracker(const PipelineConfig& cfg, ParamStore& ps) : cfg_(cfg), ps_(ps) {
    bank_.t_life = cfg.t_life;
    bank_.k_buf = cfg.k_buf;
  }

  const TrackBank& bank() const { return bank_; }

  FrameTracks process(const FrameObservation& obs) {
    FrameTracks out;
    out.t = obs.t;
    Tape t(/*recording=*/false);
    ps_.bind_begin();

    if (obs.fragments.empty()) {
      update_bank(bank_, AssocResult{}, {}, obs.t);
      prev_q_ = Tensor();
      prev_x_.clear();
      return out;
    }

    Var feats = t.leaf(obs.features);
    PooledQueries pooled = pool(t, ps_, feats, obs.points, obs.fragments);
    Var proj = project_point_features(t, ps_, feats);
    DecoderOutput dec = decode(t, ps_, pooled.embeddings, proj, Branch::one_to_one);

    // Fragment repair: complete-linkage merge over pairwise gated affinity,
    // then re-pool over the merged masks.
    std::vector<std::vector<int>> masks = obs.fragments;
    Var q = pooled.embeddings;
    std::vector<Vec3> centroids = pooled.centroids;
    Var boxes = dec.boxes;
    std::vector<double> objectness = group_objectness(t, dec, {});
    if (cfg_.use_merge && masks.size() >= 2 && cfg_.merge_before_stm) {
      MergeResult merge = merge_masks(t, q, boxes, obs);
      if (!merge.identity) {
        masks = merge.merged_masks;
        PooledQueries repooled = pool(t, ps_, feats, obs.points, masks);
        q = repooled.embeddings;
        centroids = repooled.centroids;
        boxes = predict_boxes(t, ps_, q);
        objectness = group_objectness(t, dec, merge.group_of);
      }
    }

    // Previous-frame refinement on the merged queries.
    Var refined = q;
    if (cfg_.use_stm && prev_q_.rows > 0) {
      Var prev = t.leaf(prev_q_);
      refined = short_term_refine(t, ps_, q, centroids, prev, prev_x_);
    }

    // Alternate stage order: refine fragments first, then merge by averaging
    // the refined member embeddings (re-pooling would discard the refinement).
    if (cfg_.use_merge && masks.size() >= 2 && !cfg_.merge_before_stm) {
      MergeResult merge = merge_masks(t, refined, boxes, obs);
      if (!merge.identity) {
        std::vector<std::vector<int>> groups(merge.merged_masks.size());
        for (std::size_t i = 0; i < merge.group_of.size(); ++i)
          groups[merge.group_of[i]].push_back(static_cast<int>(i));
        refined = t.mean_rows_subset(refined, groups);
        masks = merge.merged_masks;
        std::vector<Vec3> cen;
        for (const auto& m : masks) {
          std::vector<Vec3> pts;
          for (int idx : m) pts.push_back(obs.points[idx]);
          cen.push_back(centroid(pts));
        }
        centroids = std::move(cen);
        boxes = predict_boxes(t, ps_, refined);
        objectness = group_objectness(t, dec, merge.group_of);
      }
    }

    const Tensor& q_final = t.val(refined);
    if (!q_final.all_finite())
      throw std::runtime_error("numerical failure at frame " + std::to_string(obs.t));

    // Association against the bank, or per-frame fresh identities without it.
    std::vector<QueryObservation> qobs = make_observations(t, q_final, boxes, masks, objectness, obs);
    std::vector<int> ids(masks.size(), -1);
    if (cfg_.use_ltm) {
      AffinityFn affinity = [&](const std::vector<int>& rows,
                                const std::vector<const Tracklet*>& cands) {
        return bank_affinity(rows, cands, q_final, t.val(boxes));
      };
      AssocResult res = associate(bank_, qobs, obs.t, affinity, cfg_.theta_match, cfg_.use_recall,
                                  cfg_.reset_age_on_recall);
      update_bank(bank_, res, qobs, obs.t);
      ids = res.track_id;
    } else {
      for (std::size_t i = 0; i < masks.size(); ++i) ids[i] = fresh_id_++;
    }

    for (std::size_t i = 0; i < masks.size(); ++i) {
      TrackRow row;
      row.id = ids[i];
      row.global_ids = qobs[i].global_ids;
      row.objectness = qobs[i].objectness;
      out.tracks.push_back(std::move(row));
    }

    prev_q_ = q_final;
    prev_x_ = centroids;
    return out;
  }

 private:
  PipelineConfig cfg_;
  ParamStore& ps_;
  TrackBank bank_;
  Tensor prev_q_;
  std::vector<Vec3> prev_x_;
  int fresh_id_ = 0;

  MergeResult merge_masks(Tape& t, Var q, Var boxes, const FrameObservation& obs) {
    Tensor affinity;
    if (cfg_.merge_with_gt_affinity) {
      if (obs.gt_labels.empty())
        throw std::runtime_error("merge_with_gt_affinity requires ground-truth labels");
      affinity = gt_pairwise_affinity(obs.fragments, obs.gt_labels);
    } else {
      GatedAffinity ga = compute_gated_affinity(t, ps_, merge_prefix(cfg_), q, q, boxes, boxes,
                                                cfg_.use_confidence_gate, /*exclude_diagonal=*/true);
      affinity = t.val(ga.a);
    }
    return cluster_merge(affinity, cfg_.delta, obs.fragments);
  }

  // Objectness of a merged group is its best member's score: the
  // self-attention branch is trained to pick the strongest fragment.
  std::vector<double> group_objectness(Tape& t, const DecoderOutput& dec,
                                       const std::vector<int>& group_of) {
    const Tensor& logits = t.val(dec.objectness_logits);
    std::vector<double> per_query(logits.rows);
    for (int i = 0; i < logits.rows; ++i) per_query[i] = sigmoid(logits.at(i, 0));
    if (group_of.empty()) return per_query;
    int groups = 0;
    for (int g : group_of) groups = std::max(groups, g + 1);
    std::vector<double> out(groups, 0.0);
    for (std::size_t i = 0; i < group_of.size(); ++i)
      out[group_of[i]] = std::max(out[group_of[i]], per_query[i]);
    return out;
  }

  std::vector<QueryObservation> make_observations(Tape& t, const Tensor& q, Var boxes,
                                                  const std::vector<std::vector<int>>& masks,
                                                  const std::vector<double>& objectness,
                                                  const FrameObservation& obs) {
    const auto bxs = boxes_from_tensor(t.val(boxes));
    std::vector<QueryObservation> out(masks.size());
    for (std::size_t i = 0; i < masks.size(); ++i) {
      out[i].embedding.assign(q.row_ptr(static_cast<int>(i)), q.row_ptr(static_cast<int>(i)) + q.cols);
      out[i].box = bxs[i];
      out[i].objectness = objectness[i];
      out[i].global_ids.reserve(masks[i].size());
      for (int idx : masks[i]) out[i].global_ids.push_back(obs.point_ids[idx]);
      std::sort(out[i].global_ids.begin(), out[i].global_ids.end());
    }
    return out;
  }

  Tensor bank_affinity(const std::vector<int>& rows, const std::vector<const Tracklet*>& cands,
                       const Tensor& q, const Tensor& boxes) {
    Tape t2(/*recording=*/false);
    Tensor qa(static_cast<int>(rows.size()), q.cols);
    Tensor ba(static_cast<int>(rows.size()), 6);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(q.row_ptr(rows[r]), q.cols, qa.row_ptr(static_cast<int>(r)));
      std::copy_n(boxes.row_ptr(rows[r]), 6, ba.row_ptr(static_cast<int>(r)));
    }
    Tensor qb(static_cast<int>(cands.size()), q.cols);
    std::vector<Aabb> boxes_b;
    for (std::size_t c = 0; c < cands.size(); ++c) {
      std::copy(cands[c]->embedding.begin(), cands[c]->embedding.end(), qb.row_ptr(static_cast<int>(c)));
      boxes_b.push_back(cands[c]->box);
    }
    GatedAffinity ga = compute_gated_affinity(
        t2, ps_, "assoc", t2.leaf(std::move(qa)), t2.leaf(std::move(qb)), t2.leaf(std::move(ba)),
        t2.leaf(boxes_to_tensor(boxes_b)), cfg_.use_confidence_gate);
    return t2.val(ga.a);
  }
};

// Full per-sequence run; throws on numerical failure or malformed input.
inline SequenceResult run_track(const std::vector<FrameObservation>& frames, ParamStore& ps,
                                const PipelineConfig& cfg, const std::string& name = "") {
  Tracker tracker(cfg, ps);
  SequenceResult out;
  out.name = name;
  out.frames.reserve(frames.size());
  for (const FrameObservation& obs : frames) out.frames.push_back(tracker.process(obs));
  return out;
}

}  // namespace trackseg
