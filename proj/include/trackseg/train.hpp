#pragma once

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "trackseg/pipeline.hpp"

namespace trackseg {

// Complete training objective for one ordered frame window of a scene,
// built on an open tape. Tracklets are teacher-forced: the bank is keyed by
// ground-truth instance and absorbs each instance's dominant fragment, so the
// matching targets are well defined while gradients still flow through the
// running-average history and the cross-frame refinement.
inline Var window_loss(Tape& t, ParamStore& ps, const PipelineConfig& cfg,
                       const std::vector<const FrameObservation*>& window) {
  struct TeacherTrack {
    Var emb;  // 1 x d
    Var box;  // 1 x 6, running average on the tape like the embedding
    int age = 1;
  };
  std::map<int, TeacherTrack> teacher;
  Var prev_q;
  std::vector<Vec3> prev_x;
  bool has_prev = false;
  std::vector<Var> frame_losses;

  for (const FrameObservation* obs_ptr : window) {
    const FrameObservation& obs = *obs_ptr;
    if (obs.fragments.empty()) continue;
    Var feats = t.leaf(obs.features);
    std::vector<std::vector<int>> masks = obs.fragments;

    if (cfg.merge_in_training && masks.size() >= 2) {
      PooledQueries pre = pool(t, ps, feats, obs.points, masks);
      Var pre_boxes = predict_boxes(t, ps, pre.embeddings);
      GatedAffinity ga = compute_gated_affinity(t, ps, merge_prefix(cfg), pre.embeddings,
                                                pre.embeddings, pre_boxes, pre_boxes,
                                                cfg.use_confidence_gate, /*exclude_diagonal=*/true);
      masks = cluster_merge(t.val(ga.a), cfg.delta, masks).merged_masks;
    }

    PooledQueries pooled = pool(t, ps, feats, obs.points, masks);
    Var proj = project_point_features(t, ps, feats);
    DecoderOutput b1 = decode(t, ps, pooled.embeddings, proj, Branch::one_to_one);
    DecoderOutput b2;
    if (cfg.supervision == SupervisionMode::dual)
      b2 = decode(t, ps, pooled.embeddings, proj, Branch::one_to_many);

    OneToManyTargets targets = build_one_to_many_targets(masks, obs.gt_labels, cfg.topk);
    SegLossResult seg =
        seg_loss(t, b1, cfg.supervision == SupervisionMode::dual ? &b2 : nullptr, masks, obs,
                 targets, cfg.weights, cfg.supervision);

    Var q2 = pooled.embeddings;
    if (cfg.use_stm && has_prev)
      q2 = short_term_refine(t, ps, pooled.embeddings, pooled.centroids, prev_q, prev_x);

    const auto owners = mask_owners(masks, obs.gt_labels);

    Var ltm_total = zero_scalar(t);
    if (cfg.use_ltm && !teacher.empty()) {
      std::vector<Var> embs, boxes_b;
      std::vector<int> col_instance;
      for (const auto& [inst, track] : teacher) {
        embs.push_back(track.emb);
        boxes_b.push_back(track.box);
        col_instance.push_back(inst);
      }
      Var qb = t.concat_rows(embs);
      GatedAffinity ga = compute_gated_affinity(t, ps, "assoc", q2, qb, b1.boxes,
                                                t.concat_rows(boxes_b), cfg.use_confidence_gate);
      Tensor y(static_cast<int>(masks.size()), static_cast<int>(col_instance.size()));
      for (int i = 0; i < y.rows; ++i)
        for (int j = 0; j < y.cols; ++j)
          y.at(i, j) = (owners[i] >= 0 && owners[i] == col_instance[j]) ? 1.0 : 0.0;
      ltm_total = ltm_loss(t, ga, y, cfg.weights).total;
    }

    Var agg_total = zero_scalar(t);
    if (masks.size() >= 2) {
      GatedAffinity ga = compute_gated_affinity(t, ps, merge_prefix(cfg), pooled.embeddings,
                                                pooled.embeddings, b1.boxes, b1.boxes,
                                                cfg.use_confidence_gate, /*exclude_diagonal=*/true);
      std::vector<std::pair<int, int>> pos, neg;
      affinity_pair_labels(masks, obs.gt_labels, pos, neg);
      agg_total = agg_loss(t, ga, pos, neg);
    }

    frame_losses.push_back(total_loss(t, seg.total, ltm_total, agg_total, cfg.weights));

    if (cfg.use_ltm) {
      // Dominant fragment per instance feeds the teacher bank.
      std::map<int, std::pair<int, int>> dominant;  // instance -> (count, query)
      for (std::size_t qi = 0; qi < masks.size(); ++qi) {
        if (owners[qi] < 0) continue;
        int cnt = 0;
        for (int p : masks[qi])
          if (obs.gt_labels[p] == owners[qi]) ++cnt;
        auto it = dominant.find(owners[qi]);
        if (it == dominant.end() || cnt > it->second.first)
          dominant[owners[qi]] = {cnt, static_cast<int>(qi)};
      }
      for (const auto& [inst, pick] : dominant) {
        const int qi = pick.second;
        Var qrow = t.gather_rows(q2, {qi});
        Var brow = t.gather_rows(b1.boxes, {qi});
        auto it = teacher.find(inst);
        if (it == teacher.end()) {
          teacher.emplace(inst, TeacherTrack{qrow, brow, 1});
        } else {
          TeacherTrack& tr = it->second;
          const double alpha = static_cast<double>(tr.age);
          const double inv = 1.0 / (alpha + 1.0);
          tr.emb = t.scale(t.add(t.scale(tr.emb, alpha), qrow), inv);
          tr.box = t.scale(t.add(t.scale(tr.box, alpha), brow), inv);
          tr.age += 1;
        }
      }
    }

    prev_q = q2;
    prev_x = pooled.centroids;
    has_prev = true;
  }

  if (frame_losses.empty()) return zero_scalar(t);
  Var sum = frame_losses[0];
  for (std::size_t i = 1; i < frame_losses.size(); ++i) sum = t.add(sum, frame_losses[i]);
  return t.scale(sum, 1.0 / static_cast<double>(frame_losses.size()));
}

inline std::vector<const FrameObservation*> sample_window(
    const std::vector<FrameObservation>& frames, int count, Rng rng) {
  std::vector<int> idx(frames.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  for (int i = 0; i < std::min<int>(count, static_cast<int>(idx.size())); ++i) {
    const int j = rng.uniform_int(i, static_cast<int>(idx.size()) - 1);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(std::min<int>(count, static_cast<int>(idx.size())));
  std::sort(idx.begin(), idx.end());
  std::vector<const FrameObservation*> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(&frames[i]);
  return out;
}

struct TrainResult {
  std::vector<double> losses;
  bool diverged = false;
};

// Seeded batched training over in-memory scenes. On divergence the store is
// rolled back to the last finite step.
inline TrainResult run_train(const std::vector<std::vector<FrameObservation>>& scenes,
                             ParamStore& ps, const PipelineConfig& cfg) {
  if (scenes.empty()) throw std::invalid_argument("run_train: no scenes");
  TrainResult res;
  AdamConfig opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  Rng rng = Rng(cfg.seed).fork("train");
  ParamStore last_good = ps;
  for (int step = 0; step < cfg.train_steps; ++step) {
    Tape t(/*recording=*/true);
    ps.bind_begin();
    Rng srng = rng.fork(static_cast<std::uint64_t>(step));
    std::vector<Var> scene_losses;
    for (int b = 0; b < cfg.batch_size; ++b) {
      Rng brng = srng.fork(static_cast<std::uint64_t>(b));
      const int scene_idx = brng.uniform_int(0, static_cast<int>(scenes.size()) - 1);
      auto window = sample_window(scenes[scene_idx], cfg.frames_per_scene, brng.fork("frames"));
      scene_losses.push_back(window_loss(t, ps, cfg, window));
    }
    Var batch = scene_losses[0];
    for (std::size_t i = 1; i < scene_losses.size(); ++i) batch = t.add(batch, scene_losses[i]);
    batch = t.scale(batch, 1.0 / static_cast<double>(scene_losses.size()));

    const double loss_value = t.val(batch).data[0];
    if (!std::isfinite(loss_value)) {
      ps = last_good;
      res.diverged = true;
      break;
    }
    t.backward(batch);
    ps.zero_grads();
    ps.collect_grads(t);
    try {
      optimizer_step(ps, opt);
    } catch (const std::runtime_error&) {
      ps = last_good;
      res.diverged = true;
      break;
    }
    res.losses.push_back(loss_value);
    last_good = ps;
  }
  return res;
}

// ---- ablation matrix ----

inline PipelineConfig ablation_variant(PipelineConfig cfg, const std::string& name) {
  if (name == "full") return cfg;
  if (name == "baseline") {
    cfg.use_ltm = cfg.use_stm = cfg.use_merge = false;
    cfg.supervision = SupervisionMode::off;
    return cfg;
  }
  if (name == "ltm_only") {
    cfg.use_stm = cfg.use_merge = false;
    cfg.supervision = SupervisionMode::off;
    return cfg;
  }
  if (name == "no_ltm") {
    cfg.use_ltm = false;
    return cfg;
  }
  if (name == "no_stm") {
    cfg.use_stm = false;
    return cfg;
  }
  if (name == "merge_train_infer") {
    cfg.merge_in_training = true;
    return cfg;
  }
  if (name == "single_branch") {
    cfg.supervision = SupervisionMode::single;
    return cfg;
  }
  throw std::invalid_argument("unknown ablation variant: " + name);
}

struct AblationRow {
  std::string name;
  MetricsReport report;
  double final_loss = 0.0;
};

// Trains each switch combination with the same schedule and seed, then
// evaluates everything on the same benchmark sequences.
inline std::vector<AblationRow> run_ablation(
    const std::vector<std::vector<FrameObservation>>& train_scenes,
    const std::vector<std::vector<FrameObservation>>& bench_scenes, const PipelineConfig& base,
    const std::vector<std::string>& variants) {
  std::vector<AblationRow> rows;
  for (const std::string& name : variants) {
    const PipelineConfig cfg = ablation_variant(base, name);
    ParamStore ps = init_model_params(cfg);
    TrainResult tr = run_train(train_scenes, ps, cfg);
    std::vector<SequenceResult> results;
    results.reserve(bench_scenes.size());
    for (std::size_t s = 0; s < bench_scenes.size(); ++s)
      results.push_back(run_track(bench_scenes[s], ps, cfg, "bench_" + std::to_string(s)));
    AblationRow row;
    row.name = name;
    row.report = aggregate_metrics(results, bench_scenes);
    row.final_loss = tr.losses.empty() ? 0.0 : tr.losses.back();
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace trackseg
