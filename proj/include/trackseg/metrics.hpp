#pragma once

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "trackseg/mask_merge.hpp"
#include "trackseg/sim.hpp"

namespace trackseg {

struct TrackRow {
  int id = -1;
  std::vector<int> global_ids;  // sorted
  double objectness = 0.0;
};

struct FrameTracks {
  int t = 0;
  std::vector<TrackRow> tracks;
};

// The tracker's primary output: per-frame track rows plus everything needed
// to accumulate final per-identity 3D masks.
struct SequenceResult {
  std::string name;
  std::vector<FrameTracks> frames;
};

inline double mask_iou_3d(const std::vector<int>& pred, const std::vector<int>& gt) {
  return index_set_iou(pred, gt);  // throws when both sets are empty
}

// Accumulated prediction per track id: union of its per-frame masks ranked by
// mean objectness.
struct AccumulatedPrediction {
  int id = -1;
  std::vector<int> global_ids;
  double score = 0.0;
};

inline std::vector<AccumulatedPrediction> accumulate_predictions(const SequenceResult& res) {
  std::map<int, AccumulatedPrediction> by_id;
  std::map<int, std::pair<double, int>> scores;
  for (const auto& fr : res.frames)
    for (const auto& row : fr.tracks) {
      auto& acc = by_id[row.id];
      acc.id = row.id;
      std::vector<int> merged;
      std::set_union(acc.global_ids.begin(), acc.global_ids.end(), row.global_ids.begin(),
                     row.global_ids.end(), std::back_inserter(merged));
      acc.global_ids = std::move(merged);
      auto& sc = scores[row.id];
      sc.first += row.objectness;
      sc.second += 1;
    }
  std::vector<AccumulatedPrediction> out;
  out.reserve(by_id.size());
  for (auto& [id, acc] : by_id) {
    acc.score = scores[id].first / scores[id].second;
    out.push_back(std::move(acc));
  }
  return out;
}

// Accumulated ground truth: per instance, the union of its visible global ids.
inline std::map<int, std::vector<int>> accumulate_gt(const std::vector<FrameObservation>& frames) {
  std::map<int, std::vector<int>> acc;
  for (const auto& fr : frames)
    for (std::size_t p = 0; p < fr.point_ids.size(); ++p)
      acc[fr.gt_labels[p]].push_back(fr.point_ids[p]);
  for (auto& [id, ids] : acc) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  }
  return acc;
}

struct ApSample {
  double score = 0.0;
  bool tp = false;
};

// Greedy score-ordered matching at one IoU threshold; each instance can be
// claimed once.
inline std::vector<ApSample> match_at_threshold(const std::vector<AccumulatedPrediction>& preds,
                                                const std::map<int, std::vector<int>>& gt,
                                                double thr) {
  std::vector<int> order(preds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (preds[a].score != preds[b].score) return preds[a].score > preds[b].score;
    return preds[a].id < preds[b].id;
  });
  std::map<int, char> used;
  std::vector<ApSample> out;
  out.reserve(preds.size());
  for (int pi : order) {
    double best = 0.0;
    int best_gt = -1;
    for (const auto& [gid, gpts] : gt) {
      if (used.count(gid)) continue;
      const double iou = preds[pi].global_ids.empty() ? 0.0 : mask_iou_3d(preds[pi].global_ids, gpts);
      if (iou > best) {
        best = iou;
        best_gt = gid;
      }
    }
    ApSample s;
    s.score = preds[pi].score;
    if (best_gt >= 0 && best >= thr) {
      s.tp = true;
      used[best_gt] = 1;
    }
    out.push_back(s);
  }
  return out;
}

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

// All-point interpolated average precision.
inline double ap_from_samples(std::vector<ApSample> samples, int num_gt,
                              std::vector<PrPoint>* curve = nullptr) {
  if (num_gt <= 0) throw std::invalid_argument("average_precision: no ground truth");
  std::stable_sort(samples.begin(), samples.end(),
                   [](const ApSample& a, const ApSample& b) { return a.score > b.score; });
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const ApSample& s : samples) {
    s.tp ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / num_gt);
  }
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[i] = std::max(precision[i], precision[i + 1]);
  double ap = 0.0, prev_r = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_r) * precision[i];
    prev_r = recall[i];
  }
  if (curve) {
    curve->clear();
    for (std::size_t i = 0; i < precision.size(); ++i) curve->push_back({recall[i], precision[i]});
  }
  return ap;
}

struct ThresholdCurve {
  double threshold = 0.0;
  double ap = 0.0;
  std::vector<PrPoint> points;
};

struct MetricsReport {
  double ap = 0.0;    // mean over IoU 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap25 = 0.0;
  int id_switches = 0;
  double fragmentation_rate = 0.0;
  int num_gt = 0;
  int num_predictions = 0;
  std::vector<ThresholdCurve> curves;  // 0.25 plus the ten AP thresholds
};

inline std::vector<double> ap_thresholds() {
  std::vector<double> t{0.25};
  for (int k = 0; k < 10; ++k) t.push_back(0.50 + 0.05 * k);
  return t;
}

// Count of frames where an instance's dominant predicted identity differs
// from its dominant identity in its previous visible frame.
inline int id_switches(const SequenceResult& res, const std::vector<FrameObservation>& frames) {
  std::map<int, int> last_dominant;
  int switches = 0;
  for (std::size_t fi = 0; fi < frames.size(); ++fi) {
    const FrameObservation& obs = frames[fi];
    std::map<int, int> track_of_point;  // global id -> track id
    if (fi < res.frames.size())
      for (const auto& row : res.frames[fi].tracks)
        for (int g : row.global_ids) track_of_point[g] = row.id;
    std::map<int, std::map<int, int>> counts;  // instance -> track -> points
    for (std::size_t p = 0; p < obs.point_ids.size(); ++p) {
      auto it = track_of_point.find(obs.point_ids[p]);
      if (it != track_of_point.end()) counts[obs.gt_labels[p]][it->second] += 1;
    }
    for (const auto& [inst, by_track] : counts) {
      int dominant = -1, best = 0;
      for (const auto& [tid, c] : by_track)
        if (c > best || (c == best && (dominant < 0 || tid < dominant))) {
          best = c;
          dominant = tid;
        }
      auto prev = last_dominant.find(inst);
      if (prev != last_dominant.end() && prev->second != dominant) ++switches;
      last_dominant[inst] = dominant;
    }
  }
  return switches;
}

// Predicted tracks per ground-truth instance: each track is charged to the
// instance its accumulated mask overlaps most; 1.0 means a clean bijection.
inline double fragmentation_rate(const SequenceResult& res,
                                 const std::vector<FrameObservation>& frames) {
  const auto gt = accumulate_gt(frames);
  if (gt.empty()) return 0.0;
  const auto preds = accumulate_predictions(res);
  std::map<int, int> per_instance;
  for (const auto& [gid, pts] : gt) per_instance[gid] = 0;
  for (const auto& pr : preds) {
    int best_gt = -1;
    std::size_t best = 0;
    for (const auto& [gid, gpts] : gt) {
      std::vector<int> inter;
      std::set_intersection(pr.global_ids.begin(), pr.global_ids.end(), gpts.begin(), gpts.end(),
                            std::back_inserter(inter));
      if (inter.size() > best) {
        best = inter.size();
        best_gt = gid;
      }
    }
    if (best_gt >= 0) per_instance[best_gt] += 1;
  }
  double sum = 0.0;
  for (const auto& [gid, c] : per_instance) sum += c;
  return sum / static_cast<double>(gt.size());
}

inline MetricsReport average_precision(const SequenceResult& res,
                                       const std::vector<FrameObservation>& frames) {
  const auto gt = accumulate_gt(frames);
  if (gt.empty()) throw std::invalid_argument("average_precision: sequence has no ground truth");
  const auto preds = accumulate_predictions(res);

  MetricsReport rep;
  rep.num_gt = static_cast<int>(gt.size());
  rep.num_predictions = static_cast<int>(preds.size());
  double ap_sum = 0.0;
  for (double thr : ap_thresholds()) {
    ThresholdCurve curve;
    curve.threshold = thr;
    curve.ap = ap_from_samples(match_at_threshold(preds, gt, thr), rep.num_gt, &curve.points);
    if (thr == 0.25) rep.ap25 = curve.ap;
    if (thr == 0.50) rep.ap50 = curve.ap;
    if (thr >= 0.50 - 1e-12) ap_sum += curve.ap;
    rep.curves.push_back(std::move(curve));
  }
  rep.ap = ap_sum / 10.0;
  rep.id_switches = id_switches(res, frames);
  rep.fragmentation_rate = fragmentation_rate(res, frames);
  return rep;
}

// Pooled evaluation over several sequences: per-sequence greedy matching,
// then a single score-ranked PR sweep across everything.
inline MetricsReport aggregate_metrics(const std::vector<SequenceResult>& results,
                                       const std::vector<std::vector<FrameObservation>>& gt_frames) {
  if (results.size() != gt_frames.size())
    throw std::invalid_argument("aggregate_metrics: result/gt count mismatch");
  MetricsReport rep;
  int total_gt = 0;
  std::map<double, std::vector<ApSample>> pooled;
  for (std::size_t s = 0; s < results.size(); ++s) {
    const auto gt = accumulate_gt(gt_frames[s]);
    if (gt.empty()) continue;  // nothing to score in this sequence
    total_gt += static_cast<int>(gt.size());
    const auto preds = accumulate_predictions(results[s]);
    rep.num_predictions += static_cast<int>(preds.size());
    for (double thr : ap_thresholds()) {
      auto samples = match_at_threshold(preds, gt, thr);
      auto& dst = pooled[thr];
      dst.insert(dst.end(), samples.begin(), samples.end());
    }
    rep.id_switches += id_switches(results[s], gt_frames[s]);
    rep.fragmentation_rate += fragmentation_rate(results[s], gt_frames[s]);
  }
  if (total_gt == 0) throw std::invalid_argument("aggregate_metrics: no ground truth");
  rep.num_gt = total_gt;
  rep.fragmentation_rate /= static_cast<double>(results.size());
  double ap_sum = 0.0;
  for (auto& [thr, samples] : pooled) {
    ThresholdCurve curve;
    curve.threshold = thr;
    curve.ap = ap_from_samples(std::move(samples), total_gt, &curve.points);
    if (thr == 0.25) rep.ap25 = curve.ap;
    if (thr == 0.50) rep.ap50 = curve.ap;
    if (thr >= 0.50 - 1e-12) ap_sum += curve.ap;
    rep.curves.push_back(std::move(curve));
  }
  rep.ap = ap_sum / 10.0;
  return rep;
}

}  // namespace trackseg
