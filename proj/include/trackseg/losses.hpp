#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "trackseg/assign.hpp"
#include "trackseg/geom.hpp"
#include "trackseg/long_term.hpp"
#include "trackseg/mask_merge.hpp"
#include "trackseg/perception.hpp"
#include "trackseg/tape.hpp"

namespace trackseg {

struct LossWeights {
  double beta_ltm = 1.0;
  double beta_agg = 1.0;
  double lambda = 1.0;  // one-to-many weight
  double gamma = 1.0;   // background weight
  double beta_conf = 1.0;
};

enum class SupervisionMode { dual, single, off };

inline Var zero_scalar(Tape& t) { return t.leaf(Tensor(1, 1)); }

// Elementwise binary cross-entropy from logits, computed through softplus
// with the logits clamped at +/-30 first.
inline Var bce_from_logits(Tape& t, Var logits, const Tensor& targets) {
  Var x = t.clip(logits, -30.0, 30.0);
  Tensor one_minus = targets;
  for (double& v : one_minus.data) v = 1.0 - v;
  Var a = t.mul(t.leaf(targets), t.softplus(t.scale(x, -1.0)));
  Var b = t.mul(t.leaf(std::move(one_minus)), t.softplus(x));
  return t.add(a, b);
}

inline Var mask_bce_mean(Tape& t, Var logits_row, const Tensor& gt_row) {
  return t.mean_all(bce_from_logits(t, logits_row, gt_row));
}

inline Var dice_loss(Tape& t, Var logits_row, const Tensor& gt_row, double eps = 1e-6) {
  Var p = t.sigmoid(logits_row);
  double gt_sum = 0.0;
  for (double v : gt_row.data) gt_sum += v;
  Var inter = t.sum_all(t.mul(p, t.leaf(gt_row)));
  Var num = t.add_const(t.scale(inter, 2.0), eps);
  Var den = t.add_const(t.sum_all(p), gt_sum + eps);
  return t.add_const(t.scale(t.div(num, den), -1.0), 1.0);
}

inline Var l1_mean(Tape& t, Var pred, const Tensor& target) {
  return t.mean_all(t.abs(t.sub(pred, t.leaf(target))));
}

inline Tensor binary_row(const std::vector<int>& member_points, int num_points) {
  Tensor row(1, num_points);
  for (int p : member_points) row.at(0, p) = 1.0;
  return row;
}

struct SegLossResult {
  Var total;
  Var one_to_one;
  Var one_to_many;
  Var background;
  Assignment matches;  // (query, gt-rank) pairs from the one-to-one step
};

// Per matched pair: mask BCE + Dice on the predicted logits plus L1 on the
// box parameters against the instance's tight box.
inline Var pair_loss(Tape& t, const DecoderOutput& out, int query, const Tensor& gt_row,
                     const Tensor& gt_box_row) {
  Var logits_row = t.gather_rows(out.mask_logits, {query});
  Var box_row = t.gather_rows(out.boxes, {query});
  Var l = t.add(mask_bce_mean(t, logits_row, gt_row), dice_loss(t, logits_row, gt_row));
  return t.add(l, l1_mean(t, box_row, gt_box_row));
}

// Segmentation objective over the decoder branches. `one_to_one_branch` is
// the self-attention branch; `one_to_many_branch` is consulted only in dual
// mode. Background supervision pushes unmatched queries' objectness to zero.
inline SegLossResult seg_loss(Tape& t, const DecoderOutput& one_to_one_branch,
                              const DecoderOutput* one_to_many_branch,
                              const std::vector<std::vector<int>>& masks,
                              const FrameObservation& obs, const OneToManyTargets& targets,
                              const LossWeights& w, SupervisionMode mode) {
  SegLossResult res;
  const int n = t.val(one_to_one_branch.mask_logits).rows;
  const int num_points = static_cast<int>(obs.points.size());

  std::map<int, std::vector<int>> instance_points;
  for (std::size_t p = 0; p < obs.gt_labels.size(); ++p)
    instance_points[obs.gt_labels[p]].push_back(static_cast<int>(p));
  std::vector<int> gt_ids;
  for (const auto& [id, pts] : instance_points) gt_ids.push_back(id);
  const auto boxes = gt_boxes(obs);

  auto gt_box_row = [&](int inst) {
    const Aabb& b = boxes.at(inst);
    return Tensor(1, 6, {b.mn.x, b.mn.y, b.mn.z, b.mx.x, b.mx.y, b.mx.z});
  };

  std::vector<char> matched(n, 0);
  res.one_to_one = zero_scalar(t);
  if (mode != SupervisionMode::single && !gt_ids.empty() && n > 0) {
    // Hungarian over -maskIoU between binarised predictions and instances.
    const Tensor& logits = t.val(one_to_one_branch.mask_logits);
    Tensor cost(n, static_cast<int>(gt_ids.size()));
    for (int i = 0; i < n; ++i) {
      std::vector<int> pred;
      const double* row = logits.row_ptr(i);
      for (int p = 0; p < num_points; ++p)
        if (row[p] > 0.0) pred.push_back(p);
      for (std::size_t k = 0; k < gt_ids.size(); ++k) {
        const auto& gtp = instance_points[gt_ids[k]];
        cost.at(i, static_cast<int>(k)) = pred.empty() ? 0.0 : -index_set_iou(pred, gtp);
      }
    }
    res.matches = hungarian(cost, /*maximize=*/false);
    std::vector<Var> terms;
    for (const auto& [qi, k] : res.matches) {
      const int inst = gt_ids[k];
      terms.push_back(pair_loss(t, one_to_one_branch, qi, binary_row(instance_points[inst], num_points),
                                gt_box_row(inst)));
      matched[qi] = 1;
    }
    if (!terms.empty()) {
      Var s = terms[0];
      for (std::size_t i = 1; i < terms.size(); ++i) s = t.add(s, terms[i]);
      res.one_to_one = t.scale(s, 1.0 / static_cast<double>(terms.size()));
    }
  }

  res.one_to_many = zero_scalar(t);
  const DecoderOutput* many_branch =
      (mode == SupervisionMode::dual) ? one_to_many_branch : &one_to_one_branch;
  if (mode != SupervisionMode::off && many_branch != nullptr && !gt_ids.empty()) {
    std::vector<Var> terms;
    for (const auto& [inst, members] : targets.members) {
      const Tensor gt_row = binary_row(instance_points.at(inst), num_points);
      const Tensor box_row = gt_box_row(inst);
      for (int qi : members) {
        terms.push_back(pair_loss(t, *many_branch, qi, gt_row, box_row));
        if (mode == SupervisionMode::single) matched[qi] = 1;
      }
    }
    if (!terms.empty()) {
      Var s = terms[0];
      for (std::size_t i = 1; i < terms.size(); ++i) s = t.add(s, terms[i]);
      res.one_to_many = s;  // plain sum over instances and their fragments
    }
  }

  Tensor obj_targets(n, 1);
  for (int i = 0; i < n; ++i) obj_targets.at(i, 0) = matched[i] ? 1.0 : 0.0;
  res.background = n > 0
      ? t.mean_all(bce_from_logits(t, one_to_one_branch.objectness_logits, obj_targets))
      : zero_scalar(t);

  Var total = res.one_to_one;
  if (mode == SupervisionMode::single) total = res.one_to_many;
  else if (mode == SupervisionMode::dual) total = t.add(total, t.scale(res.one_to_many, w.lambda));
  res.total = t.add(total, t.scale(res.background, w.gamma));
  (void)masks;
  return res;
}

// ---- long-term matching / confidence objective ----

struct MatchTargets {
  Tensor y;                 // segments x tracklets, 1 iff same ground-truth instance
  Assignment assignment;    // Hungarian on -log M over rows that have a true track
};

struct LtmLossResult {
  Var total;
  Var match;
  Var confidence;
  Assignment assignment;
};

inline LtmLossResult ltm_loss(Tape& t, const GatedAffinity& ga, const Tensor& y,
                              const LossWeights& w) {
  LtmLossResult res;
  res.match = zero_scalar(t);
  res.confidence = zero_scalar(t);
  if (ga.rows == 0 || ga.cols == 0) {
    res.total = zero_scalar(t);
    return res;
  }

  // Only segments that do have a true counterpart take part in the matching
  // loss; brand-new objects have nothing to match. Several fragment queries
  // can share one true track, so the Hungarian resolves, over the
  // ground-truth-consistent pairs, which query the track's -log M cost is
  // charged to.
  std::vector<int> rows;
  for (int i = 0; i < ga.rows; ++i) {
    for (int j = 0; j < ga.cols; ++j)
      if (y.at(i, j) > 0.5) {
        rows.push_back(i);
        break;
      }
  }
  if (!rows.empty()) {
    const double forbidden = 1e9;
    const Tensor& logm = t.val(ga.log_m);
    Tensor cost(static_cast<int>(rows.size()), ga.cols);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (int j = 0; j < ga.cols; ++j)
        cost.at(static_cast<int>(r), j) =
            y.at(rows[r], j) > 0.5 ? -logm.at(rows[r], j) : forbidden;
    std::vector<std::pair<int, int>> picked;
    for (const auto& [r, j] : hungarian(cost, /*maximize=*/false))
      if (cost.at(r, j) < forbidden) picked.emplace_back(rows[r], j);
    res.assignment = picked;
    if (!picked.empty()) {
      Var gathered = t.gather_entries(ga.log_m, std::move(picked));
      res.match = t.scale(t.sum_all(gathered), -1.0 / static_cast<double>(ga.rows));
    }
  }

  res.confidence = t.mean_all(bce_from_logits(t, ga.gate_logits, y));
  res.total = t.add(res.match, t.scale(res.confidence, w.beta_conf));
  return res;
}

// ---- mask-aggregation objective ----

// Unordered pairs (i<j): positive when both masks sit on the same instance
// by the majority rule, negative otherwise.
inline void affinity_pair_labels(const std::vector<std::vector<int>>& masks,
                                 const std::vector<int>& gt_labels,
                                 std::vector<std::pair<int, int>>& positives,
                                 std::vector<std::pair<int, int>>& negatives) {
  const int n = static_cast<int>(masks.size());
  std::vector<int> owner(n, -1);
  for (int i = 0; i < n; ++i) {
    std::map<int, int> overlap;
    for (int p : masks[i]) overlap[gt_labels[p]] += 1;
    for (const auto& [inst, cnt] : overlap)
      if (2 * cnt > static_cast<int>(masks[i].size())) {
        owner[i] = inst;
        break;
      }
  }
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      if (owner[i] >= 0 && owner[i] == owner[j]) positives.emplace_back(i, j);
      else negatives.emplace_back(i, j);
    }
}

inline Var agg_loss(Tape& t, const GatedAffinity& ga,
                    const std::vector<std::pair<int, int>>& positives,
                    const std::vector<std::pair<int, int>>& negatives) {
  Var total = zero_scalar(t);
  if (ga.rows == 0) return total;
  if (!positives.empty()) {
    // log A = log M + log C, evaluated in the log domain.
    Var log_c = t.scale(t.softplus(t.scale(ga.gate_logits, -1.0)), -1.0);
    Var pos = t.add(t.gather_entries(ga.log_m, positives), t.gather_entries(log_c, positives));
    total = t.add(total, t.scale(t.mean_all(pos), -1.0));
  }
  if (!negatives.empty()) {
    Var one_minus = t.add_const(t.scale(ga.a, -1.0), 1.0);
    Var neg = t.log(t.gather_entries(one_minus, negatives));
    total = t.add(total, t.scale(t.mean_all(neg), -1.0));
  }
  return total;
}

inline Var total_loss(Tape& t, Var seg, Var ltm, Var agg, const LossWeights& w) {
  return t.add(seg, t.add(t.scale(ltm, w.beta_ltm), t.scale(agg, w.beta_agg)));
}

}  // namespace trackseg
