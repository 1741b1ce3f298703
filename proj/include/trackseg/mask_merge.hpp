#pragma once

#include <algorithm>
#include <atomic>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "trackseg/tensor.hpp"

namespace trackseg {

// Invocation counter so tests can assert that the default training path
// never merges (merging is an inference-time repair).
inline std::atomic<long>& cluster_merge_calls() {
  static std::atomic<long> calls{0};
  return calls;
}

struct MergeResult {
  std::vector<std::vector<int>> merged_masks;  // sorted, disjoint unions of originals
  std::vector<int> group_of;                   // original mask index -> merged group index
  bool identity = true;
};

// Complete-linkage agglomeration over a pairwise affinity matrix: groups are
// merged highest-affinity-first (ties by smallest index pair) and a merge is
// allowed only while every cross pair exceeds `delta`, so each final group
// has all within-group affinities above the threshold. Asymmetric input is
// symmetrised with the element-wise minimum.
inline MergeResult cluster_merge(const Tensor& affinity, double delta,
                                 const std::vector<std::vector<int>>& masks) {
  cluster_merge_calls().fetch_add(1, std::memory_order_relaxed);
  const int n = static_cast<int>(masks.size());
  if (affinity.rows != n || affinity.cols != n)
    throw std::invalid_argument("cluster_merge: affinity must be square over the masks");

  // Complete-linkage group affinity: min over cross pairs.
  Tensor link(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) link.at(i, j) = std::min(affinity.at(i, j), affinity.at(j, i));

  std::vector<int> parent(n);
  for (int i = 0; i < n; ++i) parent[i] = i;
  std::vector<char> alive(n, 1);

  while (true) {
    int bi = -1, bj = -1;
    double best = delta;
    for (int i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      for (int j = i + 1; j < n; ++j) {
        if (!alive[j]) continue;
        if (link.at(i, j) > best) {
          best = link.at(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    if (bi < 0) break;
    alive[bj] = 0;
    for (int k = 0; k < n; ++k) parent[k] = (parent[k] == bj) ? bi : parent[k];
    for (int k = 0; k < n; ++k) {
      if (!alive[k] || k == bi) continue;
      const double m = std::min(link.at(bi, k), link.at(bj, k));
      link.at(bi, k) = m;
      link.at(k, bi) = m;
    }
  }

  MergeResult out;
  std::map<int, int> group_index;
  out.group_of.resize(n);
  for (int i = 0; i < n; ++i) {
    auto [it, fresh] = group_index.emplace(parent[i], static_cast<int>(out.merged_masks.size()));
    if (fresh) out.merged_masks.emplace_back();
    out.group_of[i] = it->second;
    auto& dst = out.merged_masks[it->second];
    dst.insert(dst.end(), masks[i].begin(), masks[i].end());
  }
  for (auto& m : out.merged_masks) std::sort(m.begin(), m.end());
  out.identity = static_cast<int>(out.merged_masks.size()) == n;
  return out;
}

// ---- one-to-many supervision targets ----

// Query sets per ground-truth instance: a fragment joins an instance when
// more than half of its points lie inside it; members are ranked by mask IoU
// with the instance and only the best `topk` are kept.
struct OneToManyTargets {
  std::map<int, std::vector<int>> members;  // gt instance id -> query indices (IoU-ranked)
  std::vector<int> instance_of_query;       // -1 when the query qualifies nowhere
};

inline double index_set_iou(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() && b.empty()) throw std::invalid_argument("mask IoU of two empty sets");
  std::size_t inter = 0, ai = 0, bi = 0;
  while (ai < a.size() && bi < b.size()) {
    if (a[ai] == b[bi]) {
      ++inter;
      ++ai;
      ++bi;
    } else if (a[ai] < b[bi]) {
      ++ai;
    } else {
      ++bi;
    }
  }
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

inline OneToManyTargets build_one_to_many_targets(const std::vector<std::vector<int>>& masks,
                                                  const std::vector<int>& gt_labels, int topk) {
  std::map<int, std::vector<int>> instance_points;
  for (std::size_t p = 0; p < gt_labels.size(); ++p)
    instance_points[gt_labels[p]].push_back(static_cast<int>(p));

  OneToManyTargets out;
  out.instance_of_query.assign(masks.size(), -1);
  std::map<int, std::vector<std::pair<double, int>>> ranked;  // instance -> (iou, query)
  for (std::size_t qi = 0; qi < masks.size(); ++qi) {
    const auto& m = masks[qi];
    if (m.empty()) continue;
    std::map<int, int> overlap;
    for (int p : m) overlap[gt_labels[p]] += 1;
    for (const auto& [inst, cnt] : overlap) {
      if (2 * cnt > static_cast<int>(m.size())) {  // strict majority
        out.instance_of_query[qi] = inst;
        ranked[inst].emplace_back(index_set_iou(m, instance_points[inst]), static_cast<int>(qi));
        break;
      }
    }
  }
  for (auto& [inst, list] : ranked) {
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    if (static_cast<int>(list.size()) > topk) list.resize(topk);
    auto& dst = out.members[inst];
    for (const auto& [iou, qi] : list) dst.push_back(qi);
  }
  // Drop membership marks for queries cut by the top-k filter.
  std::set<int> kept;
  for (const auto& [inst, qs] : out.members)
    for (int q : qs) kept.insert(q);
  for (std::size_t qi = 0; qi < out.instance_of_query.size(); ++qi)
    if (out.instance_of_query[qi] >= 0 && !kept.count(static_cast<int>(qi)))
      out.instance_of_query[qi] = -1;
  return out;
}

}  // namespace trackseg
