#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "trackseg/geom.hpp"
#include "trackseg/nn.hpp"
#include "trackseg/sim.hpp"
#include "trackseg/tape.hpp"

namespace trackseg {

// One mask fragment's summary at a single frame. The pipeline works on
// batched tensors; this type is the row-level view of the same data.
struct InstanceQuery {
  std::vector<double> embedding;
  Vec3 centroid;
  Aabb box;
  std::vector<int> mask;  // frame-local point indices
  double objectness = 0.0;
};

enum class Branch { one_to_one, one_to_many };

struct PooledQueries {
  Var embeddings;                // N x d
  std::vector<Vec3> centroids;   // N
};

// Mean point feature per mask pushed through the pooling head; the position
// of a query is the centroid of its member points.
inline PooledQueries pool(Tape& t, ParamStore& ps, Var point_features,
                          const std::vector<Vec3>& points,
                          const std::vector<std::vector<int>>& masks) {
  PooledQueries out;
  std::vector<std::vector<int>> sets = masks;
  Var mean = t.mean_rows_subset(point_features, std::move(sets));
  out.embeddings = mlp_forward(t, ps, "pool", mean);
  out.centroids.reserve(masks.size());
  for (const auto& m : masks) {
    std::vector<Vec3> pts;
    pts.reserve(m.size());
    for (int idx : m) pts.push_back(points[idx]);
    out.centroids.push_back(centroid(pts));
  }
  return out;
}

// Linear projection of raw point features into embedding space, shared by
// both decoder branches; computed once per frame.
inline Var project_point_features(Tape& t, ParamStore& ps, Var point_features) {
  Var w = ps.use(t, "maskproj.w");
  Var b = ps.use(t, "maskproj.b");
  return t.add_bcast(t.matmul_nt(point_features, w), b);
}

// Box head: six raw values per query decoded as a center plus softplus
// extents, so min <= max holds for any parameters.
inline Var predict_boxes(Tape& t, ParamStore& ps, Var queries) {
  Var raw = mlp_forward(t, ps, "box", queries);
  Var center = t.slice_cols(raw, 0, 3);
  Var ext = t.softplus(t.slice_cols(raw, 3, 6));
  Var half = t.scale(ext, 0.5);
  return t.concat_cols(t.sub(center, half), t.add(center, half));
}

inline std::vector<Aabb> boxes_from_tensor(const Tensor& b) {
  std::vector<Aabb> out(b.rows);
  for (int i = 0; i < b.rows; ++i) {
    out[i] = Aabb{{b.at(i, 0), b.at(i, 1), b.at(i, 2)}, {b.at(i, 3), b.at(i, 4), b.at(i, 5)}};
  }
  return out;
}

struct DecoderOutput {
  Branch branch = Branch::one_to_one;
  Var mask_logits;        // N x num_points
  Var objectness_logits;  // N x 1
  Var boxes;              // N x 6 (min, max)
  Var queries;            // the embeddings the mask/objectness heads saw
};

// Dual-branch decoder over shared heads. The one_to_one branch runs one
// residual round of self-attention before the mask/objectness heads; the
// one_to_many branch applies the heads directly. With a single query the
// attention mix is defined as zero, so both branches coincide exactly.
// The box head always sees the raw embeddings (boxes stay a pure function
// of each query).
inline DecoderOutput decode(Tape& t, ParamStore& ps, Var queries, Var point_proj, Branch branch) {
  DecoderOutput out;
  out.branch = branch;
  const int n = t.val(queries).rows;
  const int d = t.val(queries).cols;
  Var z = queries;
  if (branch == Branch::one_to_one && n >= 2) {
    Var q = t.matmul_nt(queries, ps.use(t, "dec.wq"));
    Var k = t.matmul_nt(queries, ps.use(t, "dec.wk"));
    Var v = t.matmul_nt(queries, ps.use(t, "dec.wv"));
    Var attn = t.softmax_rows(t.scale(t.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d))));
    z = t.add(queries, t.matmul(attn, v));
  }
  out.queries = z;
  out.mask_logits = t.matmul_nt(z, point_proj);
  out.objectness_logits = t.add_bcast(t.matmul_nt(z, ps.use(t, "obj.w")), ps.use(t, "obj.b"));
  out.boxes = predict_boxes(t, ps, queries);
  return out;
}

}  // namespace trackseg
