#pragma once

#include <cmath>
#include <vector>

#include "trackseg/geom.hpp"
#include "trackseg/nn.hpp"
#include "trackseg/tape.hpp"

namespace trackseg {

// Per-query receptive-field scales: softplus keeps them non-negative so the
// distance term can only suppress remote memory slots, never reward them.
inline Var predict_receptive_scales(Tape& t, ParamStore& ps, Var queries) {
  Var raw = t.add_bcast(t.matmul_nt(queries, ps.use(t, "stm.tau_w")), ps.use(t, "stm.tau_b"));
  return t.softplus(raw);  // N x 1
}

// Cross-frame refinement against the previous frame's queries: standard
// scaled dot-product attention with a per-query distance penalty on the
// logits, applied residually. An empty memory is an exact no-op.
inline Var short_term_refine(Tape& t, ParamStore& ps, Var cur, const std::vector<Vec3>& cur_pos,
                             Var prev, const std::vector<Vec3>& prev_pos,
                             Var* attention_out = nullptr) {
  if (!prev.ok() || t.val(prev).rows == 0) return cur;
  const int d = t.val(cur).cols;
  Var keys = t.matmul_nt(prev, ps.use(t, "stm.wk"));
  Var values = t.matmul_nt(prev, ps.use(t, "stm.wv"));
  Var tau = predict_receptive_scales(t, ps, cur);
  Var dist = t.leaf(pairwise_distances(cur_pos, prev_pos));
  Var scores = t.sub(t.scale(t.matmul_nt(cur, keys), 1.0 / std::sqrt(static_cast<double>(d))),
                     t.mul_bcast(dist, tau));
  Var attn = t.softmax_rows(scores);
  if (attention_out) *attention_out = attn;
  Var mix = t.matmul(attn, values);
  return t.add(cur, t.mul_bcast(mix, ps.use(t, "stm.gain")));
}

}  // namespace trackseg
