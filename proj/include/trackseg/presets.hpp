#pragma once

#include <stdexcept>

#include "trackseg/pipeline.hpp"

namespace trackseg {

// Hand-set parameters that make appearance matching a direct signature
// comparison, with every learned refinement stage an exact no-op:
//   - the pooling head computes the identity through a relu pair
//     (x = relu(x) - relu(-x)), so a query embedding is the mean point
//     feature padded with zeros;
//   - match and gate projections read the first f dims with gain g, and the
//     overlap head contributes a constant -g/2 shift, so a perfect signature
//     match gates to sigmoid(g/2) ~ 1 while an orthogonal one gates to
//     sigmoid(-g/2) ~ 0;
//   - attention value paths are zeroed, making the refinement residuals
//     exact identities.
// Useful for sanity runs on noise-free scenes with orthogonal signatures and
// for scripted occlusion-recovery scenarios.
inline ParamStore handcrafted_matcher_params(const PipelineConfig& cfg, double gain = 25.0) {
  if (cfg.d < 2 * cfg.f)
    throw std::invalid_argument("handcrafted params need d >= 2*f for the identity pooling head");
  ParamStore ps = init_model_params(cfg);
  for (auto& [name, p] : ps.params()) std::fill(p.data.begin(), p.data.end(), 0.0);

  Tensor& w0 = ps.get("pool.w0");  // (d x f)
  for (int j = 0; j < cfg.f; ++j) {
    w0.at(j, j) = 1.0;
    w0.at(cfg.f + j, j) = -1.0;
  }
  Tensor& w1 = ps.get("pool.w1");  // (d x d)
  for (int j = 0; j < cfg.f; ++j) {
    w1.at(j, j) = 1.0;
    w1.at(j, cfg.f + j) = -1.0;
  }

  for (const char* prefix : {"assoc", "merge"}) {
    Tensor& w = ps.get(std::string(prefix) + ".w");
    Tensor& wp = ps.get(std::string(prefix) + ".wp");
    for (int j = 0; j < cfg.f; ++j) {
      w.at(0, j) = gain;
      wp.at(0, j) = gain;
    }
    // Overlap head collapses to its output bias: a constant -1/(2f) on the
    // first f dims, which the projections turn into the -g/2 shift.
    Tensor& gb = ps.get(std::string(prefix) + ".geo.b1");
    for (int j = 0; j < cfg.f; ++j) gb.at(0, j) = -0.5 / static_cast<double>(cfg.f);
  }

  ps.get("stm.gain").at(0, 0) = 1.0;
  return ps;
}

}  // namespace trackseg
