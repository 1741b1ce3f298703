#pragma once

#include <vector>

#include "trackseg/sim.hpp"

namespace trackseg {

// The fixed synthetic benchmark: cluttered appearance (clustered signatures),
// view-dependent features, fragmentation 1-4, and two scripted occlusions per
// scene that outlast the default stale horizon.
inline SimConfig benchmark_sim_config(std::uint64_t seed) {
  SimConfig sc;
  sc.num_instances = 8;
  sc.points_per_instance = 150;
  sc.frames = 40;
  sc.visibility = 0.55;
  sc.frag_min = 1;
  sc.frag_max = 4;
  sc.feature_noise = 0.15;
  sc.texture_scale = 0.25;
  sc.seed = seed;
  sc.occlusions.push_back({2, 12, 20});
  sc.occlusions.push_back({5, 24, 32});
  return sc;
}

inline std::vector<std::vector<FrameObservation>> make_scene_set(int count, std::uint64_t seed0) {
  std::vector<std::vector<FrameObservation>> scenes;
  scenes.reserve(count);
  for (int i = 0; i < count; ++i) {
    SimConfig sc = benchmark_sim_config(seed0 + static_cast<std::uint64_t>(i));
    Scene scene = gen_scene(sc);
    scenes.push_back(render_sequence(scene, sc));
  }
  return scenes;
}

inline constexpr std::uint64_t kBenchmarkTrainSeed = 1000;
inline constexpr std::uint64_t kBenchmarkEvalSeed = 2000;

}  // namespace trackseg

#include "trackseg/pipeline.hpp"

namespace trackseg {

// Committed schedule for the ablation matrix. The nets here are tiny, so a
// thousand steps at a raised learning rate stand in for the long fine-tuning
// schedule a full-scale model would get; the merge threshold is calibrated to
// the row-normalised affinity scale of multi-fragment groups.
inline PipelineConfig benchmark_pipeline_config() {
  PipelineConfig cfg;
  cfg.lr = 3e-3;
  cfg.train_steps = 1000;
  cfg.weights.beta_agg = 2.0;
  cfg.delta = 0.08;
  cfg.theta_match = 0.05;
  cfg.seed = 1;
  return cfg;
}

}  // namespace trackseg
