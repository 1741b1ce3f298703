#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "trackseg/geom.hpp"
#include "trackseg/rng.hpp"
#include "trackseg/tensor.hpp"

namespace trackseg {

struct Occlusion {
  int instance = 0;
  int start = 0;  // inclusive frame
  int end = 0;    // exclusive frame
};

struct SimConfig {
  int num_instances = 8;
  int points_per_instance = 120;
  int frames = 40;
  double visibility = 0.55;     // fraction of each instance's points per frame
  double sweep_turns = 1.0;     // viewpoint revolutions over the sequence
  int frag_min = 1;             // fragments per visible instance (inclusive range)
  int frag_max = 4;
  double feature_noise = 0.12;  // per-point gaussian sigma on features
  double texture_scale = 0.35;  // strength of the view-dependent feature term
  double position_scale = 0.3;  // scaled point coordinates mixed into the last 3 feature dims
  int feature_dim = 16;
  int signature_clusters = 0;   // 0 = independent random signatures
  bool orthogonal_signatures = false;
  double blob_sigma = 0.5;
  double min_separation = 2.0;
  double bounds_half = 4.0;
  std::vector<Occlusion> occlusions;
  std::uint64_t seed = 1;
};

// Ground-truth world: fixed instances, each a gaussian point blob with a unit
// feature signature and a linear position-to-feature texture that makes the
// pooled appearance of a partial view depend on which side is visible.
struct Scene {
  struct Instance {
    int id = 0;
    Vec3 center;
    std::vector<Vec3> points;
    std::vector<double> signature;  // feature_dim
    std::vector<double> texture;    // feature_dim x 3, row-major
  };
  std::vector<Instance> instances;
  Aabb bounds;
  int feature_dim = 16;
  std::uint64_t seed = 0;

  int total_points() const {
    int n = 0;
    for (const auto& ins : instances) n += static_cast<int>(ins.points.size());
    return n;
  }
};

// One streamed frame: the visible points with global ids, per-point features,
// the over-segmented fragment masks (disjoint index sets into this frame's
// point array), and per-point ground-truth instance labels.
struct FrameObservation {
  int t = 0;
  std::vector<int> point_ids;  // global id = index into the scene's concatenated cloud
  std::vector<Vec3> points;
  Tensor features;  // num_points x feature_dim
  std::vector<std::vector<int>> fragments;
  std::vector<int> gt_labels;  // instance id per point
};

inline void validate(const SimConfig& c) {
  if (c.num_instances < 1 || c.points_per_instance < 1 || c.frames < 1 || c.feature_dim < 1)
    throw std::invalid_argument("sim config: counts must be >= 1");
  if (c.visibility <= 0.0 || c.visibility > 1.0)
    throw std::invalid_argument("sim config: visibility must lie in (0,1]");
  if (c.frag_min < 1 || c.frag_max < c.frag_min)
    throw std::invalid_argument("sim config: bad fragmentation range");
  if (c.feature_noise < 0.0) throw std::invalid_argument("sim config: negative noise");
}

inline Scene gen_scene(const SimConfig& cfg) {
  validate(cfg);
  if (cfg.orthogonal_signatures && cfg.num_instances > cfg.feature_dim)
    throw std::invalid_argument("orthogonal signatures need num_instances <= feature_dim");

  Scene scene;
  scene.seed = cfg.seed;
  scene.feature_dim = cfg.feature_dim;
  const double h = cfg.bounds_half;
  scene.bounds = Aabb{{-h, -h, -h}, {h, h, h}};

  Rng rng = Rng(cfg.seed).fork("scene");
  Rng center_rng = rng.fork("centers");

  std::vector<Vec3> centers;
  const int max_attempts = 1000 * cfg.num_instances;
  int attempts = 0;
  while (static_cast<int>(centers.size()) < cfg.num_instances) {
    if (++attempts > max_attempts)
      throw std::runtime_error("gen_scene: infeasible packing, too many instances for bounds");
    Vec3 c{center_rng.uniform(-h, h), center_rng.uniform(-h, h), center_rng.uniform(-h, h)};
    bool ok = true;
    for (const Vec3& o : centers)
      if (distance(c, o) < cfg.min_separation) {
        ok = false;
        break;
      }
    if (ok) centers.push_back(c);
  }

  // Optional prototype clusters make some instances near-confusable in
  // appearance, which is what the temporal modules must disambiguate.
  std::vector<std::vector<double>> prototypes;
  if (cfg.signature_clusters > 0) {
    Rng prng = rng.fork("prototypes");
    for (int c = 0; c < cfg.signature_clusters; ++c) {
      std::vector<double> p(cfg.feature_dim);
      for (double& v : p) v = prng.gaussian();
      prototypes.push_back(std::move(p));
    }
  }

  for (int k = 0; k < cfg.num_instances; ++k) {
    Scene::Instance ins;
    ins.id = k;
    ins.center = centers[k];
    Rng irng = rng.fork("instance").fork(static_cast<std::uint64_t>(k));
    ins.points.reserve(cfg.points_per_instance);
    for (int p = 0; p < cfg.points_per_instance; ++p) {
      Vec3 d{irng.gaussian(), irng.gaussian(), irng.gaussian()};
      ins.points.push_back(ins.center + d * cfg.blob_sigma);
    }
    ins.signature.resize(cfg.feature_dim, 0.0);
    if (cfg.orthogonal_signatures) {
      ins.signature[k] = 1.0;
    } else {
      Rng srng = irng.fork("signature");
      for (int j = 0; j < cfg.feature_dim; ++j) {
        double base = prototypes.empty() ? 0.0 : prototypes[k % prototypes.size()][j];
        ins.signature[j] = base + (prototypes.empty() ? 1.0 : 0.3) * srng.gaussian();
      }
      double nrm = 0.0;
      for (double v : ins.signature) nrm += v * v;
      nrm = std::sqrt(nrm);
      for (double& v : ins.signature) v /= nrm;
    }
    ins.texture.resize(static_cast<std::size_t>(cfg.feature_dim) * 3, 0.0);
    if (cfg.texture_scale > 0.0) {
      Rng trng = irng.fork("texture");
      for (double& v : ins.texture) v = cfg.texture_scale * trng.gaussian();
    }
    scene.instances.push_back(std::move(ins));
  }
  return scene;
}

namespace detail {

// Recursive spatial bisection along the widest axis with seeded jitter;
// always splits the currently largest part, so exactly `k` contiguous,
// non-empty parts come out (fewer only if there are not enough points).
inline std::vector<std::vector<int>> bisect_fragments(const std::vector<Vec3>& pts,
                                                      std::vector<int> all, int k, Rng& rng) {
  std::vector<std::vector<int>> parts{std::move(all)};
  while (static_cast<int>(parts.size()) < k) {
    int big = -1;
    std::size_t big_size = 1;
    for (std::size_t i = 0; i < parts.size(); ++i)
      if (parts[i].size() > big_size) {
        big_size = parts[i].size();
        big = static_cast<int>(i);
      }
    if (big < 0) break;  // nothing splittable left
    std::vector<int>& part = parts[big];
    int axis = 0;
    double best_extent = -1.0;
    for (int ax = 0; ax < 3; ++ax) {
      double lo = pts[part[0]][ax], hi = lo;
      for (int idx : part) {
        lo = std::min(lo, pts[idx][ax]);
        hi = std::max(hi, pts[idx][ax]);
      }
      if (hi - lo > best_extent) {
        best_extent = hi - lo;
        axis = ax;
      }
    }
    std::sort(part.begin(), part.end(), [&](int a, int b) {
      if (pts[a][axis] != pts[b][axis]) return pts[a][axis] < pts[b][axis];
      return a < b;
    });
    const int n = static_cast<int>(part.size());
    int cut = n / 2 + static_cast<int>(rng.uniform(-0.25, 0.25) * n);
    cut = std::clamp(cut, 1, n - 1);
    std::vector<int> right(part.begin() + cut, part.end());
    part.resize(cut);
    parts.push_back(std::move(right));
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

}  // namespace detail

inline bool occluded_at(const SimConfig& cfg, int instance, int t) {
  for (const Occlusion& o : cfg.occlusions)
    if (o.instance == instance && t >= o.start && t < o.end) return true;
  return false;
}

inline FrameObservation render_frame(const Scene& scene, int t, const SimConfig& cfg) {
  if (t < 0 || t >= cfg.frames) throw std::invalid_argument("render_frame: frame out of range");
  FrameObservation obs;
  obs.t = t;
  const int f = scene.feature_dim;

  // Viewpoint sweep; the visible side of each instance changes with t.
  const double ang = 2.0 * 3.14159265358979323846 * cfg.sweep_turns * static_cast<double>(t) /
                     static_cast<double>(std::max(1, cfg.frames));
  const Vec3 dir{std::cos(ang), std::sin(ang), 0.35 * std::sin(2.0 * ang)};

  std::vector<std::vector<double>> feat_rows;
  int global_base = 0;
  for (const auto& ins : scene.instances) {
    const int npts = static_cast<int>(ins.points.size());
    if (occluded_at(cfg, ins.id, t)) {
      global_base += npts;
      continue;
    }
    const int keep = std::max(1, static_cast<int>(std::ceil(cfg.visibility * npts)));
    std::vector<int> order(npts);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      const double pa = ins.points[a].dot(dir), pb = ins.points[b].dot(dir);
      if (pa != pb) return pa > pb;
      return a < b;
    });
    order.resize(keep);
    std::sort(order.begin(), order.end());

    Rng frng = Rng(scene.seed).fork("frame").fork(static_cast<std::uint64_t>(t)).fork(
        static_cast<std::uint64_t>(ins.id));
    const int local_base = static_cast<int>(obs.points.size());
    std::vector<int> local(keep);
    for (int i = 0; i < keep; ++i) {
      const Vec3& p = ins.points[order[i]];
      obs.point_ids.push_back(global_base + order[i]);
      obs.points.push_back(p);
      obs.gt_labels.push_back(ins.id);
      local[i] = local_base + i;

      const Vec3 off = p - ins.center;
      std::vector<double> row(f);
      for (int j = 0; j < f; ++j) {
        const double tex = ins.texture[static_cast<std::size_t>(j) * 3] * off.x +
                           ins.texture[static_cast<std::size_t>(j) * 3 + 1] * off.y +
                           ins.texture[static_cast<std::size_t>(j) * 3 + 2] * off.z;
        row[j] = ins.signature[j] + tex + cfg.feature_noise * frng.gaussian();
      }
      // A 3D backbone's features are position-aware; mirror that by mixing
      // scaled coordinates into the trailing dims so box regression and
      // geometric affinity have something to read.
      if (cfg.position_scale != 0.0 && f >= 3) {
        row[f - 3] += cfg.position_scale * p.x;
        row[f - 2] += cfg.position_scale * p.y;
        row[f - 1] += cfg.position_scale * p.z;
      }
      feat_rows.push_back(std::move(row));
    }

    const int k = (cfg.frag_min == cfg.frag_max)
                      ? cfg.frag_min
                      : frng.fork("frag").uniform_int(cfg.frag_min, cfg.frag_max);
    Rng brng = frng.fork("bisect");
    auto parts = detail::bisect_fragments(obs.points, std::move(local), std::min(k, keep), brng);
    for (auto& part : parts) obs.fragments.push_back(std::move(part));
    global_base += npts;
  }

  obs.features = Tensor(static_cast<int>(feat_rows.size()), f);
  for (std::size_t i = 0; i < feat_rows.size(); ++i)
    std::copy(feat_rows[i].begin(), feat_rows[i].end(), obs.features.row_ptr(static_cast<int>(i)));
  return obs;
}

// Tight per-instance boxes over the instance's visible points; absent
// instances are omitted.
inline std::map<int, Aabb> gt_boxes(const FrameObservation& obs) {
  std::map<int, std::vector<Vec3>> per;
  for (std::size_t i = 0; i < obs.points.size(); ++i) per[obs.gt_labels[i]].push_back(obs.points[i]);
  std::map<int, Aabb> out;
  for (auto& [id, pts] : per) out[id] = bounding_box(pts);
  return out;
}

inline std::vector<FrameObservation> render_sequence(const Scene& scene, const SimConfig& cfg) {
  std::vector<FrameObservation> frames;
  frames.reserve(cfg.frames);
  for (int t = 0; t < cfg.frames; ++t) frames.push_back(render_frame(scene, t, cfg));
  return frames;
}

}  // namespace trackseg
