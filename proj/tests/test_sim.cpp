#include <doctest.h>

#include <set>

#include "trackseg/sim.hpp"

using namespace trackseg;

namespace {
SimConfig small_cfg() {
  SimConfig c;
  c.num_instances = 4;
  c.points_per_instance = 40;
  c.frames = 6;
  c.seed = 99;
  return c;
}
}  // namespace

TEST_CASE("gen_scene: one instance, deterministic in seed") {
  SimConfig c = small_cfg();
  c.num_instances = 1;
  Scene s = gen_scene(c);
  REQUIRE(s.instances.size() == 1);
  CHECK(s.instances[0].id == 0);

  Scene s2 = gen_scene(c);
  REQUIRE(s2.instances[0].points.size() == s.instances[0].points.size());
  for (std::size_t i = 0; i < s.instances[0].points.size(); ++i) {
    CHECK(s.instances[0].points[i].x == s2.instances[0].points[i].x);
    CHECK(s.instances[0].points[i].z == s2.instances[0].points[i].z);
  }
  CHECK(s.instances[0].signature == s2.instances[0].signature);
}

TEST_CASE("gen_scene: centers respect the separation bound") {
  SimConfig c = small_cfg();
  c.num_instances = 8;
  c.min_separation = 2.0;
  Scene s = gen_scene(c);
  for (std::size_t i = 0; i < s.instances.size(); ++i)
    for (std::size_t j = i + 1; j < s.instances.size(); ++j)
      CHECK(distance(s.instances[i].center, s.instances[j].center) >= c.min_separation);
}

TEST_CASE("gen_scene: infeasible packing raises") {
  SimConfig c = small_cfg();
  c.num_instances = 50;
  c.bounds_half = 1.0;
  c.min_separation = 3.0;
  CHECK_THROWS_AS(gen_scene(c), std::runtime_error);
}

TEST_CASE("render_frame: full visibility and no fragmentation is a no-op front-end") {
  SimConfig c = small_cfg();
  c.visibility = 1.0;
  c.frag_min = c.frag_max = 1;
  c.feature_noise = 0.0;
  c.texture_scale = 0.0;
  c.position_scale = 0.0;
  Scene s = gen_scene(c);
  FrameObservation obs = render_frame(s, 0, c);
  REQUIRE(obs.fragments.size() == static_cast<std::size_t>(c.num_instances));
  CHECK(static_cast<int>(obs.points.size()) == s.total_points());
  // every fragment covers exactly one instance's full point range
  for (const auto& frag : obs.fragments) {
    std::set<int> labels;
    for (int idx : frag) labels.insert(obs.gt_labels[idx]);
    REQUIRE(labels.size() == 1);
    CHECK(static_cast<int>(frag.size()) == c.points_per_instance);
  }
  // noise-free features equal the signature exactly
  for (std::size_t p = 0; p < obs.points.size(); ++p)
    for (int j = 0; j < c.feature_dim; ++j)
      CHECK(obs.features.at(static_cast<int>(p), j) ==
            s.instances[obs.gt_labels[p]].signature[j]);
}

TEST_CASE("render_frame: occluded instances emit no points") {
  SimConfig c = small_cfg();
  c.occlusions.push_back({1, 2, 5});
  Scene s = gen_scene(c);
  FrameObservation hidden = render_frame(s, 3, c);
  for (int lbl : hidden.gt_labels) CHECK(lbl != 1);
  FrameObservation shown = render_frame(s, 5, c);
  bool found = false;
  for (int lbl : shown.gt_labels) found |= (lbl == 1);
  CHECK(found);
}

TEST_CASE("render_frame: fixed fragmentation yields disjoint covering label-pure parts") {
  SimConfig c = small_cfg();
  c.frag_min = c.frag_max = 3;
  c.visibility = 0.7;
  Scene s = gen_scene(c);
  for (int t = 0; t < c.frames; ++t) {
    FrameObservation obs = render_frame(s, t, c);
    std::map<int, int> frag_count;
    std::set<int> seen;
    for (const auto& frag : obs.fragments) {
      REQUIRE(!frag.empty());
      std::set<int> labels;
      for (int idx : frag) {
        CHECK(!seen.count(idx));  // disjoint
        seen.insert(idx);
        labels.insert(obs.gt_labels[idx]);
      }
      REQUIRE(labels.size() == 1);  // label purity
      frag_count[*labels.begin()] += 1;
    }
    CHECK(seen.size() == obs.points.size());  // coverage
    for (const auto& [inst, cnt] : frag_count) CHECK(cnt == 3);
  }
}

TEST_CASE("render_frame is deterministic") {
  SimConfig c = small_cfg();
  Scene s = gen_scene(c);
  FrameObservation a = render_frame(s, 2, c);
  FrameObservation b = render_frame(s, 2, c);
  CHECK(a.point_ids == b.point_ids);
  CHECK(a.fragments == b.fragments);
  CHECK(a.features.data == b.features.data);
}

TEST_CASE("gt_boxes") {
  SimConfig c = small_cfg();
  Scene s = gen_scene(c);
  FrameObservation obs = render_frame(s, 1, c);
  auto boxes = gt_boxes(obs);
  // oracle: brute-force min/max per instance
  std::map<int, std::vector<Vec3>> per;
  for (std::size_t p = 0; p < obs.points.size(); ++p) per[obs.gt_labels[p]].push_back(obs.points[p]);
  for (const auto& [inst, pts] : per) {
    REQUIRE(boxes.count(inst));
    const Aabb ref = bounding_box(pts);
    CHECK(boxes[inst].mn.x == ref.mn.x);
    CHECK(boxes[inst].mx.y == ref.mx.y);
    CHECK(boxes[inst].mx.z == ref.mx.z);
  }

  FrameObservation single;
  single.t = 0;
  single.points = {{1, 2, 3}};
  single.point_ids = {0};
  single.gt_labels = {7};
  single.features = Tensor(1, 4);
  auto sb = gt_boxes(single);
  CHECK(sb[7].volume() == 0.0);
  CHECK(sb[7].mn.x == 1.0);
  CHECK(sb[7].mx.z == 3.0);
}
