#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "trackseg/metrics.hpp"
#include "trackseg/pipeline.hpp"
#include "trackseg/train.hpp"

namespace trackseg {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

inline void check_format(const json& j, const char* kind) {
  if (!j.contains("format_version") || j["format_version"].get<int>() != kFormatVersion)
    throw std::runtime_error(std::string(kind) + ": format-version mismatch");
  if (!j.contains("kind") || j["kind"].get<std::string>() != kind)
    throw std::runtime_error(std::string("expected a ") + kind + " document");
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << text;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- sim config & sequences ----

inline json to_json(const SimConfig& c) {
  json occ = json::array();
  for (const Occlusion& o : c.occlusions)
    occ.push_back({{"instance", o.instance}, {"start", o.start}, {"end", o.end}});
  return json{{"num_instances", c.num_instances},
              {"points_per_instance", c.points_per_instance},
              {"frames", c.frames},
              {"visibility", c.visibility},
              {"sweep_turns", c.sweep_turns},
              {"frag_min", c.frag_min},
              {"frag_max", c.frag_max},
              {"feature_noise", c.feature_noise},
              {"texture_scale", c.texture_scale},
              {"position_scale", c.position_scale},
              {"feature_dim", c.feature_dim},
              {"signature_clusters", c.signature_clusters},
              {"orthogonal_signatures", c.orthogonal_signatures},
              {"blob_sigma", c.blob_sigma},
              {"min_separation", c.min_separation},
              {"bounds_half", c.bounds_half},
              {"occlusions", occ},
              {"seed", c.seed}};
}

inline SimConfig sim_config_from_json(const json& j) {
  SimConfig c;
  c.num_instances = j.at("num_instances").get<int>();
  c.points_per_instance = j.at("points_per_instance").get<int>();
  c.frames = j.at("frames").get<int>();
  c.visibility = j.at("visibility").get<double>();
  c.sweep_turns = j.at("sweep_turns").get<double>();
  c.frag_min = j.at("frag_min").get<int>();
  c.frag_max = j.at("frag_max").get<int>();
  c.feature_noise = j.at("feature_noise").get<double>();
  c.texture_scale = j.at("texture_scale").get<double>();
  c.position_scale = j.at("position_scale").get<double>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.signature_clusters = j.at("signature_clusters").get<int>();
  c.orthogonal_signatures = j.at("orthogonal_signatures").get<bool>();
  c.blob_sigma = j.at("blob_sigma").get<double>();
  c.min_separation = j.at("min_separation").get<double>();
  c.bounds_half = j.at("bounds_half").get<double>();
  for (const auto& o : j.at("occlusions"))
    c.occlusions.push_back(
        {o.at("instance").get<int>(), o.at("start").get<int>(), o.at("end").get<int>()});
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline json sequence_to_json(const SimConfig& cfg, const std::vector<FrameObservation>& frames,
                             const std::string& name) {
  json doc{{"format_version", kFormatVersion},
           {"kind", "sequence"},
           {"name", name},
           {"config", to_json(cfg)}};
  json jframes = json::array();
  for (const FrameObservation& fr : frames) {
    json jf;
    jf["t"] = fr.t;
    jf["point_ids"] = fr.point_ids;
    std::vector<double> pts;
    pts.reserve(fr.points.size() * 3);
    for (const Vec3& p : fr.points) {
      pts.push_back(p.x);
      pts.push_back(p.y);
      pts.push_back(p.z);
    }
    jf["points"] = std::move(pts);
    jf["features"] = fr.features.data;
    jf["feature_dim"] = fr.features.cols;
    jf["fragments"] = fr.fragments;
    jf["gt_labels"] = fr.gt_labels;
    jframes.push_back(std::move(jf));
  }
  doc["frames"] = std::move(jframes);
  return doc;
}

struct SequenceFile {
  std::string name;
  SimConfig config;
  std::vector<FrameObservation> frames;
};

inline SequenceFile sequence_from_json(const json& doc) {
  check_format(doc, "sequence");
  SequenceFile sf;
  sf.name = doc.at("name").get<std::string>();
  sf.config = sim_config_from_json(doc.at("config"));
  for (const auto& jf : doc.at("frames")) {
    FrameObservation fr;
    fr.t = jf.at("t").get<int>();
    fr.point_ids = jf.at("point_ids").get<std::vector<int>>();
    const auto pts = jf.at("points").get<std::vector<double>>();
    for (std::size_t i = 0; i + 2 < pts.size(); i += 3)
      fr.points.push_back({pts[i], pts[i + 1], pts[i + 2]});
    const int fdim = jf.at("feature_dim").get<int>();
    auto fdata = jf.at("features").get<std::vector<double>>();
    fr.features = Tensor(static_cast<int>(fr.points.size()), fdim, std::move(fdata));
    fr.fragments = jf.at("fragments").get<std::vector<std::vector<int>>>();
    fr.gt_labels = jf.at("gt_labels").get<std::vector<int>>();
    sf.frames.push_back(std::move(fr));
  }
  return sf;
}

// ---- track dumps ----

inline json dump_to_json(const SequenceResult& res) {
  json doc{{"format_version", kFormatVersion}, {"kind", "track_dump"}, {"name", res.name}};
  json jframes = json::array();
  for (const FrameTracks& fr : res.frames) {
    json jf{{"t", fr.t}};
    json rows = json::array();
    for (const TrackRow& row : fr.tracks)
      rows.push_back({{"id", row.id}, {"points", row.global_ids}, {"objectness", row.objectness}});
    jf["tracks"] = std::move(rows);
    jframes.push_back(std::move(jf));
  }
  doc["frames"] = std::move(jframes);
  return doc;
}

inline SequenceResult dump_from_json(const json& doc) {
  check_format(doc, "track_dump");
  SequenceResult res;
  res.name = doc.at("name").get<std::string>();
  for (const auto& jf : doc.at("frames")) {
    FrameTracks fr;
    fr.t = jf.at("t").get<int>();
    for (const auto& jr : jf.at("tracks")) {
      TrackRow row;
      row.id = jr.at("id").get<int>();
      row.global_ids = jr.at("points").get<std::vector<int>>();
      row.objectness = jr.at("objectness").get<double>();
      fr.tracks.push_back(std::move(row));
    }
    res.frames.push_back(std::move(fr));
  }
  return res;
}

// ---- metrics ----

inline json metrics_to_json(const MetricsReport& rep) {
  json curves = json::array();
  for (const ThresholdCurve& c : rep.curves) {
    std::vector<double> precision, recall;
    for (const PrPoint& p : c.points) {
      recall.push_back(p.recall);
      precision.push_back(p.precision);
    }
    curves.push_back({{"threshold", c.threshold},
                      {"ap", c.ap},
                      {"recall", recall},
                      {"precision", precision}});
  }
  return json{{"ap", rep.ap},
              {"ap50", rep.ap50},
              {"ap25", rep.ap25},
              {"id_switches", rep.id_switches},
              {"fragmentation_rate", rep.fragmentation_rate},
              {"num_gt", rep.num_gt},
              {"num_predictions", rep.num_predictions},
              {"curves", curves}};
}

inline json metrics_report_to_json(const std::vector<std::string>& names,
                                   const std::vector<MetricsReport>& per_sequence,
                                   const MetricsReport& aggregate) {
  json doc{{"format_version", kFormatVersion}, {"kind", "metrics"}};
  json rows = json::array();
  for (std::size_t i = 0; i < per_sequence.size(); ++i) {
    json r = metrics_to_json(per_sequence[i]);
    r["name"] = names[i];
    rows.push_back(std::move(r));
  }
  doc["per_sequence"] = std::move(rows);
  doc["aggregate"] = metrics_to_json(aggregate);
  return doc;
}

// ---- pipeline config & checkpoints ----

inline json to_json(const PipelineConfig& c) {
  return json{{"d", c.d},
              {"f", c.f},
              {"delta", c.delta},
              {"theta_match", c.theta_match},
              {"t_life", c.t_life},
              {"k_buf", c.k_buf},
              {"topk", c.topk},
              {"beta_ltm", c.weights.beta_ltm},
              {"beta_agg", c.weights.beta_agg},
              {"lambda", c.weights.lambda},
              {"gamma", c.weights.gamma},
              {"beta_conf", c.weights.beta_conf},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"frames_per_scene", c.frames_per_scene},
              {"train_steps", c.train_steps},
              {"seed", c.seed},
              {"use_ltm", c.use_ltm},
              {"use_stm", c.use_stm},
              {"use_merge", c.use_merge},
              {"merge_in_training", c.merge_in_training},
              {"supervision", c.supervision == SupervisionMode::dual
                                  ? "dual"
                                  : (c.supervision == SupervisionMode::single ? "single" : "off")},
              {"use_confidence_gate", c.use_confidence_gate},
              {"use_recall", c.use_recall},
              {"reset_age_on_recall", c.reset_age_on_recall},
              {"merge_before_stm", c.merge_before_stm},
              {"share_merge_params", c.share_merge_params},
              {"merge_with_gt_affinity", c.merge_with_gt_affinity}};
}

// Applies any present keys onto the given config (file values win).
inline void apply_json(PipelineConfig& c, const json& j) {
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
  };
  get("d", c.d);
  get("f", c.f);
  get("delta", c.delta);
  get("theta_match", c.theta_match);
  get("t_life", c.t_life);
  get("k_buf", c.k_buf);
  get("topk", c.topk);
  get("beta_ltm", c.weights.beta_ltm);
  get("beta_agg", c.weights.beta_agg);
  get("lambda", c.weights.lambda);
  get("gamma", c.weights.gamma);
  get("beta_conf", c.weights.beta_conf);
  get("lr", c.lr);
  get("weight_decay", c.weight_decay);
  get("batch_size", c.batch_size);
  get("frames_per_scene", c.frames_per_scene);
  get("train_steps", c.train_steps);
  get("seed", c.seed);
  get("use_ltm", c.use_ltm);
  get("use_stm", c.use_stm);
  get("use_merge", c.use_merge);
  get("merge_in_training", c.merge_in_training);
  if (j.contains("supervision")) {
    const std::string s = j.at("supervision").get<std::string>();
    if (s == "dual") c.supervision = SupervisionMode::dual;
    else if (s == "single") c.supervision = SupervisionMode::single;
    else if (s == "off") c.supervision = SupervisionMode::off;
    else throw std::runtime_error("unknown supervision mode: " + s);
  }
  get("use_confidence_gate", c.use_confidence_gate);
  get("use_recall", c.use_recall);
  get("reset_age_on_recall", c.reset_age_on_recall);
  get("merge_before_stm", c.merge_before_stm);
  get("share_merge_params", c.share_merge_params);
  get("merge_with_gt_affinity", c.merge_with_gt_affinity);
}

inline json tensor_map_to_json(const std::map<std::string, Tensor>& m) {
  json out = json::object();
  for (const auto& [name, t] : m)
    out[name] = json{{"shape", {t.rows, t.cols}}, {"data", t.data}};
  return out;
}

inline void tensor_map_from_json(const json& j, std::map<std::string, Tensor>& m) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto shape = it.value().at("shape").get<std::vector<int>>();
    auto data = it.value().at("data").get<std::vector<double>>();
    m[it.key()] = Tensor(shape[0], shape[1], std::move(data));
  }
}

inline json checkpoint_to_json(const ParamStore& ps, const PipelineConfig& cfg) {
  return json{{"format_version", kFormatVersion},
              {"kind", "checkpoint"},
              {"config", to_json(cfg)},
              {"rng_seed", cfg.seed},
              {"step", ps.step_count()},
              {"params", tensor_map_to_json(ps.params())},
              {"adam_m", tensor_map_to_json(ps.adam_m())},
              {"adam_v", tensor_map_to_json(ps.adam_v())}};
}

struct Checkpoint {
  PipelineConfig config;
  ParamStore params;
};

inline Checkpoint checkpoint_from_json(const json& doc) {
  check_format(doc, "checkpoint");
  Checkpoint ck;
  apply_json(ck.config, doc.at("config"));
  std::map<std::string, Tensor> p;
  tensor_map_from_json(doc.at("params"), p);
  for (auto& [name, t] : p) ck.params.add(name, std::move(t));
  tensor_map_from_json(doc.at("adam_m"), ck.params.adam_m());
  tensor_map_from_json(doc.at("adam_v"), ck.params.adam_v());
  ck.params.step_count() = doc.at("step").get<long>();
  return ck;
}

// ---- ablation report ----

inline json ablation_to_json(const std::vector<AblationRow>& rows) {
  json doc{{"format_version", kFormatVersion}, {"kind", "ablation"}};
  json jr = json::array();
  double full_ap = 0.0;
  for (const AblationRow& r : rows)
    if (r.name == "full") full_ap = r.report.ap;
  for (const AblationRow& r : rows) {
    jr.push_back({{"name", r.name},
                  {"ap", r.report.ap},
                  {"ap50", r.report.ap50},
                  {"ap25", r.report.ap25},
                  {"id_switches", r.report.id_switches},
                  {"fragmentation_rate", r.report.fragmentation_rate},
                  {"final_loss", r.final_loss},
                  {"ap_delta_vs_full", r.report.ap - full_ap}});
  }
  doc["rows"] = std::move(jr);
  return doc;
}

// ---- point cloud export ----

inline void id_color(int id, unsigned char& r, unsigned char& g, unsigned char& b) {
  std::uint64_t h = static_cast<std::uint64_t>(id) + 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  h ^= h >> 31;
  r = static_cast<unsigned char>(64 + (h & 0xbf));
  g = static_cast<unsigned char>(64 + ((h >> 8) & 0xbf));
  b = static_cast<unsigned char>(64 + ((h >> 16) & 0xbf));
}

// ASCII point cloud with one color per track id; a vertex per labeled point
// of each accumulated track mask.
inline std::string export_ply(const SequenceResult& res,
                              const std::vector<FrameObservation>& frames) {
  std::map<int, Vec3> coord;
  for (const FrameObservation& fr : frames)
    for (std::size_t p = 0; p < fr.point_ids.size(); ++p)
      coord.emplace(fr.point_ids[p], fr.points[p]);

  const auto preds = accumulate_predictions(res);
  std::size_t count = 0;
  for (const auto& pr : preds) count += pr.global_ids.size();

  std::ostringstream out;
  out << "ply\nformat ascii 1.0\nelement vertex " << count
      << "\nproperty double x\nproperty double y\nproperty double z\n"
         "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  out.precision(17);
  for (const auto& pr : preds) {
    unsigned char r, g, b;
    id_color(pr.id, r, g, b);
    for (int gid : pr.global_ids) {
      const Vec3& p = coord.at(gid);
      out << p.x << " " << p.y << " " << p.z << " " << static_cast<int>(r) << " "
          << static_cast<int>(g) << " " << static_cast<int>(b) << "\n";
    }
  }
  return out.str();
}

}  // namespace trackseg
