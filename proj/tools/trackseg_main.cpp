// Command-line front end: generate synthetic sequences, train, track, score,
// run the ablation matrix, and export colored point clouds.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "trackseg/benchmark.hpp"
#include "trackseg/io.hpp"
#include "trackseg/presets.hpp"

namespace fs = std::filesystem;
using namespace trackseg;

namespace {

// Relative outputs land under TRACKSEG_OUT_DIR when it is set.
fs::path out_path(const std::string& p) {
  const char* base = std::getenv("TRACKSEG_OUT_DIR");
  fs::path path(p);
  if (base && *base && path.is_relative()) path = fs::path(base) / path;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  return path;
}

void add_pipeline_flags(CLI::App* cmd, PipelineConfig& cfg, std::string& config_file) {
  cmd->add_option("--d", cfg.d, "embedding dimension");
  cmd->add_option("--f", cfg.f, "point feature dimension");
  cmd->add_option("--delta", cfg.delta, "merge acceptance threshold");
  cmd->add_option("--theta-match", cfg.theta_match, "association acceptance threshold");
  cmd->add_option("--t-life", cfg.t_life, "frames before an unmatched track goes stale");
  cmd->add_option("--k-buf", cfg.k_buf, "stale buffer capacity");
  cmd->add_option("--topk", cfg.topk, "fragments kept per instance for one-to-many supervision");
  cmd->add_option("--beta-ltm", cfg.weights.beta_ltm, "long-term loss weight");
  cmd->add_option("--beta-agg", cfg.weights.beta_agg, "aggregation loss weight");
  cmd->add_option("--lambda", cfg.weights.lambda, "one-to-many loss weight");
  cmd->add_option("--gamma", cfg.weights.gamma, "background loss weight");
  cmd->add_option("--beta-conf", cfg.weights.beta_conf, "confidence loss weight");
  cmd->add_option("--lr", cfg.lr, "learning rate");
  cmd->add_option("--weight-decay", cfg.weight_decay, "decoupled weight decay");
  cmd->add_option("--batch-size", cfg.batch_size, "scenes per training step");
  cmd->add_option("--frames-per-scene", cfg.frames_per_scene, "frames sampled per scene");
  cmd->add_option("--train-steps", cfg.train_steps, "optimizer steps");
  cmd->add_option("--seed", cfg.seed, "master seed");
  cmd->add_option("--use-ltm", cfg.use_ltm, "enable long-term association");
  cmd->add_option("--use-stm", cfg.use_stm, "enable previous-frame refinement");
  cmd->add_option("--use-merge", cfg.use_merge, "enable inference-time mask merging");
  cmd->add_option("--merge-in-training", cfg.merge_in_training, "also merge in the training path");
  cmd->add_option_function<std::string>(
         "--supervision",
         [&cfg](const std::string& s) {
           if (s == "dual") cfg.supervision = SupervisionMode::dual;
           else if (s == "single") cfg.supervision = SupervisionMode::single;
           else if (s == "off") cfg.supervision = SupervisionMode::off;
           else throw CLI::ValidationError("--supervision must be dual|single|off");
         },
         "supervision mode: dual|single|off");
  cmd->add_option("--use-confidence-gate", cfg.use_confidence_gate, "gate affinities by confidence");
  cmd->add_option("--use-recall", cfg.use_recall, "match leftovers against the stale buffer");
  cmd->add_option("--reset-age-on-recall", cfg.reset_age_on_recall, "reset track age on recall");
  cmd->add_option("--merge-before-stm", cfg.merge_before_stm, "merge before refinement");
  cmd->add_option("--share-merge-params", cfg.share_merge_params,
                  "merge affinity reuses association parameters");
  cmd->add_option("--merge-with-gt-affinity", cfg.merge_with_gt_affinity,
                  "diagnostic: oracle merge affinity from labels");
  cmd->add_option("--config", config_file, "JSON config file; file values override flags");
}

void finalize_config(PipelineConfig& cfg, const std::string& config_file) {
  if (!config_file.empty()) apply_json(cfg, json::parse(read_text_file(config_file)));
}

void add_sim_flags(CLI::App* cmd, SimConfig& sc, std::vector<std::string>& occlusion_spec) {
  cmd->add_option("--instances", sc.num_instances, "instances per scene");
  cmd->add_option("--points", sc.points_per_instance, "points per instance");
  cmd->add_option("--frames", sc.frames, "frames per sequence");
  cmd->add_option("--visibility", sc.visibility, "visible fraction per frame");
  cmd->add_option("--sweep-turns", sc.sweep_turns, "viewpoint revolutions over the sequence");
  cmd->add_option("--frag-min", sc.frag_min, "min fragments per instance");
  cmd->add_option("--frag-max", sc.frag_max, "max fragments per instance");
  cmd->add_option("--noise", sc.feature_noise, "feature noise sigma");
  cmd->add_option("--texture", sc.texture_scale, "view-dependent feature strength");
  cmd->add_option("--feature-dim", sc.feature_dim, "feature dimension");
  cmd->add_option("--signature-clusters", sc.signature_clusters,
                  "number of appearance prototypes (0 = independent)");
  cmd->add_option("--orthogonal-signatures", sc.orthogonal_signatures,
                  "one-hot signatures (needs instances <= feature dim)");
  cmd->add_option("--blob-sigma", sc.blob_sigma, "instance point spread");
  cmd->add_option("--min-separation", sc.min_separation, "min distance between centers");
  cmd->add_option("--bounds-half", sc.bounds_half, "half extent of the scene bounds");
  cmd->add_option("--occlude", occlusion_spec,
                  "occlusion interval instance:start:end (repeatable)");
  cmd->add_option("--sim-seed", sc.seed, "scene seed");
}

void parse_occlusions(SimConfig& sc, const std::vector<std::string>& specs) {
  for (const std::string& s : specs) {
    Occlusion o;
    if (std::sscanf(s.c_str(), "%d:%d:%d", &o.instance, &o.start, &o.end) != 3)
      throw std::runtime_error("bad --occlude spec (want instance:start:end): " + s);
    sc.occlusions.push_back(o);
  }
}

std::vector<SequenceFile> load_sequences(const std::vector<std::string>& paths,
                                         const std::string& data_dir) {
  std::vector<std::string> files = paths;
  if (!data_dir.empty()) {
    for (const auto& entry : fs::directory_iterator(data_dir))
      if (entry.path().extension() == ".json") files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw std::runtime_error("no sequence files given");
  std::vector<SequenceFile> out;
  for (const std::string& f : files) out.push_back(sequence_from_json(json::parse(read_text_file(f))));
  return out;
}

ParamStore params_for_tracking(const PipelineConfig& cfg, const std::string& checkpoint_path,
                               bool oracle, PipelineConfig& effective) {
  effective = cfg;
  if (oracle) return handcrafted_matcher_params(cfg);
  if (!checkpoint_path.empty()) {
    Checkpoint ck = checkpoint_from_json(json::parse(read_text_file(checkpoint_path)));
    effective = ck.config;
    return std::move(ck.params);
  }
  return init_model_params(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tracking-centric online 3D instance segmentation over synthetic streams"};
  app.require_subcommand(1);

  // ---- gen ----
  auto* gen = app.add_subcommand("gen", "generate synthetic sequence files");
  SimConfig gen_sim;
  std::vector<std::string> gen_occ;
  int gen_count = 1;
  std::string gen_out = "sequences";
  add_sim_flags(gen, gen_sim, gen_occ);
  gen->add_option("--count", gen_count, "number of scenes");
  gen->add_option("--out", gen_out, "output directory");

  // ---- train ----
  auto* train = app.add_subcommand("train", "train a checkpoint on sequence files");
  PipelineConfig train_cfg;
  std::string train_cfg_file;
  std::vector<std::string> train_seqs;
  std::string train_data, train_out = "checkpoint.json", train_curve;
  add_pipeline_flags(train, train_cfg, train_cfg_file);
  train->add_option("--sequence", train_seqs, "sequence file (repeatable)");
  train->add_option("--data", train_data, "directory of sequence files");
  train->add_option("--out", train_out, "checkpoint output path");
  train->add_option("--loss-curve", train_curve, "optional loss curve output path");

  // ---- track ----
  auto* track = app.add_subcommand("track", "run the online tracker over a sequence");
  PipelineConfig track_cfg;
  std::string track_cfg_file;
  std::string track_seq, track_ckpt, track_out = "dump.json";
  bool track_oracle = false;
  add_pipeline_flags(track, track_cfg, track_cfg_file);
  track->add_option("--sequence", track_seq, "sequence file")->required();
  track->add_option("--checkpoint", track_ckpt, "checkpoint file (default: seeded init)");
  track->add_flag("--oracle", track_oracle, "use the handcrafted matcher parameters");
  track->add_option("--out", track_out, "track dump output path");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "score track dumps against their sequences");
  std::vector<std::string> eval_dumps, eval_seqs;
  std::string eval_out = "metrics.json";
  eval->add_option("--dump", eval_dumps, "track dump (repeatable, paired with --sequence)")
      ->required();
  eval->add_option("--sequence", eval_seqs, "sequence file (repeatable)")->required();
  eval->add_option("--out", eval_out, "metrics output path");

  // ---- ablate ----
  auto* ablate = app.add_subcommand("ablate", "train and score the component ablation matrix");
  PipelineConfig ab_cfg = benchmark_pipeline_config();
  std::string ab_cfg_file;
  std::vector<std::string> ab_variants{"baseline", "ltm_only", "no_ltm",       "no_stm",
                                       "merge_train_infer",    "single_branch", "full"};
  int ab_train_scenes = 16, ab_bench_scenes = 16;
  std::string ab_out = "ablation.json";
  add_pipeline_flags(ablate, ab_cfg, ab_cfg_file);
  ablate->add_option("--variants", ab_variants, "variant names");
  ablate->add_option("--train-scenes", ab_train_scenes, "training scenes");
  ablate->add_option("--bench-scenes", ab_bench_scenes, "benchmark scenes");
  ablate->add_option("--out", ab_out, "report output path");

  // ---- export-ply ----
  auto* ply = app.add_subcommand("export-ply", "export a colored point cloud from a dump");
  std::string ply_dump, ply_seq, ply_out = "tracks.ply";
  ply->add_option("--dump", ply_dump, "track dump")->required();
  ply->add_option("--sequence", ply_seq, "sequence file")->required();
  ply->add_option("--out", ply_out, "output path");

  try {
    app.parse(argc, argv);

    if (*gen) {
      parse_occlusions(gen_sim, gen_occ);
      for (int i = 0; i < gen_count; ++i) {
        SimConfig sc = gen_sim;
        sc.seed = gen_sim.seed + static_cast<std::uint64_t>(i);
        Scene scene = gen_scene(sc);
        auto frames = render_sequence(scene, sc);
        const std::string name = "seq_" + std::to_string(i);
        const fs::path path = out_path(gen_out + "/" + name + ".json");
        write_text_file(path.string(), sequence_to_json(sc, frames, name).dump());
        std::cout << path.string() << "\n";
      }
    } else if (*train) {
      finalize_config(train_cfg, train_cfg_file);
      auto seqs = load_sequences(train_seqs, train_data);
      std::vector<std::vector<FrameObservation>> scenes;
      for (auto& s : seqs) scenes.push_back(std::move(s.frames));
      ParamStore ps = init_model_params(train_cfg);
      TrainResult res = run_train(scenes, ps, train_cfg);
      const fs::path path = out_path(train_out);
      write_text_file(path.string(), checkpoint_to_json(ps, train_cfg).dump());
      if (!train_curve.empty())
        write_text_file(out_path(train_curve).string(),
                        json{{"format_version", kFormatVersion},
                             {"kind", "loss_curve"},
                             {"losses", res.losses},
                             {"diverged", res.diverged}}
                            .dump());
      std::cout << path.string() << (res.diverged ? " (diverged, rolled back)" : "") << "\n";
    } else if (*track) {
      finalize_config(track_cfg, track_cfg_file);
      SequenceFile sf = sequence_from_json(json::parse(read_text_file(track_seq)));
      PipelineConfig effective;
      ParamStore ps = params_for_tracking(track_cfg, track_ckpt, track_oracle, effective);
      SequenceResult res = run_track(sf.frames, ps, effective, sf.name);
      const fs::path path = out_path(track_out);
      write_text_file(path.string(), dump_to_json(res).dump());
      std::cout << path.string() << "\n";
    } else if (*eval) {
      if (eval_dumps.size() != eval_seqs.size())
        throw std::runtime_error("--dump and --sequence counts must match");
      std::vector<SequenceResult> results;
      std::vector<std::vector<FrameObservation>> gt;
      std::vector<std::string> names;
      std::vector<MetricsReport> per_seq;
      for (std::size_t i = 0; i < eval_dumps.size(); ++i) {
        results.push_back(dump_from_json(json::parse(read_text_file(eval_dumps[i]))));
        SequenceFile sf = sequence_from_json(json::parse(read_text_file(eval_seqs[i])));
        names.push_back(sf.name);
        gt.push_back(std::move(sf.frames));
        per_seq.push_back(average_precision(results.back(), gt.back()));
      }
      MetricsReport agg = aggregate_metrics(results, gt);
      const fs::path path = out_path(eval_out);
      write_text_file(path.string(), metrics_report_to_json(names, per_seq, agg).dump());
      std::cout << path.string() << " ap=" << agg.ap << " ap50=" << agg.ap50
                << " ap25=" << agg.ap25 << "\n";
    } else if (*ablate) {
      finalize_config(ab_cfg, ab_cfg_file);
      auto train_scenes = make_scene_set(ab_train_scenes, kBenchmarkTrainSeed);
      auto bench_scenes = make_scene_set(ab_bench_scenes, kBenchmarkEvalSeed);
      auto rows = run_ablation(train_scenes, bench_scenes, ab_cfg, ab_variants);
      const fs::path path = out_path(ab_out);
      write_text_file(path.string(), ablation_to_json(rows).dump());
      for (const auto& row : rows)
        std::cout << row.name << " ap=" << row.report.ap << " ap50=" << row.report.ap50
                  << " switches=" << row.report.id_switches
                  << " frag=" << row.report.fragmentation_rate << "\n";
    } else if (*ply) {
      SequenceResult res = dump_from_json(json::parse(read_text_file(ply_dump)));
      SequenceFile sf = sequence_from_json(json::parse(read_text_file(ply_seq)));
      const fs::path path = out_path(ply_out);
      write_text_file(path.string(), export_ply(res, sf.frames));
      std::cout << path.string() << "\n";
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
}
