#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tubemil/eval.hpp"
#include "tubemil/linking.hpp"
#include "tubemil/model.hpp"
#include "tubemil/synthgen.hpp"

namespace tubemil::experiment {

// --- evaluation-protocol bridges --------------------------------------------

inline std::vector<eval::KeyframeKey> keyframe_universe(const synth::World& world) {
  std::vector<eval::KeyframeKey> out;
  const int kf_count = synth::keyframes_per_clip(world.config);
  for (int clip = 0; clip < world.config.num_clips; ++clip)
    for (int kf = 0; kf < kf_count; ++kf) out.push_back({clip, kf});
  return out;
}

/// Ground-truth keyframe boxes: one per (actor, active class) at each
/// keyframe's representative frame.
inline std::vector<eval::FrameGroundTruth> frame_ground_truth(
    const synth::World& world) {
  std::vector<eval::FrameGroundTruth> out;
  const int kf_count = synth::keyframes_per_clip(world.config);
  for (const auto& clip : world.clips) {
    for (int kf = 0; kf < kf_count; ++kf) {
      const int frame = synth::keyframe_frame(world.config, kf);
      for (const auto& actor : clip.actors)
        for (int cls : actor.active_classes(frame))
          out.push_back({{clip.clip_id, kf}, cls,
                         actor.boxes[static_cast<std::size_t>(frame)]});
    }
  }
  return out;
}

/// Per-keyframe box predictions: each tubelet reports, for every class, its
/// box at the keyframe frame its centre falls into, scored with the class
/// probability.
inline std::vector<eval::FrameDetection> frame_detections(
    const synth::World& world, const std::vector<synth::TubeletInfo>& tubelets,
    const std::vector<mil::InstancePrediction>& preds) {
  if (tubelets.size() != preds.size())
    throw std::invalid_argument("frame_detections: size mismatch");
  std::vector<eval::FrameDetection> out;
  const int kf_count = synth::keyframes_per_clip(world.config);
  for (std::size_t i = 0; i < tubelets.size(); ++i) {
    const auto& t = tubelets[i].tubelet;
    int kf = t.centre_frame() / world.config.tubelet_len;
    kf = std::clamp(kf, 0, kf_count - 1);
    const int frame = synth::keyframe_frame(world.config, kf);
    const auto& box = t.covers(frame) ? t.box_at(frame) : t.box_at(t.centre_frame());
    for (std::size_t cls = 0; cls < preds[i].probs.size(); ++cls)
      out.push_back({{tubelets[i].clip, kf}, static_cast<int>(cls), box,
                     preds[i].probs[cls]});
  }
  return out;
}

/// Ground-truth tubes: one per labeled action interval, spanning the
/// actor's boxes over the interval.
inline std::vector<eval::TubeEntry> ground_truth_tubes(const synth::World& world) {
  std::vector<eval::TubeEntry> out;
  for (const auto& clip : world.clips) {
    for (const auto& actor : clip.actors) {
      for (const auto& action : actor.actions) {
        geometry::Tube tube;
        tube.label = action.cls;
        tube.score = 1.0;
        for (int f = action.start; f < action.end; ++f)
          tube.segments.push_back({f, actor.boxes[static_cast<std::size_t>(f)]});
        out.push_back({clip.clip_id, std::move(tube)});
      }
    }
  }
  return out;
}

/// Predicted tubes: classify and link per clip, per class.
inline std::vector<eval::TubeEntry> predicted_tubes(
    const synth::World& world, const std::vector<synth::TubeletInfo>& tubelets,
    const model::ModelParams& params, const linking::LinkConfig& link_cfg,
    mil::VarTransform transform) {
  std::vector<eval::TubeEntry> out;
  for (int clip = 0; clip < world.config.num_clips; ++clip) {
    std::vector<geometry::Tubelet> clip_tubelets;
    for (const auto& info : tubelets)
      if (info.clip == clip) clip_tubelets.push_back(info.tubelet);
    if (clip_tubelets.empty()) continue;
    const auto per_class =
        linking::tubes_from_predictions(params, clip_tubelets, link_cfg, transform);
    for (const auto& tubes : per_class)
      for (const auto& tube : tubes) out.push_back({clip, tube});
  }
  return out;
}

// --- study specification -----------------------------------------------------

inline constexpr const char* kVariantNaive = "naive";
inline constexpr const char* kVariantLse = "mil-lse";
inline constexpr const char* kVariantMean = "mil-mean";
inline constexpr const char* kVariantMax = "mil-max";
inline constexpr const char* kVariantMaxUncertainty = "mil-max+uncertainty";

inline void apply_variant(model::TrainConfig& cfg, const std::string& variant) {
  cfg.naive = false;
  cfg.use_uncertainty = false;
  if (variant == kVariantNaive) {
    cfg.naive = true;
  } else if (variant == kVariantLse) {
    cfg.pooling.kind = mil::Pooling::kLse;
  } else if (variant == kVariantMean) {
    cfg.pooling.kind = mil::Pooling::kMean;
  } else if (variant == kVariantMax) {
    cfg.pooling.kind = mil::Pooling::kMax;
  } else if (variant == kVariantMaxUncertainty) {
    cfg.pooling.kind = mil::Pooling::kMax;
    cfg.use_uncertainty = true;
  } else {
    throw std::invalid_argument("unknown variant: " + variant);
  }
}

struct StudySpec {
  std::string study = "single";  // single | ablation | bag_batch_sweep | subclip_sweep
  synth::SyntheticConfig synth;
  int eval_clips = 16;
  // the training split keeps the configured secondary (short) actions -- the
  // MIL-violation driver -- while the eval split can restrict itself to the
  // primary actions the linking protocol can localize
  bool eval_includes_secondary = true;
  model::TrainConfig train;
  linking::LinkConfig link;
  std::vector<double> video_iou_thresholds = {0.2, 0.5};
  std::vector<double> frame_iou_thresholds = {0.5};
  int subclip_keyframes = 0;  // bag window; 0 = whole clip
  std::string variant = kVariantMax;
  std::vector<std::string> variants = {kVariantNaive, kVariantLse, kVariantMean,
                                       kVariantMax, kVariantMaxUncertainty};
  std::vector<std::pair<int, int>> bag_batch_values = {{4, 4}, {3, 5}, {2, 8}, {1, 16}};
  std::vector<int> subclip_values = {1, 5, 10, 30, 60, 0};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string out_dir = "out";
};

inline void validate(const StudySpec& spec) {
  synth::validate(spec.synth);
  model::validate(spec.train);
  linking::validate(spec.link);
  if (spec.seeds.empty()) throw std::invalid_argument("study: at least one seed");
  if (spec.eval_clips < 1) throw std::invalid_argument("study: eval_clips >= 1");
  if (spec.study != "single" && spec.study != "ablation" &&
      spec.study != "bag_batch_sweep" && spec.study != "subclip_sweep")
    throw std::invalid_argument("unknown study: " + spec.study);
  if (spec.study == "ablation" && spec.variants.empty())
    throw std::invalid_argument("ablation: no variants");
  if (spec.study == "bag_batch_sweep" && spec.bag_batch_values.empty())
    throw std::invalid_argument("bag_batch_sweep: no settings");
  if (spec.study == "subclip_sweep" && spec.subclip_values.empty())
    throw std::invalid_argument("subclip_sweep: no settings");
  for (int n : spec.subclip_values)
    if (n < 0) throw std::invalid_argument("subclip values must be >= 0");
}

/// One concrete (setting, variant) combination of a study.
struct RunSetting {
  std::string name;
  std::string variant;
  int bags_per_batch = 0;
  int tubelets_per_bag = 0;
  int subclip_keyframes = 0;
};

inline std::vector<RunSetting> enumerate_settings(const StudySpec& spec) {
  std::vector<RunSetting> out;
  const auto base = [&](const std::string& name, const std::string& variant) {
    return RunSetting{name, variant, spec.train.bags_per_batch,
                      spec.train.tubelets_per_bag, spec.subclip_keyframes};
  };
  if (spec.study == "single") {
    out.push_back(base(spec.variant, spec.variant));
  } else if (spec.study == "ablation") {
    for (const auto& v : spec.variants) out.push_back(base(v, v));
  } else if (spec.study == "bag_batch_sweep") {
    for (const auto& [bags, cap] : spec.bag_batch_values) {
      for (const std::string variant : {kVariantMax, kVariantMaxUncertainty}) {
        RunSetting s = base("bags" + std::to_string(bags) + "_tubelets" +
                                std::to_string(cap) + "__" + variant,
                            variant);
        s.bags_per_batch = bags;
        s.tubelets_per_bag = cap;
        out.push_back(s);
      }
    }
  } else if (spec.study == "subclip_sweep") {
    for (int n : spec.subclip_values) {
      RunSetting s = base(n == 0 ? "subclip_whole" : "subclip" + std::to_string(n),
                          spec.variant);
      s.subclip_keyframes = n;
      out.push_back(s);
    }
  }
  return out;
}

// --- run records -------------------------------------------------------------

inline constexpr const char* kRunFormat = "tubemil-run";
inline constexpr int kRunVersion = 1;

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t s = seed ^ (0x9E3779B97F4A7C15ULL * (salt + 1));
  return splitmix64_next(s);
}

inline nlohmann::json train_config_to_json(const model::TrainConfig& cfg) {
  return {{"bags_per_batch", cfg.bags_per_batch},
          {"tubelets_per_bag", cfg.tubelets_per_bag},
          {"learning_rate", cfg.learning_rate},
          {"momentum", cfg.momentum},
          {"weight_decay", cfg.weight_decay},
          {"grad_clip", cfg.grad_clip},
          {"epochs", cfg.epochs},
          {"pooling", {{"kind", mil::to_string(cfg.pooling.kind)}, {"r", cfg.pooling.r}}},
          {"use_uncertainty", cfg.use_uncertainty},
          {"var_transform", mil::to_string(cfg.var_transform)},
          {"naive", cfg.naive},
          {"cosine_decay", cfg.cosine_decay},
          {"seed", cfg.seed}};
}

inline nlohmann::json link_config_to_json(const linking::LinkConfig& cfg) {
  return {{"link_iou_threshold", cfg.link_iou_threshold},
          {"max_gap", cfg.max_gap},
          {"per_class", cfg.per_class}};
}

}  // namespace detail

inline nlohmann::json eval_result_to_json(const eval::EvalResult& result) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& tr : result.per_threshold) {
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& ca : tr.per_class)
      per_class.push_back({{"class", ca.cls},
                           {"ap", ca.ap},
                           {"num_gt", ca.num_gt},
                           {"tp", ca.tp},
                           {"fp", ca.fp},
                           {"fn", ca.fn()}});
    out.push_back({{"threshold", tr.threshold},
                   {"mean_ap", tr.mean_ap},
                   {"per_class", per_class}});
  }
  return out;
}

namespace detail {

inline void atomic_write(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write: " + tmp.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

inline double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// shortest round-trip float formatting, shared by CSV and JSON output
inline std::string number(double x) { return nlohmann::json(x).dump(); }

}  // namespace detail

/// Trains and evaluates one (setting, seed) combination and returns the
/// machine-readable run record. Train and eval worlds are generated from
/// seeds derived deterministically from the run seed.
inline nlohmann::json run_single(const StudySpec& spec, const RunSetting& setting,
                                 std::uint64_t seed) {
  synth::SyntheticConfig train_cfg = spec.synth;
  train_cfg.seed = detail::derive_seed(seed, 0x7472ULL);
  synth::SyntheticConfig eval_cfg = spec.synth;
  eval_cfg.num_clips = spec.eval_clips;
  eval_cfg.seed = detail::derive_seed(seed, 0x6576ULL);
  // train and eval share one feature dictionary: it plays the role of the
  // fixed pretrained representation, not of the sampled world
  train_cfg.feature_seed = detail::derive_seed(seed, 0x6665ULL);
  eval_cfg.feature_seed = train_cfg.feature_seed;
  if (!spec.eval_includes_secondary) {
    eval_cfg.secondary_action_min_frames = 0;
    eval_cfg.secondary_action_max_frames = 0;
    eval_cfg.max_actions_per_actor = 1;
  }

  const synth::World train_world = synth::generate(train_cfg);
  const auto train_tubelets = synth::build_tubelets(train_world);
  const auto bags = synth::build_bags(train_world, train_tubelets,
                                      setting.subclip_keyframes);
  if (bags.empty()) throw std::runtime_error("run: no non-empty bags");
  const auto violations = synth::measure_violations(train_world, train_tubelets, bags);

  model::TrainConfig train = spec.train;
  apply_variant(train, setting.variant);
  train.bags_per_batch = setting.bags_per_batch;
  train.tubelets_per_bag = setting.tubelets_per_bag;
  train.seed = seed;

  std::vector<model::Bag> train_bags;
  train_bags.reserve(bags.size());
  for (const auto& rec : bags) train_bags.push_back(rec.bag);
  const model::TrainResult trained = model::train(train_bags, train);

  const synth::World eval_world = synth::generate(eval_cfg);
  const auto eval_tubelets = synth::build_tubelets(eval_world);

  std::vector<geometry::Tubelet> raw_tubelets;
  raw_tubelets.reserve(eval_tubelets.size());
  for (const auto& info : eval_tubelets) raw_tubelets.push_back(info.tubelet);
  const auto preds =
      model::predict_tubelets(trained.params, raw_tubelets, train.var_transform);

  eval::EvalConfig frame_cfg{spec.frame_iou_thresholds, spec.synth.num_classes};
  const auto frame_result =
      eval::frame_ap(frame_detections(eval_world, eval_tubelets, preds),
                     frame_ground_truth(eval_world), keyframe_universe(eval_world),
                     frame_cfg);

  eval::EvalConfig video_cfg{spec.video_iou_thresholds, spec.synth.num_classes};
  const auto video_result =
      eval::video_ap(predicted_tubes(eval_world, eval_tubelets, trained.params,
                                     spec.link, train.var_transform),
                     ground_truth_tubes(eval_world), video_cfg);

  double mean_bag_size = 0.0;
  for (const auto& rec : bags) mean_bag_size += static_cast<double>(rec.bag.instances.size());
  mean_bag_size /= static_cast<double>(bags.size());

  nlohmann::json record;
  record["format"] = kRunFormat;
  record["version"] = kRunVersion;
  record["study"] = spec.study;
  record["setting"] = {{"name", setting.name},
                       {"variant", setting.variant},
                       {"bags_per_batch", setting.bags_per_batch},
                       {"tubelets_per_bag", setting.tubelets_per_bag},
                       {"subclip_keyframes", setting.subclip_keyframes}};
  record["seed"] = seed;
  record["config"] = {{"synth_train", synth::config_to_json(train_cfg)},
                      {"synth_eval", synth::config_to_json(eval_cfg)},
                      {"train", detail::train_config_to_json(train)},
                      {"link", detail::link_config_to_json(spec.link)},
                      {"frame_iou_thresholds", spec.frame_iou_thresholds},
                      {"video_iou_thresholds", spec.video_iou_thresholds}};
  record["dataset_stats"] = {
      {"num_bags", violations.num_bags},
      {"num_tubelets", static_cast<int>(train_tubelets.size())},
      {"mean_bag_size", mean_bag_size},
      {"violated_bag_fraction", violations.violated_bag_fraction()},
      {"violated_pair_fraction", violations.violated_pair_fraction()}};
  record["metrics"] = {
      {"frame_ap", eval_result_to_json(frame_result)},
      {"video_ap", eval_result_to_json(video_result)},
      {"final_train_loss",
       trained.epoch_mean_loss.empty() ? 0.0 : trained.epoch_mean_loss.back()}};
  return record;
}

struct AggregateRow {
  RunSetting setting;
  int num_seeds = 0;
  double video_ap_02 = 0.0;
  double video_ap_05 = 0.0;
  double frame_ap_05 = 0.0;
  double violated_bag_fraction = 0.0;
};

struct StudyResult {
  std::vector<nlohmann::json> runs;
  std::vector<AggregateRow> rows;
};

namespace detail {

inline double metric_at(const nlohmann::json& record, const char* metric,
                        double threshold) {
  for (const auto& tr : record.at("metrics").at(metric))
    if (tr.at("threshold").get<double>() == threshold)
      return tr.at("mean_ap").get<double>();
  return 0.0;
}

}  // namespace detail

/// Runs every (setting, seed) combination of the study, writing one run
/// record each plus an aggregate table (median over seeds) and the resolved
/// spec. Completed run files are never overwritten: re-running a spec
/// reuses them, and a fresh output directory reproduces them byte for byte.
inline StudyResult run_study(const StudySpec& spec) {
  validate(spec);
  namespace fs = std::filesystem;
  const fs::path out_dir(spec.out_dir);
  fs::create_directories(out_dir / "runs");

  StudyResult result;
  const auto settings = enumerate_settings(spec);
  for (const auto& setting : settings) {
    std::vector<double> v02, v05, f05, viol;
    int used_seeds = 0;
    for (std::uint64_t seed : spec.seeds) {
      const fs::path run_path =
          out_dir / "runs" /
          (spec.study + "__" + setting.name + "__seed" + std::to_string(seed) +
           ".json");
      nlohmann::json record;
      if (fs::exists(run_path)) {
        std::ifstream in(run_path);
        in >> record;
      } else {
        record = run_single(spec, setting, seed);
        detail::atomic_write(run_path, record.dump(2) + "\n");
      }
      v02.push_back(detail::metric_at(record, "video_ap", 0.2));
      v05.push_back(detail::metric_at(record, "video_ap", 0.5));
      f05.push_back(detail::metric_at(record, "frame_ap", 0.5));
      viol.push_back(
          record.at("dataset_stats").at("violated_bag_fraction").get<double>());
      ++used_seeds;
      result.runs.push_back(std::move(record));
    }
    AggregateRow row;
    row.setting = setting;
    row.num_seeds = used_seeds;
    row.video_ap_02 = spec.video_iou_thresholds.empty() ? 0.0 : detail::median(v02);
    row.video_ap_05 = detail::median(v05);
    row.frame_ap_05 = detail::median(f05);
    row.violated_bag_fraction = detail::median(viol);
    result.rows.push_back(row);
  }

  // aggregate table (median over seeds)
  std::string csv =
      "study,setting,variant,bags_per_batch,tubelets_per_bag,subclip_keyframes,"
      "num_seeds,video_ap_0.2,video_ap_0.5,frame_ap_0.5,violated_bag_fraction\n";
  for (const auto& row : result.rows) {
    csv += spec.study + "," + row.setting.name + "," + row.setting.variant + "," +
           std::to_string(row.setting.bags_per_batch) + "," +
           std::to_string(row.setting.tubelets_per_bag) + "," +
           std::to_string(row.setting.subclip_keyframes) + "," +
           std::to_string(row.num_seeds) + "," + detail::number(row.video_ap_02) +
           "," + detail::number(row.video_ap_05) + "," +
           detail::number(row.frame_ap_05) + "," +
           detail::number(row.violated_bag_fraction) + "\n";
  }
  detail::atomic_write(out_dir / "aggregate.csv", csv);

  // resolved configuration, so every experiment is self-describing
  nlohmann::json resolved;
  resolved["study"] = spec.study;
  resolved["synth"] = synth::config_to_json(spec.synth);
  resolved["eval_clips"] = spec.eval_clips;
  resolved["train"] = detail::train_config_to_json(spec.train);
  resolved["link"] = detail::link_config_to_json(spec.link);
  resolved["frame_iou_thresholds"] = spec.frame_iou_thresholds;
  resolved["video_iou_thresholds"] = spec.video_iou_thresholds;
  resolved["subclip_keyframes"] = spec.subclip_keyframes;
  resolved["variant"] = spec.variant;
  resolved["variants"] = spec.variants;
  {
    nlohmann::json bb = nlohmann::json::array();
    for (const auto& [bags, cap] : spec.bag_batch_values) bb.push_back({bags, cap});
    resolved["bag_batch_values"] = bb;
  }
  resolved["subclip_values"] = spec.subclip_values;
  resolved["seeds"] = spec.seeds;
  detail::atomic_write(out_dir / "config.json", resolved.dump(2) + "\n");

  return result;
}

// --- standard benchmark specs -------------------------------------------------

/// The standard synthetic benchmark behind the pooling-variant ablation:
/// whole-clip bags over long clips, fn_rate 0.2, bystander walkers, one
/// long action per actor carrying the Video-AP signal plus short secondary
/// actions that the shredded detector frequently misses (the MIL-violation
/// driver).
inline StudySpec make_ablation_spec() {
  StudySpec spec;
  spec.study = "ablation";
  spec.synth.num_clips = 96;
  spec.synth.frames_per_clip = 1920;
  spec.synth.num_classes = 24;
  spec.synth.actors_min = 1;
  spec.synth.actors_max = 1;
  spec.synth.feature_dim = 32;
  spec.synth.fn_rate = 0.2;
  spec.synth.fp_rate = 0.45;
  spec.synth.jitter_std = 0.4;
  spec.synth.feature_noise_std = 0.9;
  spec.synth.action_min_frames = 1248;   // one long action carries the AP signal
  spec.synth.action_max_frames = 1824;
  spec.synth.secondary_action_min_frames = 80;  // short actions drive violation
  spec.synth.secondary_action_max_frames = 144;
  spec.synth.box_size_min = 10.0;
  spec.synth.box_size_max = 16.0;
  spec.synth.actor_speed_max = 0.03;
  spec.synth.wander_radius = 2.0;
  spec.synth.background_mean_scale = 2.5;
  spec.eval_clips = 96;
  spec.eval_includes_secondary = false;
  spec.train.epochs = 150;
  spec.train.learning_rate = 0.1;
  spec.train.weight_decay = 0.004;
  spec.link.link_iou_threshold = 0.3;
  spec.link.max_gap = 60;  // detector gaps at fn 0.2 are long; bridge them
  spec.subclip_keyframes = 0;  // whole-clip bags
  return spec;
}

/// Sub-clip duration sweep: longer clips with several short actions per
/// actor; bags get weaker as the annotation window grows.
inline StudySpec make_subclip_spec() {
  StudySpec spec;
  spec.study = "subclip_sweep";
  spec.variant = kVariantMaxUncertainty;
  spec.synth.num_clips = 16;
  spec.synth.frames_per_clip = 1440;  // 90 keyframes
  spec.synth.num_classes = 12;
  spec.synth.actors_min = 1;
  spec.synth.actors_max = 2;
  spec.synth.feature_dim = 32;
  spec.synth.fn_rate = 0.1;
  spec.synth.fp_rate = 0.25;
  spec.synth.jitter_std = 0.3;
  spec.synth.feature_noise_std = 0.6;
  spec.synth.action_min_frames = 48;  // several short actions per actor
  spec.synth.action_max_frames = 112;
  spec.synth.box_size_min = 10.0;
  spec.synth.box_size_max = 16.0;
  spec.synth.actor_speed_max = 0.03;
  spec.synth.wander_radius = 2.0;
  spec.synth.background_mean_scale = 2.5;
  spec.eval_clips = 8;
  spec.train.epochs = 80;
  spec.train.learning_rate = 0.1;
  spec.train.weight_decay = 0.004;
  spec.link.link_iou_threshold = 0.3;
  spec.link.max_gap = 60;
  return spec;
}

/// Bag-count / bag-size trade-off at fixed total tubelets per batch.
inline StudySpec make_bag_batch_spec() {
  StudySpec spec = make_ablation_spec();
  spec.study = "bag_batch_sweep";
  return spec;
}

}  // namespace tubemil::experiment
