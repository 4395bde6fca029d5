// Experiment CLI: dataset generation, single train/eval runs, and the
// three study designs (pooling ablation, bag/batch trade-off, sub-clip
// duration sweep) over synthetic worlds.
//
// Exit codes: 0 success, 1 invalid specification, 2 runtime failure.

#include <cstdio>
#include <exception>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tubemil/tubemil.hpp"

namespace {

using namespace tubemil;

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
  return out;
}

std::vector<std::pair<int, int>> parse_bag_batch(const std::string& text) {
  std::vector<std::pair<int, int>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("bag-batch entries must look like bags:tubelets");
    out.emplace_back(std::stoi(item.substr(0, colon)),
                     std::stoi(item.substr(colon + 1)));
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(item == "whole" ? 0 : std::stoi(item));
  return out;
}

struct SynthFlags {
  void attach(CLI::App* cmd, synth::SyntheticConfig& cfg) {
    cmd->add_option("--clips", cfg.num_clips, "number of clips");
    cmd->add_option("--frames", cfg.frames_per_clip, "frames per clip");
    cmd->add_option("--classes", cfg.num_classes, "number of action classes");
    cmd->add_option("--actors-min", cfg.actors_min, "minimum actors per clip");
    cmd->add_option("--actors-max", cfg.actors_max, "maximum actors per clip");
    cmd->add_option("--feature-dim", cfg.feature_dim, "feature dimension");
    cmd->add_option("--fn-rate", cfg.fn_rate, "detector miss probability per actor-frame");
    cmd->add_option("--fp-rate", cfg.fp_rate, "expected spurious detections per frame");
    cmd->add_option("--jitter", cfg.jitter_std, "box corner noise stddev");
    cmd->add_option("--feature-noise", cfg.feature_noise_std, "feature noise stddev");
    cmd->add_option("--action-min", cfg.action_min_frames, "min action length (frames)");
    cmd->add_option("--action-max", cfg.action_max_frames, "max action length (frames)");
    cmd->add_option("--secondary-min", cfg.secondary_action_min_frames,
                    "min secondary action length (0 = primary range)");
    cmd->add_option("--secondary-max", cfg.secondary_action_max_frames,
                    "max secondary action length (0 = primary range)");
    cmd->add_option("--max-actions", cfg.max_actions_per_actor,
                    "maximum actions per actor (1-3)");
    cmd->add_option("--tubelet-len", cfg.tubelet_len, "tubelet length K");
    cmd->add_option("--seed", cfg.seed, "generator seed");
  }
};

struct TrainFlags {
  std::string pooling = "max";
  std::string transform = "softplus";

  void attach(CLI::App* cmd, model::TrainConfig& cfg) {
    cmd->add_option("--bags-per-batch", cfg.bags_per_batch, "bags per mini-batch");
    cmd->add_option("--tubelets-per-bag", cfg.tubelets_per_bag, "sampling cap per bag");
    cmd->add_option("--lr", cfg.learning_rate, "learning rate");
    cmd->add_option("--momentum", cfg.momentum, "SGD momentum");
    cmd->add_option("--epochs", cfg.epochs, "training epochs");
    cmd->add_option("--pooling", pooling, "max|mean|lse");
    cmd->add_option("--r", cfg.pooling.r, "pooling sharpness");
    cmd->add_flag("--uncertainty", cfg.use_uncertainty, "enable the uncertainty loss");
    cmd->add_option("--var-transform", transform, "softplus|identity");
    cmd->add_flag("--naive", cfg.naive, "no-MIL baseline (bag label on every tubelet)");
    cmd->add_option("--train-seed", cfg.seed, "training seed");
  }

  void resolve(model::TrainConfig& cfg) const {
    cfg.pooling.kind = mil::pooling_from_string(pooling);
    cfg.var_transform = mil::var_transform_from_string(transform);
  }
};

void apply_config_json(experiment::StudySpec& spec, const nlohmann::json& j) {
  if (j.contains("study")) spec.study = j.at("study").get<std::string>();
  if (j.contains("synth")) {
    nlohmann::json merged = synth::config_to_json(spec.synth);
    merged.update(j.at("synth"));
    spec.synth = synth::config_from_json(merged);
  }
  if (j.contains("eval_clips")) spec.eval_clips = j.at("eval_clips").get<int>();
  if (j.contains("train")) {
    const auto& t = j.at("train");
    if (t.contains("bags_per_batch")) spec.train.bags_per_batch = t.at("bags_per_batch");
    if (t.contains("tubelets_per_bag"))
      spec.train.tubelets_per_bag = t.at("tubelets_per_bag");
    if (t.contains("learning_rate")) spec.train.learning_rate = t.at("learning_rate");
    if (t.contains("momentum")) spec.train.momentum = t.at("momentum");
    if (t.contains("epochs")) spec.train.epochs = t.at("epochs");
    if (t.contains("pooling")) {
      spec.train.pooling.kind =
          mil::pooling_from_string(t.at("pooling").value("kind", "max"));
      if (t.at("pooling").contains("r")) spec.train.pooling.r = t.at("pooling").at("r");
    }
    if (t.contains("use_uncertainty")) spec.train.use_uncertainty = t.at("use_uncertainty");
    if (t.contains("var_transform"))
      spec.train.var_transform =
          mil::var_transform_from_string(t.at("var_transform"));
    if (t.contains("cosine_decay")) spec.train.cosine_decay = t.at("cosine_decay");
  }
  if (j.contains("link")) {
    const auto& l = j.at("link");
    if (l.contains("link_iou_threshold"))
      spec.link.link_iou_threshold = l.at("link_iou_threshold");
    if (l.contains("max_gap")) spec.link.max_gap = l.at("max_gap");
  }
  if (j.contains("frame_iou_thresholds"))
    spec.frame_iou_thresholds = j.at("frame_iou_thresholds").get<std::vector<double>>();
  if (j.contains("video_iou_thresholds"))
    spec.video_iou_thresholds = j.at("video_iou_thresholds").get<std::vector<double>>();
  if (j.contains("subclip_keyframes"))
    spec.subclip_keyframes = j.at("subclip_keyframes").get<int>();
  if (j.contains("variant")) spec.variant = j.at("variant").get<std::string>();
  if (j.contains("variants"))
    spec.variants = j.at("variants").get<std::vector<std::string>>();
  if (j.contains("bag_batch_values")) {
    spec.bag_batch_values.clear();
    for (const auto& entry : j.at("bag_batch_values"))
      spec.bag_batch_values.emplace_back(entry.at(0).get<int>(), entry.at(1).get<int>());
  }
  if (j.contains("subclip_values"))
    spec.subclip_values = j.at("subclip_values").get<std::vector<int>>();
  if (j.contains("seeds"))
    spec.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("out_dir")) spec.out_dir = j.at("out_dir").get<std::string>();
}

void print_eval_table(const eval::EvalResult& result, const std::string& title) {
  std::cout << title << "\n";
  for (const auto& tr : result.per_threshold) {
    std::cout << "  IoU threshold " << tr.threshold << "\n";
    for (const auto& ca : tr.per_class) {
      if (ca.num_gt == 0) continue;
      std::cout << "    class " << ca.cls << ": AP=" << std::fixed
                << std::setprecision(4) << ca.ap << "  (gt=" << ca.num_gt
                << " tp=" << ca.tp << " fp=" << ca.fp << " fn=" << ca.fn() << ")\n";
    }
    std::cout << "    mean AP: " << std::fixed << std::setprecision(4) << tr.mean_ap
              << "\n";
    std::cout.unsetf(std::ios::fixed);
  }
}

int run_gen_data(const synth::SyntheticConfig& cfg, int subclip,
                 const std::string& out_path) {
  const synth::StoredDataset ds = synth::make_dataset(cfg, subclip);
  synth::save_dataset(out_path, ds);
  const auto stats = synth::measure_violations(ds.world, ds.tubelets, ds.bags);
  std::cout << "wrote " << out_path << ": " << cfg.num_clips << " clips, "
            << ds.tubelets.size() << " tubelets, " << ds.bags.size()
            << " bags (violated fraction "
            << stats.violated_bag_fraction() << ")\n";
  return 0;
}

int run_train(const std::string& data_path, const std::string& out_path,
              model::TrainConfig cfg, int subclip, bool rebuild_bags) {
  synth::StoredDataset ds = synth::load_dataset(data_path);
  if (rebuild_bags) ds.bags = synth::build_bags(ds.world, ds.tubelets, subclip);
  if (ds.bags.empty()) throw std::runtime_error("dataset has no bags");
  std::vector<model::Bag> bags;
  bags.reserve(ds.bags.size());
  for (const auto& rec : ds.bags) bags.push_back(rec.bag);
  const model::TrainResult trained = model::train(bags, cfg);
  model::save_checkpoint(out_path, trained.params, cfg.loss_config());
  std::cout << "trained " << cfg.epochs << " epochs on " << bags.size()
            << " bags; final mean loss "
            << (trained.epoch_mean_loss.empty() ? 0.0 : trained.epoch_mean_loss.back())
            << "\nwrote " << out_path << "\n";
  return 0;
}

int run_eval(const std::string& data_path, const std::string& ckpt_path,
             const std::string& out_path, const std::string& tube_dump_path,
             std::vector<double> frame_thresholds, std::vector<double> video_thresholds,
             const linking::LinkConfig& link_cfg) {
  const synth::StoredDataset ds = synth::load_dataset(data_path);
  const model::Checkpoint ckpt = model::load_checkpoint(ckpt_path);
  if (ckpt.params.num_classes != ds.world.config.num_classes)
    throw std::invalid_argument("checkpoint class count does not match dataset");

  std::vector<geometry::Tubelet> raw;
  raw.reserve(ds.tubelets.size());
  for (const auto& info : ds.tubelets) raw.push_back(info.tubelet);
  const auto preds = model::predict_tubelets(ckpt.params, raw,
                                             ckpt.loss_config.var_transform);

  eval::EvalConfig frame_cfg{frame_thresholds, ds.world.config.num_classes};
  const auto frame_result = eval::frame_ap(
      experiment::frame_detections(ds.world, ds.tubelets, preds),
      experiment::frame_ground_truth(ds.world), experiment::keyframe_universe(ds.world),
      frame_cfg);

  eval::EvalConfig video_cfg{video_thresholds, ds.world.config.num_classes};
  const auto pred_tubes = experiment::predicted_tubes(
      ds.world, ds.tubelets, ckpt.params, link_cfg, ckpt.loss_config.var_transform);
  const auto video_result =
      eval::video_ap(pred_tubes, experiment::ground_truth_tubes(ds.world), video_cfg);

  print_eval_table(frame_result, "Frame AP");
  print_eval_table(video_result, "Video AP");

  if (!tube_dump_path.empty()) {
    std::ofstream dump(tube_dump_path);
    if (!dump) throw std::runtime_error("cannot write tube dump: " + tube_dump_path);
    for (const auto& entry : pred_tubes)
      linking::write_tube_dump(dump, {entry.tube}, entry.video);
  }

  if (!out_path.empty()) {
    nlohmann::json record;
    record["format"] = "tubemil-eval";
    record["version"] = 1;
    record["dataset"] = data_path;
    record["checkpoint"] = ckpt_path;
    record["frame_ap"] = experiment::eval_result_to_json(frame_result);
    record["video_ap"] = experiment::eval_result_to_json(video_result);
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write results: " + out_path);
    out << record.dump(2) << "\n";
  }
  return 0;
}

int run_study_cmd(experiment::StudySpec spec, const std::string& config_path) {
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw std::invalid_argument("cannot read config: " + config_path);
    nlohmann::json j;
    in >> j;
    apply_config_json(spec, j);
  }
  const experiment::StudyResult result = experiment::run_study(spec);
  std::cout << "study " << spec.study << ": " << result.runs.size()
            << " runs -> " << spec.out_dir << "\n";
  for (const auto& row : result.rows) {
    std::cout << "  " << row.setting.name << ": video_ap@0.5="
              << row.video_ap_05 << " frame_ap@0.5=" << row.frame_ap_05
              << " (violated " << row.violated_bag_fraction << ")\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tubemil: uncertainty-aware multiple instance learning for "
               "weakly supervised action detection on synthetic worlds"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
  synth::SyntheticConfig gen_cfg;
  SynthFlags gen_synth_flags;
  gen_synth_flags.attach(gen, gen_cfg);
  int gen_subclip = 0;
  std::string gen_out = "dataset.jsonl";
  gen->add_option("--subclip", gen_subclip,
                  "bag window in keyframes (0 = whole clip)");
  gen->add_option("--out", gen_out, "output path")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset file");
  std::string train_data, train_out = "checkpoint.json";
  model::TrainConfig train_cfg;
  TrainFlags train_flags;
  train_cmd->add_option("--data", train_data, "dataset file")->required();
  train_cmd->add_option("--out", train_out, "checkpoint output path");
  train_flags.attach(train_cmd, train_cfg);
  int train_subclip = 0;
  const auto* subclip_opt = train_cmd->add_option(
      "--subclip", train_subclip,
      "rebuild bags with this keyframe window (0 = whole clip)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_data, eval_ckpt, eval_out, eval_dump;
  std::string frame_thr = "0.5", video_thr = "0.2,0.5";
  linking::LinkConfig link_cfg;
  eval_cmd->add_option("--data", eval_data, "dataset file")->required();
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--out", eval_out, "machine-readable results path");
  eval_cmd->add_option("--dump-tubes", eval_dump, "write linked tubes here");
  eval_cmd->add_option("--frame-thresholds", frame_thr, "comma list for Frame AP");
  eval_cmd->add_option("--video-thresholds", video_thr, "comma list for Video AP");
  eval_cmd->add_option("--link-iou", link_cfg.link_iou_threshold, "linking threshold");
  eval_cmd->add_option("--max-gap", link_cfg.max_gap, "linking gap tolerance");

  // study
  auto* study_cmd = app.add_subcommand("study", "run an experiment study");
  std::string study_kind = "single";
  std::string study_config;
  std::string study_seeds, study_variants, study_bag_batch, study_subclips;
  std::string study_frame_thr, study_video_thr;
  experiment::StudySpec cli_spec;  // flag values collected here, preset applied first
  study_cmd->add_option("--study", study_kind,
                        "single|ablation|bag_batch_sweep|subclip_sweep");
  study_cmd->add_option("--config", study_config,
                        "JSON spec; values override command-line flags");
  study_cmd->add_option("--out-dir", cli_spec.out_dir, "output directory");
  study_cmd->add_option("--seeds", study_seeds, "comma-separated seed list");
  study_cmd->add_option("--variant", cli_spec.variant, "variant for study=single");
  study_cmd->add_option("--variants", study_variants, "comma list for ablation");
  study_cmd->add_option("--bag-batch", study_bag_batch,
                        "comma list of bags:tubelets pairs");
  study_cmd->add_option("--subclip-values", study_subclips,
                        "comma list of keyframe windows ('whole' = whole clip)");
  study_cmd->add_option("--subclip", cli_spec.subclip_keyframes,
                        "bag window for non-sweep studies");
  study_cmd->add_option("--eval-clips", cli_spec.eval_clips, "evaluation split size");
  study_cmd->add_option("--frame-thresholds", study_frame_thr, "Frame AP thresholds");
  study_cmd->add_option("--video-thresholds", study_video_thr, "Video AP thresholds");
  SynthFlags study_synth_flags;
  study_synth_flags.attach(study_cmd, cli_spec.synth);
  TrainFlags study_train_flags;
  study_train_flags.attach(study_cmd, cli_spec.train);
  study_cmd->add_option("--link-iou", cli_spec.link.link_iou_threshold,
                        "linking threshold");
  study_cmd->add_option("--max-gap", cli_spec.link.max_gap, "linking gap tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) {
      return run_gen_data(gen_cfg, gen_subclip, gen_out);
    }
    if (train_cmd->parsed()) {
      train_flags.resolve(train_cfg);
      return run_train(train_data, train_out, train_cfg, train_subclip,
                       subclip_opt->count() > 0);
    }
    if (eval_cmd->parsed()) {
      return run_eval(eval_data, eval_ckpt, eval_out, eval_dump,
                      parse_double_list(frame_thr), parse_double_list(video_thr),
                      link_cfg);
    }
    if (study_cmd->parsed()) {
      // presets carry the standard benchmark; flags, then config file, override
      experiment::StudySpec spec;
      if (study_kind == "ablation") {
        spec = experiment::make_ablation_spec();
      } else if (study_kind == "subclip_sweep") {
        spec = experiment::make_subclip_spec();
      } else if (study_kind == "bag_batch_sweep") {
        spec = experiment::make_bag_batch_spec();
      } else if (study_kind == "single") {
        spec = experiment::make_ablation_spec();
        spec.study = "single";
      } else {
        throw std::invalid_argument("unknown study: " + study_kind);
      }
      // transfer explicitly-set flags onto the preset
      study_train_flags.resolve(cli_spec.train);
      if (study_cmd->count("--out-dir")) spec.out_dir = cli_spec.out_dir;
      if (study_cmd->count("--variant")) spec.variant = cli_spec.variant;
      if (study_cmd->count("--subclip"))
        spec.subclip_keyframes = cli_spec.subclip_keyframes;
      if (study_cmd->count("--eval-clips")) spec.eval_clips = cli_spec.eval_clips;
      if (!study_seeds.empty()) spec.seeds = parse_seed_list(study_seeds);
      if (!study_variants.empty()) {
        spec.variants.clear();
        std::stringstream ss(study_variants);
        std::string item;
        while (std::getline(ss, item, ',')) spec.variants.push_back(item);
      }
      if (!study_bag_batch.empty()) spec.bag_batch_values = parse_bag_batch(study_bag_batch);
      if (!study_subclips.empty()) spec.subclip_values = parse_int_list(study_subclips);
      if (!study_frame_thr.empty())
        spec.frame_iou_thresholds = parse_double_list(study_frame_thr);
      if (!study_video_thr.empty())
        spec.video_iou_thresholds = parse_double_list(study_video_thr);
      const auto synth_flag = [&](const char* flag) {
        return study_cmd->count(flag) > 0;
      };
      if (synth_flag("--clips")) spec.synth.num_clips = cli_spec.synth.num_clips;
      if (synth_flag("--frames")) spec.synth.frames_per_clip = cli_spec.synth.frames_per_clip;
      if (synth_flag("--classes")) spec.synth.num_classes = cli_spec.synth.num_classes;
      if (synth_flag("--actors-min")) spec.synth.actors_min = cli_spec.synth.actors_min;
      if (synth_flag("--actors-max")) spec.synth.actors_max = cli_spec.synth.actors_max;
      if (synth_flag("--feature-dim")) spec.synth.feature_dim = cli_spec.synth.feature_dim;
      if (synth_flag("--fn-rate")) spec.synth.fn_rate = cli_spec.synth.fn_rate;
      if (synth_flag("--fp-rate")) spec.synth.fp_rate = cli_spec.synth.fp_rate;
      if (synth_flag("--jitter")) spec.synth.jitter_std = cli_spec.synth.jitter_std;
      if (synth_flag("--feature-noise"))
        spec.synth.feature_noise_std = cli_spec.synth.feature_noise_std;
      if (synth_flag("--action-min"))
        spec.synth.action_min_frames = cli_spec.synth.action_min_frames;
      if (synth_flag("--action-max"))
        spec.synth.action_max_frames = cli_spec.synth.action_max_frames;
      if (synth_flag("--secondary-min"))
        spec.synth.secondary_action_min_frames = cli_spec.synth.secondary_action_min_frames;
      if (synth_flag("--secondary-max"))
        spec.synth.secondary_action_max_frames = cli_spec.synth.secondary_action_max_frames;
      if (synth_flag("--max-actions"))
        spec.synth.max_actions_per_actor = cli_spec.synth.max_actions_per_actor;
      if (synth_flag("--tubelet-len")) spec.synth.tubelet_len = cli_spec.synth.tubelet_len;
      if (synth_flag("--bags-per-batch"))
        spec.train.bags_per_batch = cli_spec.train.bags_per_batch;
      if (synth_flag("--tubelets-per-bag"))
        spec.train.tubelets_per_bag = cli_spec.train.tubelets_per_bag;
      if (synth_flag("--lr")) spec.train.learning_rate = cli_spec.train.learning_rate;
      if (synth_flag("--momentum")) spec.train.momentum = cli_spec.train.momentum;
      if (synth_flag("--epochs")) spec.train.epochs = cli_spec.train.epochs;
      if (synth_flag("--pooling")) spec.train.pooling.kind = cli_spec.train.pooling.kind;
      if (synth_flag("--r")) spec.train.pooling.r = cli_spec.train.pooling.r;
      if (synth_flag("--uncertainty"))
        spec.train.use_uncertainty = cli_spec.train.use_uncertainty;
      if (synth_flag("--var-transform"))
        spec.train.var_transform = cli_spec.train.var_transform;
      if (synth_flag("--link-iou"))
        spec.link.link_iou_threshold = cli_spec.link.link_iou_threshold;
      if (synth_flag("--max-gap")) spec.link.max_gap = cli_spec.link.max_gap;
      spec.study = study_kind;
      return run_study_cmd(spec, study_config);
    }
    std::cerr << "no subcommand\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid specification: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
