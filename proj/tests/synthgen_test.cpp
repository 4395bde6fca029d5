#include "tubemil/synthgen.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

namespace tubemil::synth {
namespace {

SyntheticConfig base_config() {
  SyntheticConfig cfg;
  cfg.num_clips = 2;
  cfg.frames_per_clip = 96;
  cfg.num_classes = 4;
  cfg.actors_min = 1;
  cfg.actors_max = 2;
  cfg.feature_dim = 8;
  cfg.action_min_frames = 32;
  cfg.action_max_frames = 64;
  cfg.seed = 7;
  return cfg;
}

TEST(Generate, NoiseFreeDetectionsEqualGroundTruthBoxes) {
  SyntheticConfig cfg = base_config();
  cfg.fn_rate = 0.0;
  cfg.fp_rate = 0.0;
  cfg.jitter_std = 0.0;
  const World world = generate(cfg);
  for (int clip = 0; clip < cfg.num_clips; ++clip) {
    const auto& gt = world.clips[clip];
    const auto& det = world.detections[clip];
    for (int f = 0; f < cfg.frames_per_clip; ++f) {
      ASSERT_EQ(det.frames[f].size(), gt.actors.size());
      for (std::size_t a = 0; a < gt.actors.size(); ++a) {
        EXPECT_EQ(det.frames[f][a].box, gt.actors[a].boxes[f]);
        EXPECT_EQ(det.frames[f][a].source_actor, static_cast<int>(a));
      }
    }
  }
}

TEST(Generate, FalseNegativeRateBinomialBound) {
  SyntheticConfig cfg = base_config();
  cfg.num_clips = 1;
  cfg.frames_per_clip = 10000;
  cfg.actors_min = cfg.actors_max = 1;
  cfg.action_min_frames = cfg.action_max_frames = 64;
  cfg.fn_rate = 0.3;
  cfg.seed = 13;
  const World world = generate(cfg);
  int emitted = 0;
  for (const auto& frame : world.detections[0].frames) emitted += static_cast<int>(frame.size());
  EXPECT_GE(emitted, 6850);
  EXPECT_LE(emitted, 7150);
}

TEST(Generate, DeterministicPerSeed) {
  SyntheticConfig cfg = base_config();
  cfg.fn_rate = 0.2;
  cfg.fp_rate = 0.5;
  cfg.jitter_std = 0.4;
  const StoredDataset a = make_dataset(cfg, 0);
  const StoredDataset b = make_dataset(cfg, 0);
  EXPECT_EQ(dataset_to_string(a), dataset_to_string(b));
  cfg.seed = 8;
  const StoredDataset c = make_dataset(cfg, 0);
  EXPECT_NE(dataset_to_string(a), dataset_to_string(c));
}

TEST(Generate, InfeasibleConfigsRejected) {
  SyntheticConfig cfg = base_config();
  cfg.action_max_frames = cfg.frames_per_clip + 1;
  EXPECT_THROW(generate(cfg), std::invalid_argument);
  cfg = base_config();
  cfg.frames_per_clip = cfg.tubelet_len - 1;
  EXPECT_THROW(generate(cfg), std::invalid_argument);
  cfg = base_config();
  cfg.fn_rate = 1.0;
  EXPECT_THROW(generate(cfg), std::invalid_argument);
  cfg = base_config();
  cfg.fp_rate = -0.5;
  EXPECT_THROW(generate(cfg), std::invalid_argument);
}

TEST(Generate, WalkerPopulationMatchesFpRate) {
  SyntheticConfig cfg = base_config();
  cfg.num_clips = 1;
  cfg.frames_per_clip = 4000;
  cfg.actors_min = cfg.actors_max = 1;
  cfg.fp_rate = 2.0;
  cfg.seed = 17;
  const World world = generate(cfg);
  long spurious = 0;
  for (const auto& frame : world.detections[0].frames)
    for (const auto& d : frame) spurious += d.source_actor < 0;
  const double per_frame = static_cast<double>(spurious) / cfg.frames_per_clip;
  EXPECT_NEAR(per_frame, cfg.fp_rate, 0.3);
}

TEST(BuildTubelets, SingleStationaryActorYieldsTwoChunks) {
  SyntheticConfig cfg = base_config();
  cfg.num_clips = 1;
  cfg.frames_per_clip = 32;
  cfg.actors_min = cfg.actors_max = 1;
  cfg.actor_speed_min = cfg.actor_speed_max = 0.0;
  cfg.action_min_frames = cfg.action_max_frames = 32;
  const World world = generate(cfg);
  const auto tubelets = build_tubelets(world);
  ASSERT_EQ(tubelets.size(), 2u);
  EXPECT_EQ(tubelets[0].tubelet.start_frame, 0);
  EXPECT_EQ(tubelets[1].tubelet.start_frame, 16);
  EXPECT_EQ(tubelets[0].source_actor, 0);
  EXPECT_EQ(tubelets[1].source_actor, 0);
}

TEST(BuildTubelets, NoDetectionsNoTubelets) {
  SyntheticConfig cfg = base_config();
  World world = generate(cfg);
  for (auto& det : world.detections)
    for (auto& frame : det.frames) frame.clear();
  EXPECT_TRUE(build_tubelets(world).empty());
}

TEST(BuildTubelets, TwoSeparatedActorsNeverCrossAssociate) {
  SyntheticConfig cfg = base_config();
  cfg.num_clips = 3;
  cfg.frames_per_clip = 96;
  cfg.actors_min = cfg.actors_max = 2;
  const World world = generate(cfg);
  const auto tubelets = build_tubelets(world);
  EXPECT_EQ(tubelets.size(), static_cast<std::size_t>(3 * 2 * (96 / 16)));
  for (int clip = 0; clip < cfg.num_clips; ++clip) {
    int per_actor[2] = {0, 0};
    for (const auto& info : tubelets) {
      if (info.clip != clip) continue;
      ASSERT_GE(info.source_actor, 0);
      ++per_actor[info.source_actor];
    }
    EXPECT_EQ(per_actor[0], 6);
    EXPECT_EQ(per_actor[1], 6);
  }
}

TEST(BuildTubelets, CleanWorldCoversEveryLongActionInterval) {
  SyntheticConfig cfg = base_config();
  cfg.num_clips = 4;
  cfg.frames_per_clip = 128;  // multiple of K so chunks tile the clip
  cfg.actors_min = 1;
  cfg.actors_max = 3;
  cfg.seed = 23;
  const World world = generate(cfg);
  const auto tubelets = build_tubelets(world);
  for (int clip = 0; clip < cfg.num_clips; ++clip) {
    const auto& gt = world.clips[clip];
    for (const auto& actor : gt.actors) {
      for (const auto& action : actor.actions) {
        if (action.end - action.start < cfg.tubelet_len) continue;
        bool covered = false;
        for (const auto& info : tubelets) {
          if (info.clip != clip || info.source_actor != actor.id) continue;
          const int centre = info.tubelet.centre_frame();
          if (centre >= action.start && centre < action.end) covered = true;
        }
        EXPECT_TRUE(covered) << "clip " << clip << " actor " << actor.id;
      }
    }
  }
}

TEST(BuildBags, LabelsAreExactlyTheWindowUnion) {
  SyntheticConfig cfg = base_config();
  cfg.num_clips = 3;
  cfg.actors_min = 1;
  cfg.actors_max = 3;
  cfg.seed = 31;
  const World world = generate(cfg);
  const auto tubelets = build_tubelets(world);
  for (int window : {1, 2, 0}) {
    const auto bags = build_bags(world, tubelets, window);
    for (const auto& rec : bags) {
      std::set<int> expected;
      for (int kf = rec.kf_begin; kf < rec.kf_end; ++kf)
        for (int cls : world.clips[rec.clip].labels_at_frame(keyframe_frame(cfg, kf)))
          expected.insert(cls);
      for (int cls = 0; cls < cfg.num_classes; ++cls)
        EXPECT_EQ(rec.bag.label.y[cls], expected.contains(cls) ? 1 : 0);
    }
  }
}

TEST(BuildBags, WholeClipModeYieldsOneBagPerClip) {
  SyntheticConfig cfg = base_config();
  cfg.num_clips = 4;
  const World world = generate(cfg);
  const auto tubelets = build_tubelets(world);
  const auto bags = build_bags(world, tubelets, 0);
  EXPECT_EQ(bags.size(), 4u);
  for (const auto& rec : bags) {
    EXPECT_EQ(rec.kf_begin, 0);
    EXPECT_EQ(rec.kf_end, keyframes_per_clip(cfg));
  }
}

TEST(BuildBags, SingleKeyframeWindowsIsolateLabels) {
  // with N=1, a bag can only be labeled with what its own keyframe shows
  SyntheticConfig cfg = base_config();
  cfg.num_clips = 4;
  cfg.actors_min = 2;
  cfg.actors_max = 3;
  cfg.seed = 37;
  const World world = generate(cfg);
  const auto tubelets = build_tubelets(world);
  const auto bags = build_bags(world, tubelets, 1);
  for (const auto& rec : bags) {
    ASSERT_EQ(rec.kf_end, rec.kf_begin + 1);
    const auto labels =
        world.clips[rec.clip].labels_at_frame(keyframe_frame(cfg, rec.kf_begin));
    const std::set<int> expected(labels.begin(), labels.end());
    for (int cls = 0; cls < cfg.num_classes; ++cls)
      EXPECT_EQ(rec.bag.label.y[cls], expected.contains(cls) ? 1 : 0);
  }
}

TEST(Violations, ZeroNoiseMeansZeroViolation) {
  SyntheticConfig cfg = base_config();
  cfg.num_clips = 6;
  cfg.frames_per_clip = 128;
  const World world = generate(cfg);
  const auto tubelets = build_tubelets(world);
  const auto bags = build_bags(world, tubelets, 0);
  const auto stats = measure_violations(world, tubelets, bags);
  EXPECT_EQ(stats.violated_bags, 0);
}

TEST(Violations, MonotoneInFalseNegativeRate) {
  std::vector<double> fractions;
  for (double fn : {0.0, 0.2, 0.4}) {
    SyntheticConfig cfg = base_config();
    cfg.num_clips = 24;
    cfg.frames_per_clip = 320;
    cfg.action_min_frames = 48;
    cfg.action_max_frames = 128;
    cfg.actors_min = 1;
    cfg.actors_max = 2;
    cfg.fn_rate = fn;
    cfg.seed = 41;
    const World world = generate(cfg);
    const auto tubelets = build_tubelets(world);
    const auto bags = build_bags(world, tubelets, 0);
    fractions.push_back(measure_violations(world, tubelets, bags).violated_bag_fraction());
  }
  EXPECT_EQ(fractions[0], 0.0);
  EXPECT_LT(fractions[0], fractions[1]);
  EXPECT_LT(fractions[1], fractions[2]);
}

TEST(DatasetIo, RoundTripIsByteExact) {
  SyntheticConfig cfg = base_config();
  cfg.fn_rate = 0.15;
  cfg.fp_rate = 0.6;
  cfg.jitter_std = 0.3;
  cfg.seed = 43;
  const StoredDataset original = make_dataset(cfg, 2);
  const std::string first = dataset_to_string(original);
  const StoredDataset reloaded = dataset_from_string(first);
  EXPECT_EQ(dataset_to_string(reloaded), first);
  EXPECT_EQ(reloaded.subclip_keyframes, 2);
  EXPECT_EQ(reloaded.tubelets.size(), original.tubelets.size());
  EXPECT_EQ(reloaded.bags.size(), original.bags.size());

  const auto path = std::filesystem::temp_directory_path() /
                    ("tubemil_ds_" + std::to_string(::getpid()) + ".jsonl");
  save_dataset(path.string(), original);
  const StoredDataset from_file = load_dataset(path.string());
  EXPECT_EQ(dataset_to_string(from_file), first);
  std::filesystem::remove(path);
}

TEST(DatasetIo, RejectsForeignOrMissingFiles) {
  EXPECT_THROW(load_dataset("/nonexistent/nowhere.jsonl"), std::runtime_error);
  EXPECT_THROW(dataset_from_string("{\"format\":\"other\"}\n"), std::runtime_error);
}

TEST(ClassMeans, DeterministicWithConfiguredScales) {
  SyntheticConfig cfg = base_config();
  cfg.background_mean_scale = 1.5;
  const auto a = class_means(cfg);
  const auto b = class_means(cfg);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), static_cast<std::size_t>(cfg.num_classes) + 1);
  for (std::size_t c = 0; c < a.size(); ++c) {
    double norm = 0.0;
    for (double v : a[c]) norm += v * v;
    const double expected = c < static_cast<std::size_t>(cfg.num_classes)
                                ? cfg.class_mean_scale
                                : cfg.background_mean_scale;
    EXPECT_NEAR(std::sqrt(norm), expected, 1e-9);
  }
}

TEST(ClassMeans, SharedFeatureSeedAlignsDistinctWorlds) {
  SyntheticConfig a = base_config();
  SyntheticConfig b = base_config();
  b.seed = a.seed + 100;
  EXPECT_NE(class_means(a), class_means(b));
  a.feature_seed = 99;
  b.feature_seed = 99;
  EXPECT_EQ(class_means(a), class_means(b));
}

}  // namespace
}  // namespace tubemil::synth
