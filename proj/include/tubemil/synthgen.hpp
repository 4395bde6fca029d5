#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tubemil/geometry.hpp"
#include "tubemil/model.hpp"
#include "tubemil/rng.hpp"

namespace tubemil::synth {

/// Configuration of a synthetic weakly-labeled video world. Frames are the
/// time unit; one keyframe covers tubelet_len frames, mirroring 1 Hz
/// keyframes over 16-frame tubelets.
struct SyntheticConfig {
  int num_clips = 8;
  int frames_per_clip = 96;  // T
  int num_classes = 5;       // C
  int actors_min = 1;
  int actors_max = 2;
  int feature_dim = 32;  // D
  double fn_rate = 0.0;  // per actor per frame miss probability
  double fp_rate = 0.0;  // expected spurious detections per frame
  double jitter_std = 0.0;
  double feature_noise_std = 0.5;
  int action_min_frames = 32;
  int action_max_frames = 64;
  // duration range for an actor's second and third actions; 0 = use the
  // primary range
  int secondary_action_min_frames = 0;
  int secondary_action_max_frames = 0;
  int max_actions_per_actor = 3;
  int tubelet_len = 16;  // K
  std::uint64_t seed = 1;
  // seed for the class-mean feature dictionary (the stand-in for a shared
  // pretrained representation); 0 = derive from `seed`. Train and eval
  // splits of one experiment must share it or nothing the model learns
  // transfers.
  std::uint64_t feature_seed = 0;

  // world plumbing (not varied by the studies unless noted)
  double arena_size = 100.0;
  double box_size_min = 8.0;
  double box_size_max = 14.0;
  double actor_speed_min = 0.0;
  double actor_speed_max = 0.05;
  double wander_radius = 8.0;
  double actor_min_separation = 40.0;
  int fp_mean_lifetime = 64;          // frames a spurious walker persists
  double assoc_iou_threshold = 0.5;   // frame-to-frame association gate
  double class_mean_scale = 3.0;      // feature signal magnitude
  // magnitude of a shared "person doing nothing" feature direction carried
  // by background-time and bystander tubelets; 0 = pure noise
  double background_mean_scale = 0.0;
};

inline void validate(const SyntheticConfig& cfg) {
  if (cfg.num_clips < 1) throw std::invalid_argument("synth: num_clips must be >= 1");
  if (cfg.tubelet_len < 1) throw std::invalid_argument("synth: tubelet_len must be >= 1");
  if (cfg.frames_per_clip < cfg.tubelet_len)
    throw std::invalid_argument("synth: frames_per_clip must be >= tubelet_len");
  if (cfg.num_classes < 1) throw std::invalid_argument("synth: num_classes must be >= 1");
  if (cfg.feature_dim < 1) throw std::invalid_argument("synth: feature_dim must be >= 1");
  if (cfg.actors_min < 1 || cfg.actors_max < cfg.actors_min)
    throw std::invalid_argument("synth: invalid actor range");
  if (!(cfg.fn_rate >= 0.0 && cfg.fn_rate < 1.0))
    throw std::invalid_argument("synth: fn_rate must be in [0,1)");
  if (cfg.fp_rate < 0.0) throw std::invalid_argument("synth: fp_rate must be >= 0");
  if (cfg.jitter_std < 0.0) throw std::invalid_argument("synth: jitter_std must be >= 0");
  if (cfg.action_min_frames < 1 || cfg.action_max_frames < cfg.action_min_frames)
    throw std::invalid_argument("synth: invalid action duration range");
  if (cfg.action_max_frames > cfg.frames_per_clip)
    throw std::invalid_argument("synth: action duration range exceeds clip length");
  if (cfg.secondary_action_max_frames < cfg.secondary_action_min_frames)
    throw std::invalid_argument("synth: invalid secondary action duration range");
  if (cfg.secondary_action_max_frames > cfg.frames_per_clip)
    throw std::invalid_argument("synth: secondary action range exceeds clip length");
  if (cfg.max_actions_per_actor < 1 || cfg.max_actions_per_actor > 3)
    throw std::invalid_argument("synth: max_actions_per_actor must be in [1,3]");
  if (cfg.fp_mean_lifetime < 1)
    throw std::invalid_argument("synth: fp_mean_lifetime must be >= 1");
}

inline int keyframes_per_clip(const SyntheticConfig& cfg) {
  return cfg.frames_per_clip / cfg.tubelet_len;
}

inline int keyframe_frame(const SyntheticConfig& cfg, int keyframe) {
  return keyframe * cfg.tubelet_len + cfg.tubelet_len / 2;
}

/// One labeled action of one actor over the frame interval [start, end).
struct ActionInterval {
  int cls = 0;
  int start = 0;
  int end = 0;
};

struct ActorTrack {
  int id = 0;
  std::vector<geometry::BoundingBox> boxes;  // one per frame
  std::vector<ActionInterval> actions;

  bool performs(int cls, int frame) const {
    for (const auto& a : actions)
      if (a.cls == cls && frame >= a.start && frame < a.end) return true;
    return false;
  }
  std::vector<int> active_classes(int frame) const {
    std::vector<int> out;
    for (const auto& a : actions)
      if (frame >= a.start && frame < a.end) out.push_back(a.cls);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
};

struct ClipGroundTruth {
  int clip_id = 0;
  std::vector<ActorTrack> actors;

  std::vector<int> labels_at_frame(int frame) const {
    std::set<int> s;
    for (const auto& actor : actors)
      for (int cls : actor.active_classes(frame)) s.insert(cls);
    return {s.begin(), s.end()};
  }
};

struct Detection {
  geometry::BoundingBox box;
  int source_actor = -1;  // -1: spurious detection
};

struct ClipDetections {
  std::vector<std::vector<Detection>> frames;
};

struct World {
  SyntheticConfig config;
  std::vector<ClipGroundTruth> clips;
  std::vector<ClipDetections> detections;
};

namespace detail {

// Substream salts; clip index occupies the low 32 bits.
inline constexpr std::uint64_t kWorldStream = 1;
inline constexpr std::uint64_t kFeatureStream = 2;
inline constexpr std::uint64_t kClassMeanStream = 3;

inline std::uint64_t stream_id(std::uint64_t salt, int clip) {
  return (salt << 32) | static_cast<std::uint64_t>(clip);
}

struct Walker {
  double x, y, tx, ty, speed, w, h;
};

inline void pick_target(Rng& rng, double cx, double cy, double radius, double lo,
                        double hi, double& tx, double& ty) {
  tx = std::clamp(cx + rng.uniform(-radius, radius), lo, hi);
  ty = std::clamp(cy + rng.uniform(-radius, radius), lo, hi);
}

inline void advance(double& x, double& y, double& tx, double& ty, double speed,
                    Rng& rng, double cx, double cy, double radius, double lo,
                    double hi) {
  const double dx = tx - x;
  const double dy = ty - y;
  const double dist = std::sqrt(dx * dx + dy * dy);
  if (dist <= speed || dist == 0.0) {
    x = tx;
    y = ty;
    pick_target(rng, cx, cy, radius, lo, hi, tx, ty);
  } else {
    x += speed * dx / dist;
    y += speed * dy / dist;
  }
}

inline geometry::BoundingBox centered_box(double x, double y, double w, double h,
                                          double score) {
  return {x - w / 2.0, y - h / 2.0, x + w / 2.0, y + h / 2.0, score};
}

}  // namespace detail

/// Deterministic feature dictionary (the stand-in for a shared pretrained
/// representation): one mean vector of norm class_mean_scale per class,
/// plus a trailing background direction of norm background_mean_scale
/// carried by background-time and bystander tubelets. A tubelet feature is
/// the sum of the means of the actions active at its centre frame (or the
/// background direction when there are none) plus Gaussian noise.
inline std::vector<std::vector<double>> class_means(const SyntheticConfig& cfg) {
  const std::uint64_t seed = cfg.feature_seed != 0 ? cfg.feature_seed : cfg.seed;
  Rng rng = Rng::substream(seed, detail::stream_id(detail::kClassMeanStream, 0));
  std::vector<std::vector<double>> means(static_cast<std::size_t>(cfg.num_classes) + 1);
  for (std::size_t c = 0; c < means.size(); ++c) {
    auto& m = means[c];
    m.resize(static_cast<std::size_t>(cfg.feature_dim));
    double norm2 = 0.0;
    for (auto& v : m) {
      v = rng.normal();
      norm2 += v * v;
    }
    const double target =
        c < static_cast<std::size_t>(cfg.num_classes) ? cfg.class_mean_scale
                                                      : cfg.background_mean_scale;
    const double scale = target / std::sqrt(std::max(norm2, 1e-12));
    for (auto& v : m) v *= scale;
  }
  return means;
}

/// Generates ground-truth actor tracks, action intervals and simulated
/// detector output. Actors follow piecewise-linear motion within a wander
/// radius of their spawn point; each actor performs 1-3 actions in disjoint
/// intervals and is background otherwise. The detector emits each actor box
/// with probability (1 - fn_rate), corner-jittered, plus spurious walker
/// detections whose stationary per-frame count is Poisson(fp_rate).
/// Per-clip substreams make generation independent per clip.
inline World generate(const SyntheticConfig& cfg) {
  validate(cfg);
  World world;
  world.config = cfg;
  world.clips.resize(static_cast<std::size_t>(cfg.num_clips));
  world.detections.resize(static_cast<std::size_t>(cfg.num_clips));

  const int t_frames = cfg.frames_per_clip;
  for (int clip = 0; clip < cfg.num_clips; ++clip) {
    Rng rng = Rng::substream(cfg.seed, detail::stream_id(detail::kWorldStream, clip));
    ClipGroundTruth& gt = world.clips[static_cast<std::size_t>(clip)];
    gt.clip_id = clip;

    const int num_actors = rng.uniform_int(cfg.actors_min, cfg.actors_max);

    // spawn positions, min-separation enforced by rejection
    struct ActorState {
      double x, y, tx, ty, speed, w, h, home_x, home_y;
    };
    std::vector<ActorState> states;
    for (int a = 0; a < num_actors; ++a) {
      ActorState s{};
      s.w = rng.uniform(cfg.box_size_min, cfg.box_size_max);
      s.h = rng.uniform(cfg.box_size_min, cfg.box_size_max);
      const double margin = std::max(s.w, s.h) / 2.0 + 1.0;
      const double lo = margin;
      const double hi = cfg.arena_size - margin;
      double best_x = lo, best_y = lo, best_dist = -1.0;
      for (int attempt = 0; attempt < 200; ++attempt) {
        const double x = rng.uniform(lo, hi);
        const double y = rng.uniform(lo, hi);
        double min_dist = 1e18;
        for (const auto& other : states) {
          const double dx = x - other.home_x;
          const double dy = y - other.home_y;
          min_dist = std::min(min_dist, std::sqrt(dx * dx + dy * dy));
        }
        if (min_dist > best_dist) {
          best_dist = min_dist;
          best_x = x;
          best_y = y;
        }
        if (states.empty() || min_dist >= cfg.actor_min_separation) break;
      }
      s.x = s.home_x = best_x;
      s.y = s.home_y = best_y;
      s.speed = rng.uniform(cfg.actor_speed_min, cfg.actor_speed_max);
      detail::pick_target(rng, s.home_x, s.home_y, cfg.wander_radius, lo, hi, s.tx,
                          s.ty);
      states.push_back(s);

      ActorTrack actor;
      actor.id = a;
      gt.actors.push_back(actor);
    }

    // motion rollout
    for (int f = 0; f < t_frames; ++f) {
      for (int a = 0; a < num_actors; ++a) {
        auto& s = states[static_cast<std::size_t>(a)];
        if (f > 0) {
          const double margin = std::max(s.w, s.h) / 2.0 + 1.0;
          detail::advance(s.x, s.y, s.tx, s.ty, s.speed, rng, s.home_x, s.home_y,
                          cfg.wander_radius, margin, cfg.arena_size - margin);
        }
        gt.actors[static_cast<std::size_t>(a)].boxes.push_back(
            detail::centered_box(s.x, s.y, s.w, s.h, 1.0));
      }
    }

    // action intervals: 1-3 per actor, disjoint, background otherwise; the
    // first action draws from the primary duration range, later ones from
    // the secondary range when configured
    for (auto& actor : gt.actors) {
      const int wanted = rng.uniform_int(1, cfg.max_actions_per_actor);
      for (int k = 0; k < wanted; ++k) {
        const bool secondary = k > 0 && cfg.secondary_action_max_frames > 0;
        const int len = secondary
                            ? rng.uniform_int(cfg.secondary_action_min_frames,
                                              cfg.secondary_action_max_frames)
                            : rng.uniform_int(cfg.action_min_frames,
                                              cfg.action_max_frames);
        for (int attempt = 0; attempt < 50; ++attempt) {
          const int start = rng.uniform_int(0, t_frames - len);
          bool clear = true;
          for (const auto& existing : actor.actions)
            if (start < existing.end && existing.start < start + len) {
              clear = false;
              break;
            }
          if (clear) {
            actor.actions.push_back({rng.uniform_int(0, cfg.num_classes - 1), start,
                                     start + len});
            break;
          }
        }
      }
      std::sort(actor.actions.begin(), actor.actions.end(),
                [](const ActionInterval& a, const ActionInterval& b) {
                  return a.start < b.start;
                });
    }

    // simulated detector
    ClipDetections& det = world.detections[static_cast<std::size_t>(clip)];
    det.frames.resize(static_cast<std::size_t>(t_frames));

    std::vector<detail::Walker> walkers;
    const auto spawn_walker = [&]() {
      detail::Walker w{};
      w.w = rng.uniform(cfg.box_size_min, cfg.box_size_max);
      w.h = rng.uniform(cfg.box_size_min, cfg.box_size_max);
      const double margin = std::max(w.w, w.h) / 2.0 + 1.0;
      w.x = rng.uniform(margin, cfg.arena_size - margin);
      w.y = rng.uniform(margin, cfg.arena_size - margin);
      w.speed = rng.uniform(cfg.actor_speed_min, cfg.actor_speed_max);
      detail::pick_target(rng, w.x, w.y, cfg.arena_size, margin,
                          cfg.arena_size - margin, w.tx, w.ty);
      return w;
    };
    if (cfg.fp_rate > 0.0) {
      const int initial = rng.poisson(cfg.fp_rate);
      for (int i = 0; i < initial; ++i) walkers.push_back(spawn_walker());
    }

    const auto jittered = [&](geometry::BoundingBox box, double score) {
      if (cfg.jitter_std > 0.0) {
        box.x_min += rng.normal(0.0, cfg.jitter_std);
        box.y_min += rng.normal(0.0, cfg.jitter_std);
        box.x_max += rng.normal(0.0, cfg.jitter_std);
        box.y_max += rng.normal(0.0, cfg.jitter_std);
        if (box.x_max <= box.x_min) box.x_max = box.x_min + 0.1;
        if (box.y_max <= box.y_min) box.y_max = box.y_min + 0.1;
      }
      box.score = score;
      return box;
    };

    const bool noisy_world =
        cfg.jitter_std > 0.0 || cfg.fn_rate > 0.0 || cfg.fp_rate > 0.0;
    for (int f = 0; f < t_frames; ++f) {
      auto& frame_dets = det.frames[static_cast<std::size_t>(f)];
      for (int a = 0; a < num_actors; ++a) {
        const bool emitted = cfg.fn_rate == 0.0 || rng.uniform() >= cfg.fn_rate;
        if (!emitted) continue;
        const auto& gt_box = gt.actors[static_cast<std::size_t>(a)].boxes
                                 [static_cast<std::size_t>(f)];
        const double score = noisy_world ? rng.uniform(0.55, 1.0) : 1.0;
        frame_dets.push_back({jittered(gt_box, score), a});
      }
      for (auto& w : walkers) {
        const auto box = detail::centered_box(w.x, w.y, w.w, w.h, 1.0);
        frame_dets.push_back({jittered(box, rng.uniform(0.2, 0.9)), -1});
      }

      // walker population update (memoryless lifetimes keep the per-frame
      // count Poisson(fp_rate) in stationarity)
      if (cfg.fp_rate > 0.0) {
        const double death_prob = 1.0 / cfg.fp_mean_lifetime;
        std::vector<detail::Walker> survivors;
        for (auto& w : walkers) {
          if (rng.uniform() >= death_prob) {
            const double margin = std::max(w.w, w.h) / 2.0 + 1.0;
            detail::advance(w.x, w.y, w.tx, w.ty, w.speed, rng, w.x, w.y,
                            cfg.arena_size, margin, cfg.arena_size - margin);
            survivors.push_back(w);
          }
        }
        walkers = std::move(survivors);
        const int births = rng.poisson(cfg.fp_rate / cfg.fp_mean_lifetime);
        for (int i = 0; i < births; ++i) walkers.push_back(spawn_walker());
      }
    }
  }
  return world;
}

/// A built tubelet plus the provenance the generator retains for
/// diagnostics: which clip it came from and which actor (if any) the
/// detection at its centre frame belongs to.
struct TubeletInfo {
  geometry::Tubelet tubelet;
  int clip = 0;
  int source_actor = -1;

  double det_score() const {
    double s = 0.0;
    for (const auto& b : tubelet.boxes) s += b.score;
    return s / static_cast<double>(tubelet.boxes.size());
  }
};

inline geometry::Tube tubelet_as_tube(const geometry::Tubelet& t) {
  geometry::Tube tube;
  for (int f = t.start_frame; f <= t.end_frame(); ++f)
    tube.segments.push_back({f, t.box_at(f)});
  return tube;
}

/// Greedy frame-to-frame association of detections into tracks, cut into
/// non-overlapping K-frame tubelets with features attached. Tubelet pairs
/// with spatio-temporal IoU >= 0.5 are deduplicated keeping the higher
/// detector score.
inline std::vector<TubeletInfo> build_tubelets(const World& world) {
  const SyntheticConfig& cfg = world.config;
  const int k_len = cfg.tubelet_len;
  const auto means = class_means(cfg);

  std::vector<TubeletInfo> out;
  std::int64_t next_id = 0;

  for (int clip = 0; clip < cfg.num_clips; ++clip) {
    const auto& det = world.detections[static_cast<std::size_t>(clip)];
    const auto& gt = world.clips[static_cast<std::size_t>(clip)];
    Rng feat_rng =
        Rng::substream(cfg.seed, detail::stream_id(detail::kFeatureStream, clip));

    struct Track {
      int start = 0;
      std::vector<Detection> dets;
      int last_frame() const { return start + static_cast<int>(dets.size()) - 1; }
    };
    std::vector<Track> finished;
    std::vector<Track> open;

    for (int f = 0; f < cfg.frames_per_clip; ++f) {
      const auto& cands = det.frames[static_cast<std::size_t>(f)];
      std::vector<bool> cand_used(cands.size(), false);
      std::vector<bool> track_used(open.size(), false);

      struct Pair {
        double overlap;
        std::size_t track, cand;
      };
      std::vector<Pair> pairs;
      for (std::size_t ti = 0; ti < open.size(); ++ti) {
        if (open[ti].last_frame() != f - 1) continue;
        for (std::size_t ci = 0; ci < cands.size(); ++ci) {
          const double ov = geometry::iou(open[ti].dets.back().box, cands[ci].box);
          if (ov >= cfg.assoc_iou_threshold) pairs.push_back({ov, ti, ci});
        }
      }
      std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        if (a.overlap != b.overlap) return a.overlap > b.overlap;
        if (a.track != b.track) return a.track < b.track;
        return a.cand < b.cand;
      });
      for (const auto& p : pairs) {
        if (track_used[p.track] || cand_used[p.cand]) continue;
        track_used[p.track] = true;
        cand_used[p.cand] = true;
        open[p.track].dets.push_back(cands[p.cand]);
      }

      // tracks not extended at this frame are closed
      std::vector<Track> still_open;
      for (auto& track : open) {
        if (track.last_frame() == f)
          still_open.push_back(std::move(track));
        else
          finished.push_back(std::move(track));
      }
      open = std::move(still_open);

      for (std::size_t ci = 0; ci < cands.size(); ++ci) {
        if (cand_used[ci]) continue;
        Track t;
        t.start = f;
        t.dets.push_back(cands[ci]);
        open.push_back(std::move(t));
      }
    }
    for (auto& track : open) finished.push_back(std::move(track));
    std::sort(finished.begin(), finished.end(),
              [](const Track& a, const Track& b) { return a.start < b.start; });

    std::vector<TubeletInfo> clip_tubelets;
    for (const auto& track : finished) {
      const int chunks = static_cast<int>(track.dets.size()) / k_len;
      for (int c = 0; c < chunks; ++c) {
        TubeletInfo info;
        info.clip = clip;
        info.tubelet.start_frame = track.start + c * k_len;
        info.tubelet.id = next_id++;
        for (int i = 0; i < k_len; ++i)
          info.tubelet.boxes.push_back(
              track.dets[static_cast<std::size_t>(c * k_len + i)].box);
        info.source_actor =
            track.dets[static_cast<std::size_t>(c * k_len + k_len / 2)].source_actor;

        // feature stand-in: class means of the actions active at the centre
        // frame plus noise; tubelets showing nobody acting (background time
        // of an actor, or a bystander walker) carry the background
        // direction, which is pure noise when background_mean_scale is 0
        auto& feat = info.tubelet.feature;
        feat.assign(static_cast<std::size_t>(cfg.feature_dim), 0.0);
        std::vector<int> active;
        if (info.source_actor >= 0) {
          const auto& actor = gt.actors[static_cast<std::size_t>(info.source_actor)];
          active = actor.active_classes(info.tubelet.centre_frame());
        }
        if (active.empty()) {
          const auto& bg = means[static_cast<std::size_t>(cfg.num_classes)];
          for (int d = 0; d < cfg.feature_dim; ++d)
            feat[static_cast<std::size_t>(d)] = bg[static_cast<std::size_t>(d)];
          // with no background direction configured, bystanders degrade to
          // the pure-noise features of the base design
          const double noise_std =
              cfg.background_mean_scale > 0.0 || info.source_actor >= 0
                  ? cfg.feature_noise_std
                  : 1.0;
          for (auto& v : feat) v += feat_rng.normal(0.0, noise_std);
        } else {
          for (int cls : active)
            for (int d = 0; d < cfg.feature_dim; ++d)
              feat[static_cast<std::size_t>(d)] +=
                  means[static_cast<std::size_t>(cls)][static_cast<std::size_t>(d)];
          for (auto& v : feat) v += feat_rng.normal(0.0, cfg.feature_noise_std);
        }
        clip_tubelets.push_back(std::move(info));
      }
    }

    // dedup near-duplicates (spatio-temporal IoU >= 0.5), higher score wins
    std::vector<std::size_t> order(clip_tubelets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double sa = clip_tubelets[a].det_score();
      const double sb = clip_tubelets[b].det_score();
      if (sa != sb) return sa > sb;
      return clip_tubelets[a].tubelet.id < clip_tubelets[b].tubelet.id;
    });
    std::vector<bool> kept(clip_tubelets.size(), false);
    std::vector<std::size_t> kept_list;
    for (std::size_t idx : order) {
      bool duplicate = false;
      for (std::size_t other : kept_list) {
        if (geometry::tube_iou(tubelet_as_tube(clip_tubelets[idx].tubelet),
                               tubelet_as_tube(clip_tubelets[other].tubelet)) >= 0.5) {
          duplicate = true;
          break;
        }
      }
      if (!duplicate) {
        kept[idx] = true;
        kept_list.push_back(idx);
      }
    }
    for (std::size_t i = 0; i < clip_tubelets.size(); ++i)
      if (kept[i]) out.push_back(std::move(clip_tubelets[i]));
  }
  return out;
}

/// One bag per window of subclip_keyframes consecutive keyframes (0 = whole
/// clip), containing all tubelets whose centre frame lies inside the window
/// and labeled with the union of the ground-truth keyframe labels in the
/// window. Windows with no tubelets yield no bag.
struct BagRecord {
  model::Bag bag;
  std::vector<std::size_t> tubelet_indices;  // into the flat tubelet list
  int clip = 0;
  int kf_begin = 0;
  int kf_end = 0;  // exclusive
};

inline std::vector<BagRecord> build_bags(const World& world,
                                         const std::vector<TubeletInfo>& tubelets,
                                         int subclip_keyframes) {
  const SyntheticConfig& cfg = world.config;
  const int kf_count = keyframes_per_clip(cfg);
  if (subclip_keyframes < 0)
    throw std::invalid_argument("build_bags: subclip_keyframes must be >= 0");
  const int window = subclip_keyframes == 0 ? kf_count : subclip_keyframes;

  std::vector<BagRecord> out;
  for (int clip = 0; clip < cfg.num_clips; ++clip) {
    const auto& gt = world.clips[static_cast<std::size_t>(clip)];
    for (int kf0 = 0; kf0 < kf_count; kf0 += window) {
      const int kf1 = std::min(kf_count, kf0 + window);
      const int frame_begin = kf0 * cfg.tubelet_len;
      const int frame_end = kf1 == kf_count ? cfg.frames_per_clip
                                            : kf1 * cfg.tubelet_len;

      BagRecord rec;
      rec.clip = clip;
      rec.kf_begin = kf0;
      rec.kf_end = kf1;
      rec.bag.source_clip = clip;
      rec.bag.label.y.assign(static_cast<std::size_t>(cfg.num_classes), 0);
      for (int kf = kf0; kf < kf1; ++kf)
        for (int cls : gt.labels_at_frame(keyframe_frame(cfg, kf)))
          rec.bag.label.y[static_cast<std::size_t>(cls)] = 1;

      for (std::size_t i = 0; i < tubelets.size(); ++i) {
        const auto& info = tubelets[i];
        if (info.clip != clip) continue;
        const int centre = info.tubelet.centre_frame();
        if (centre >= frame_begin && centre < frame_end) {
          rec.bag.instances.push_back(info.tubelet);
          rec.tubelet_indices.push_back(i);
        }
      }
      if (!rec.bag.instances.empty()) out.push_back(std::move(rec));
    }
  }
  return out;
}

/// A tubelet carries label l when the actor it tracks performs l at the
/// tubelet's centre frame. A (bag, label) pair is violated when no instance
/// carries the label; a bag is violated when any of its labels is.
struct ViolationStats {
  int num_bags = 0;
  int violated_bags = 0;
  int label_pairs = 0;
  int violated_pairs = 0;

  double violated_bag_fraction() const {
    return num_bags == 0 ? 0.0 : static_cast<double>(violated_bags) / num_bags;
  }
  double violated_pair_fraction() const {
    return label_pairs == 0 ? 0.0 : static_cast<double>(violated_pairs) / label_pairs;
  }
};

inline ViolationStats measure_violations(const World& world,
                                         const std::vector<TubeletInfo>& tubelets,
                                         const std::vector<BagRecord>& bags) {
  ViolationStats stats;
  stats.num_bags = static_cast<int>(bags.size());
  for (const auto& rec : bags) {
    const auto& gt = world.clips[static_cast<std::size_t>(rec.clip)];
    bool bag_violated = false;
    for (int cls = 0; cls < static_cast<int>(rec.bag.label.y.size()); ++cls) {
      if (rec.bag.label.y[static_cast<std::size_t>(cls)] == 0) continue;
      ++stats.label_pairs;
      bool covered = false;
      for (std::size_t idx : rec.tubelet_indices) {
        const auto& info = tubelets[idx];
        if (info.source_actor < 0) continue;
        const auto& actor = gt.actors[static_cast<std::size_t>(info.source_actor)];
        if (actor.performs(cls, info.tubelet.centre_frame())) {
          covered = true;
          break;
        }
      }
      if (!covered) {
        ++stats.violated_pairs;
        bag_violated = true;
      }
    }
    if (bag_violated) ++stats.violated_bags;
  }
  return stats;
}

// --- dataset container (line-delimited JSON records) ------------------------

inline constexpr const char* kDatasetFormat = "tubemil-dataset";
inline constexpr int kDatasetVersion = 1;

inline nlohmann::json config_to_json(const SyntheticConfig& cfg) {
  return {
      {"num_clips", cfg.num_clips},
      {"frames_per_clip", cfg.frames_per_clip},
      {"num_classes", cfg.num_classes},
      {"actors_min", cfg.actors_min},
      {"actors_max", cfg.actors_max},
      {"feature_dim", cfg.feature_dim},
      {"fn_rate", cfg.fn_rate},
      {"fp_rate", cfg.fp_rate},
      {"jitter_std", cfg.jitter_std},
      {"feature_noise_std", cfg.feature_noise_std},
      {"action_min_frames", cfg.action_min_frames},
      {"action_max_frames", cfg.action_max_frames},
      {"secondary_action_min_frames", cfg.secondary_action_min_frames},
      {"secondary_action_max_frames", cfg.secondary_action_max_frames},
      {"max_actions_per_actor", cfg.max_actions_per_actor},
      {"tubelet_len", cfg.tubelet_len},
      {"seed", cfg.seed},
      {"feature_seed", cfg.feature_seed},
      {"arena_size", cfg.arena_size},
      {"box_size_min", cfg.box_size_min},
      {"box_size_max", cfg.box_size_max},
      {"actor_speed_min", cfg.actor_speed_min},
      {"actor_speed_max", cfg.actor_speed_max},
      {"wander_radius", cfg.wander_radius},
      {"actor_min_separation", cfg.actor_min_separation},
      {"fp_mean_lifetime", cfg.fp_mean_lifetime},
      {"assoc_iou_threshold", cfg.assoc_iou_threshold},
      {"class_mean_scale", cfg.class_mean_scale},
      {"background_mean_scale", cfg.background_mean_scale},
  };
}

inline SyntheticConfig config_from_json(const nlohmann::json& j) {
  SyntheticConfig cfg;
  cfg.num_clips = j.at("num_clips").get<int>();
  cfg.frames_per_clip = j.at("frames_per_clip").get<int>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.actors_min = j.at("actors_min").get<int>();
  cfg.actors_max = j.at("actors_max").get<int>();
  cfg.feature_dim = j.at("feature_dim").get<int>();
  cfg.fn_rate = j.at("fn_rate").get<double>();
  cfg.fp_rate = j.at("fp_rate").get<double>();
  cfg.jitter_std = j.at("jitter_std").get<double>();
  cfg.feature_noise_std = j.at("feature_noise_std").get<double>();
  cfg.action_min_frames = j.at("action_min_frames").get<int>();
  cfg.action_max_frames = j.at("action_max_frames").get<int>();
  cfg.secondary_action_min_frames = j.value("secondary_action_min_frames", 0);
  cfg.secondary_action_max_frames = j.value("secondary_action_max_frames", 0);
  cfg.max_actions_per_actor = j.value("max_actions_per_actor", 3);
  cfg.tubelet_len = j.at("tubelet_len").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.feature_seed = j.value("feature_seed", std::uint64_t{0});
  cfg.arena_size = j.at("arena_size").get<double>();
  cfg.box_size_min = j.at("box_size_min").get<double>();
  cfg.box_size_max = j.at("box_size_max").get<double>();
  cfg.actor_speed_min = j.at("actor_speed_min").get<double>();
  cfg.actor_speed_max = j.at("actor_speed_max").get<double>();
  cfg.wander_radius = j.at("wander_radius").get<double>();
  cfg.actor_min_separation = j.at("actor_min_separation").get<double>();
  cfg.fp_mean_lifetime = j.at("fp_mean_lifetime").get<int>();
  cfg.assoc_iou_threshold = j.at("assoc_iou_threshold").get<double>();
  cfg.class_mean_scale = j.at("class_mean_scale").get<double>();
  cfg.background_mean_scale = j.value("background_mean_scale", 0.0);
  return cfg;
}

struct StoredDataset {
  World world;
  std::vector<TubeletInfo> tubelets;
  std::vector<BagRecord> bags;
  int subclip_keyframes = 0;
};

namespace detail {

inline nlohmann::json box_to_json(const geometry::BoundingBox& b, bool with_score) {
  nlohmann::json arr = {b.x_min, b.y_min, b.x_max, b.y_max};
  if (with_score) arr.push_back(b.score);
  return arr;
}

inline geometry::BoundingBox box_from_json(const nlohmann::json& arr) {
  geometry::BoundingBox b;
  b.x_min = arr.at(0).get<double>();
  b.y_min = arr.at(1).get<double>();
  b.x_max = arr.at(2).get<double>();
  b.y_max = arr.at(3).get<double>();
  if (arr.size() > 4) b.score = arr.at(4).get<double>();
  return b;
}

}  // namespace detail

/// Serializes the dataset container: a versioned header line followed by
/// one JSON record per line, in clip -> detections -> tubelet -> bag order.
inline std::string dataset_to_string(const StoredDataset& ds) {
  std::string out;
  {
    nlohmann::json header = {{"format", kDatasetFormat},
                             {"version", kDatasetVersion},
                             {"config", config_to_json(ds.world.config)},
                             {"subclip_keyframes", ds.subclip_keyframes}};
    out += header.dump();
    out += '\n';
  }
  for (const auto& clip : ds.world.clips) {
    nlohmann::json actors = nlohmann::json::array();
    for (const auto& actor : clip.actors) {
      nlohmann::json boxes = nlohmann::json::array();
      for (const auto& b : actor.boxes) boxes.push_back(detail::box_to_json(b, false));
      nlohmann::json actions = nlohmann::json::array();
      for (const auto& a : actor.actions)
        actions.push_back({a.cls, a.start, a.end});
      actors.push_back({{"id", actor.id}, {"boxes", boxes}, {"actions", actions}});
    }
    out += nlohmann::json{{"type", "clip"}, {"id", clip.clip_id}, {"actors", actors}}
               .dump();
    out += '\n';
  }
  for (std::size_t clip = 0; clip < ds.world.detections.size(); ++clip) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& frame : ds.world.detections[clip].frames) {
      nlohmann::json dets = nlohmann::json::array();
      for (const auto& d : frame) {
        nlohmann::json rec = detail::box_to_json(d.box, true);
        rec.push_back(d.source_actor);
        dets.push_back(rec);
      }
      frames.push_back(dets);
    }
    out += nlohmann::json{{"type", "detections"},
                          {"clip", static_cast<int>(clip)},
                          {"frames", frames}}
               .dump();
    out += '\n';
  }
  for (const auto& info : ds.tubelets) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : info.tubelet.boxes) boxes.push_back(detail::box_to_json(b, true));
    out += nlohmann::json{{"type", "tubelet"},
                          {"clip", info.clip},
                          {"id", info.tubelet.id},
                          {"start", info.tubelet.start_frame},
                          {"src", info.source_actor},
                          {"boxes", boxes},
                          {"feature", info.tubelet.feature}}
               .dump();
    out += '\n';
  }
  for (const auto& rec : ds.bags) {
    nlohmann::json ids = nlohmann::json::array();
    for (std::size_t idx : rec.tubelet_indices)
      ids.push_back(ds.tubelets[idx].tubelet.id);
    out += nlohmann::json{{"type", "bag"},
                          {"clip", rec.clip},
                          {"kf_begin", rec.kf_begin},
                          {"kf_end", rec.kf_end},
                          {"labels", rec.bag.label.y},
                          {"tubelets", ids}}
               .dump();
    out += '\n';
  }
  return out;
}

inline StoredDataset dataset_from_string(const std::string& text) {
  StoredDataset ds;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset: empty file");
  {
    const nlohmann::json header = nlohmann::json::parse(line);
    if (header.value("format", "") != kDatasetFormat)
      throw std::runtime_error("dataset: unrecognized format");
    if (header.value("version", 0) != kDatasetVersion)
      throw std::runtime_error("dataset: unsupported version");
    ds.world.config = config_from_json(header.at("config"));
    ds.subclip_keyframes = header.at("subclip_keyframes").get<int>();
  }
  ds.world.clips.resize(static_cast<std::size_t>(ds.world.config.num_clips));
  ds.world.detections.resize(static_cast<std::size_t>(ds.world.config.num_clips));
  std::map<std::int64_t, std::size_t> tubelet_index;

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    const std::string type = j.at("type").get<std::string>();
    if (type == "clip") {
      const int id = j.at("id").get<int>();
      ClipGroundTruth& clip = ds.world.clips.at(static_cast<std::size_t>(id));
      clip.clip_id = id;
      for (const auto& aj : j.at("actors")) {
        ActorTrack actor;
        actor.id = aj.at("id").get<int>();
        for (const auto& bj : aj.at("boxes"))
          actor.boxes.push_back(detail::box_from_json(bj));
        for (const auto& act : aj.at("actions"))
          actor.actions.push_back({act.at(0).get<int>(), act.at(1).get<int>(),
                                   act.at(2).get<int>()});
        clip.actors.push_back(std::move(actor));
      }
    } else if (type == "detections") {
      const int clip = j.at("clip").get<int>();
      auto& det = ds.world.detections.at(static_cast<std::size_t>(clip));
      for (const auto& fj : j.at("frames")) {
        std::vector<Detection> frame;
        for (const auto& dj : fj) {
          Detection d;
          d.box = detail::box_from_json(dj);
          d.source_actor = dj.at(5).get<int>();
          frame.push_back(d);
        }
        det.frames.push_back(std::move(frame));
      }
    } else if (type == "tubelet") {
      TubeletInfo info;
      info.clip = j.at("clip").get<int>();
      info.tubelet.id = j.at("id").get<std::int64_t>();
      info.tubelet.start_frame = j.at("start").get<int>();
      info.source_actor = j.at("src").get<int>();
      for (const auto& bj : j.at("boxes"))
        info.tubelet.boxes.push_back(detail::box_from_json(bj));
      info.tubelet.feature = j.at("feature").get<std::vector<double>>();
      tubelet_index[info.tubelet.id] = ds.tubelets.size();
      ds.tubelets.push_back(std::move(info));
    } else if (type == "bag") {
      BagRecord rec;
      rec.clip = j.at("clip").get<int>();
      rec.kf_begin = j.at("kf_begin").get<int>();
      rec.kf_end = j.at("kf_end").get<int>();
      rec.bag.source_clip = rec.clip;
      rec.bag.label.y = j.at("labels").get<std::vector<int>>();
      for (const auto& idj : j.at("tubelets")) {
        const std::size_t idx = tubelet_index.at(idj.get<std::int64_t>());
        rec.tubelet_indices.push_back(idx);
        rec.bag.instances.push_back(ds.tubelets[idx].tubelet);
      }
      ds.bags.push_back(std::move(rec));
    } else {
      throw std::runtime_error("dataset: unknown record type: " + type);
    }
  }
  return ds;
}

inline void save_dataset(const std::string& path, const StoredDataset& ds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset: " + path);
  out << dataset_to_string(ds);
}

inline StoredDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read dataset: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return dataset_from_string(buf.str());
}

/// Convenience: generate, build tubelets and bags in one call.
inline StoredDataset make_dataset(const SyntheticConfig& cfg, int subclip_keyframes) {
  StoredDataset ds;
  ds.world = generate(cfg);
  ds.tubelets = build_tubelets(ds.world);
  ds.bags = build_bags(ds.world, ds.tubelets, subclip_keyframes);
  ds.subclip_keyframes = subclip_keyframes;
  return ds;
}

}  // namespace tubemil::synth
