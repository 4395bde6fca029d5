#pragma once

#include <algorithm>
#include <compare>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "tubemil/geometry.hpp"

namespace tubemil::eval {

struct EvalConfig {
  std::vector<double> iou_thresholds;  // Frame AP default {0.5}; Video AP {0.2, 0.5}
  int num_classes = 0;
};

inline void validate(const EvalConfig& cfg) {
  if (cfg.num_classes < 1) throw std::invalid_argument("EvalConfig: num_classes >= 1");
  if (cfg.iou_thresholds.empty())
    throw std::invalid_argument("EvalConfig: no thresholds");
  for (double t : cfg.iou_thresholds)
    if (!(t > 0.0 && t <= 1.0))
      throw std::invalid_argument("EvalConfig: thresholds must be in (0,1]");
}

struct ClassAp {
  int cls = 0;
  double ap = 0.0;
  int num_gt = 0;
  int tp = 0;
  int fp = 0;

  int fn() const { return num_gt - tp; }
};

struct ThresholdResult {
  double threshold = 0.0;
  std::vector<ClassAp> per_class;
  double mean_ap = 0.0;  // unweighted mean over classes with >= 1 GT instance
};

struct EvalResult {
  std::vector<ThresholdResult> per_threshold;

  const ThresholdResult& at_threshold(double t) const {
    for (const auto& r : per_threshold)
      if (r.threshold == t) return r;
    throw std::invalid_argument("no result at requested threshold");
  }
};

struct ScoredMatch {
  double score = 0.0;
  bool is_tp = false;
};

/// Average precision with all-points interpolation: detections are ranked
/// by descending score (ties keep input order), precision is interpolated
/// to its maximum at equal-or-higher recall, and the area under the
/// resulting curve is returned. num_gt == 0 yields 0 (callers exclude such
/// classes from mean AP).
inline double average_precision(std::vector<ScoredMatch> matches, int num_gt) {
  if (num_gt < 0) throw std::invalid_argument("average_precision: num_gt < 0");
  if (num_gt == 0) return 0.0;
  std::stable_sort(matches.begin(), matches.end(),
                   [](const ScoredMatch& a, const ScoredMatch& b) {
                     return a.score > b.score;
                   });
  std::vector<double> tp_precisions;
  int tp = 0;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (!matches[i].is_tp) continue;
    ++tp;
    tp_precisions.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  // suffix max turns raw precisions into the interpolated envelope
  double best = 0.0;
  double ap = 0.0;
  for (std::size_t i = tp_precisions.size(); i-- > 0;) {
    best = std::max(best, tp_precisions[i]);
    ap += best;
  }
  return ap / static_cast<double>(num_gt);
}

struct KeyframeKey {
  int clip = 0;
  int keyframe = 0;

  auto operator<=>(const KeyframeKey&) const = default;
};

struct FrameDetection {
  KeyframeKey key;
  int cls = 0;
  geometry::BoundingBox box;
  double score = 0.0;
};

struct FrameGroundTruth {
  KeyframeKey key;
  int cls = 0;
  geometry::BoundingBox box;
};

namespace detail {

struct GtPool {
  std::vector<geometry::BoundingBox> boxes;
  std::vector<bool> matched;
};

}  // namespace detail

/// Frame AP: per class, predictions across all keyframes are ranked by
/// score; each prediction greedily matches the best-IoU unmatched ground
/// truth box in its keyframe. Predictions referencing keyframes outside the
/// given universe are an error.
inline EvalResult frame_ap(const std::vector<FrameDetection>& preds,
                           const std::vector<FrameGroundTruth>& gts,
                           const std::vector<KeyframeKey>& keyframe_universe,
                           const EvalConfig& cfg) {
  validate(cfg);
  const std::set<KeyframeKey> universe(keyframe_universe.begin(),
                                       keyframe_universe.end());
  for (const auto& p : preds)
    if (!universe.contains(p.key))
      throw std::invalid_argument("frame_ap: prediction references unknown keyframe");
  for (const auto& g : gts)
    if (!universe.contains(g.key))
      throw std::invalid_argument("frame_ap: ground truth references unknown keyframe");

  EvalResult result;
  for (double threshold : cfg.iou_thresholds) {
    ThresholdResult tr;
    tr.threshold = threshold;
    double mean_sum = 0.0;
    int mean_count = 0;
    for (int cls = 0; cls < cfg.num_classes; ++cls) {
      // per-keyframe GT pools for this class
      std::map<KeyframeKey, detail::GtPool> pools;
      int num_gt = 0;
      for (const auto& g : gts) {
        if (g.cls != cls) continue;
        pools[g.key].boxes.push_back(g.box);
        ++num_gt;
      }
      for (auto& [key, pool] : pools) pool.matched.assign(pool.boxes.size(), false);

      std::vector<std::size_t> order;
      for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i].cls == cls) order.push_back(i);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return preds[a].score > preds[b].score;
      });

      std::vector<ScoredMatch> matches;
      matches.reserve(order.size());
      ClassAp ca;
      ca.cls = cls;
      ca.num_gt = num_gt;
      for (std::size_t idx : order) {
        const auto& p = preds[idx];
        bool tp = false;
        const auto it = pools.find(p.key);
        if (it != pools.end()) {
          double best = -1.0;
          std::size_t best_g = 0;
          for (std::size_t g = 0; g < it->second.boxes.size(); ++g) {
            if (it->second.matched[g]) continue;
            const double ov = geometry::iou(p.box, it->second.boxes[g]);
            if (ov > best) {
              best = ov;
              best_g = g;
            }
          }
          if (best >= threshold) {
            it->second.matched[best_g] = true;
            tp = true;
          }
        }
        matches.push_back({p.score, tp});
        tp ? ++ca.tp : ++ca.fp;
      }
      ca.ap = average_precision(matches, num_gt);
      if (num_gt > 0) {
        mean_sum += ca.ap;
        ++mean_count;
      }
      tr.per_class.push_back(ca);
    }
    tr.mean_ap = mean_count > 0 ? mean_sum / mean_count : 0.0;
    result.per_threshold.push_back(std::move(tr));
  }
  return result;
}

/// A tube paired with the video it belongs to; tube.label is the class and
/// tube.score the ranking score.
struct TubeEntry {
  int video = 0;
  geometry::Tube tube;
};

/// Video AP: identical matching logic with spatio-temporal tube IoU as the
/// overlap measure, matched per video, ranked pooled across the split.
inline EvalResult video_ap(const std::vector<TubeEntry>& preds,
                           const std::vector<TubeEntry>& gts, const EvalConfig& cfg) {
  validate(cfg);
  EvalResult result;
  for (double threshold : cfg.iou_thresholds) {
    ThresholdResult tr;
    tr.threshold = threshold;
    double mean_sum = 0.0;
    int mean_count = 0;
    for (int cls = 0; cls < cfg.num_classes; ++cls) {
      std::map<int, detail::GtPool> pools;  // keyed by video
      std::map<int, std::vector<const geometry::Tube*>> gt_tubes;
      int num_gt = 0;
      for (const auto& g : gts) {
        if (g.tube.label != cls) continue;
        gt_tubes[g.video].push_back(&g.tube);
        ++num_gt;
      }
      std::map<int, std::vector<bool>> matched;
      for (auto& [video, tubes] : gt_tubes) matched[video].assign(tubes.size(), false);

      std::vector<std::size_t> order;
      for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i].tube.label == cls) order.push_back(i);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return preds[a].tube.score > preds[b].tube.score;
      });

      std::vector<ScoredMatch> matches;
      ClassAp ca;
      ca.cls = cls;
      ca.num_gt = num_gt;
      for (std::size_t idx : order) {
        const auto& p = preds[idx];
        bool tp = false;
        const auto it = gt_tubes.find(p.video);
        if (it != gt_tubes.end()) {
          auto& used = matched[p.video];
          double best = -1.0;
          std::size_t best_g = 0;
          for (std::size_t g = 0; g < it->second.size(); ++g) {
            if (used[g]) continue;
            const double ov = geometry::tube_iou(p.tube, *it->second[g]);
            if (ov > best) {
              best = ov;
              best_g = g;
            }
          }
          if (best >= threshold) {
            used[best_g] = true;
            tp = true;
          }
        }
        matches.push_back({p.tube.score, tp});
        tp ? ++ca.tp : ++ca.fp;
      }
      ca.ap = average_precision(matches, num_gt);
      if (num_gt > 0) {
        mean_sum += ca.ap;
        ++mean_count;
      }
      tr.per_class.push_back(ca);
    }
    tr.mean_ap = mean_count > 0 ? mean_sum / mean_count : 0.0;
    result.per_threshold.push_back(std::move(tr));
  }
  return result;
}

}  // namespace tubemil::eval
