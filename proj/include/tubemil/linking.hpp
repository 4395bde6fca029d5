#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tubemil/geometry.hpp"
#include "tubemil/mil.hpp"
#include "tubemil/model.hpp"

namespace tubemil::linking {

struct ScoredTubelet {
  geometry::Tubelet tubelet;
  std::vector<double> class_scores;  // one per class, in [0, 1]
};

struct LinkConfig {
  double link_iou_threshold = 0.5;
  int max_gap = 1;  // tubelet steps a tube survives without extension
  bool per_class = true;
};

inline void validate(const LinkConfig& cfg) {
  if (!(cfg.link_iou_threshold >= 0.0 && cfg.link_iou_threshold <= 1.0))
    throw std::invalid_argument("LinkConfig: threshold outside [0,1]");
  if (cfg.max_gap < 0) throw std::invalid_argument("LinkConfig: max_gap must be >= 0");
}

/// Emitted when a tube's claim was ambiguous: a second unclaimed candidate
/// also cleared the threshold. Identity swaps at track crossings show up
/// here.
struct LinkDiagnostic {
  int frame = 0;
  int tube = 0;  // creation index of the claiming tube
  std::int64_t chosen_id = 0;
  std::int64_t runner_up_id = 0;
  double chosen_overlap = 0.0;
  double runner_up_overlap = 0.0;
};

struct LinkResult {
  std::vector<geometry::Tube> tubes;
  std::vector<std::vector<std::int64_t>> tube_members;  // tubelet ids per tube
  std::vector<LinkDiagnostic> diagnostics;
};

namespace detail {

// Similarity the linker ranks candidates by: mean per-frame IoU when the
// tubelets share frames, otherwise the IoU of the boxes facing each other
// across the temporal gap (the consecutive-frames measure of the greedy
// linking protocol).
inline double link_similarity(const geometry::Tubelet& tail,
                              const geometry::Tubelet& cand) {
  if (const auto shared = geometry::tubelet_spatial_overlap(tail, cand))
    return *shared;
  return geometry::iou(tail.boxes.back(), cand.boxes.front());
}

inline geometry::BoundingBox lerp_box(const geometry::BoundingBox& a,
                                      const geometry::BoundingBox& b, double t) {
  const auto mix = [t](double x, double y) { return x + t * (y - x); };
  return {mix(a.x_min, b.x_min), mix(a.y_min, b.y_min), mix(a.x_max, b.x_max),
          mix(a.y_max, b.y_max), mix(a.score, b.score)};
}

}  // namespace detail

/// Greedy online linking of scored tubelets into tubes for one class.
/// Tubelets are processed in temporal order; active tubes claim, in
/// descending tube-score order, the unclaimed candidate with the highest
/// link similarity at or above the threshold. Unclaimed candidates start
/// new tubes; a tube unreachable for more than max_gap tubelet steps is
/// terminated. Gaps inside a tube are filled by linear box interpolation so
/// tube frames stay contiguous. Deterministic: ties break by lower tubelet
/// id, tube order ties by creation index.
inline LinkResult link(std::vector<ScoredTubelet> tubelets, int cls,
                       const LinkConfig& cfg) {
  validate(cfg);
  LinkResult result;
  if (tubelets.empty()) return result;
  for (const auto& st : tubelets) {
    geometry::validate(st.tubelet);
    if (cls < 0 || cls >= static_cast<int>(st.class_scores.size()))
      throw std::invalid_argument("link: class index out of range");
  }

  std::sort(tubelets.begin(), tubelets.end(),
            [](const ScoredTubelet& a, const ScoredTubelet& b) {
              if (a.tubelet.start_frame != b.tubelet.start_frame)
                return a.tubelet.start_frame < b.tubelet.start_frame;
              return a.tubelet.id < b.tubelet.id;
            });

  struct ActiveTube {
    std::vector<std::size_t> members;  // indices into the sorted tubelet list
    double score_sum = 0.0;
    int creation = 0;

    double score() const { return score_sum / static_cast<double>(members.size()); }
  };
  std::vector<ActiveTube> tubes;

  std::size_t pos = 0;
  while (pos < tubelets.size()) {
    const int frame = tubelets[pos].tubelet.start_frame;
    std::size_t group_end = pos;
    while (group_end < tubelets.size() &&
           tubelets[group_end].tubelet.start_frame == frame)
      ++group_end;

    std::vector<bool> claimed(group_end - pos, false);

    // claim order: descending tube score, then creation order
    std::vector<std::size_t> tube_order(tubes.size());
    for (std::size_t i = 0; i < tubes.size(); ++i) tube_order[i] = i;
    std::sort(tube_order.begin(), tube_order.end(), [&](std::size_t a, std::size_t b) {
      const double sa = tubes[a].score();
      const double sb = tubes[b].score();
      if (sa != sb) return sa > sb;
      return tubes[a].creation < tubes[b].creation;
    });

    for (std::size_t ti : tube_order) {
      ActiveTube& tube = tubes[ti];
      const auto& tail = tubelets[tube.members.back()].tubelet;
      if (frame <= tail.start_frame) continue;  // no progress, skip
      const int gap = frame - tail.end_frame() - 1;
      if (gap > cfg.max_gap * tail.length()) continue;  // out of reach

      double best = -1.0, second = -1.0;
      std::size_t best_idx = 0;
      std::int64_t second_id = 0;
      for (std::size_t c = 0; c < claimed.size(); ++c) {
        if (claimed[c]) continue;
        const double sim =
            detail::link_similarity(tail, tubelets[pos + c].tubelet);
        if (sim < cfg.link_iou_threshold) continue;
        if (sim > best) {
          second = best;
          second_id = best > -1.0 ? tubelets[pos + best_idx].tubelet.id : 0;
          best = sim;
          best_idx = c;
        } else if (sim > second) {
          second = sim;
          second_id = tubelets[pos + c].tubelet.id;
        }
      }
      if (best < 0.0) continue;
      claimed[best_idx] = true;
      tube.members.push_back(pos + best_idx);
      tube.score_sum += tubelets[pos + best_idx].class_scores[static_cast<std::size_t>(cls)];
      if (second >= 0.0)
        result.diagnostics.push_back({frame, tube.creation,
                                      tubelets[pos + best_idx].tubelet.id, second_id,
                                      best, second});
    }

    for (std::size_t c = 0; c < claimed.size(); ++c) {
      if (claimed[c]) continue;
      ActiveTube tube;
      tube.creation = static_cast<int>(tubes.size());
      tube.members.push_back(pos + c);
      tube.score_sum =
          tubelets[pos + c].class_scores[static_cast<std::size_t>(cls)];
      tubes.push_back(std::move(tube));
    }
    pos = group_end;
  }

  // materialize tubes, interpolating across gaps to keep frames contiguous
  for (const auto& tube : tubes) {
    geometry::Tube out;
    out.label = cls;
    out.score = tube.score();
    std::vector<std::int64_t> member_ids;
    for (std::size_t mi : tube.members)
      member_ids.push_back(tubelets[mi].tubelet.id);

    for (std::size_t m = 0; m < tube.members.size(); ++m) {
      const auto& t = tubelets[tube.members[m]].tubelet;
      if (out.segments.empty()) {
        for (int f = t.start_frame; f <= t.end_frame(); ++f)
          out.segments.push_back({f, t.box_at(f)});
        continue;
      }
      const int tail_end = out.segments.back().frame;
      if (t.start_frame > tail_end + 1) {
        const auto& from = out.segments.back().box;
        const auto& to = t.boxes.front();
        const int span = t.start_frame - tail_end;
        for (int f = tail_end + 1; f < t.start_frame; ++f)
          out.segments.push_back(
              {f, detail::lerp_box(from, to, static_cast<double>(f - tail_end) / span)});
      }
      for (int f = std::max(t.start_frame, tail_end + 1); f <= t.end_frame(); ++f)
        out.segments.push_back({f, t.box_at(f)});
    }
    result.tubes.push_back(std::move(out));
    result.tube_members.push_back(std::move(member_ids));
  }
  return result;
}

/// Inference glue: classify every tubelet, then link independently per
/// class. Output is indexed by class and suitable for video AP evaluation.
inline std::vector<std::vector<geometry::Tube>> tubes_from_predictions(
    const model::ModelParams& params, const std::vector<geometry::Tubelet>& tubelets,
    const LinkConfig& cfg,
    mil::VarTransform transform = mil::VarTransform::kSoftplus) {
  const auto preds = model::predict_tubelets(params, tubelets, transform);
  std::vector<ScoredTubelet> scored;
  scored.reserve(tubelets.size());
  for (std::size_t i = 0; i < tubelets.size(); ++i)
    scored.push_back({tubelets[i], preds[i].probs});

  std::vector<std::vector<geometry::Tube>> per_class(
      static_cast<std::size_t>(params.num_classes));
  for (int cls = 0; cls < params.num_classes; ++cls)
    per_class[static_cast<std::size_t>(cls)] = link(scored, cls, cfg).tubes;
  return per_class;
}

/// Tube dump: one JSON record per line with class, score, frame range and
/// per-frame boxes.
inline void write_tube_dump(std::ostream& out, const std::vector<geometry::Tube>& tubes,
                            int video = 0) {
  for (const auto& tube : tubes) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& seg : tube.segments)
      boxes.push_back({seg.box.x_min, seg.box.y_min, seg.box.x_max, seg.box.y_max});
    out << nlohmann::json{{"video", video},
                          {"class", tube.label},
                          {"score", tube.score},
                          {"start", tube.start_frame()},
                          {"end", tube.end_frame()},
                          {"boxes", boxes}}
               .dump()
        << "\n";
  }
}

inline void write_tube_dump(const std::string& path,
                            const std::vector<geometry::Tube>& tubes, int video = 0) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write tube dump: " + path);
  write_tube_dump(out, tubes, video);
}

}  // namespace tubemil::linking
