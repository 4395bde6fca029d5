#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

namespace tubemil::geometry {

/// Axis-aligned box in continuous image coordinates, corner encoded.
/// Area is (x_max - x_min) * (y_max - y_min); there is no +1 pixel
/// convention anywhere in the library.
struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;
  double score = 1.0;  // detector confidence in [0, 1]

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }

  bool operator==(const BoundingBox&) const = default;
};

inline void validate(const BoundingBox& b) {
  if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max))
    throw std::invalid_argument("BoundingBox: degenerate box");
  if (!(b.score >= 0.0 && b.score <= 1.0))
    throw std::invalid_argument("BoundingBox: score outside [0,1]");
  if (!std::isfinite(b.x_min) || !std::isfinite(b.y_min) ||
      !std::isfinite(b.x_max) || !std::isfinite(b.y_max))
    throw std::invalid_argument("BoundingBox: non-finite coordinate");
}

/// Spatial intersection over union of two valid boxes. Symmetric, in [0, 1],
/// exactly 1 for identical boxes and 0 for disjoint ones.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  validate(a);
  validate(b);
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  if (iw <= 0.0) return 0.0;
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// A person detection tracked over exactly K consecutive frames, with an
/// attached feature vector standing in for RoI features. box i covers frame
/// start_frame + i.
struct Tubelet {
  int start_frame = 0;
  std::vector<BoundingBox> boxes;
  std::vector<double> feature;
  std::int64_t id = 0;

  int length() const { return static_cast<int>(boxes.size()); }
  int end_frame() const { return start_frame + length() - 1; }  // inclusive
  int centre_frame() const { return start_frame + length() / 2; }

  bool covers(int frame) const {
    return frame >= start_frame && frame <= end_frame();
  }
  const BoundingBox& box_at(int frame) const {
    return boxes.at(static_cast<std::size_t>(frame - start_frame));
  }
};

inline void validate(const Tubelet& t) {
  if (t.boxes.empty()) throw std::invalid_argument("Tubelet: no boxes");
  for (const auto& b : t.boxes) validate(b);
}

struct TubeSegment {
  int frame = 0;
  BoundingBox box;
};

/// A linked spatio-temporal track: one box per frame over a contiguous
/// frame range, a class label and a score (mean of member tubelet scores).
struct Tube {
  std::vector<TubeSegment> segments;
  int label = -1;
  double score = 0.0;

  int start_frame() const { return segments.front().frame; }
  int end_frame() const { return segments.back().frame; }
  const BoundingBox& box_at(int frame) const {
    return segments.at(static_cast<std::size_t>(frame - start_frame())).box;
  }
};

inline void validate(const Tube& t) {
  if (t.segments.empty()) throw std::invalid_argument("Tube: empty");
  for (std::size_t i = 0; i < t.segments.size(); ++i) {
    validate(t.segments[i].box);
    if (i > 0 && t.segments[i].frame != t.segments[i - 1].frame + 1)
      throw std::invalid_argument("Tube: frames not contiguous");
  }
}

/// Spatio-temporal overlap of two tubes: temporal IoU of the frame ranges
/// multiplied by the mean spatial IoU over the temporally shared frames.
/// Zero when the frame ranges are disjoint.
inline double tube_iou(const Tube& a, const Tube& b) {
  validate(a);
  validate(b);
  const int lo = std::max(a.start_frame(), b.start_frame());
  const int hi = std::min(a.end_frame(), b.end_frame());
  if (lo > hi) return 0.0;
  const int inter = hi - lo + 1;
  const int uni = std::max(a.end_frame(), b.end_frame()) -
                  std::min(a.start_frame(), b.start_frame()) + 1;
  double spatial = 0.0;
  for (int f = lo; f <= hi; ++f) spatial += iou(a.box_at(f), b.box_at(f));
  spatial /= inter;
  return (static_cast<double>(inter) / uni) * spatial;
}

/// Mean per-frame IoU of two tubelets over their shared frame range, the
/// similarity the greedy linker ranks candidates by. Empty optional when
/// the tubelets share no frames, which is distinct from an overlap of 0:
/// the linker skips such pairs instead of scoring them.
inline std::optional<double> tubelet_spatial_overlap(const Tubelet& a,
                                                     const Tubelet& b) {
  validate(a);
  validate(b);
  const int lo = std::max(a.start_frame, b.start_frame);
  const int hi = std::min(a.end_frame(), b.end_frame());
  if (lo > hi) return std::nullopt;
  double total = 0.0;
  for (int f = lo; f <= hi; ++f) total += iou(a.box_at(f), b.box_at(f));
  return total / (hi - lo + 1);
}

}  // namespace tubemil::geometry
