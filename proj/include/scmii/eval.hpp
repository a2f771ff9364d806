#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "json.hpp"
#include "scmii/model.hpp"
#include "scmii/runtime.hpp"
#include "scmii/scene.hpp"

namespace scmii {

/// Axis-aligned 3D IoU of two boxes given as center and size.
double iou3d(const Eigen::Vector3d& center_a, const Eigen::Vector3d& size_a,
             const Eigen::Vector3d& center_b, const Eigen::Vector3d& size_b);
double iou3d(const Detection& a, const Box3& b);
double iou3d(const Detection& a, const Detection& b);

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
  bool operator==(const PrPoint&) const = default;
};

struct ApResult {
  double ap = 0.0;
  std::vector<PrPoint> curve;  // raw points, one per ranked detection
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t missed = 0;  // unmatched truth boxes
  bool no_truth = false;   // detections but no truth: AP is 0 by rule
};

/// One frame's detections with its ground truth.
struct EvalFrame {
  std::vector<Detection> detections;
  std::vector<Box3> truth;
};

/// Detections ranked by descending score (stable), each greedily matched to
/// the unmatched truth box of highest IoU if that IoU >= threshold. AP is
/// the area under the precision envelope (all-point interpolation).
ApResult average_precision(const std::vector<Detection>& detections, const std::vector<Box3>& truth,
                           double iou_threshold);

/// Pools every frame's ranked detections into one PR curve; matching stays
/// within each frame.
ApResult average_precision(const std::vector<EvalFrame>& frames, double iou_threshold);

/// Area under the all-point interpolated PR curve for a raw curve.
double interpolated_area(const std::vector<PrPoint>& curve);

inline constexpr double kApLooseIou = 0.3;
inline constexpr double kApStrictIou = 0.5;

/// One table row: a sensor/integration configuration evaluated at both
/// IoU thresholds.
struct EvalResult {
  std::string label;
  ApResult ap_loose;   // IoU 0.3
  ApResult ap_strict;  // IoU 0.5
};

EvalResult evaluate(const std::string& label, const std::vector<EvalFrame>& frames);

struct EvalReport {
  nlohmann::json json;
  std::string text;
};

/// Accuracy table (rows in the given order; AP columns at 0.3 and 0.5)
/// followed by the timing table when `timing` is given.
EvalReport eval_report(const std::vector<EvalResult>& results, const TimingReport* timing);

}  // namespace scmii
