#pragma once

#include <functional>
#include <optional>

#include "smoke/geometry.hpp"
#include "smoke/kitti_io.hpp"

// Rotated-box IoU on the ground plane, 3D IoU, difficulty buckets, average
// precision over 11 or 40 recall points, and the binned depth-error report.

namespace smoke {

enum class DifficultyLevel { Easy = 0, Moderate = 1, Hard = 2, Ignored = 3 };

/// KITTI devkit thresholds on 2D box height, occlusion and truncation.
DifficultyLevel assign_difficulty(const GtObject& gt);

double rect_iou(const Rect2d& a, const Rect2d& b);

/// Ground-plane footprint polygon of a box, counterclockwise.
std::array<Eigen::Vector2d, 4> bev_footprint(const Box3d& box);

/// IoU of the yaw-rotated footprints via convex polygon clipping.
double bev_iou(const Box3d& a, const Box3d& b);
double bev_intersection_area(const Box3d& a, const Box3d& b);

/// Volume IoU: BEV intersection area times the vertical overlap of the
/// [y - h, y] extents.
double iou_3d(const Box3d& a, const Box3d& b);

struct EvalDetection {
  Box3d box;
  Rect2d box2d;
  double score = 0;
};

struct EvalGroundTruth {
  Box3d box;
  Rect2d box2d;
  DifficultyLevel difficulty = DifficultyLevel::Easy;
  bool dontcare = false;
};

using IouFn = std::function<double(const EvalDetection&, const EvalGroundTruth&)>;
double iou_fn_3d(const EvalDetection&, const EvalGroundTruth&);
double iou_fn_bev(const EvalDetection&, const EvalGroundTruth&);
double iou_fn_2d(const EvalDetection&, const EvalGroundTruth&);

struct PrCurve {
  std::vector<double> recall_points;
  std::vector<double> precisions;  // monotone-interpolated precision at each point
  double ap = 0;
};

/// Greedy max-IoU matching in descending score order, each ground truth
/// matched at most once; detections whose best match is an ignored or
/// DontCare entry count neither way. `difficulty` filters which ground
/// truths are scored (harder ones become ignored); nullopt counts every
/// non-DontCare ground truth. `recall_points` is 11 (grid 0, 0.1, .., 1)
/// or 40 (grid 1/40, .., 1).
PrCurve average_precision(const std::vector<std::vector<EvalDetection>>& dets,
                          const std::vector<std::vector<EvalGroundTruth>>& gts,
                          const IouFn& iou_fn, double iou_threshold, int recall_points,
                          std::optional<DifficultyLevel> difficulty);

struct EvalReport {
  double iou_threshold = 0.7;
  int recall_points = 40;
  /// ap[task][difficulty]; tasks ordered 3D, BEV, 2D.
  std::array<std::array<double, 3>, 3> ap{};
};

EvalReport evaluate_frames(const std::vector<std::vector<EvalDetection>>& dets,
                           const std::vector<std::vector<EvalGroundTruth>>& gts,
                           double iou_threshold, int recall_points);

/// Mean absolute depth error in 10 m bins, matched through 2D boxes.
struct DepthErrorReport {
  double bin_width = 10;
  std::vector<double> mean_abs_error;
  std::vector<int> counts;
};

DepthErrorReport depth_error_report(const std::vector<std::vector<EvalDetection>>& dets,
                                    const std::vector<std::vector<EvalGroundTruth>>& gts,
                                    double iou2d_threshold = 0.7);

std::string format_report_text(const EvalReport& report);
/// One "task difficulty value" triple per line.
std::string format_report_machine(const EvalReport& report);
std::string format_depth_report(const DepthErrorReport& report);

}  // namespace smoke
