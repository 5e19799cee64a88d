#include "smoke/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace smoke {

namespace {

// KITTI devkit difficulty thresholds.
constexpr double kMinHeight[3] = {40, 25, 25};
constexpr int kMaxOcclusion[3] = {0, 1, 2};
constexpr double kMaxTruncation[3] = {0.15, 0.30, 0.50};

}  // namespace

DifficultyLevel assign_difficulty(const GtObject& gt) {
  const double height = gt.bbox.height();
  for (int level = 0; level < 3; ++level) {
    if (height >= kMinHeight[level] && gt.occluded <= kMaxOcclusion[level] &&
        gt.truncated <= kMaxTruncation[level])
      return DifficultyLevel(level);
  }
  return DifficultyLevel::Ignored;
}

double rect_iou(const Rect2d& a, const Rect2d& b) {
  const double iw = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double ih = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (iw <= 0 || ih <= 0) return 0;
  const double inter = iw * ih;
  const double uni = a.width() * a.height() + b.width() * b.height() - inter;
  return uni > 0 ? inter / uni : 0;
}

std::array<Eigen::Vector2d, 4> bev_footprint(const Box3d& box) {
  const CornerSetd corners = box_corners(box);
  std::array<Eigen::Vector2d, 4> poly;
  for (int k = 0; k < 4; ++k) poly[k] = {corners(0, k), corners(2, k)};
  return poly;
}

namespace {

double polygon_area(const std::vector<Eigen::Vector2d>& poly) {
  double a = 0;
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % n];
    a += p.x() * q.y() - q.x() * p.y();
  }
  return a / 2;
}

// Sutherland-Hodgman clip of `subject` against the half-plane left of the
// directed edge a -> b (counterclockwise clip polygon).
std::vector<Eigen::Vector2d> clip_halfplane(const std::vector<Eigen::Vector2d>& subject,
                                            const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  std::vector<Eigen::Vector2d> out;
  const auto side = [&](const Eigen::Vector2d& p) {
    return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
  };
  const size_t n = subject.size();
  for (size_t i = 0; i < n; ++i) {
    const Eigen::Vector2d& cur = subject[i];
    const Eigen::Vector2d& nxt = subject[(i + 1) % n];
    const double sc = side(cur), sn = side(nxt);
    if (sc >= 0) out.push_back(cur);
    if ((sc > 0 && sn < 0) || (sc < 0 && sn > 0)) {
      const double t = sc / (sc - sn);
      out.push_back(cur + t * (nxt - cur));
    }
  }
  return out;
}

double convex_intersection_area(const std::array<Eigen::Vector2d, 4>& a,
                                const std::array<Eigen::Vector2d, 4>& b) {
  std::vector<Eigen::Vector2d> poly(a.begin(), a.end());
  for (int i = 0; i < 4 && !poly.empty(); ++i)
    poly = clip_halfplane(poly, b[i], b[(i + 1) % 4]);
  if (poly.size() < 3) return 0;
  return std::abs(polygon_area(poly));
}

void require_footprint(const Box3d& box) {
  if (box.w <= 0 || box.l <= 0) throw DegenerateBox();
}

}  // namespace

double bev_intersection_area(const Box3d& a, const Box3d& b) {
  require_footprint(a);
  require_footprint(b);
  return convex_intersection_area(bev_footprint(a), bev_footprint(b));
}

double bev_iou(const Box3d& a, const Box3d& b) {
  const double inter = bev_intersection_area(a, b);
  const double uni = a.w * a.l + b.w * b.l - inter;
  return uni > 0 ? inter / uni : 0;
}

double iou_3d(const Box3d& a, const Box3d& b) {
  require_footprint(a);
  if (a.h <= 0 || b.h <= 0) throw DegenerateBox();
  const double inter_area = bev_intersection_area(a, b);
  const double y_overlap = std::min(a.position.y(), b.position.y()) -
                           std::max(a.position.y() - a.h, b.position.y() - b.h);
  if (y_overlap <= 0 || inter_area <= 0) return 0;
  const double inter = inter_area * y_overlap;
  const double uni = a.w * a.l * a.h + b.w * b.l * b.h - inter;
  return uni > 0 ? inter / uni : 0;
}

double iou_fn_3d(const EvalDetection& d, const EvalGroundTruth& g) {
  return iou_3d(d.box, g.box);
}
double iou_fn_bev(const EvalDetection& d, const EvalGroundTruth& g) {
  return bev_iou(d.box, g.box);
}
double iou_fn_2d(const EvalDetection& d, const EvalGroundTruth& g) {
  return rect_iou(d.box2d, g.box2d);
}

namespace {

struct FlatDetection {
  double score;
  int frame;
  int index;
};

enum class MatchOutcome { TruePositive, FalsePositive, Neutral };

/// Shared matching pass: detections in descending score order greedily take
/// the highest-IoU unmatched ground truth in their frame. Matching an
/// ignored entry is neutral; unmatched detections overlapping a DontCare
/// region with intersection/area > 0.5 are neutral as well.
std::vector<MatchOutcome> match_detections(
    const std::vector<FlatDetection>& order,
    const std::vector<std::vector<EvalDetection>>& dets,
    const std::vector<std::vector<EvalGroundTruth>>& gts, const IouFn& iou_fn,
    double iou_threshold, const std::vector<std::vector<bool>>& counted) {
  std::vector<std::vector<bool>> matched(gts.size());
  for (size_t f = 0; f < gts.size(); ++f) matched[f].assign(gts[f].size(), false);

  std::vector<MatchOutcome> outcome(order.size(), MatchOutcome::FalsePositive);
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const FlatDetection& fd = order[oi];
    const EvalDetection& det = dets[fd.frame][fd.index];
    const auto& frame_gts = gts[fd.frame];
    int best = -1;
    double best_iou = 0;
    for (size_t g = 0; g < frame_gts.size(); ++g) {
      if (frame_gts[g].dontcare || matched[fd.frame][g]) continue;
      const double iou = iou_fn(det, frame_gts[g]);
      if (iou < iou_threshold) continue;
      if (iou > best_iou) {
        best_iou = iou;
        best = int(g);
      }
    }
    if (best >= 0) {
      matched[fd.frame][best] = true;
      outcome[oi] = counted[fd.frame][best] ? MatchOutcome::TruePositive : MatchOutcome::Neutral;
      continue;
    }
    for (const EvalGroundTruth& g : frame_gts) {
      if (!g.dontcare) continue;
      const double iw = std::min(det.box2d.xmax, g.box2d.xmax) -
                        std::max(det.box2d.xmin, g.box2d.xmin);
      const double ih = std::min(det.box2d.ymax, g.box2d.ymax) -
                        std::max(det.box2d.ymin, g.box2d.ymin);
      const double area = det.box2d.width() * det.box2d.height();
      if (iw > 0 && ih > 0 && area > 0 && iw * ih / area > 0.5) {
        outcome[oi] = MatchOutcome::Neutral;
        break;
      }
    }
  }
  return outcome;
}

std::vector<FlatDetection> sorted_detections(const std::vector<std::vector<EvalDetection>>& dets) {
  std::vector<FlatDetection> order;
  for (size_t f = 0; f < dets.size(); ++f)
    for (size_t i = 0; i < dets[f].size(); ++i)
      order.push_back({dets[f][i].score, int(f), int(i)});
  std::sort(order.begin(), order.end(), [](const FlatDetection& a, const FlatDetection& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.frame, a.index) < std::tie(b.frame, b.index);
  });
  return order;
}

std::vector<std::vector<bool>> counted_mask(const std::vector<std::vector<EvalGroundTruth>>& gts,
                                            std::optional<DifficultyLevel> difficulty) {
  std::vector<std::vector<bool>> counted(gts.size());
  for (size_t f = 0; f < gts.size(); ++f) {
    counted[f].resize(gts[f].size());
    for (size_t g = 0; g < gts[f].size(); ++g) {
      const EvalGroundTruth& gt = gts[f][g];
      bool keep = !gt.dontcare;
      if (keep && difficulty)
        keep = gt.difficulty != DifficultyLevel::Ignored && int(gt.difficulty) <= int(*difficulty);
      counted[f][g] = keep;
    }
  }
  return counted;
}

}  // namespace

PrCurve average_precision(const std::vector<std::vector<EvalDetection>>& dets,
                          const std::vector<std::vector<EvalGroundTruth>>& gts,
                          const IouFn& iou_fn, double iou_threshold, int recall_points,
                          std::optional<DifficultyLevel> difficulty) {
  if (dets.size() != gts.size())
    throw ShapeMismatch("detection and ground-truth frame counts disagree");
  if (recall_points != 11 && recall_points != 40)
    throw std::invalid_argument("recall_points must be 11 or 40");

  const std::vector<std::vector<bool>> counted = counted_mask(gts, difficulty);
  int num_counted = 0;
  for (const auto& frame : counted) num_counted += int(std::count(frame.begin(), frame.end(), true));

  const std::vector<FlatDetection> order = sorted_detections(dets);
  const std::vector<MatchOutcome> outcome =
      match_detections(order, dets, gts, iou_fn, iou_threshold, counted);

  // One PR sample per distinct score value (ties resolve together).
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  int tp = 0, fp = 0;
  for (size_t i = 0; i < order.size(); ++i) {
    if (outcome[i] == MatchOutcome::TruePositive) ++tp;
    if (outcome[i] == MatchOutcome::FalsePositive) ++fp;
    const bool last_of_score = i + 1 == order.size() || order[i + 1].score != order[i].score;
    if (last_of_score && tp + fp > 0 && num_counted > 0)
      pr.emplace_back(double(tp) / num_counted, double(tp) / (tp + fp));
  }

  PrCurve curve;
  for (int i = recall_points == 11 ? 0 : 1; i <= (recall_points == 11 ? 10 : 40); ++i)
    curve.recall_points.push_back(recall_points == 11 ? i / 10.0 : i / 40.0);
  for (const double r : curve.recall_points) {
    double best = 0;
    for (const auto& [rec, prec] : pr)
      if (rec >= r) best = std::max(best, prec);
    curve.precisions.push_back(best);
  }
  curve.ap = curve.precisions.empty()
                 ? 0
                 : std::accumulate(curve.precisions.begin(), curve.precisions.end(), 0.0) /
                       double(curve.precisions.size());
  return curve;
}

EvalReport evaluate_frames(const std::vector<std::vector<EvalDetection>>& dets,
                           const std::vector<std::vector<EvalGroundTruth>>& gts,
                           double iou_threshold, int recall_points) {
  EvalReport report;
  report.iou_threshold = iou_threshold;
  report.recall_points = recall_points;
  const IouFn fns[3] = {iou_fn_3d, iou_fn_bev, iou_fn_2d};
  for (int task = 0; task < 3; ++task)
    for (int diff = 0; diff < 3; ++diff)
      report.ap[task][diff] = average_precision(dets, gts, fns[task], iou_threshold,
                                                recall_points, DifficultyLevel(diff))
                                  .ap;
  return report;
}

DepthErrorReport depth_error_report(const std::vector<std::vector<EvalDetection>>& dets,
                                    const std::vector<std::vector<EvalGroundTruth>>& gts,
                                    double iou2d_threshold) {
  if (dets.size() != gts.size())
    throw ShapeMismatch("detection and ground-truth frame counts disagree");
  double max_depth = 0;
  for (const auto& frame : gts)
    for (const EvalGroundTruth& g : frame)
      if (!g.dontcare) max_depth = std::max(max_depth, g.box.position.z());
  const int bins = std::max(1, int(std::floor(max_depth / 10.0)) + 1);

  DepthErrorReport report;
  report.mean_abs_error.assign(bins, 0.0);
  report.counts.assign(bins, 0);
  for (size_t f = 0; f < dets.size(); ++f) {
    for (const EvalDetection& det : dets[f]) {
      const EvalGroundTruth* best = nullptr;
      double best_iou = iou2d_threshold;
      for (const EvalGroundTruth& g : gts[f]) {
        if (g.dontcare) continue;
        const double iou = rect_iou(det.box2d, g.box2d);
        if (iou > best_iou) {
          best_iou = iou;
          best = &g;
        }
      }
      if (!best) continue;
      const int bin = std::clamp(int(std::floor(best->box.position.z() / 10.0)), 0, bins - 1);
      report.mean_abs_error[bin] += std::abs(det.box.position.z() - best->box.position.z());
      report.counts[bin] += 1;
    }
  }
  for (int b = 0; b < bins; ++b)
    if (report.counts[b] > 0) report.mean_abs_error[b] /= report.counts[b];
  return report;
}

namespace {
const char* kTaskNames[3] = {"3d", "bev", "2d"};
const char* kDifficultyNames[3] = {"easy", "moderate", "hard"};
}  // namespace

std::string format_report_text(const EvalReport& report) {
  std::ostringstream os;
  os << "AP at IoU " << report.iou_threshold << ", R" << report.recall_points << "\n";
  os << "task        easy  moderate      hard\n";
  for (int task = 0; task < 3; ++task) {
    os << kTaskNames[task];
    for (int d = 0; d < 3; ++d) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%10.4f", report.ap[task][d]);
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

std::string format_report_machine(const EvalReport& report) {
  std::ostringstream os;
  for (int task = 0; task < 3; ++task)
    for (int d = 0; d < 3; ++d) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "ap_%s_r%d %s %.6f\n", kTaskNames[task],
                    report.recall_points, kDifficultyNames[d], report.ap[task][d]);
      os << buf;
    }
  return os.str();
}

std::string format_depth_report(const DepthErrorReport& report) {
  std::ostringstream os;
  os << "depth_bin_start depth_bin_end mean_abs_error_m matches\n";
  for (size_t b = 0; b < report.counts.size(); ++b) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.0f %.0f %.6f %d\n", b * report.bin_width,
                  (b + 1) * report.bin_width, report.mean_abs_error[b], report.counts[b]);
    os << buf;
  }
  return os.str();
}

}  // namespace smoke
