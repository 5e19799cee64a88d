#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "smoke/geometry.hpp"

// KITTI-format labels, calibration files and detection output, plus dataset
// statistics extraction.
//
// Label lines carry 15 whitespace-separated fields
//   type truncated occluded alpha x1 y1 x2 y2 h w l x y z rotation_y
// with an optional 16th score field. Calibration lines look like
// "KEY: v0 v1 ... v11" with the twelve numbers filling a 3x4 matrix row-major.

namespace smoke {

struct GtObject {
  std::string type;
  double truncated = 0;
  int occluded = 0;
  double alpha = 0;
  Rect2d bbox;
  double h = 0, w = 0, l = 0;
  Eigen::Vector3d location = Eigen::Vector3d::Zero();
  double rotation_y = 0;
  std::optional<double> score;

  bool is_dontcare() const { return type == "DontCare"; }
  Box3d to_box3d(int class_id = 0) const;
};

std::vector<GtObject> parse_label_text(const std::string& text);
std::vector<GtObject> parse_label_file(const std::string& path);

/// Extracts the P2 projection and validates the intrinsics invariant.
CameraProjectiond parse_calib_text(const std::string& text);
CameraProjectiond parse_calib_file(const std::string& path);

struct ClassStats {
  struct Entry {
    double mean_h = 0, mean_w = 0, mean_l = 0;
    double depth_mean = 0, depth_std = 0;
    int count = 0;
  };
  std::map<std::string, Entry> per_class;
};

/// Arithmetic means of the dimensions and depth statistics per class, over
/// non-DontCare objects with positive depth. `sample_std` switches sigma_z
/// from the population to the sample estimator.
ClassStats compute_stats(const std::vector<GtObject>& labels,
                         const std::vector<std::string>& classes, bool sample_std = false);

/// Canonical 6-decimal fixed formatting; occlusion stays integral. Lines
/// produced here survive a parse -> format round trip byte-identically.
std::string format_label_line(const GtObject& obj);

void write_detection_file(const std::string& path, const std::vector<GtObject>& detections);

/// One file `<frame>.txt` per frame id under `dir` (created if needed).
void write_detections(const std::map<std::string, std::vector<GtObject>>& per_frame,
                      const std::string& dir);

}  // namespace smoke
