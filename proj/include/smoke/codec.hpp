#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "smoke/geometry.hpp"

// Ground-truth -> training-target encoding (per-class keypoint heatmap plus a
// regression grid) and network-output -> detection decoding, with the
// augmentation transforms used by the training harness.

namespace smoke {

/// Per-class dataset statistics the residual encodings are anchored to.
struct ClassStatsEntry {
  double mean_h = 0, mean_w = 0, mean_l = 0;
  double depth_mean = 0, depth_std = 0;
  Eigen::Vector3d mean_dims() const { return {mean_h, mean_w, mean_l}; }
};

struct CodecConfig {
  int stride = 4;
  int image_w = 0, image_h = 0;
  int topk = 100;
  double score_threshold = 0.25;
  std::vector<ClassStatsEntry> class_stats;

  int num_classes() const { return static_cast<int>(class_stats.size()); }
  int cells_x() const { return image_w / stride; }
  int cells_y() const { return image_h / stride; }
  /// Throws std::invalid_argument when the grid does not tile the image.
  void validate() const;
};

struct Heatmap {
  std::vector<Eigen::MatrixXd> channels;

  static Heatmap zeros(int rows, int cols, int num_classes);
  int num_classes() const { return static_cast<int>(channels.size()); }
  int rows() const { return channels.empty() ? 0 : static_cast<int>(channels[0].rows()); }
  int cols() const { return channels.empty() ? 0 : static_cast<int>(channels[0].cols()); }
};

/// The 8-tuple regressed per keypoint. Offsets and depth are raw residuals;
/// dimension entries are log-residuals; the angle is a (sin, cos) pair.
struct RegressionTuple {
  double delta_z = 0, delta_xc = 0, delta_yc = 0;
  double delta_h = 0, delta_w = 0, delta_l = 0;
  double sin_alpha = 0, cos_alpha = 1;

  Eigen::Matrix<double, 8, 1> to_vector() const;
  static RegressionTuple from_vector(const Eigen::Matrix<double, 8, 1>& v);
};

/// Raw per-cell regression grid, 8 channels.
struct RegressionMap {
  std::vector<Eigen::MatrixXd> channels;

  static RegressionMap zeros(int rows, int cols);
  int rows() const { return channels.empty() ? 0 : static_cast<int>(channels[0].rows()); }
  int cols() const { return channels.empty() ? 0 : static_cast<int>(channels[0].cols()); }
  Eigen::Matrix<double, 8, 1> at(int row, int col) const;
  void set(int row, int col, const Eigen::Matrix<double, 8, 1>& v);
};

struct EncodedObject {
  int cell_row = 0, cell_col = 0;
  int class_id = 0;
  RegressionTuple tuple;
  Box3d box;
  Eigen::Vector2d keypoint = Eigen::Vector2d::Zero();  // continuous pixels
  bool regression_valid = true;
};

struct TargetSet {
  Heatmap heatmap;
  std::vector<EncodedObject> objects;
};

struct Detection {
  Box3d box;
  double score = 0;
  Rect2d box2d;
};

/// RGB raster with values in [0, 1], one matrix per channel.
struct ImageRgb {
  std::vector<Eigen::MatrixXd> channels;

  static ImageRgb filled(int width, int height, double r, double g, double b);
  int width() const { return channels.empty() ? 0 : static_cast<int>(channels[0].cols()); }
  int height() const { return channels.empty() ? 0 : static_cast<int>(channels[0].rows()); }
};

struct Scene {
  ImageRgb image;
  CameraProjectiond camera;
  std::vector<Box3d> objects;
};

enum class AugmentPolicy { None, Flip, Scale, Shift };

struct AugmentResult {
  Scene scene;
  std::vector<bool> regression_valid;
};

/// True iff the projected 3D center of the box lands inside
/// [0, image_w) x [0, image_h) with positive depth.
bool keep_object(const CameraProjectiond& P, const Box3d& box, double image_w, double image_h);

/// Largest keypoint displacement (in cells) that keeps the displaced box
/// above `overlap` IoU with the original; minimum over the three relative
/// placements, each a quadratic in the radius.
double min_overlap_radius(double box_w, double box_h, double overlap = 0.7);

/// Kernel width from the enclosing 2D box at heatmap scale: max(1, r/3).
double gaussian_sigma(double box_w_cells, double box_h_cells);

/// Max-merges exp(-d^2 / (2 sigma^2)) into one class channel; the center cell
/// becomes exactly 1.
void draw_gaussian(Heatmap& heatmap, int class_id, int center_row, int center_col, double sigma);

/// Encodes kept objects into heatmap + per-object regression targets.
/// Objects whose center projects outside the image (or behind the camera)
/// are dropped, never aborting the batch. `regression_valid`, when non-empty,
/// carries per-object augmentation masks.
TargetSet encode_targets(const std::vector<Box3d>& objects, const CameraProjectiond& P,
                         const CodecConfig& config,
                         const std::vector<bool>& regression_valid = {});

/// Renders a target set as the network output that would reproduce it
/// exactly: ground-truth tuples at the keypoint cells, zeros elsewhere.
RegressionMap ideal_regression_map(const TargetSet& targets, const CodecConfig& config);

/// 3x3 local maxima -> top-k by score -> threshold -> lift each survivor to a
/// 3D box. `regmap` must already be activation-constrained. No NMS.
std::vector<Detection> decode_detections(const Heatmap& heatmap, const RegressionMap& regmap,
                                         const CameraProjectiond& P, const CodecConfig& config);

/// Horizontal flip keeps 3D targets usable; scale/shift move only the 2D
/// targets and mask regression for the whole sample.
AugmentResult augment(const Scene& scene, AugmentPolicy policy, std::mt19937_64& rng);

/// Versioned binary container for target sets (see docs/formats.md).
void save_target_set(const std::string& path, const TargetSet& targets, const CodecConfig& config);
struct LoadedTargetSet {
  TargetSet targets;
  int stride = 0;
  int image_w = 0, image_h = 0;
};
LoadedTargetSet load_target_set(const std::string& path);

}  // namespace smoke
