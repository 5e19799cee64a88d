#pragma once

#include <utility>

#include "smoke/codec.hpp"

// Synthetic desk-scale scenes: boxes sampled in front of a fixed pinhole
// camera and rasterized with pose-correlated flat shading, so that position,
// size, depth and yaw are all recoverable from pixels.

namespace smoke {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct SceneConfig {
  int image_w = 96, image_h = 96;
  double focal = 110;
  int num_classes = 1;
  int min_objects = 1, max_objects = 2;
  double min_depth = 6, max_depth = 14;
  double dim_jitter = 0.12;  // half-range of the log-residual on each dimension
  double yaw_min = -kPi<double>, yaw_max = kPi<double>;
  ClassStatsEntry stats{1.63, 1.53, 3.88, 10.0, 2.3094010767585034};
  uint64_t seed = 0;
  int max_rejection_rounds = 200;
  double max_pair_bev_iou = 0.1;
  int min_cell_separation = 2;  // Chebyshev distance between keypoint cells, stride-4 grid
  int min_visible_pixels = 8;

  void validate() const;
  CameraProjectiond camera() const;
  CodecConfig codec() const;
};

/// Rejection-samples boxes until every one passes the keep filter, footprints
/// barely overlap and keypoints land on distinct heatmap neighborhoods, then
/// renders them. Deterministic per (config, seed).
Scene generate_scene(const SceneConfig& config, uint64_t seed);

/// Rasterization entry point, exposed so tests can interrogate which pixels
/// a box painted.
struct RenderResult {
  ImageRgb image;
  std::vector<std::vector<std::pair<int, int>>> painted;  // (x, y) per object
  std::vector<int> visible_pixels;                        // after occlusion
};
RenderResult render_boxes(const SceneConfig& config, const std::vector<Box3d>& boxes);

}  // namespace smoke
