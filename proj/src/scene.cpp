#include "smoke/scene.hpp"

#include <algorithm>
#include <cmath>

#include "smoke/metrics.hpp"

namespace smoke {

void SceneConfig::validate() const {
  if (image_w % 4 != 0 || image_h % 4 != 0)
    throw std::invalid_argument("image dims must be divisible by the stride 4");
  if (min_depth <= 0 || max_depth <= min_depth)
    throw std::invalid_argument("depth range must be positive and increasing");
  if (max_depth >= stats.depth_mean + 3 * stats.depth_std)
    throw std::invalid_argument("depth range exceeds mu_z + 3 sigma_z of the stats");
  if (min_objects < 1 || max_objects < min_objects)
    throw std::invalid_argument("object count range is empty");
  if (num_classes < 1) throw std::invalid_argument("need at least one class");
}

CameraProjectiond SceneConfig::camera() const {
  return CameraProjectiond::from_intrinsics(focal, focal, image_w / 2.0, image_h / 2.0);
}

CodecConfig SceneConfig::codec() const {
  CodecConfig c;
  c.stride = 4;
  c.image_w = image_w;
  c.image_h = image_h;
  c.class_stats.assign(num_classes, stats);
  return c;
}

namespace {

// Quad corner indices per face of the ordered corner set; outward winding is
// fixed up at paint time.
constexpr int kFaces[6][4] = {
    {0, 1, 2, 3},  // bottom
    {4, 5, 6, 7},  // top
    {0, 3, 7, 4},  // heading (+x local)
    {1, 2, 6, 5},  // tail
    {0, 1, 5, 4},  // +z local side
    {3, 2, 6, 7},  // -z local side
};

Eigen::Vector3d base_color(int class_id, double yaw) {
  // Flat color keyed to (class, yaw quadrant).
  static const Eigen::Vector3d class_palette[4] = {
      {0.25, 0.45, 0.85}, {0.85, 0.35, 0.25}, {0.30, 0.75, 0.35}, {0.75, 0.70, 0.25}};
  const int quadrant = std::clamp(int((wrap_angle(yaw) + kPi<double>) / (kPi<double> / 2)), 0, 3);
  Eigen::Vector3d c = class_palette[class_id % 4];
  c[quadrant % 3] = std::clamp(c[quadrant % 3] + 0.12 * (quadrant + 1), 0.0, 1.0);
  return c;
}

struct ProjectedFace {
  Eigen::Vector2d pts[4];
  double depth;
  Eigen::Vector3d color;
};

bool point_in_convex_quad(const Eigen::Vector2d* pts, double px, double py) {
  int sign = 0;
  for (int i = 0; i < 4; ++i) {
    const Eigen::Vector2d& a = pts[i];
    const Eigen::Vector2d& b = pts[(i + 1) % 4];
    const double cross = (b.x() - a.x()) * (py - a.y()) - (b.y() - a.y()) * (px - a.x());
    if (cross == 0) continue;
    const int s = cross > 0 ? 1 : -1;
    if (sign == 0) sign = s;
    else if (s != sign) return false;
  }
  return true;
}

}  // namespace

RenderResult render_boxes(const SceneConfig& config, const std::vector<Box3d>& boxes) {
  const CameraProjectiond P = config.camera();
  RenderResult out;
  out.image = ImageRgb::filled(config.image_w, config.image_h, 0, 0, 0);
  for (int y = 0; y < config.image_h; ++y) {
    const double shade = 0.88 - 0.10 * double(y) / config.image_h;
    for (int x = 0; x < config.image_w; ++x) {
      out.image.channels[0](y, x) = shade;
      out.image.channels[1](y, x) = shade;
      out.image.channels[2](y, x) = 0.92 - 0.06 * double(y) / config.image_h;
    }
  }
  out.painted.resize(boxes.size());
  out.visible_pixels.assign(boxes.size(), 0);

  std::vector<int> order(boxes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return boxes[a].position.z() > boxes[b].position.z();  // far first
  });

  std::vector<std::vector<int>> owner(config.image_h, std::vector<int>(config.image_w, -1));
  for (const int idx : order) {
    const Box3d& box = boxes[idx];
    const CornerSetd corners = box_corners(box);
    const Eigen::Vector3d box_center = box.centroid();
    const Eigen::Vector3d color = base_color(box.class_id, box.theta);

    std::vector<ProjectedFace> faces;
    for (int f = 0; f < 6; ++f) {
      Eigen::Vector3d center = Eigen::Vector3d::Zero();
      for (int k = 0; k < 4; ++k) center += corners.col(kFaces[f][k]);
      center /= 4;
      Eigen::Vector3d normal = (corners.col(kFaces[f][1]) - corners.col(kFaces[f][0]))
                                   .cross(corners.col(kFaces[f][2]) - corners.col(kFaces[f][0]));
      if (normal.dot(center - box_center) < 0) normal = -normal;
      normal.normalize();
      const Eigen::Vector3d view = center.normalized();
      if (normal.dot(view) >= 0) continue;  // backface
      ProjectedFace pf;
      bool ok = true;
      for (int k = 0; k < 4; ++k) {
        try {
          pf.pts[k] = project_point<double>(P, corners.col(kFaces[f][k]));
        } catch (const NonPositiveDepth&) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      pf.depth = center.z();
      const double lambert = std::clamp(-normal.dot(view), 0.0, 1.0);
      pf.color = color * (0.45 + 0.55 * lambert);
      if (f == 2) {  // heading face carries a distinct tint so yaw sign reads off pixels
        pf.color[0] = std::clamp(pf.color[0] + 0.35, 0.0, 1.0);
        pf.color[1] *= 0.6;
      }
      faces.push_back(pf);
    }
    std::sort(faces.begin(), faces.end(),
              [](const ProjectedFace& a, const ProjectedFace& b) { return a.depth > b.depth; });

    for (const ProjectedFace& face : faces) {
      double xmin = face.pts[0].x(), xmax = xmin, ymin = face.pts[0].y(), ymax = ymin;
      for (int k = 1; k < 4; ++k) {
        xmin = std::min(xmin, face.pts[k].x());
        xmax = std::max(xmax, face.pts[k].x());
        ymin = std::min(ymin, face.pts[k].y());
        ymax = std::max(ymax, face.pts[k].y());
      }
      const int x0 = std::max(0, int(std::floor(xmin - 0.5)));
      const int x1 = std::min(config.image_w - 1, int(std::ceil(xmax)));
      const int y0 = std::max(0, int(std::floor(ymin - 0.5)));
      const int y1 = std::min(config.image_h - 1, int(std::ceil(ymax)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          if (!point_in_convex_quad(face.pts, x + 0.5, y + 0.5)) continue;
          for (int ch = 0; ch < 3; ++ch) out.image.channels[ch](y, x) = face.color[ch];
          if (owner[y][x] != idx) {
            owner[y][x] = idx;
            out.painted[idx].emplace_back(x, y);
          }
        }
      }
    }
  }
  for (int y = 0; y < config.image_h; ++y)
    for (int x = 0; x < config.image_w; ++x)
      if (owner[y][x] >= 0) out.visible_pixels[owner[y][x]] += 1;
  return out;
}

Scene generate_scene(const SceneConfig& config, uint64_t seed) {
  config.validate();
  const CameraProjectiond P = config.camera();
  std::mt19937_64 rng(splitmix64(config.seed * 0x9e3779b97f4a7c15ULL + splitmix64(seed)));
  std::uniform_int_distribution<int> count_dist(config.min_objects, config.max_objects);
  std::uniform_int_distribution<int> class_dist(0, config.num_classes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double margin = 3.0;
  for (int round = 0; round < config.max_rejection_rounds; ++round) {
    const int target = count_dist(rng);
    std::vector<Box3d> boxes;
    std::vector<std::pair<int, int>> cells;
    bool complete = true;
    for (int i = 0; i < target && complete; ++i) {
      bool placed = false;
      for (int attempt = 0; attempt < 64; ++attempt) {
        const double z = config.min_depth + (config.max_depth - config.min_depth) * unit(rng);
        const double u = margin + (config.image_w - 2 * margin) * unit(rng);
        const double v = margin + (config.image_h - 2 * margin) * unit(rng);
        Box3d box;
        box.class_id = class_dist(rng);
        box.h = config.stats.mean_h * std::exp((2 * unit(rng) - 1) * config.dim_jitter);
        box.w = config.stats.mean_w * std::exp((2 * unit(rng) - 1) * config.dim_jitter);
        box.l = config.stats.mean_l * std::exp((2 * unit(rng) - 1) * config.dim_jitter);
        box.theta = wrap_angle(config.yaw_min + (config.yaw_max - config.yaw_min) * unit(rng));
        const Eigen::Vector3d center = unproject_center<double>(P, u, v, z);
        box.position = center + Eigen::Vector3d(0, box.h / 2, 0);
        if (!keep_object(P, box, config.image_w, config.image_h)) continue;

        const std::pair<int, int> cell{int(std::floor(v / 4)), int(std::floor(u / 4))};
        bool clashes = false;
        for (size_t j = 0; j < boxes.size() && !clashes; ++j) {
          if (bev_iou(box, boxes[j]) >= config.max_pair_bev_iou) clashes = true;
          if (std::max(std::abs(cell.first - cells[j].first),
                       std::abs(cell.second - cells[j].second)) < config.min_cell_separation)
            clashes = true;
        }
        if (clashes) continue;
        boxes.push_back(box);
        cells.push_back(cell);
        placed = true;
        break;
      }
      if (!placed) complete = false;
    }
    if (!complete) continue;

    RenderResult render = render_boxes(config, boxes);
    const bool visible = std::all_of(
        render.visible_pixels.begin(), render.visible_pixels.end(),
        [&](int n) { return n >= config.min_visible_pixels; });
    if (!visible) continue;

    Scene scene;
    scene.image = std::move(render.image);
    scene.camera = P;
    scene.objects = std::move(boxes);
    return scene;
  }
  throw GenerationExhausted("no valid scene after " +
                            std::to_string(config.max_rejection_rounds) + " rounds");
}

}  // namespace smoke
