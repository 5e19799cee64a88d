#include "smoke/codec.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace smoke {

void CodecConfig::validate() const {
  if (stride < 1) throw std::invalid_argument("stride must be >= 1");
  if (image_w <= 0 || image_h <= 0) throw std::invalid_argument("image dims must be positive");
  if (image_w % stride != 0 || image_h % stride != 0)
    throw std::invalid_argument("image dims must be divisible by the stride");
  if (score_threshold < 0 || score_threshold > 1)
    throw std::invalid_argument("score_threshold must lie in [0, 1]");
  if (topk < 1) throw std::invalid_argument("topk must be >= 1");
  for (const auto& s : class_stats)
    if (s.mean_h <= 0 || s.mean_w <= 0 || s.mean_l <= 0 || s.depth_std <= 0)
      throw std::invalid_argument("class stats must be strictly positive");
}

Heatmap Heatmap::zeros(int rows, int cols, int num_classes) {
  Heatmap h;
  h.channels.assign(num_classes, Eigen::MatrixXd::Zero(rows, cols));
  return h;
}

Eigen::Matrix<double, 8, 1> RegressionTuple::to_vector() const {
  Eigen::Matrix<double, 8, 1> v;
  v << delta_z, delta_xc, delta_yc, delta_h, delta_w, delta_l, sin_alpha, cos_alpha;
  return v;
}

RegressionTuple RegressionTuple::from_vector(const Eigen::Matrix<double, 8, 1>& v) {
  RegressionTuple t;
  t.delta_z = v[0];
  t.delta_xc = v[1];
  t.delta_yc = v[2];
  t.delta_h = v[3];
  t.delta_w = v[4];
  t.delta_l = v[5];
  t.sin_alpha = v[6];
  t.cos_alpha = v[7];
  return t;
}

RegressionMap RegressionMap::zeros(int rows, int cols) {
  RegressionMap m;
  m.channels.assign(8, Eigen::MatrixXd::Zero(rows, cols));
  return m;
}

Eigen::Matrix<double, 8, 1> RegressionMap::at(int row, int col) const {
  Eigen::Matrix<double, 8, 1> v;
  for (int k = 0; k < 8; ++k) v[k] = channels[k](row, col);
  return v;
}

void RegressionMap::set(int row, int col, const Eigen::Matrix<double, 8, 1>& v) {
  for (int k = 0; k < 8; ++k) channels[k](row, col) = v[k];
}

ImageRgb ImageRgb::filled(int width, int height, double r, double g, double b) {
  ImageRgb img;
  img.channels = {Eigen::MatrixXd::Constant(height, width, r),
                  Eigen::MatrixXd::Constant(height, width, g),
                  Eigen::MatrixXd::Constant(height, width, b)};
  return img;
}

bool keep_object(const CameraProjectiond& P, const Box3d& box, double image_w, double image_h) {
  Eigen::Vector2d kp;
  try {
    kp = project_point<double>(P, box.centroid());
  } catch (const NonPositiveDepth&) {
    return false;
  }
  return kp.x() >= 0 && kp.x() < image_w && kp.y() >= 0 && kp.y() < image_h;
}

double min_overlap_radius(double box_w, double box_h, double overlap) {
  const double w = box_w, h = box_h, t = overlap;
  // Diagonal shift: intersection (w-r)(h-r), union 2wh - (w-r)(h-r).
  const double b1 = w + h;
  const double c1 = w * h * (1 - t) / (1 + t);
  const double r1 = (b1 - std::sqrt(std::max(0.0, b1 * b1 - 4 * c1))) / 2;
  // Both corners inward: intersection (w-2r)(h-2r), union wh.
  const double b2 = 2 * (w + h);
  const double c2 = (1 - t) * w * h;
  const double r2 = (b2 - std::sqrt(std::max(0.0, b2 * b2 - 16 * c2))) / 8;
  // Both corners outward: intersection wh, union (w+2r)(h+2r).
  const double a3 = 4 * t;
  const double b3 = 2 * t * (w + h);
  const double c3 = (t - 1) * w * h;
  const double r3 = (-b3 + std::sqrt(std::max(0.0, b3 * b3 - 4 * a3 * c3))) / (2 * a3);
  return std::min({r1, r2, r3});
}

double gaussian_sigma(double box_w_cells, double box_h_cells) {
  return std::max(1.0, min_overlap_radius(box_w_cells, box_h_cells) / 3.0);
}

void draw_gaussian(Heatmap& heatmap, int class_id, int center_row, int center_col, double sigma) {
  if (class_id < 0 || class_id >= heatmap.num_classes()) throw OutOfBounds("bad class id");
  Eigen::MatrixXd& grid = heatmap.channels[class_id];
  if (center_row < 0 || center_row >= grid.rows() || center_col < 0 || center_col >= grid.cols())
    throw OutOfBounds("gaussian center outside the heatmap");
  const double inv = 1.0 / (2 * sigma * sigma);
  for (int r = 0; r < grid.rows(); ++r) {
    for (int c = 0; c < grid.cols(); ++c) {
      const double d2 = double(r - center_row) * (r - center_row) +
                        double(c - center_col) * (c - center_col);
      grid(r, c) = std::max(grid(r, c), std::exp(-d2 * inv));
    }
  }
}

TargetSet encode_targets(const std::vector<Box3d>& objects, const CameraProjectiond& P,
                         const CodecConfig& config, const std::vector<bool>& regression_valid) {
  config.validate();
  if (!regression_valid.empty() && regression_valid.size() != objects.size())
    throw std::invalid_argument("regression_valid size must match object count");
  const int rows = config.cells_y(), cols = config.cells_x();
  TargetSet out;
  out.heatmap = Heatmap::zeros(rows, cols, config.num_classes());

  for (size_t idx = 0; idx < objects.size(); ++idx) {
    const Box3d& box = objects[idx];
    if (box.class_id < 0 || box.class_id >= config.num_classes()) continue;
    if (!keep_object(P, box, config.image_w, config.image_h)) continue;

    EncodedObject enc;
    Rect2d rect;
    try {
      enc.keypoint = project_point<double>(P, box.centroid());
      rect = box2d_from_projection<double>(P, box, config.image_w, config.image_h);
      const ClassStatsEntry& stats = config.class_stats[box.class_id];
      enc.tuple.delta_z = encode_depth(box.position.z(), stats.depth_mean, stats.depth_std);
      const Eigen::Vector3d res =
          encode_dims<double>({box.h, box.w, box.l}, stats.mean_dims());
      enc.tuple.delta_h = res[0];
      enc.tuple.delta_w = res[1];
      enc.tuple.delta_l = res[2];
      const double alpha_z = theta_to_alpha(box.theta, box.position.x(), box.position.z());
      const double regressed = regressed_from_alpha_z(alpha_z);
      enc.tuple.sin_alpha = std::sin(regressed);
      enc.tuple.cos_alpha = std::cos(regressed);
    } catch (const Error&) {
      continue;  // drop the object, keep the batch
    }

    const double u = enc.keypoint.x() / config.stride;
    const double v = enc.keypoint.y() / config.stride;
    enc.cell_col = static_cast<int>(std::floor(u));
    enc.cell_row = static_cast<int>(std::floor(v));
    enc.tuple.delta_xc = u - enc.cell_col;
    enc.tuple.delta_yc = v - enc.cell_row;
    enc.class_id = box.class_id;
    enc.box = box;
    enc.regression_valid = regression_valid.empty() ? true : bool(regression_valid[idx]);

    const double sigma =
        gaussian_sigma(rect.width() / config.stride, rect.height() / config.stride);
    draw_gaussian(out.heatmap, box.class_id, enc.cell_row, enc.cell_col, sigma);
    out.objects.push_back(std::move(enc));
  }
  return out;
}

RegressionMap ideal_regression_map(const TargetSet& targets, const CodecConfig& config) {
  RegressionMap map = RegressionMap::zeros(config.cells_y(), config.cells_x());
  for (const EncodedObject& obj : targets.objects)
    map.set(obj.cell_row, obj.cell_col, obj.tuple.to_vector());
  return map;
}

namespace {

struct Peak {
  double score;
  int row, col, class_id;
};

// A cell wins over an equal-scoring neighbor when it precedes it in
// (row, col) order, so plateaus emit exactly one peak per neighborhood.
bool is_local_peak(const Eigen::MatrixXd& grid, int r, int c) {
  const double s = grid(r, c);
  for (int dr = -1; dr <= 1; ++dr) {
    for (int dc = -1; dc <= 1; ++dc) {
      if (dr == 0 && dc == 0) continue;
      const int nr = r + dr, nc = c + dc;
      if (nr < 0 || nr >= grid.rows() || nc < 0 || nc >= grid.cols()) continue;
      const double n = grid(nr, nc);
      if (n > s) return false;
      if (n == s && std::make_pair(nr, nc) < std::make_pair(r, c)) return false;
    }
  }
  return true;
}

}  // namespace

std::vector<Detection> decode_detections(const Heatmap& heatmap, const RegressionMap& regmap,
                                         const CameraProjectiond& P, const CodecConfig& config) {
  config.validate();
  if (heatmap.num_classes() != config.num_classes() || heatmap.rows() != config.cells_y() ||
      heatmap.cols() != config.cells_x() || regmap.rows() != heatmap.rows() ||
      regmap.cols() != heatmap.cols())
    throw ShapeMismatch("heatmap/regression map shapes disagree with the config");

  std::vector<Peak> peaks;
  for (int cls = 0; cls < heatmap.num_classes(); ++cls) {
    const Eigen::MatrixXd& grid = heatmap.channels[cls];
    for (int r = 0; r < grid.rows(); ++r)
      for (int c = 0; c < grid.cols(); ++c)
        if (is_local_peak(grid, r, c)) peaks.push_back({grid(r, c), r, c, cls});
  }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.row, a.col, a.class_id) < std::tie(b.row, b.col, b.class_id);
  });
  if (static_cast<int>(peaks.size()) > config.topk) peaks.resize(config.topk);

  std::vector<Detection> dets;
  for (const Peak& pk : peaks) {
    if (pk.score < config.score_threshold) continue;
    const RegressionTuple t = RegressionTuple::from_vector(regmap.at(pk.row, pk.col));
    const ClassStatsEntry& stats = config.class_stats[pk.class_id];
    const double z = decode_depth(t.delta_z, stats.depth_mean, stats.depth_std);
    if (z <= 0) continue;  // unphysical output, drop
    Detection det;
    try {
      const double u = (pk.col + t.delta_xc) * config.stride;
      const double v = (pk.row + t.delta_yc) * config.stride;
      const Eigen::Vector3d center = unproject_center(P, u, v, z);
      const Eigen::Vector3d dims =
          decode_dims<double>({t.delta_h, t.delta_w, t.delta_l}, stats.mean_dims());
      det.box.class_id = pk.class_id;
      det.box.h = dims[0];
      det.box.w = dims[1];
      det.box.l = dims[2];
      det.box.position = center + Eigen::Vector3d(0, dims[0] / 2, 0);
      const double alpha_z = alpha_z_from_regressed(sincos_decode(t.sin_alpha, t.cos_alpha));
      det.box.theta = alpha_to_theta(alpha_z, det.box.position.x(), det.box.position.z());
      det.score = pk.score;
      det.box2d = box2d_from_projection<double>(P, det.box, double(config.image_w),
                                                double(config.image_h));
    } catch (const Error&) {
      continue;
    }
    dets.push_back(det);
  }
  return dets;
}

namespace {

// Inverse-maps destination pixel centers through `affine_inv`, nearest
// sample, clamped to the frame.
ImageRgb warp_image(const ImageRgb& src, const Eigen::Matrix3d& affine_inv) {
  ImageRgb dst = ImageRgb::filled(src.width(), src.height(), 0, 0, 0);
  for (int y = 0; y < src.height(); ++y) {
    for (int x = 0; x < src.width(); ++x) {
      const Eigen::Vector3d s = affine_inv * Eigen::Vector3d(x + 0.5, y + 0.5, 1.0);
      const int sx = std::clamp(int(std::floor(s.x())), 0, src.width() - 1);
      const int sy = std::clamp(int(std::floor(s.y())), 0, src.height() - 1);
      for (int ch = 0; ch < 3; ++ch) dst.channels[ch](y, x) = src.channels[ch](sy, sx);
    }
  }
  return dst;
}

// Yaw of the box whose ordered corner set is `corners`: the bottom edge
// c0 - c1 points along the rotated local x axis.
double yaw_from_corners(const CornerSetd& corners) {
  const Eigen::Vector3d e = corners.col(0) - corners.col(1);
  return std::atan2(-e.z(), e.x());
}

}  // namespace

AugmentResult augment(const Scene& scene, AugmentPolicy policy, std::mt19937_64& rng) {
  AugmentResult out;
  out.scene = scene;
  out.regression_valid.assign(scene.objects.size(), true);

  switch (policy) {
    case AugmentPolicy::None:
      return out;
    case AugmentPolicy::Flip: {
      const Eigen::Matrix3d K = scene.camera.intrinsics();
      const Eigen::Vector3d t = scene.camera.translation();
      const double fx = K(0, 0), cx = K(0, 2);
      // Vertical mirror axis through the principal point; the matching 3D
      // mirror plane sits at x = (cx * t_z - t_x) / fx.
      const double plane_x = (cx * t.z() - t.x()) / fx;
      Eigen::Matrix3d mirror = Eigen::Matrix3d::Identity();
      mirror(0, 0) = -1;
      mirror(0, 2) = 2 * cx;
      out.scene.image = warp_image(scene.image, mirror);  // involutive, own inverse
      for (Box3d& box : out.scene.objects) {
        const Eigen::Vector2d kp = project_point<double>(scene.camera, box.centroid());
        const Eigen::Vector3d center =
            unproject_center(scene.camera, 2 * cx - kp.x(), kp.y(), box.centroid().z());
        CornerSetd mirrored = box_corners(box);
        mirrored.row(0) = (2 * plane_x - mirrored.row(0).array()).matrix();
        box.position = center + Eigen::Vector3d(0, box.h / 2, 0);
        box.theta = wrap_angle(yaw_from_corners(mirrored));
      }
      return out;
    }
    case AugmentPolicy::Scale: {
      std::uniform_int_distribution<int> step(0, 8);  // 9 steps over [0.6, 1.4]
      const double s = 0.6 + 0.1 * step(rng);
      const double cx = scene.image.width() / 2.0, cy = scene.image.height() / 2.0;
      Eigen::Matrix3d affine = Eigen::Matrix3d::Identity();
      affine(0, 0) = affine(1, 1) = s;
      affine(0, 2) = (1 - s) * cx;
      affine(1, 2) = (1 - s) * cy;
      out.scene.image = warp_image(scene.image, affine.inverse());
      out.scene.camera.matrix = affine * scene.camera.matrix;
      std::fill(out.regression_valid.begin(), out.regression_valid.end(), false);
      return out;
    }
    case AugmentPolicy::Shift: {
      std::uniform_int_distribution<int> step(0, 4);  // 5 steps over [-0.2, 0.2]
      const double dx = (-0.2 + 0.1 * step(rng)) * scene.image.width();
      const double dy = (-0.2 + 0.1 * step(rng)) * scene.image.height();
      Eigen::Matrix3d affine = Eigen::Matrix3d::Identity();
      affine(0, 2) = dx;
      affine(1, 2) = dy;
      out.scene.image = warp_image(scene.image, affine.inverse());
      out.scene.camera.matrix = affine * scene.camera.matrix;
      std::fill(out.regression_valid.begin(), out.regression_valid.end(), false);
      return out;
    }
  }
  throw UnknownPolicy();
}

namespace {

constexpr uint32_t kTargetMagic = 0x53544D53;  // "SMTS"
constexpr uint32_t kTargetVersion = 1;

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

void write_grid(std::ostream& os, const Eigen::MatrixXd& m) {
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) write_raw(os, m(r, c));
}

Eigen::MatrixXd read_grid(std::istream& is, int rows, int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = read_raw<double>(is);
  return m;
}

}  // namespace

void save_target_set(const std::string& path, const TargetSet& targets,
                     const CodecConfig& config) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_raw(os, kTargetMagic);
  write_raw(os, kTargetVersion);
  write_raw(os, int32_t(config.stride));
  write_raw(os, int32_t(config.image_w));
  write_raw(os, int32_t(config.image_h));
  write_raw(os, int32_t(targets.heatmap.rows()));
  write_raw(os, int32_t(targets.heatmap.cols()));
  write_raw(os, int32_t(targets.heatmap.num_classes()));
  for (const auto& grid : targets.heatmap.channels) write_grid(os, grid);
  write_raw(os, uint64_t(targets.objects.size()));
  for (const EncodedObject& obj : targets.objects) {
    write_raw(os, int32_t(obj.cell_row));
    write_raw(os, int32_t(obj.cell_col));
    write_raw(os, int32_t(obj.class_id));
    write_raw(os, uint8_t(obj.regression_valid ? 1 : 0));
    write_raw(os, obj.keypoint.x());
    write_raw(os, obj.keypoint.y());
    const auto tup = obj.tuple.to_vector();
    for (int k = 0; k < 8; ++k) write_raw(os, tup[k]);
    write_raw(os, int32_t(obj.box.class_id));
    write_raw(os, obj.box.h);
    write_raw(os, obj.box.w);
    write_raw(os, obj.box.l);
    write_raw(os, obj.box.position.x());
    write_raw(os, obj.box.position.y());
    write_raw(os, obj.box.position.z());
    write_raw(os, obj.box.theta);
  }
  if (!os) throw IoError("write failed: " + path);
}

LoadedTargetSet load_target_set(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  if (read_raw<uint32_t>(is) != kTargetMagic) throw IoError("bad magic in " + path);
  if (read_raw<uint32_t>(is) != kTargetVersion) throw IoError("unsupported version in " + path);
  LoadedTargetSet out;
  out.stride = read_raw<int32_t>(is);
  out.image_w = read_raw<int32_t>(is);
  out.image_h = read_raw<int32_t>(is);
  const int rows = read_raw<int32_t>(is);
  const int cols = read_raw<int32_t>(is);
  const int classes = read_raw<int32_t>(is);
  out.targets.heatmap = Heatmap::zeros(rows, cols, classes);
  for (int ch = 0; ch < classes; ++ch) out.targets.heatmap.channels[ch] = read_grid(is, rows, cols);
  const uint64_t count = read_raw<uint64_t>(is);
  for (uint64_t i = 0; i < count; ++i) {
    EncodedObject obj;
    obj.cell_row = read_raw<int32_t>(is);
    obj.cell_col = read_raw<int32_t>(is);
    obj.class_id = read_raw<int32_t>(is);
    obj.regression_valid = read_raw<uint8_t>(is) != 0;
    obj.keypoint.x() = read_raw<double>(is);
    obj.keypoint.y() = read_raw<double>(is);
    Eigen::Matrix<double, 8, 1> tup;
    for (int k = 0; k < 8; ++k) tup[k] = read_raw<double>(is);
    obj.tuple = RegressionTuple::from_vector(tup);
    obj.box.class_id = read_raw<int32_t>(is);
    obj.box.h = read_raw<double>(is);
    obj.box.w = read_raw<double>(is);
    obj.box.l = read_raw<double>(is);
    obj.box.position.x() = read_raw<double>(is);
    obj.box.position.y() = read_raw<double>(is);
    obj.box.position.z() = read_raw<double>(is);
    obj.box.theta = read_raw<double>(is);
    out.targets.objects.push_back(obj);
  }
  if (!is) throw IoError("truncated container: " + path);
  return out;
}

}  // namespace smoke
