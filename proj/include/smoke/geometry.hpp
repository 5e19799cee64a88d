#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "smoke/errors.hpp"

// Closed-form 3D <-> 2D transforms: pinhole projection and its exact inverse,
// residual encodings for depth and dimensions, yaw/observation-angle
// conversions, 3D box corner construction and the projected 2D box.
//
// Conventions used throughout:
//   * camera frame: x right, y down, z forward;
//   * a box location is the center of its bottom face;
//   * yaw rotates about the camera y-axis, zero yaw points along +x;
//   * angles are always wrapped into (-pi, pi].

namespace smoke {

template <typename Scalar>
constexpr Scalar kPi = Scalar(3.141592653589793238462643383279502884L);

inline constexpr double kDepthEps = 1e-9;

/// Wraps an angle into (-pi, pi].
template <typename Scalar>
Scalar wrap_angle(Scalar a) {
  const Scalar two_pi = Scalar(2) * kPi<Scalar>;
  a = std::fmod(a, two_pi);
  if (a <= -kPi<Scalar>) a += two_pi;
  if (a > kPi<Scalar>) a -= two_pi;
  return a;
}

/// Full 3x4 camera projection: upper-triangular intrinsics K in the left
/// block plus an optional translation column (KITTI P2 carries one).
template <typename Scalar>
struct CameraProjection {
  Eigen::Matrix<Scalar, 3, 4> matrix = Eigen::Matrix<Scalar, 3, 4>::Zero();

  Eigen::Matrix<Scalar, 3, 3> intrinsics() const { return matrix.template leftCols<3>(); }
  Eigen::Matrix<Scalar, 3, 1> translation() const { return matrix.col(3); }

  static CameraProjection from_intrinsics(Scalar fx, Scalar fy, Scalar cx, Scalar cy) {
    CameraProjection p;
    p.matrix(0, 0) = fx;
    p.matrix(1, 1) = fy;
    p.matrix(0, 2) = cx;
    p.matrix(1, 2) = cy;
    p.matrix(2, 2) = Scalar(1);
    return p;
  }

  /// Upper-triangular intrinsics with unit lower-right entry and positive
  /// focal lengths.
  bool is_valid() const {
    const auto& m = matrix;
    return m(2, 2) == Scalar(1) && m(0, 0) > Scalar(0) && m(1, 1) > Scalar(0) &&
           m(1, 0) == Scalar(0) && m(2, 0) == Scalar(0) && m(2, 1) == Scalar(0);
  }
};
using CameraProjectiond = CameraProjection<double>;

/// 7-DoF box: dimensions in meters, bottom-face center in the camera frame,
/// yaw in (-pi, pi].
template <typename Scalar>
struct Box3 {
  int class_id = 0;
  Scalar h = 0, w = 0, l = 0;
  Eigen::Matrix<Scalar, 3, 1> position = Eigen::Matrix<Scalar, 3, 1>::Zero();
  Scalar theta = 0;

  bool is_valid() const {
    return h > Scalar(0) && w > Scalar(0) && l > Scalar(0) && theta > -kPi<Scalar> &&
           theta <= kPi<Scalar>;
  }
  /// Center of the box volume (the bottom-face center lifted by h/2).
  Eigen::Matrix<Scalar, 3, 1> centroid() const {
    return position + Eigen::Matrix<Scalar, 3, 1>(0, -h / 2, 0);
  }
};
using Box3d = Box3<double>;

/// Corners as columns, bottom face first, counterclockwise seen from above
/// starting at local (+l/2, 0, +w/2), then the top face in the same order.
template <typename Scalar>
using CornerSet = Eigen::Matrix<Scalar, 3, 8>;
using CornerSetd = CornerSet<double>;

/// Axis-aligned pixel rectangle.
template <typename Scalar>
struct Rect2 {
  Scalar xmin = 0, ymin = 0, xmax = 0, ymax = 0;
  Scalar width() const { return xmax - xmin; }
  Scalar height() const { return ymax - ymin; }
};
using Rect2d = Rect2<double>;

/// Observation angle pair plus the global yaw it corresponds to.
/// alpha_z measures orientation relative to the camera ray; alpha_x (the
/// regressed quantity) leads it by exactly pi/2.
template <typename Scalar>
struct OrientationAngles {
  Scalar alpha_z = 0;
  Scalar alpha_x = 0;
  Scalar theta = 0;
};

/// Yaw rotation about the camera y-axis.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> yaw_rotation(Scalar theta) {
  const Scalar c = std::cos(theta), s = std::sin(theta);
  Eigen::Matrix<Scalar, 3, 3> r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

template <typename Scalar>
Eigen::Matrix<Scalar, 2, 1> project_point(const CameraProjection<Scalar>& P,
                                          const Eigen::Matrix<Scalar, 3, 1>& point) {
  const Eigen::Matrix<Scalar, 3, 1> q =
      P.matrix * point.homogeneous();
  if (q.z() <= Scalar(kDepthEps)) throw NonPositiveDepth();
  return {q.x() / q.z(), q.y() / q.z()};
}

/// Exact left-inverse of project_point at known depth, translation column
/// included: recovers the unique 3D point with z-coordinate `z` that
/// projects to (u, v).
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> unproject_center(const CameraProjection<Scalar>& P, Scalar u, Scalar v,
                                             Scalar z) {
  if (z <= Scalar(0)) throw NonPositiveDepth();
  const Eigen::Matrix<Scalar, 3, 1> t = P.translation();
  const Scalar hom = z + t.z();
  const Eigen::Matrix<Scalar, 3, 1> rhs(u * hom - t.x(), v * hom - t.y(), z);
  return P.intrinsics().template triangularView<Eigen::Upper>().solve(rhs);
}

template <typename Scalar>
Scalar decode_depth(Scalar delta_z, Scalar mu_z, Scalar sigma_z) {
  return mu_z + delta_z * sigma_z;
}

template <typename Scalar>
Scalar encode_depth(Scalar z, Scalar mu_z, Scalar sigma_z) {
  return (z - mu_z) / sigma_z;
}

/// dims = mean .* exp(residual), component order (h, w, l).
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> decode_dims(const Eigen::Matrix<Scalar, 3, 1>& residuals,
                                        const Eigen::Matrix<Scalar, 3, 1>& class_mean) {
  return class_mean.array() * residuals.array().exp();
}

template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> encode_dims(const Eigen::Matrix<Scalar, 3, 1>& dims,
                                        const Eigen::Matrix<Scalar, 3, 1>& class_mean) {
  if ((dims.array() <= Scalar(0)).any() || (class_mean.array() <= Scalar(0)).any())
    throw NonPositiveDimension();
  return (dims.array() / class_mean.array()).log();
}

template <typename Scalar>
Scalar alpha_to_theta(Scalar alpha_z, Scalar x, Scalar z) {
  if (z <= Scalar(0)) throw NonPositiveDepth();
  return wrap_angle(alpha_z + std::atan2(x, z));
}

template <typename Scalar>
Scalar theta_to_alpha(Scalar theta, Scalar x, Scalar z) {
  if (z <= Scalar(0)) throw NonPositiveDepth();
  return wrap_angle(theta - std::atan2(x, z));
}

/// The regression head learns alpha_x = alpha_z + pi/2; these two hops keep
/// both conventions available.
template <typename Scalar>
Scalar regressed_from_alpha_z(Scalar alpha_z) {
  return wrap_angle(alpha_z + kPi<Scalar> / 2);
}
template <typename Scalar>
Scalar alpha_z_from_regressed(Scalar alpha_x) {
  return wrap_angle(alpha_x - kPi<Scalar> / 2);
}

template <typename Scalar>
OrientationAngles<Scalar> orientation_from_alpha_z(Scalar alpha_z, Scalar x, Scalar z) {
  OrientationAngles<Scalar> oa;
  oa.alpha_z = wrap_angle(alpha_z);
  oa.alpha_x = regressed_from_alpha_z(alpha_z);
  oa.theta = alpha_to_theta(alpha_z, x, z);
  return oa;
}

template <typename Scalar>
Eigen::Matrix<Scalar, 2, 1> sincos_encode(Scalar alpha) {
  return {std::sin(alpha), std::cos(alpha)};
}

template <typename Scalar>
Scalar sincos_decode(Scalar s, Scalar c) {
  if (std::sqrt(s * s + c * c) < Scalar(1e-9)) throw DegenerateVector();
  return wrap_angle(std::atan2(s, c));
}

/// Local corner offsets before rotation: l spans local x, h spans y downward
/// from the bottom face (offsets 0 and -h), w spans local z.
template <typename Scalar>
CornerSet<Scalar> corner_offsets(Scalar h, Scalar w, Scalar l) {
  CornerSet<Scalar> o;
  const Scalar xs[4] = {l / 2, -l / 2, -l / 2, l / 2};
  const Scalar zs[4] = {w / 2, w / 2, -w / 2, -w / 2};
  for (int k = 0; k < 4; ++k) {
    o.col(k) = Eigen::Matrix<Scalar, 3, 1>(xs[k], Scalar(0), zs[k]);
    o.col(k + 4) = Eigen::Matrix<Scalar, 3, 1>(xs[k], -h, zs[k]);
  }
  return o;
}

template <typename Scalar>
CornerSet<Scalar> box_corners(const Box3<Scalar>& box) {
  return (yaw_rotation(box.theta) * corner_offsets(box.h, box.w, box.l)).colwise() + box.position;
}

/// Smallest axis-aligned rectangle around the projected corners, clipped to
/// the image. Throws BehindCamera if any corner fails the depth test.
template <typename Scalar>
Rect2<Scalar> box2d_from_projection(const CameraProjection<Scalar>& P, const Box3<Scalar>& box,
                                    Scalar image_w, Scalar image_h) {
  const CornerSet<Scalar> corners = box_corners(box);
  Rect2<Scalar> r;
  Scalar xmin = std::numeric_limits<Scalar>::max(), xmax = std::numeric_limits<Scalar>::lowest();
  Scalar ymin = xmin, ymax = xmax;
  for (int k = 0; k < 8; ++k) {
    Eigen::Matrix<Scalar, 2, 1> p;
    try {
      p = project_point<Scalar>(P, corners.col(k));
    } catch (const NonPositiveDepth&) {
      throw BehindCamera();
    }
    xmin = std::min(xmin, p.x());
    xmax = std::max(xmax, p.x());
    ymin = std::min(ymin, p.y());
    ymax = std::max(ymax, p.y());
  }
  r.xmin = std::clamp(xmin, Scalar(0), image_w);
  r.xmax = std::clamp(xmax, Scalar(0), image_w);
  r.ymin = std::clamp(ymin, Scalar(0), image_h);
  r.ymax = std::clamp(ymax, Scalar(0), image_h);
  return r;
}

}  // namespace smoke
