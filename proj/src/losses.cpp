#include "smoke/losses.hpp"

#include <cmath>

namespace smoke {

namespace {

constexpr double kDimEps = 1e-12;  // keeps the activation strictly inside (-1/2, 1/2)

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double yaw_derivative_scale_s(double s, double c) { return c / (s * s + c * c); }
double yaw_derivative_scale_c(double s, double c) { return -s / (s * s + c * c); }

/// d/dtheta of yaw_rotation(theta).
Eigen::Matrix3d yaw_rotation_derivative(double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  Eigen::Matrix3d r;
  r << -s, 0, c, 0, 0, 0, -c, 0, -s;
  return r;
}

double l1_penalty(double d) { return std::abs(d); }
double l1_penalty_derivative(double d) { return d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0); }

double smooth_penalty(double d, double tau) {
  const double a = std::abs(d);
  return a < tau ? 0.5 * d * d / tau : a - 0.5 * tau;
}
double smooth_penalty_derivative(double d, double tau) {
  return std::abs(d) < tau ? d / tau : (d > 0 ? 1.0 : -1.0);
}

}  // namespace

double dim_activation(double raw) {
  return std::clamp(logistic(raw) - 0.5, -0.5 + kDimEps, 0.5 - kDimEps);
}

double dim_activation_derivative(double raw) {
  const double s = logistic(raw);
  if (s - 0.5 <= -0.5 + kDimEps || s - 0.5 >= 0.5 - kDimEps) return 0.0;
  return s * (1.0 - s);
}

Eigen::Vector2d orient_activation(double raw_sin, double raw_cos) {
  const double n = std::sqrt(raw_sin * raw_sin + raw_cos * raw_cos);
  if (n < 1e-9) throw DegenerateVector("orientation activation near zero");
  return {raw_sin / n, raw_cos / n};
}

RegressionTuple activate_tuple(const Eigen::Matrix<double, 8, 1>& raw) {
  RegressionTuple t;
  t.delta_z = raw[0];
  t.delta_xc = raw[1];
  t.delta_yc = raw[2];
  t.delta_h = dim_activation(raw[3]);
  t.delta_w = dim_activation(raw[4]);
  t.delta_l = dim_activation(raw[5]);
  const Eigen::Vector2d sc = orient_activation(raw[6], raw[7]);
  t.sin_alpha = sc[0];
  t.cos_alpha = sc[1];
  return t;
}

RegressionMap activate_regression_map(const RegressionMap& raw) {
  RegressionMap out = raw;
  for (int r = 0; r < raw.rows(); ++r)
    for (int c = 0; c < raw.cols(); ++c) out.set(r, c, activate_tuple(raw.at(r, c)).to_vector());
  return out;
}

double focal_loss(const Heatmap& pred, const Heatmap& target, const LossConfig& config,
                  Heatmap* grad) {
  if (pred.num_classes() != target.num_classes() || pred.rows() != target.rows() ||
      pred.cols() != target.cols())
    throw ShapeMismatch("focal loss shapes disagree");
  if (grad) *grad = Heatmap::zeros(pred.rows(), pred.cols(), pred.num_classes());

  int keypoints = 0;
  for (const auto& grid : target.channels) keypoints += int((grid.array() == 1.0).count());
  const double n = std::max(1, keypoints);

  const double lo = config.prob_clamp, hi = 1.0 - config.prob_clamp;
  double loss = 0;
  for (int ch = 0; ch < pred.num_classes(); ++ch) {
    const Eigen::MatrixXd& p = pred.channels[ch];
    const Eigen::MatrixXd& t = target.channels[ch];
    for (int r = 0; r < p.rows(); ++r) {
      for (int c = 0; c < p.cols(); ++c) {
        const double s = std::clamp(p(r, c), lo, hi);
        const bool interior = p(r, c) > lo && p(r, c) < hi;
        const double y = t(r, c);
        double g;
        if (y == 1.0) {
          loss += -std::pow(1 - s, config.alpha) * std::log(s);
          g = config.alpha * std::pow(1 - s, config.alpha - 1) * std::log(s) -
              std::pow(1 - s, config.alpha) / s;
        } else {
          const double pr = std::pow(1 - y, config.beta);
          loss += -pr * std::pow(s, config.alpha) * std::log(1 - s);
          g = pr * (std::pow(s, config.alpha) / (1 - s) -
                    config.alpha * std::pow(s, config.alpha - 1) * std::log(1 - s));
        }
        if (grad) grad->channels[ch](r, c) = interior ? g / n : 0.0;
      }
    }
  }
  return loss / n;
}

namespace {

/// Forward + gradient of the per-object corner regression for one variant.
/// `group_sums` holds unscaled sums of the coordinate penalties; `grad` is
/// d(sum over groups)/d raw channel, also unscaled (caller applies lambda/N).
struct ObjectRegression {
  std::array<double, 3> group_sums{};
  Eigen::Matrix<double, 8, 1> grad = Eigen::Matrix<double, 8, 1>::Zero();
};

struct LiftContext {
  Eigen::Matrix3d K;
  Eigen::Vector3d t;
  double stride;
  ClassStatsEntry stats;
  int cell_row, cell_col;
};

Eigen::Vector3d solve_k(const Eigen::Matrix3d& K, const Eigen::Vector3d& rhs) {
  return K.triangularView<Eigen::Upper>().solve(rhs);
}

/// Predicted-location lift (Eq. of the inverse projection) plus its
/// derivatives with respect to the three location channels.
struct LocationLift {
  Eigen::Vector3d center;  // 3D volumetric center
  Eigen::Vector3d d_dz, d_dxc, d_dyc;
};

LocationLift lift_location(const LiftContext& ctx, double raw_dz, double raw_dxc,
                           double raw_dyc) {
  LocationLift out;
  const double z = ctx.stats.depth_mean + raw_dz * ctx.stats.depth_std;
  if (z <= 0) throw NonPositiveDepth("predicted depth is non-positive");
  const double u = (ctx.cell_col + raw_dxc) * ctx.stride;
  const double v = (ctx.cell_row + raw_dyc) * ctx.stride;
  const double hom = z + ctx.t.z();
  out.center = solve_k(ctx.K, {u * hom - ctx.t.x(), v * hom - ctx.t.y(), z});
  const double sz = ctx.stats.depth_std;
  out.d_dz = solve_k(ctx.K, {u * sz, v * sz, sz});
  out.d_dxc = solve_k(ctx.K, {ctx.stride * hom, 0, 0});
  out.d_dyc = solve_k(ctx.K, {0, ctx.stride * hom, 0});
  return out;
}

ObjectRegression disentangled_regression(const Eigen::Matrix<double, 8, 1>& raw,
                                         const EncodedObject& obj, const LiftContext& ctx) {
  ObjectRegression out;
  const Box3d& gt = obj.box;
  const CornerSetd gt_corners = box_corners(gt);
  const CornerSetd gt_offsets = corner_offsets(gt.h, gt.w, gt.l);
  const Eigen::Matrix3d gt_rot = yaw_rotation(gt.theta);

  // Location group: predicted depth and discretization offsets, everything
  // else ground truth.
  {
    const LocationLift lift = lift_location(ctx, raw[0], raw[1], raw[2]);
    const Eigen::Vector3d position = lift.center + Eigen::Vector3d(0, gt.h / 2, 0);
    Eigen::Vector3d sign_sum = Eigen::Vector3d::Zero();
    for (int k = 0; k < 8; ++k) {
      const Eigen::Vector3d diff = gt_rot * gt_offsets.col(k) + position - gt_corners.col(k);
      for (int d = 0; d < 3; ++d) {
        out.group_sums[size_t(RegressionGroup::Location)] += l1_penalty(diff[d]);
        sign_sum[d] += l1_penalty_derivative(diff[d]);
      }
    }
    out.grad[0] += sign_sum.dot(lift.d_dz);
    out.grad[1] += sign_sum.dot(lift.d_dxc);
    out.grad[2] += sign_sum.dot(lift.d_dyc);
  }

  // Dimension group.
  {
    const Eigen::Vector3d dims = decode_dims<double>(
        {dim_activation(raw[3]), dim_activation(raw[4]), dim_activation(raw[5])},
        ctx.stats.mean_dims());
    const CornerSetd offsets = corner_offsets(dims[0], dims[1], dims[2]);
    const double dh = dims[0] * dim_activation_derivative(raw[3]);
    const double dw = dims[1] * dim_activation_derivative(raw[4]);
    const double dl = dims[2] * dim_activation_derivative(raw[5]);
    for (int k = 0; k < 8; ++k) {
      const Eigen::Vector3d diff = gt_rot * offsets.col(k) + gt.position - gt_corners.col(k);
      Eigen::Vector3d sgn;
      for (int d = 0; d < 3; ++d) {
        out.group_sums[size_t(RegressionGroup::Dimension)] += l1_penalty(diff[d]);
        sgn[d] = l1_penalty_derivative(diff[d]);
      }
      const double ey = k < 4 ? 0.0 : 1.0;
      const double sx = (k % 4 == 0 || k % 4 == 3) ? 1.0 : -1.0;
      const double sz = (k % 4 < 2) ? 1.0 : -1.0;
      out.grad[3] += sgn.dot(gt_rot * Eigen::Vector3d(0, -ey, 0)) * dh;
      out.grad[4] += sgn.dot(gt_rot * Eigen::Vector3d(0, 0, sz / 2)) * dw;
      out.grad[5] += sgn.dot(gt_rot * Eigen::Vector3d(sx / 2, 0, 0)) * dl;
    }
  }

  // Orientation group: yaw from the predicted angle through the ground-truth
  // location.
  {
    const double theta = wrap_angle(std::atan2(raw[6], raw[7]) - kPi<double> / 2 +
                                    std::atan2(gt.position.x(), gt.position.z()));
    const Eigen::Matrix3d rot = yaw_rotation(theta);
    const Eigen::Matrix3d drot = yaw_rotation_derivative(theta);
    const double ds = yaw_derivative_scale_s(raw[6], raw[7]);
    const double dc = yaw_derivative_scale_c(raw[6], raw[7]);
    for (int k = 0; k < 8; ++k) {
      const Eigen::Vector3d diff = rot * gt_offsets.col(k) + gt.position - gt_corners.col(k);
      Eigen::Vector3d sgn;
      for (int d = 0; d < 3; ++d) {
        out.group_sums[size_t(RegressionGroup::Orientation)] += l1_penalty(diff[d]);
        sgn[d] = l1_penalty_derivative(diff[d]);
      }
      const double dtheta = sgn.dot(drot * gt_offsets.col(k));
      out.grad[6] += dtheta * ds;
      out.grad[7] += dtheta * dc;
    }
  }
  return out;
}

/// All-predicted corner construction, single unified term (reported in the
/// orientation slot), with either absolute or smooth penalties.
ObjectRegression plain_regression(const Eigen::Matrix<double, 8, 1>& raw,
                                  const EncodedObject& obj, const LiftContext& ctx,
                                  bool smooth, double tau) {
  ObjectRegression out;
  const Box3d& gt = obj.box;
  const CornerSetd gt_corners = box_corners(gt);

  const LocationLift lift = lift_location(ctx, raw[0], raw[1], raw[2]);
  const Eigen::Vector3d dims = decode_dims<double>(
      {dim_activation(raw[3]), dim_activation(raw[4]), dim_activation(raw[5])},
      ctx.stats.mean_dims());
  const double dh = dims[0] * dim_activation_derivative(raw[3]);
  const double dw = dims[1] * dim_activation_derivative(raw[4]);
  const double dl = dims[2] * dim_activation_derivative(raw[5]);
  const Eigen::Vector3d position = lift.center + Eigen::Vector3d(0, dims[0] / 2, 0);

  const double px = lift.center.x(), pz = lift.center.z();
  const double ray = std::atan2(px, pz);
  const double theta = wrap_angle(std::atan2(raw[6], raw[7]) - kPi<double> / 2 + ray);
  const Eigen::Matrix3d rot = yaw_rotation(theta);
  const Eigen::Matrix3d drot = yaw_rotation_derivative(theta);
  const CornerSetd offsets = corner_offsets(dims[0], dims[1], dims[2]);

  // theta depends on the lifted center through atan2(x, z).
  const double inv_r2 = 1.0 / (px * px + pz * pz);
  const auto dray = [&](const Eigen::Vector3d& dcenter) {
    return (pz * dcenter.x() - px * dcenter.z()) * inv_r2;
  };
  const double dtheta_dz = dray(lift.d_dz);
  const double dtheta_dxc = dray(lift.d_dxc);
  const double dtheta_dyc = dray(lift.d_dyc);
  const double dtheta_ds = yaw_derivative_scale_s(raw[6], raw[7]);
  const double dtheta_dc = yaw_derivative_scale_c(raw[6], raw[7]);

  for (int k = 0; k < 8; ++k) {
    const Eigen::Vector3d rotated = rot * offsets.col(k);
    const Eigen::Vector3d diff = rotated + position - gt_corners.col(k);
    Eigen::Vector3d sgn;
    for (int d = 0; d < 3; ++d) {
      out.group_sums[0] += smooth ? smooth_penalty(diff[d], tau) : l1_penalty(diff[d]);
      sgn[d] = smooth ? smooth_penalty_derivative(diff[d], tau) : l1_penalty_derivative(diff[d]);
    }
    const double via_theta = sgn.dot(drot * offsets.col(k));
    const double ey = k < 4 ? 0.0 : 1.0;
    const double sx = (k % 4 == 0 || k % 4 == 3) ? 1.0 : -1.0;
    const double sz = (k % 4 < 2) ? 1.0 : -1.0;
    out.grad[0] += sgn.dot(lift.d_dz) + via_theta * dtheta_dz;
    out.grad[1] += sgn.dot(lift.d_dxc) + via_theta * dtheta_dxc;
    out.grad[2] += sgn.dot(lift.d_dyc) + via_theta * dtheta_dyc;
    out.grad[3] += sgn.dot(rot * Eigen::Vector3d(0, -ey, 0) + Eigen::Vector3d(0, 0.5, 0)) * dh;
    out.grad[4] += sgn.dot(rot * Eigen::Vector3d(0, 0, sz / 2)) * dw;
    out.grad[5] += sgn.dot(rot * Eigen::Vector3d(sx / 2, 0, 0)) * dl;
    out.grad[6] += via_theta * dtheta_ds;
    out.grad[7] += via_theta * dtheta_dc;
  }
  return out;
}

ObjectRegression object_regression(const LossConfig& config,
                                   const Eigen::Matrix<double, 8, 1>& raw,
                                   const EncodedObject& obj, const LiftContext& ctx) {
  switch (config.variant) {
    case LossConfig::Variant::DisentangledL1:
      return disentangled_regression(raw, obj, ctx);
    case LossConfig::Variant::PlainL1:
      return plain_regression(raw, obj, ctx, false, config.smooth_l1_transition);
    case LossConfig::Variant::SmoothL1:
      return plain_regression(raw, obj, ctx, true, config.smooth_l1_transition);
  }
  throw std::invalid_argument("unknown loss variant");
}

LiftContext make_context(const CameraProjectiond& P, const ClassStatsEntry& stats, int stride,
                         const Eigen::Vector2d& keypoint) {
  LiftContext ctx;
  ctx.K = P.intrinsics();
  ctx.t = P.translation();
  ctx.stride = stride;
  ctx.stats = stats;
  ctx.cell_col = int(std::floor(keypoint.x() / stride));
  ctx.cell_row = int(std::floor(keypoint.y() / stride));
  return ctx;
}

}  // namespace

CornerSetd disentangled_corners(RegressionGroup group, const RegressionTuple& pred,
                                const Box3d& gt, const Eigen::Vector2d& gt_keypoint,
                                const CameraProjectiond& P, const ClassStatsEntry& stats,
                                int stride) {
  if (gt.position.z() <= 0) throw NonPositiveDepth("ground truth behind the camera");
  const LiftContext ctx = make_context(P, stats, stride, gt_keypoint);
  switch (group) {
    case RegressionGroup::Location: {
      const LocationLift lift = lift_location(ctx, pred.delta_z, pred.delta_xc, pred.delta_yc);
      Box3d box = gt;
      box.position = lift.center + Eigen::Vector3d(0, gt.h / 2, 0);
      return box_corners(box);
    }
    case RegressionGroup::Dimension: {
      const Eigen::Vector3d dims =
          decode_dims<double>({pred.delta_h, pred.delta_w, pred.delta_l}, stats.mean_dims());
      Box3d box = gt;
      box.h = dims[0];
      box.w = dims[1];
      box.l = dims[2];
      return box_corners(box);
    }
    case RegressionGroup::Orientation: {
      const double alpha_z =
          alpha_z_from_regressed(sincos_decode(pred.sin_alpha, pred.cos_alpha));
      Box3d box = gt;
      box.theta = alpha_to_theta(alpha_z, gt.position.x(), gt.position.z());
      return box_corners(box);
    }
  }
  throw std::invalid_argument("unknown regression group");
}

double corner_l1(const std::vector<CornerSetd>& pred, const std::vector<CornerSetd>& gt,
                 double lambda, int n_objects, const std::vector<bool>& valid) {
  if (pred.size() != gt.size()) throw ShapeMismatch("corner list lengths disagree");
  if (!valid.empty() && valid.size() != pred.size())
    throw ShapeMismatch("validity mask length disagrees");
  if (n_objects < 1) throw std::invalid_argument("n_objects must be >= 1");
  double sum = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (!valid.empty() && !valid[i]) continue;
    sum += (pred[i] - gt[i]).cwiseAbs().sum();
  }
  return lambda / n_objects * sum;
}

LossBreakdown total_loss(const Heatmap& pred_heatmap, const RegressionMap& pred_regmap_raw,
                         const TargetSet& targets, const CameraProjectiond& P,
                         const LossConfig& loss_config, const CodecConfig& codec_config,
                         Heatmap* grad_heatmap, RegressionMap* grad_regmap) {
  LossBreakdown out;
  out.cls = focal_loss(pred_heatmap, targets.heatmap, loss_config, grad_heatmap);
  if (grad_regmap) *grad_regmap = RegressionMap::zeros(pred_regmap_raw.rows(), pred_regmap_raw.cols());

  const int n = std::max<size_t>(1, targets.objects.size());
  const double scale = loss_config.lambda / n;
  for (const EncodedObject& obj : targets.objects) {
    if (!obj.regression_valid) continue;
    const LiftContext ctx =
        make_context(P, codec_config.class_stats[obj.class_id], codec_config.stride, obj.keypoint);
    const Eigen::Matrix<double, 8, 1> raw = pred_regmap_raw.at(obj.cell_row, obj.cell_col);
    const ObjectRegression reg = object_regression(loss_config, raw, obj, ctx);
    for (int g = 0; g < 3; ++g) out.reg_per_group[g] += scale * reg.group_sums[g];
    if (grad_regmap) {
      Eigen::Matrix<double, 8, 1> cur = grad_regmap->at(obj.cell_row, obj.cell_col);
      grad_regmap->set(obj.cell_row, obj.cell_col, cur + scale * reg.grad);
    }
  }
  out.total = out.cls + out.reg_per_group[0] + out.reg_per_group[1] + out.reg_per_group[2];
  if (!std::isfinite(out.total)) throw NonFiniteLoss();
  return out;
}

double grad_check(const std::function<double(const Eigen::VectorXd&)>& f,
                  const Eigen::VectorXd& x, const Eigen::VectorXd& analytic_grad,
                  double epsilon) {
  if (x.size() != analytic_grad.size()) throw ShapeMismatch("gradient size disagrees");
  double worst = 0;
  Eigen::VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + epsilon;
    const double fp = f(probe);
    probe[i] = x[i] - epsilon;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NonFiniteLoss();
    const double numeric = (fp - fm) / (2 * epsilon);
    const double denom = std::max(1e-8, std::abs(analytic_grad[i]) + std::abs(numeric));
    worst = std::max(worst, std::abs(analytic_grad[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace smoke
