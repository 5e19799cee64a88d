#pragma once

#include <array>
#include <functional>

#include "smoke/codec.hpp"

// Keypoint classification loss, the corner regression loss in its
// disentangled / plain / smooth variants, the channel activations applied to
// the raw regression outputs, and a finite-difference gradient checker.

namespace smoke {

struct LossConfig {
  double alpha = 2;   // focal exponent
  double beta = 4;    // penalty-reduction exponent
  double lambda = 1;  // regression scale
  enum class Variant { DisentangledL1, PlainL1, SmoothL1 };
  Variant variant = Variant::DisentangledL1;
  double prob_clamp = 1e-7;
  double smooth_l1_transition = 1.0;
};

/// Parameter groups of the multi-step corner construction, in reporting
/// order. The plain/smooth variants put their single unified term under
/// index 0 and leave the rest zero.
enum class RegressionGroup { Orientation = 0, Dimension = 1, Location = 2 };

struct LossBreakdown {
  double cls = 0;
  std::array<double, 3> reg_per_group{};
  double total = 0;
};

/// logistic(raw) - 1/2, confined to the open interval (-1/2, 1/2).
double dim_activation(double raw);
double dim_activation_derivative(double raw);

/// (raw_sin, raw_cos) scaled to unit length. Throws DegenerateVector when
/// the raw pair is numerically zero.
Eigen::Vector2d orient_activation(double raw_sin, double raw_cos);

/// Applies the channel-wise activations to a raw 8-vector: depth and the two
/// discretization offsets pass through, dimensions go through dim_activation,
/// the angle pair is normalized.
RegressionTuple activate_tuple(const Eigen::Matrix<double, 8, 1>& raw);
RegressionMap activate_regression_map(const RegressionMap& raw);

/// Penalty-reduced focal loss over the heatmap. When `grad` is non-null it
/// receives d loss / d pred (zero where the probability clamp is active).
double focal_loss(const Heatmap& pred, const Heatmap& target, const LossConfig& config,
                  Heatmap* grad = nullptr);

/// Corners built from the predicted values of exactly one parameter group
/// and ground truth for the other two. `pred` holds activated values;
/// `gt_keypoint` is the continuous projected 3D center in pixels.
CornerSetd disentangled_corners(RegressionGroup group, const RegressionTuple& pred,
                                const Box3d& gt, const Eigen::Vector2d& gt_keypoint,
                                const CameraProjectiond& P, const ClassStatsEntry& stats,
                                int stride);

/// (lambda / n_objects) * sum of |pred - gt| over all 24 coordinates of every
/// object; entries with valid = false contribute nothing.
double corner_l1(const std::vector<CornerSetd>& pred, const std::vector<CornerSetd>& gt,
                 double lambda, int n_objects, const std::vector<bool>& valid = {});

/// Classification plus per-group corner regression. Optional outputs:
/// d loss / d pred-probabilities and d loss / d raw regression channels
/// (nonzero only at target cells).
LossBreakdown total_loss(const Heatmap& pred_heatmap, const RegressionMap& pred_regmap_raw,
                         const TargetSet& targets, const CameraProjectiond& P,
                         const LossConfig& loss_config, const CodecConfig& codec_config,
                         Heatmap* grad_heatmap = nullptr, RegressionMap* grad_regmap = nullptr);

/// Central-difference check of an analytic gradient. Returns the maximum
/// relative error over coordinates, with |analytic| + |numeric| (floored at
/// 1e-8) as the denominator. Throws NonFiniteLoss if the function is not
/// finite at a probe point.
double grad_check(const std::function<double(const Eigen::VectorXd&)>& f,
                  const Eigen::VectorXd& x, const Eigen::VectorXd& analytic_grad,
                  double epsilon = 1e-5);

}  // namespace smoke
