#pragma once

#include <memory>
#include <string>
#include <vector>

#include "smoke/codec.hpp"

// A small stride-4 convolutional backbone with the two-head layout
// (per-class keypoint scores through a logistic squash, 8 raw regression
// channels) and hand-written backpropagation. Group-style normalization uses
// 32 groups, or 16 when a stage has fewer than 32 channels.

namespace smoke {

using Tensor = std::vector<Eigen::MatrixXd>;

struct ParamRef {
  std::string name;
  double* value;
  double* grad;
  int size;
};

class Conv2d {
 public:
  Conv2d(std::string name, int in_ch, int out_ch, int ksize, int stride);

  Tensor forward(const Tensor& in);
  Tensor backward(const Tensor& dout);
  void init_he(std::mt19937_64& rng);
  void collect(std::vector<ParamRef>& out);
  void zero_grad();

  Eigen::MatrixXd weight;  // out_ch x (in_ch * k * k)
  Eigen::VectorXd bias;
  Eigen::MatrixXd wgrad;
  Eigen::VectorXd bgrad;

 private:
  std::string name_;
  int in_ch_, out_ch_, ksize_, stride_, pad_;
  int in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
  Eigen::MatrixXd col_;  // cached unfolded input
};

class GroupNorm {
 public:
  GroupNorm(std::string name, int channels, double eps = 1e-5);

  Tensor forward(const Tensor& in);
  Tensor backward(const Tensor& dout);
  void collect(std::vector<ParamRef>& out);
  void zero_grad();

  int groups() const { return groups_; }

  Eigen::VectorXd gamma, beta;
  Eigen::VectorXd ggrad, bgrad;

 private:
  std::string name_;
  int channels_, groups_;
  double eps_;
  Tensor xhat_;
  std::vector<double> inv_std_;  // per group
};

class Relu {
 public:
  Tensor forward(const Tensor& in);
  Tensor backward(const Tensor& dout);

 private:
  Tensor mask_;
};

struct ModelConfig {
  int image_w = 96, image_h = 96;
  int num_classes = 1;
};

/// Backbone: three conv/norm/relu stages at full, half and quarter
/// resolution (two stride-2 downsamples), two refinement stages at stride 4,
/// then one 3x3 conv + norm + 1x1 projection per head.
class TinyModel {
 public:
  TinyModel(const ModelConfig& config, uint64_t init_seed);

  /// Heatmap probabilities (logistic of the class logits) and the raw
  /// regression map.
  std::pair<Heatmap, RegressionMap> forward(const ImageRgb& image);

  /// Consumes d loss / d heatmap-probabilities and d loss / d raw regression
  /// channels; parameter gradients accumulate across calls until zero_grads.
  void backward(const Heatmap& dprobs, const RegressionMap& draw);

  std::vector<ParamRef> parameters();
  void zero_grads();
  int64_t parameter_count();

  const ModelConfig& config() const { return config_; }

 private:
  struct Stage {
    std::unique_ptr<Conv2d> conv;
    std::unique_ptr<GroupNorm> norm;
    std::unique_ptr<Relu> relu;
  };

  Tensor run_stages(std::vector<Stage>& stages, const Tensor& in);
  Tensor run_stages_backward(std::vector<Stage>& stages, const Tensor& dout);

  ModelConfig config_;
  std::vector<Stage> trunk_;
  std::vector<Stage> cls_head_;
  std::unique_ptr<Conv2d> cls_proj_;
  std::vector<Stage> reg_head_;
  std::unique_ptr<Conv2d> reg_proj_;
  Heatmap probs_;  // cached for the logistic backward
};

void save_checkpoint(const std::string& path, TinyModel& model, const ModelConfig& config);
/// Restores weights into a model built with a matching config; throws
/// IoError on mismatch.
ModelConfig load_checkpoint(const std::string& path, TinyModel* model);
/// Reads just the config echo so a caller can build the model first.
ModelConfig peek_checkpoint(const std::string& path);

}  // namespace smoke
