#include "smoke/model.hpp"

#include <cmath>
#include <fstream>

namespace smoke {

Conv2d::Conv2d(std::string name, int in_ch, int out_ch, int ksize, int stride)
    : name_(std::move(name)),
      in_ch_(in_ch),
      out_ch_(out_ch),
      ksize_(ksize),
      stride_(stride),
      pad_(ksize / 2) {
  weight = Eigen::MatrixXd::Zero(out_ch, in_ch * ksize * ksize);
  bias = Eigen::VectorXd::Zero(out_ch);
  wgrad = Eigen::MatrixXd::Zero(weight.rows(), weight.cols());
  bgrad = Eigen::VectorXd::Zero(out_ch);
}

void Conv2d::init_he(std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(weight.cols())));
  for (Eigen::Index r = 0; r < weight.rows(); ++r)
    for (Eigen::Index c = 0; c < weight.cols(); ++c) weight(r, c) = dist(rng);
}

void Conv2d::collect(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".weight", weight.data(), wgrad.data(), int(weight.size())});
  out.push_back({name_ + ".bias", bias.data(), bgrad.data(), int(bias.size())});
}

void Conv2d::zero_grad() {
  wgrad.setZero();
  bgrad.setZero();
}

Tensor Conv2d::forward(const Tensor& in) {
  if (int(in.size()) != in_ch_) throw ShapeMismatch("conv input channel count");
  in_h_ = int(in[0].rows());
  in_w_ = int(in[0].cols());
  out_h_ = (in_h_ + 2 * pad_ - ksize_) / stride_ + 1;
  out_w_ = (in_w_ + 2 * pad_ - ksize_) / stride_ + 1;
  const int patches = out_h_ * out_w_;

  col_.resize(in_ch_ * ksize_ * ksize_, patches);
  col_.setZero();
  for (int c = 0; c < in_ch_; ++c) {
    const Eigen::MatrixXd& src = in[c];
    for (int ky = 0; ky < ksize_; ++ky) {
      for (int kx = 0; kx < ksize_; ++kx) {
        const int row = (c * ksize_ + ky) * ksize_ + kx;
        for (int oy = 0; oy < out_h_; ++oy) {
          const int iy = oy * stride_ + ky - pad_;
          if (iy < 0 || iy >= in_h_) continue;
          for (int ox = 0; ox < out_w_; ++ox) {
            const int ix = ox * stride_ + kx - pad_;
            if (ix < 0 || ix >= in_w_) continue;
            col_(row, oy * out_w_ + ox) = src(iy, ix);
          }
        }
      }
    }
  }

  Eigen::MatrixXd out_mat = weight * col_;
  out_mat.colwise() += bias;
  Tensor out(out_ch_, Eigen::MatrixXd(out_h_, out_w_));
  for (int c = 0; c < out_ch_; ++c)
    for (int p = 0; p < patches; ++p) out[c](p / out_w_, p % out_w_) = out_mat(c, p);
  return out;
}

Tensor Conv2d::backward(const Tensor& dout) {
  const int patches = out_h_ * out_w_;
  Eigen::MatrixXd dout_mat(out_ch_, patches);
  for (int c = 0; c < out_ch_; ++c)
    for (int p = 0; p < patches; ++p) dout_mat(c, p) = dout[c](p / out_w_, p % out_w_);

  wgrad.noalias() += dout_mat * col_.transpose();
  bgrad.noalias() += dout_mat.rowwise().sum();

  const Eigen::MatrixXd dcol = weight.transpose() * dout_mat;
  Tensor din(in_ch_, Eigen::MatrixXd::Zero(in_h_, in_w_));
  for (int c = 0; c < in_ch_; ++c) {
    for (int ky = 0; ky < ksize_; ++ky) {
      for (int kx = 0; kx < ksize_; ++kx) {
        const int row = (c * ksize_ + ky) * ksize_ + kx;
        for (int oy = 0; oy < out_h_; ++oy) {
          const int iy = oy * stride_ + ky - pad_;
          if (iy < 0 || iy >= in_h_) continue;
          for (int ox = 0; ox < out_w_; ++ox) {
            const int ix = ox * stride_ + kx - pad_;
            if (ix < 0 || ix >= in_w_) continue;
            din[c](iy, ix) += dcol(row, oy * out_w_ + ox);
          }
        }
      }
    }
  }
  return din;
}

GroupNorm::GroupNorm(std::string name, int channels, double eps)
    : name_(std::move(name)),
      channels_(channels),
      groups_(channels < 32 ? 16 : 32),
      eps_(eps) {
  if (channels_ % groups_ != 0) throw ShapeMismatch("channels must divide into groups");
  gamma = Eigen::VectorXd::Ones(channels);
  beta = Eigen::VectorXd::Zero(channels);
  ggrad = Eigen::VectorXd::Zero(channels);
  bgrad = Eigen::VectorXd::Zero(channels);
}

void GroupNorm::collect(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".gamma", gamma.data(), ggrad.data(), int(gamma.size())});
  out.push_back({name_ + ".beta", beta.data(), bgrad.data(), int(beta.size())});
}

void GroupNorm::zero_grad() {
  ggrad.setZero();
  bgrad.setZero();
}

Tensor GroupNorm::forward(const Tensor& in) {
  if (int(in.size()) != channels_) throw ShapeMismatch("norm channel count");
  const int per_group = channels_ / groups_;
  xhat_.assign(channels_, Eigen::MatrixXd());
  inv_std_.assign(groups_, 0.0);
  Tensor out(channels_);
  for (int g = 0; g < groups_; ++g) {
    double mean = 0;
    long count = 0;
    for (int c = g * per_group; c < (g + 1) * per_group; ++c) {
      mean += in[c].sum();
      count += in[c].size();
    }
    mean /= double(count);
    double var = 0;
    for (int c = g * per_group; c < (g + 1) * per_group; ++c)
      var += (in[c].array() - mean).square().sum();
    var /= double(count);
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[g] = inv;
    for (int c = g * per_group; c < (g + 1) * per_group; ++c) {
      xhat_[c] = ((in[c].array() - mean) * inv).matrix();
      out[c] = (xhat_[c].array() * gamma[c] + beta[c]).matrix();
    }
  }
  return out;
}

Tensor GroupNorm::backward(const Tensor& dout) {
  const int per_group = channels_ / groups_;
  Tensor din(channels_);
  for (int g = 0; g < groups_; ++g) {
    double sum_dxhat = 0, sum_dxhat_xhat = 0;
    long count = 0;
    for (int c = g * per_group; c < (g + 1) * per_group; ++c) {
      ggrad[c] += (dout[c].array() * xhat_[c].array()).sum();
      bgrad[c] += dout[c].sum();
      sum_dxhat += gamma[c] * dout[c].sum();
      sum_dxhat_xhat += gamma[c] * (dout[c].array() * xhat_[c].array()).sum();
      count += dout[c].size();
    }
    const double mean_dxhat = sum_dxhat / double(count);
    const double mean_dxhat_xhat = sum_dxhat_xhat / double(count);
    for (int c = g * per_group; c < (g + 1) * per_group; ++c) {
      din[c] = (inv_std_[g] *
                (gamma[c] * dout[c].array() - mean_dxhat - xhat_[c].array() * mean_dxhat_xhat))
                   .matrix();
    }
  }
  return din;
}

Tensor Relu::forward(const Tensor& in) {
  mask_.resize(in.size());
  Tensor out(in.size());
  for (size_t c = 0; c < in.size(); ++c) {
    mask_[c] = (in[c].array() > 0).cast<double>().matrix();
    out[c] = in[c].cwiseMax(0.0);
  }
  return out;
}

Tensor Relu::backward(const Tensor& dout) {
  Tensor din(dout.size());
  for (size_t c = 0; c < dout.size(); ++c) din[c] = dout[c].cwiseProduct(mask_[c]);
  return din;
}

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kClsBiasPrior = -2.19;  // starts scores near 0.1

}  // namespace

TinyModel::TinyModel(const ModelConfig& config, uint64_t init_seed) : config_(config) {
  const auto stage = [](const std::string& name, int in_ch, int out_ch, int stride) {
    Stage s;
    s.conv = std::make_unique<Conv2d>(name, in_ch, out_ch, 3, stride);
    s.norm = std::make_unique<GroupNorm>(name + ".norm", out_ch);
    s.relu = std::make_unique<Relu>();
    return s;
  };
  trunk_.push_back(stage("trunk0", 3, 16, 2));
  trunk_.push_back(stage("trunk1", 16, 16, 1));
  trunk_.push_back(stage("trunk2", 16, 32, 2));
  trunk_.push_back(stage("trunk3", 32, 32, 1));
  trunk_.push_back(stage("trunk4", 32, 32, 1));
  cls_head_.push_back(stage("cls0", 32, 32, 1));
  cls_proj_ = std::make_unique<Conv2d>("cls_proj", 32, config.num_classes, 1, 1);
  reg_head_.push_back(stage("reg0", 32, 32, 1));
  reg_proj_ = std::make_unique<Conv2d>("reg_proj", 32, 8, 1, 1);

  std::mt19937_64 rng(splitmix64(init_seed));
  for (auto& s : trunk_) s.conv->init_he(rng);
  for (auto& s : cls_head_) s.conv->init_he(rng);
  for (auto& s : reg_head_) s.conv->init_he(rng);
  cls_proj_->init_he(rng);
  reg_proj_->init_he(rng);
  cls_proj_->bias.setConstant(kClsBiasPrior);
  reg_proj_->bias.setZero();
  reg_proj_->bias[7] = 1.0;  // cos channel prior: zero observation angle
}

Tensor TinyModel::run_stages(std::vector<Stage>& stages, const Tensor& in) {
  Tensor x = in;
  for (auto& s : stages) x = s.relu->forward(s.norm->forward(s.conv->forward(x)));
  return x;
}

Tensor TinyModel::run_stages_backward(std::vector<Stage>& stages, const Tensor& dout) {
  Tensor d = dout;
  for (auto it = stages.rbegin(); it != stages.rend(); ++it)
    d = it->conv->backward(it->norm->backward(it->relu->backward(d)));
  return d;
}

std::pair<Heatmap, RegressionMap> TinyModel::forward(const ImageRgb& image) {
  if (image.width() != config_.image_w || image.height() != config_.image_h ||
      image.width() % 4 != 0 || image.height() % 4 != 0)
    throw ShapeMismatch("image size disagrees with the model config");
  const Tensor features = run_stages(trunk_, image.channels);
  const Tensor cls_feat = run_stages(cls_head_, features);
  const Tensor cls_logits = cls_proj_->forward(cls_feat);
  const Tensor reg_feat = run_stages(reg_head_, features);
  const Tensor reg_out = reg_proj_->forward(reg_feat);

  probs_ = Heatmap::zeros(int(cls_logits[0].rows()), int(cls_logits[0].cols()),
                          config_.num_classes);
  for (int c = 0; c < config_.num_classes; ++c)
    probs_.channels[c] = cls_logits[size_t(c)].unaryExpr([](double v) { return logistic(v); });

  RegressionMap reg;
  reg.channels.assign(reg_out.begin(), reg_out.end());
  return {probs_, reg};
}

void TinyModel::backward(const Heatmap& dprobs, const RegressionMap& draw) {
  Tensor dlogits(config_.num_classes);
  for (int c = 0; c < config_.num_classes; ++c) {
    const Eigen::ArrayXXd p = probs_.channels[c].array();
    dlogits[c] = (dprobs.channels[c].array() * p * (1.0 - p)).matrix();
  }
  const Tensor d_cls_feat = cls_proj_->backward(dlogits);
  Tensor d_features = run_stages_backward(cls_head_, d_cls_feat);

  Tensor dreg(draw.channels.begin(), draw.channels.end());
  const Tensor d_reg_feat = reg_proj_->backward(dreg);
  const Tensor d_features_reg = run_stages_backward(reg_head_, d_reg_feat);
  for (size_t c = 0; c < d_features.size(); ++c) d_features[c] += d_features_reg[c];

  run_stages_backward(trunk_, d_features);
}

std::vector<ParamRef> TinyModel::parameters() {
  std::vector<ParamRef> out;
  for (auto& s : trunk_) {
    s.conv->collect(out);
    s.norm->collect(out);
  }
  for (auto& s : cls_head_) {
    s.conv->collect(out);
    s.norm->collect(out);
  }
  cls_proj_->collect(out);
  for (auto& s : reg_head_) {
    s.conv->collect(out);
    s.norm->collect(out);
  }
  reg_proj_->collect(out);
  return out;
}

void TinyModel::zero_grads() {
  for (auto& s : trunk_) {
    s.conv->zero_grad();
    s.norm->zero_grad();
  }
  for (auto& s : cls_head_) {
    s.conv->zero_grad();
    s.norm->zero_grad();
  }
  cls_proj_->zero_grad();
  for (auto& s : reg_head_) {
    s.conv->zero_grad();
    s.norm->zero_grad();
  }
  reg_proj_->zero_grad();
}

int64_t TinyModel::parameter_count() {
  int64_t n = 0;
  for (const ParamRef& p : parameters()) n += p.size;
  return n;
}

namespace {

constexpr uint32_t kCheckpointMagic = 0x4B434D53;  // "SMCK"
constexpr uint32_t kCheckpointVersion = 1;

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

void write_string(std::ostream& os, const std::string& s) {
  write_raw(os, uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

std::string read_string(std::istream& is) {
  const uint32_t n = read_raw<uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

ModelConfig read_header(std::istream& is, const std::string& path) {
  if (read_raw<uint32_t>(is) != kCheckpointMagic) throw IoError("bad magic in " + path);
  if (read_raw<uint32_t>(is) != kCheckpointVersion)
    throw IoError("unsupported checkpoint version in " + path);
  ModelConfig config;
  config.image_w = read_raw<int32_t>(is);
  config.image_h = read_raw<int32_t>(is);
  config.num_classes = read_raw<int32_t>(is);
  return config;
}

}  // namespace

void save_checkpoint(const std::string& path, TinyModel& model, const ModelConfig& config) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_raw(os, kCheckpointMagic);
  write_raw(os, kCheckpointVersion);
  write_raw(os, int32_t(config.image_w));
  write_raw(os, int32_t(config.image_h));
  write_raw(os, int32_t(config.num_classes));
  const std::vector<ParamRef> params = model.parameters();
  write_raw(os, uint32_t(params.size()));
  for (const ParamRef& p : params) {
    write_string(os, p.name);
    write_raw(os, uint64_t(p.size));
    os.write(reinterpret_cast<const char*>(p.value), std::streamsize(p.size * sizeof(double)));
  }
  if (!os) throw IoError("write failed: " + path);
}

ModelConfig load_checkpoint(const std::string& path, TinyModel* model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  const ModelConfig config = read_header(is, path);
  const uint32_t count = read_raw<uint32_t>(is);
  std::vector<ParamRef> params = model->parameters();
  if (count != params.size()) throw IoError("parameter table size disagrees in " + path);
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = read_string(is);
    const uint64_t size = read_raw<uint64_t>(is);
    if (name != params[i].name || size != uint64_t(params[i].size))
      throw IoError("parameter block mismatch at '" + name + "' in " + path);
    is.read(reinterpret_cast<char*>(params[i].value), std::streamsize(size * sizeof(double)));
  }
  if (!is) throw IoError("truncated checkpoint: " + path);
  return config;
}

ModelConfig peek_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  return read_header(is, path);
}

}  // namespace smoke
