#include "smoke/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace smoke {

void TrainConfig::validate() const {
  if (iterations < 1 || batch_size < 1) throw std::invalid_argument("empty training run");
  if (!(milestones[0] > 0 && milestones[0] < milestones[1] && milestones[1] < 1))
    throw std::invalid_argument("milestones must be strictly increasing in (0, 1)");
  if (learning_rate <= 0) throw std::invalid_argument("learning rate must be positive");
}

SceneSource training_stream(const SceneConfig& config, uint64_t seed) {
  return [config, seed](int iteration, int sample) {
    const uint64_t mixed =
        splitmix64(seed ^ splitmix64(uint64_t(iteration) * 0x10001ULL + uint64_t(sample)));
    return generate_scene(config, mixed);
  };
}

std::vector<Scene> heldout_scenes(const SceneConfig& config, uint64_t seed, int count) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (int i = 0; i < count; ++i)
    scenes.push_back(generate_scene(config, splitmix64(seed ^ 0x48454C44ULL) + uint64_t(i)));
  return scenes;
}

double evaluate_model(TinyModel& model, const std::vector<Scene>& scenes,
                      const SceneConfig& config, double iou_threshold) {
  const CodecConfig codec = config.codec();
  std::vector<std::vector<EvalDetection>> dets(scenes.size());
  std::vector<std::vector<EvalGroundTruth>> gts(scenes.size());
  for (size_t i = 0; i < scenes.size(); ++i) {
    auto [probs, raw] = model.forward(scenes[i].image);
    const RegressionMap activated = activate_regression_map(raw);
    for (const Detection& d : decode_detections(probs, activated, scenes[i].camera, codec))
      dets[i].push_back({d.box, d.box2d, d.score});
    for (const Box3d& box : scenes[i].objects) {
      EvalGroundTruth g;
      g.box = box;
      g.box2d = box2d_from_projection<double>(scenes[i].camera, box, config.image_w,
                                              config.image_h);
      gts[i].push_back(g);
    }
  }
  return average_precision(dets, gts, iou_fn_3d, iou_threshold, 40, std::nullopt).ap;
}

namespace {

struct Batch {
  std::vector<Scene> scenes;
  std::vector<TargetSet> targets;
};

Batch make_batch(const SceneSource& source, const CodecConfig& codec, int iteration,
                 int batch_size) {
  Batch batch;
  for (int s = 0; s < batch_size; ++s) {
    Scene scene = source(iteration, s);
    batch.targets.push_back(encode_targets(scene.objects, scene.camera, codec));
    batch.scenes.push_back(std::move(scene));
  }
  return batch;
}

/// Forward + loss (+ parameter gradients when `with_grad`) averaged over the
/// batch.
LossBreakdown batch_loss(TinyModel& model, const Batch& batch, const CodecConfig& codec,
                         const LossConfig& loss_config, bool with_grad) {
  LossBreakdown sum;
  for (size_t i = 0; i < batch.scenes.size(); ++i) {
    auto [probs, raw] = model.forward(batch.scenes[i].image);
    Heatmap grad_probs;
    RegressionMap grad_raw;
    const LossBreakdown item =
        total_loss(probs, raw, batch.targets[i], batch.scenes[i].camera, loss_config, codec,
                   with_grad ? &grad_probs : nullptr, with_grad ? &grad_raw : nullptr);
    if (with_grad) {
      const double inv = 1.0 / double(batch.scenes.size());
      for (auto& g : grad_probs.channels) g *= inv;
      for (auto& g : grad_raw.channels) g *= inv;
      model.backward(grad_probs, grad_raw);
    }
    sum.cls += item.cls;
    for (int g = 0; g < 3; ++g) sum.reg_per_group[g] += item.reg_per_group[g];
    sum.total += item.total;
  }
  const double inv = 1.0 / double(batch.scenes.size());
  sum.cls *= inv;
  for (int g = 0; g < 3; ++g) sum.reg_per_group[g] *= inv;
  sum.total *= inv;
  return sum;
}

/// Finite-difference spot check of the analytic parameter gradients on one
/// batch: `coords` parameters sampled across all blocks.
double gradient_gate(TinyModel& model, const Batch& batch, const CodecConfig& codec,
                     const LossConfig& loss_config, int coords, uint64_t seed) {
  model.zero_grads();
  batch_loss(model, batch, codec, loss_config, true);
  std::vector<ParamRef> params = model.parameters();

  int64_t total = 0;
  for (const ParamRef& p : params) total += p.size;
  std::mt19937_64 rng(splitmix64(seed ^ 0x47415445ULL));
  std::uniform_int_distribution<int64_t> pick(0, total - 1);

  std::vector<std::pair<int, int>> chosen;  // (block, offset)
  for (int i = 0; i < coords; ++i) {
    int64_t flat = pick(rng);
    for (size_t b = 0; b < params.size(); ++b) {
      if (flat < params[b].size) {
        chosen.emplace_back(int(b), int(flat));
        break;
      }
      flat -= params[b].size;
    }
  }

  Eigen::VectorXd x(chosen.size()), analytic(chosen.size());
  for (size_t i = 0; i < chosen.size(); ++i) {
    x[i] = params[chosen[i].first].value[chosen[i].second];
    analytic[i] = params[chosen[i].first].grad[chosen[i].second];
  }
  const auto f = [&](const Eigen::VectorXd& probe) {
    for (size_t i = 0; i < chosen.size(); ++i)
      params[chosen[i].first].value[chosen[i].second] = probe[i];
    const double value = batch_loss(model, batch, codec, loss_config, false).total;
    for (size_t i = 0; i < chosen.size(); ++i)
      params[chosen[i].first].value[chosen[i].second] = x[i];
    return value;
  };
  const double err = grad_check(f, x, analytic, 1e-5);
  model.zero_grads();
  return err;
}

}  // namespace

TrainLog train(TinyModel& model, const SceneSource& source, const SceneConfig& scene_config,
               const TrainConfig& config) {
  config.validate();
  const CodecConfig codec = scene_config.codec();
  LossConfig loss_config;
  loss_config.variant = config.variant;
  loss_config.lambda = config.lambda;

  TrainLog log;
  {
    const Batch gate_batch = make_batch(source, codec, 0, config.batch_size);
    log.gate_error = gradient_gate(model, gate_batch, codec, loss_config,
                                   config.gate_coordinates, config.seed);
    if (log.gate_error > config.gate_tolerance)
      throw GradientGateFailure("gradient gate failed: max relative error " +
                                std::to_string(log.gate_error));
  }

  std::vector<ParamRef> params = model.parameters();
  std::vector<Eigen::VectorXd> velocity(params.size());
  for (size_t i = 0; i < params.size(); ++i) velocity[i] = Eigen::VectorXd::Zero(params[i].size);

  const int m0 = int(std::floor(config.milestones[0] * config.iterations));
  const int m1 = int(std::floor(config.milestones[1] * config.iterations));

  std::vector<Scene> heldout;
  if (config.eval_interval > 0 || config.eval_scenes > 0)
    heldout = heldout_scenes(scene_config, config.seed, config.eval_scenes);

  for (int iter = 0; iter < config.iterations; ++iter) {
    double lr = config.learning_rate;
    if (iter >= m0) lr *= config.milestone_decay;
    if (iter >= m1) lr *= config.milestone_decay;

    const Batch batch = make_batch(source, codec, iter, config.batch_size);
    model.zero_grads();
    LossBreakdown loss;
    try {
      loss = batch_loss(model, batch, codec, loss_config, true);
    } catch (const NonFiniteLoss&) {
      throw NonFiniteLoss("non-finite loss at iteration " + std::to_string(iter));
    }

    for (size_t i = 0; i < params.size(); ++i) {
      Eigen::Map<Eigen::VectorXd> value(params[i].value, params[i].size);
      Eigen::Map<const Eigen::VectorXd> grad(params[i].grad, params[i].size);
      velocity[i] = config.momentum * velocity[i] - lr * grad;
      value += velocity[i];
    }
    log.iterations.push_back({loss, lr});

    const bool last = iter + 1 == config.iterations;
    if ((config.eval_interval > 0 && (iter + 1) % config.eval_interval == 0) ||
        (last && !heldout.empty())) {
      EvalSnapshot snap;
      snap.iteration = iter + 1;
      snap.ap_3d_025 = evaluate_model(model, heldout, scene_config, 0.25);
      snap.ap_3d_050 = evaluate_model(model, heldout, scene_config, 0.50);
      log.snapshots.push_back(snap);
    }
  }
  return log;
}

double AblationTable::mean_ap_025(LossConfig::Variant variant) const {
  double sum = 0;
  int n = 0;
  for (const AblationRow& row : rows)
    if (row.variant == variant) {
      sum += row.ap_3d_025;
      ++n;
    }
  return n > 0 ? sum / n : 0;
}

AblationTable ablate(const std::vector<LossConfig::Variant>& variants,
                     const std::vector<uint64_t>& seeds, const SceneConfig& scene_config,
                     const TrainConfig& base_config) {
  if (seeds.size() < 3) throw std::invalid_argument("ablation needs at least 3 seeds");
  AblationTable table;
  for (const LossConfig::Variant variant : variants) {
    for (const uint64_t seed : seeds) {
      TrainConfig config = base_config;
      config.variant = variant;
      config.seed = seed;
      TinyModel model({scene_config.image_w, scene_config.image_h, scene_config.num_classes},
                      seed);
      const auto start = std::chrono::steady_clock::now();
      const TrainLog log = train(model, training_stream(scene_config, seed), scene_config, config);
      const auto stop = std::chrono::steady_clock::now();
      AblationRow row;
      row.variant = variant;
      row.seed = seed;
      if (!log.snapshots.empty()) {
        row.ap_3d_025 = log.snapshots.back().ap_3d_025;
        row.ap_3d_050 = log.snapshots.back().ap_3d_050;
      }
      row.train_seconds = std::chrono::duration<double>(stop - start).count();
      table.rows.push_back(row);
    }
  }
  return table;
}

std::string variant_name(LossConfig::Variant variant) {
  switch (variant) {
    case LossConfig::Variant::DisentangledL1:
      return "disentangled_l1";
    case LossConfig::Variant::PlainL1:
      return "plain_l1";
    case LossConfig::Variant::SmoothL1:
      return "smooth_l1";
  }
  return "unknown";
}

std::string format_train_log(const TrainLog& log) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "gate_error %.3e\n", log.gate_error);
  os << buf;
  for (size_t i = 0; i < log.iterations.size(); ++i) {
    const IterationRecord& rec = log.iterations[i];
    std::snprintf(buf, sizeof(buf),
                  "iter %zu lr %.6e cls %.6f reg_orient %.6f reg_dim %.6f reg_loc %.6f "
                  "total %.6f\n",
                  i, rec.learning_rate, rec.loss.cls, rec.loss.reg_per_group[0],
                  rec.loss.reg_per_group[1], rec.loss.reg_per_group[2], rec.loss.total);
    os << buf;
  }
  for (const EvalSnapshot& snap : log.snapshots) {
    std::snprintf(buf, sizeof(buf), "eval iter %d ap_3d_0.25 %.4f ap_3d_0.50 %.4f\n",
                  snap.iteration, snap.ap_3d_025, snap.ap_3d_050);
    os << buf;
  }
  return os.str();
}

std::string format_ablation_table(const AblationTable& table) {
  std::ostringstream os;
  os << "variant seed ap_3d_0.25 ap_3d_0.50 train_seconds\n";
  char buf[160];
  for (const AblationRow& row : table.rows) {
    std::snprintf(buf, sizeof(buf), "%s %llu %.4f %.4f %.1f\n", variant_name(row.variant).c_str(),
                  static_cast<unsigned long long>(row.seed), row.ap_3d_025, row.ap_3d_050,
                  row.train_seconds);
    os << buf;
  }
  for (const LossConfig::Variant v :
       {LossConfig::Variant::DisentangledL1, LossConfig::Variant::PlainL1,
        LossConfig::Variant::SmoothL1}) {
    bool present = false;
    for (const AblationRow& row : table.rows) present = present || row.variant == v;
    if (!present) continue;
    std::snprintf(buf, sizeof(buf), "mean %s ap_3d_0.25 %.4f\n", variant_name(v).c_str(),
                  table.mean_ap_025(v));
    os << buf;
  }
  return os.str();
}

}  // namespace smoke
