#include "mmfusion/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mmfusion/error.hpp"
#include "mmfusion/io.hpp"

namespace mmfusion {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw ValidationError("config: lr must be positive");
  if (!(plateau_factor > 0 && plateau_factor < 1)) throw ValidationError("config: plateau_factor must lie in (0, 1)");
  if (batch_size < 1) throw ValidationError("config: batch_size must be at least 1");
  if (plateau_patience < 1) throw ValidationError("config: plateau_patience must be at least 1");
  if (!(weight_decay >= 0)) throw ValidationError("config: weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ValidationError("config: betas must lie in [0, 1)");
  if (!(eps > 0)) throw ValidationError("config: eps must be positive");
  if (!(grad_clip >= 0)) throw ValidationError("config: grad_clip must be non-negative");
  if (hidden < 1 || attn < 1) throw ValidationError("config: hidden and attn must be at least 1");
}

json config_to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"plateau_patience", c.plateau_patience},
          {"plateau_factor", c.plateau_factor},
          {"seed", c.seed},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"optimizer", c.optimizer == OptimizerKind::AdamW ? "adamw" : "sgd"},
          {"grad_clip", c.grad_clip},
          {"hidden", c.hidden},
          {"attn", c.attn}};
}

TrainConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("config: expected a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "lr") c.lr = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "max_epochs") c.max_epochs = value.get<std::size_t>();
      else if (key == "plateau_patience") c.plateau_patience = value.get<std::size_t>();
      else if (key == "plateau_factor") c.plateau_factor = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "eps") c.eps = value.get<double>();
      else if (key == "grad_clip") c.grad_clip = value.get<double>();
      else if (key == "hidden") c.hidden = value.get<std::size_t>();
      else if (key == "attn") c.attn = value.get<std::size_t>();
      else if (key == "optimizer") {
        const auto name = value.get<std::string>();
        if (name == "adamw") c.optimizer = OptimizerKind::AdamW;
        else if (name == "sgd") c.optimizer = OptimizerKind::Sgd;
        else throw ValidationError("config: unknown optimizer '" + name + "'");
      } else {
        throw ValidationError("config: unknown key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

OptimizerState OptimizerState::init(std::size_t param_count, const TrainConfig& config) {
  OptimizerState s;
  s.m.assign(param_count, 0.0);
  s.v.assign(param_count, 0.0);
  s.current_lr = config.lr;
  return s;
}

LossAndGrad cross_entropy(std::span<const double> logits, int label) {
  if (logits.size() != kNumClasses) throw ValidationError("cross_entropy: expected 8 logits");
  if (label < 0 || label >= static_cast<int>(kNumClasses)) {
    throw ValidationError("cross_entropy: label " + std::to_string(label) + " out of range");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double log_z = mx + std::log(sum);
  LossAndGrad out;
  out.loss = log_z - logits[static_cast<std::size_t>(label)];
  for (std::size_t i = 0; i < kNumClasses; ++i) out.grad[i] = std::exp(logits[i] - log_z);
  out.grad[static_cast<std::size_t>(label)] -= 1.0;
  return out;
}

namespace {

void check_step_shapes(std::span<double> params, std::span<const double> grads, const OptimizerState& s) {
  if (params.size() != grads.size() || s.m.size() != params.size() || s.v.size() != params.size()) {
    throw ValidationError("optimizer: " + std::to_string(params.size()) + " parameters, " +
                          std::to_string(grads.size()) + " gradients, " + std::to_string(s.m.size()) +
                          " moment slots");
  }
}

}  // namespace

void adamw_step(std::span<double> params, std::span<const double> grads, OptimizerState& s, const TrainConfig& c) {
  check_step_shapes(params, grads, s);
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const double lr = s.current_lr;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * g;
    s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g * g;
    const double m_hat = s.m[i] / bc1;
    const double v_hat = s.v[i] / bc2;
    params[i] -= lr * (m_hat / (std::sqrt(v_hat) + c.eps) + c.weight_decay * params[i]);
  }
}

void sgd_step(std::span<double> params, std::span<const double> grads, OptimizerState& s, const TrainConfig& c) {
  check_step_shapes(params, grads, s);
  ++s.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] -= s.current_lr * (grads[i] + c.weight_decay * params[i]);
  }
}

void optimizer_step(std::span<double> params, std::span<const double> grads, OptimizerState& s,
                    const TrainConfig& c) {
  if (c.optimizer == OptimizerKind::AdamW) {
    adamw_step(params, grads, s, c);
  } else {
    sgd_step(params, grads, s, c);
  }
}

void plateau_update(OptimizerState& s, double val_f1, const TrainConfig& c) {
  if (val_f1 > s.plateau.best_f1) {
    s.plateau.best_f1 = val_f1;
    s.plateau.epochs_since_improve = 0;
    return;
  }
  if (++s.plateau.epochs_since_improve >= c.plateau_patience) {
    s.current_lr *= c.plateau_factor;
    s.plateau.epochs_since_improve = 0;
  }
}

WindowSet::WindowSet(const std::vector<VideoRecord>& videos, WindowOptions options, std::size_t stride)
    : options_(options) {
  gridded_.reserve(videos.size());
  for (const auto& v : videos) gridded_.push_back(resample_video(v));
  for (std::size_t i = 0; i < gridded_.size(); ++i) {
    const auto& v = gridded_[i];
    for (double t : window_times(v, stride)) {
      refs_.emplace_back(i, t);
      labels_.push_back(v.annotations.labels[static_cast<std::size_t>(std::llround(t * v.fps))]);
    }
  }
}

AlignedWindow WindowSet::at(std::size_t i) const {
  const auto& [video, t] = refs_.at(i);
  return build_window(gridded_[video], t, options_);
}

std::vector<std::string> WindowSet::video_ids() const {
  std::vector<std::string> out;
  for (const auto& v : gridded_) out.push_back(v.id);
  return out;
}

WindowSet WindowSet::subset(std::span<const std::size_t> indices) const {
  WindowSet out;
  out.gridded_ = gridded_;
  out.options_ = options_;
  for (std::size_t i : indices) {
    out.refs_.push_back(refs_.at(i));
    out.labels_.push_back(labels_[i]);
  }
  return out;
}

std::vector<int> predict_all(const WindowSet& windows, const FusionParams& params) {
  std::vector<int> preds(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) preds[i] = predict(windows.at(i), params);
  return preds;
}

EvalReport evaluate(const WindowSet& windows, const FusionParams& params) {
  return evaluate_predictions(predict_all(windows, params), windows.labels());
}

namespace {

void clip_gradients(std::span<double> g, double max_norm) {
  if (max_norm <= 0) return;
  const double norm = std::sqrt(std::inner_product(g.begin(), g.end(), g.begin(), 0.0));
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& x : g) x *= scale;
  }
}

}  // namespace

TrainResult train_windows(const WindowSet& train_set, const WindowSet& val_set, const FeatureDims& dims,
                          const TrainConfig& config, FusionMode mode, const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.empty()) throw ValidationError("train: no training windows");
  if (val_set.empty()) throw ValidationError("train: no validation windows");

  const ModelDims mdims = model_dims(dims, config.hidden, config.attn);
  Rng init_rng(config.seed);
  FusionParams params = FusionParams::init(mdims, mode, init_rng);
  TrainResult result{params, {}, 0};
  OptimizerState opt = OptimizerState::init(params.values().size(), config);
  FusionGrads grads(params);
  double best_val = -std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = Rng::derive(config.seed, epoch);
    shuffle(order, shuffle_rng);

    const double epoch_lr = opt.current_lr;
    double loss_sum = 0.0;
    ForwardCache cache;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      grads.set_zero();
      for (std::size_t k = start; k < end; ++k) {
        const AlignedWindow w = train_set.at(order[k]);
        const auto logits = forward(w, params, &cache);
        const LossAndGrad lg = cross_entropy(logits, w.label);
        loss_sum += lg.loss;
        backward_accumulate(cache, params, lg.grad, grads);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (double& g : grads.values()) g *= inv;
      clip_gradients(grads.values(), config.grad_clip);
      optimizer_step(params.values(), grads.values(), opt, config);
      if (!all_finite(params.values())) {
        throw NumericError("train: parameters became non-finite in epoch " + std::to_string(epoch));
      }
    }

    const EvalReport val = evaluate(val_set, params);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(order.size()), val.macro_f1.value_or(0.0), epoch_lr};
    result.history.push_back(rec);
    if (rec.val_macro_f1 > best_val) {
      best_val = rec.val_macro_f1;
      result.params = params;
      result.best_epoch = epoch;
    }
    plateau_update(opt, rec.val_macro_f1, config);
    if (on_epoch && on_epoch(rec, params)) break;
  }
  return result;
}

TrainResult train(const std::vector<VideoRecord>& train_videos, const std::vector<VideoRecord>& val_videos,
                  const FeatureDims& dims, const TrainConfig& config, FusionMode mode, const EpochCallback& on_epoch) {
  if (train_videos.empty()) throw ValidationError("train: empty training corpus");
  if (val_videos.empty()) throw ValidationError("train: empty validation corpus");
  std::set<std::string> train_ids;
  for (const auto& v : train_videos) train_ids.insert(v.id);
  for (const auto& v : val_videos) {
    if (train_ids.count(v.id)) throw ValidationError("train: video '" + v.id + "' is in both train and val");
  }
  return train_windows(WindowSet(train_videos), WindowSet(val_videos), dims, config, mode, on_epoch);
}

std::string history_csv(std::span<const EpochRecord> history) {
  std::string out = "epoch,train_loss,val_macro_f1,lr\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + io::format_double(r.train_loss) + "," +
           io::format_double(r.val_macro_f1) + "," + io::format_double(r.lr) + "\n";
  }
  return out;
}

}  // namespace mmfusion
