#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmfusion/datamodel.hpp"
#include "mmfusion/fusion.hpp"
#include "mmfusion/metrics.hpp"

namespace mmfusion {

enum class OptimizerKind { AdamW, Sgd };

struct TrainConfig {
  double lr = 0.02;
  double weight_decay = 0.05;
  std::size_t batch_size = 4;
  std::size_t max_epochs = 30;
  std::size_t plateau_patience = 2;
  double plateau_factor = 0.5;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
  std::size_t hidden = 128;
  std::size_t attn = 128;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Flat JSON with one key per field; `config_from_json` starts from the
/// defaults and rejects unknown keys.
nlohmann::json config_to_json(const TrainConfig& config);
TrainConfig config_from_json(const nlohmann::json& j);

struct PlateauState {
  double best_f1 = -std::numeric_limits<double>::infinity();
  std::size_t epochs_since_improve = 0;
};

struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
  double current_lr = 0.0;
  PlateauState plateau;

  static OptimizerState init(std::size_t param_count, const TrainConfig& config);
};

struct LossAndGrad {
  double loss = 0.0;
  std::array<double, kNumClasses> grad{};
};

/// -log softmax(logits)[label] and its gradient softmax - onehot.
LossAndGrad cross_entropy(std::span<const double> logits, int label);

/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
void adamw_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                const TrainConfig& config);
/// theta <- theta - lr * (g + wd * theta)
void sgd_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
              const TrainConfig& config);
void optimizer_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                    const TrainConfig& config);

/// Reduce-on-plateau: a strict improvement over the best F1 resets the
/// counter; after `plateau_patience` epochs without one, lr *= factor and
/// the counter restarts.
void plateau_update(OptimizerState& state, double val_f1, const TrainConfig& config);

/// Windows of a set of videos, built on demand from gridded tracks.
class WindowSet {
 public:
  WindowSet() = default;
  explicit WindowSet(const std::vector<VideoRecord>& videos, WindowOptions options = {},
                     std::size_t stride = kFrameStride);

  std::size_t size() const { return refs_.size(); }
  bool empty() const { return refs_.empty(); }
  AlignedWindow at(std::size_t i) const;
  int label(std::size_t i) const { return labels_[i]; }
  const std::vector<int>& labels() const { return labels_; }
  std::vector<std::string> video_ids() const;
  /// The windows at `indices`, in that order.
  WindowSet subset(std::span<const std::size_t> indices) const;

 private:
  std::vector<VideoRecord> gridded_;
  std::vector<std::pair<std::size_t, double>> refs_;  // (video, t_current)
  std::vector<int> labels_;
  WindowOptions options_;
};

std::vector<int> predict_all(const WindowSet& windows, const FusionParams& params);
EvalReport evaluate(const WindowSet& windows, const FusionParams& params);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_macro_f1 = 0.0;
  double lr = 0.0;  // rate used for this epoch's updates

  bool operator==(const EpochRecord&) const = default;
};

struct TrainResult {
  FusionParams params;  // best validation macro-F1 checkpoint
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 when no epoch ran
};

/// Called after every epoch with the current (not best) parameters. Return
/// true to stop.
using EpochCallback = std::function<bool(const EpochRecord&, const FusionParams&)>;

TrainResult train_windows(const WindowSet& train, const WindowSet& val, const FeatureDims& dims,
                          const TrainConfig& config, FusionMode mode, const EpochCallback& on_epoch = {});

/// Rejects empty sets and video ids shared between train and val.
TrainResult train(const std::vector<VideoRecord>& train_videos, const std::vector<VideoRecord>& val_videos,
                  const FeatureDims& dims, const TrainConfig& config, FusionMode mode,
                  const EpochCallback& on_epoch = {});

/// `epoch,train_loss,val_macro_f1,lr` with round-trip decimal values.
std::string history_csv(std::span<const EpochRecord> history);

}  // namespace mmfusion
