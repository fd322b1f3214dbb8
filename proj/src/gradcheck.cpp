#include "mmfusion/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mmfusion/trainer.hpp"

namespace mmfusion {

AlignedWindow random_window(const ModelDims& dims, std::size_t steps, Rng& rng) {
  AlignedWindow w;
  w.video_id = "random";
  for (std::size_t t = 0; t < steps; ++t) w.row_times.push_back(static_cast<double>(t) / kGridHz);
  w.t_current = w.row_times.empty() ? 0.0 : w.row_times.back();
  auto fill = [&](std::size_t cols) {
    Matrix m(steps, cols);
    for (double& x : m.values()) x = rng.uniform(-2.0, 2.0);
    return m;
  };
  w.face_seq = fill(dims.face);
  w.audio_seq = fill(dims.audio);
  w.pose_seq = fill(dims.pose);
  const auto last = w.face_seq.row(steps - 1);
  w.current_face.assign(last.begin(), last.end());
  w.label = static_cast<int>(rng.uniform_index(kNumClasses));
  return w;
}

FusionParams random_params(const ModelDims& dims, FusionMode mode, Rng& rng) {
  FusionParams p = FusionParams::init(dims, mode, rng);
  for (std::size_t i = 0; i < p.layout().blocks().size(); ++i) {
    MatrixView b = p.block(i);
    if (b.cols == 1) {
      for (double& x : b.data) x = rng.uniform(-0.1, 0.1);
    }
  }
  return p;
}

GradCheckResult gradient_check(const ModelDims& dims, FusionMode mode, std::size_t steps, std::uint64_t seed,
                               double h) {
  Rng rng(seed);
  FusionParams params = random_params(dims, mode, rng);
  const AlignedWindow w = random_window(dims, steps, rng);

  ForwardCache cache;
  const auto logits = forward(w, params, &cache);
  const auto lg = cross_entropy(logits, w.label);
  const FusionGrads analytic = backward(cache, params, lg.grad);

  auto loss_at = [&]() { return cross_entropy(forward(w, params), w.label).loss; };

  GradCheckResult r;
  r.param_count = params.values().size();
  const auto& blocks = params.layout().blocks();
  auto values = params.values();
  for (const auto& b : blocks) {
    for (std::size_t k = 0; k < b.rows * b.cols; ++k) {
      const std::size_t i = b.offset + k;
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss_at();
      values[i] = saved - h;
      const double down = loss_at();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.values()[i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      if (rel > r.max_rel_error || r.worst_param.empty()) {
        r.max_rel_error = rel;
        r.worst_param = b.name + "[" + std::to_string(k / b.cols) + "," + std::to_string(k % b.cols) + "]";
      }
    }
  }
  return r;
}

}  // namespace mmfusion
