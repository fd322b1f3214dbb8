#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfusion/datamodel.hpp"

namespace mmfusion {

struct SplitSpec {
  std::string name;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;

  bool operator==(const SplitSpec&) const = default;
};

/// val \ train, keeping val's order. Train is never touched.
std::vector<std::string> dedup_overlap(std::span<const std::string> train_ids, std::span<const std::string> val_ids);

/// Seeded shuffle into k folds whose sizes differ by at most one (the
/// larger folds first); split i ("Split<i+1>") validates on fold i.
/// Id lists inside a split keep the input order.
std::vector<SplitSpec> make_kfold(std::span<const std::string> ids, std::size_t k, std::uint64_t seed);

/// As make_kfold, but ids are grouped by `strata` before being dealt to
/// folds round-robin, so every fold sees each stratum in proportion.
std::vector<SplitSpec> make_stratified_kfold(std::span<const std::string> ids, std::span<const int> strata,
                                             std::size_t k, std::uint64_t seed);

/// Most frequent valid label of a video (ties to the lower class), -1 when
/// the video has no valid frame.
int dominant_label(const VideoRecord& video);

nlohmann::json splits_to_json(std::span<const SplitSpec> splits);
std::vector<SplitSpec> splits_from_json(const nlohmann::json& j);
void save_splits(const std::filesystem::path& path, std::span<const SplitSpec> splits);
std::vector<SplitSpec> load_splits(const std::filesystem::path& path);
const SplitSpec& find_split(std::span<const SplitSpec> splits, std::string_view name);

enum class SignalRule {
  // label = 4 * argmax(face[0], face[1]) + 2 * [mean audio[0] > 0] + [mean pose[0] > 0],
  // means taken over the trailing window.
  CrossModal,
  // label = argmax(face[0..7]) of the current face vector.
  FaceOnly,
};

struct SynthConfig {
  std::size_t n_videos = 40;
  double duration_s = 30.0;
  double fps = 30.0;
  std::size_t face_stride = kFrameStride;
  FeatureDims dims{16, 16, 8};
  SignalRule signal_rule = SignalRule::CrossModal;
  double noise_std = 0.5;
  double signal_amplitude = 1.0;  // scale of the clean face cue and audio/pose latents
  bool label_balance = true;
  double invalid_fraction = 0.0;  // share of 0.5 s blocks annotated -1
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json synth_config_to_json(const SynthConfig& config);
SynthConfig synth_config_from_json(const nlohmann::json& j);

/// The planted labelling rule evaluated on a window.
int planted_label(const AlignedWindow& window, SignalRule rule);

/// Builds the corpus in memory. Videos are generated from independent
/// streams Rng::derive(seed, video_index); balancing uses one more stream.
Corpus generate_synthetic(const SynthConfig& config);
void generate_synthetic_corpus(const SynthConfig& config, const std::filesystem::path& out);

}  // namespace mmfusion
