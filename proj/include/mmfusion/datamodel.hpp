#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmfusion/numerics.hpp"

namespace mmfusion {

enum class Modality { Face = 0, Audio = 1, Pose = 2 };

inline constexpr std::array<Modality, 3> kModalities = {Modality::Face, Modality::Audio,
                                                        Modality::Pose};
inline constexpr std::size_t kNumClasses = 8;
inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise", "Other"};
inline constexpr int kInvalidLabel = -1;

/// Samples per window and the common sampling grid every modality is
/// snapped to: 6 s of context at 2 samples per second.
inline constexpr std::size_t kWindowLength = 12;
inline constexpr double kGridHz = 2.0;
/// Keep one annotated face frame out of this many.
inline constexpr std::size_t kFrameStride = 5;

std::string_view modality_name(Modality m);
Modality parse_modality(std::string_view name);

struct FeatureDims {
  std::size_t face = 512;
  std::size_t audio = 1024;
  std::size_t pose = 50;

  std::size_t of(Modality m) const;
  bool operator==(const FeatureDims&) const = default;
};

/// One modality's timestamped feature vectors for one video.
struct FeatureTrack {
  Modality modality = Modality::Face;
  std::size_t dim = 0;
  std::vector<double> times;
  std::vector<double> values;  // times.size() x dim, row-major

  std::size_t size() const { return times.size(); }
  bool empty() const { return times.empty(); }
  std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
  void push_back(double t, std::span<const double> v);

  bool operator==(const FeatureTrack&) const = default;
};

struct AnnotationTrack {
  std::string video_id;
  double fps = 30.0;
  std::vector<int> labels;  // per frame, -1 or a class index

  bool operator==(const AnnotationTrack&) const = default;
};

struct VideoRecord {
  std::string id;
  double fps = 30.0;
  double duration_s = 0.0;
  std::array<FeatureTrack, 3> tracks;
  AnnotationTrack annotations;

  const FeatureTrack& track(Modality m) const { return tracks[static_cast<std::size_t>(m)]; }
  FeatureTrack& track(Modality m) { return tracks[static_cast<std::size_t>(m)]; }

  bool operator==(const VideoRecord&) const = default;
};

struct Corpus {
  FeatureDims dims;
  std::vector<VideoRecord> videos;

  const VideoRecord* find(std::string_view id) const;
  std::vector<std::string> ids() const;
  /// Videos whose ids are listed, in the given order; throws on unknown ids.
  std::vector<VideoRecord> select(std::span<const std::string> ids) const;

  bool operator==(const Corpus&) const = default;
};

/// The model's input unit.
struct AlignedWindow {
  std::string video_id;
  double t_current = 0.0;
  std::vector<double> row_times;  // nominal grid time of each row
  Matrix face_seq;
  Matrix audio_seq;
  Matrix pose_seq;
  std::vector<double> current_face;
  int label = 0;

  const Matrix& seq(Modality m) const;
  std::size_t length() const { return row_times.size(); }
};

enum class WindowPlacement { Trailing, Centered };

struct WindowOptions {
  std::size_t length = kWindowLength;
  WindowPlacement placement = WindowPlacement::Trailing;
};

bool on_grid(double t, double hz = kGridHz);

/// Nearest-neighbour resampling onto the 1/grid_hz grid spanning the track's
/// extent. Ties go to the earlier sample.
FeatureTrack resample_track(const FeatureTrack& track, double grid_hz = kGridHz);

/// Copy of `video` with every track resampled to the grid.
VideoRecord resample_video(const VideoRecord& video, double grid_hz = kGridHz);

/// Indices of frames whose label is not -1.
std::vector<std::size_t> filter_invalid(const AnnotationTrack& annotations);

/// Every stride-th element of `indices`, starting with the first.
std::vector<std::size_t> downsample_frames(std::span<const std::size_t> indices,
                                           std::size_t stride = kFrameStride);

/// Builds the window ending at t_current. `gridded` must come from
/// resample_video; windows reaching before a track's first sample repeat
/// that sample.
AlignedWindow build_window(const VideoRecord& gridded, double t_current,
                           const WindowOptions& options = {});

/// Times of the frames that yield windows: valid, downsampled, on the grid.
std::vector<double> window_times(const VideoRecord& video, std::size_t stride = kFrameStride);

/// Structural checks shared by the loader and the generator.
void validate_video(const VideoRecord& video, const FeatureDims& dims);

Corpus load_corpus(const std::filesystem::path& dir);
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);

}  // namespace mmfusion
