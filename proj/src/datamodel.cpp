#include "mmfusion/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include <json.hpp>

#include "mmfusion/error.hpp"
#include "mmfusion/io.hpp"

namespace mmfusion {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kLabelsHeader =
    "Neutral,Anger,Disgust,Fear,Happiness,Sadness,Surprise,Other";

long long grid_index(double t, double hz) { return std::llround(t * hz); }

// Nearest grid index; exact halves go to the earlier grid point.
long long nearest_grid_index(double t, double hz) {
  return static_cast<long long>(std::ceil(t * hz - 0.5));
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

std::vector<std::string_view> lines_of(std::string_view text) {
  auto lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  for (auto& l : lines) {
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
  }
  return lines;
}

FeatureTrack read_track(const fs::path& file, Modality m, std::size_t dim) {
  const std::string text = io::read_file(file);
  FeatureTrack track{m, dim, {}, {}};
  const auto lines = lines_of(text);
  std::vector<double> row(dim);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string ctx = file.string() + ":" + std::to_string(i + 1);
    const auto fields = split(lines[i], ',');
    if (fields.size() != dim + 1) {
      throw ValidationError(ctx + ": expected " + std::to_string(dim) + " values after the timestamp, got " +
                            std::to_string(fields.size() - 1));
    }
    const double t = io::parse_double(fields[0], ctx);
    if (!track.times.empty() && !(t > track.times.back())) {
      throw ValidationError(ctx + ": timestamps must be strictly increasing");
    }
    for (std::size_t j = 0; j < dim; ++j) row[j] = io::parse_double(fields[j + 1], ctx);
    track.push_back(t, row);
  }
  if (track.empty()) throw ValidationError(file.string() + ": empty feature track");
  return track;
}

std::string write_track(const FeatureTrack& track) {
  std::string out;
  for (std::size_t i = 0; i < track.size(); ++i) {
    out += io::format_double(track.times[i]);
    for (double v : track.row(i)) {
      out += ',';
      out += io::format_double(v);
    }
    out += '\n';
  }
  return out;
}

AnnotationTrack read_labels(const fs::path& file, const std::string& id, double fps) {
  const std::string text = io::read_file(file);
  const auto lines = lines_of(text);
  if (lines.empty() || lines[0] != kLabelsHeader) {
    throw ValidationError(file.string() + ":1: expected header '" + std::string(kLabelsHeader) + "'");
  }
  AnnotationTrack ann{id, fps, {}};
  ann.labels.reserve(lines.size() - 1);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string ctx = file.string() + ":" + std::to_string(i + 1);
    const long long v = io::parse_int(lines[i], ctx);
    if (v < kInvalidLabel || v >= static_cast<long long>(kNumClasses)) {
      throw ValidationError(ctx + ": label " + std::to_string(v) + " outside {-1, 0..7}");
    }
    ann.labels.push_back(static_cast<int>(v));
  }
  return ann;
}

void check_id(const std::string& id) {
  if (id.empty() || id == "." || id == ".." || id.find('/') != std::string::npos ||
      id.find('\\') != std::string::npos) {
    throw ValidationError("invalid video id '" + id + "'");
  }
}

// Grid index range of a gridded track, or a ValidationError if the track is
// not contiguous on the grid.
std::pair<long long, long long> grid_extent(const FeatureTrack& track, double hz) {
  if (track.empty()) throw ValidationError("empty " + std::string(modality_name(track.modality)) + " track");
  const double first = track.times.front();
  const double last = track.times.back();
  const long long g0 = grid_index(first, hz);
  const long long g1 = grid_index(last, hz);
  if (!on_grid(first, hz) || !on_grid(last, hz) ||
      static_cast<long long>(track.size()) != g1 - g0 + 1) {
    throw ValidationError(std::string(modality_name(track.modality)) +
                          " track is not resampled to the window grid");
  }
  return {g0, g1};
}

}  // namespace

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::Face:
      return "face";
    case Modality::Audio:
      return "audio";
    case Modality::Pose:
      return "pose";
  }
  return "?";
}

Modality parse_modality(std::string_view name) {
  for (Modality m : kModalities) {
    if (modality_name(m) == name) return m;
  }
  throw ValidationError("unknown modality '" + std::string(name) + "'");
}

std::size_t FeatureDims::of(Modality m) const {
  switch (m) {
    case Modality::Face:
      return face;
    case Modality::Audio:
      return audio;
    case Modality::Pose:
      return pose;
  }
  return 0;
}

void FeatureTrack::push_back(double t, std::span<const double> v) {
  if (v.size() != dim) {
    throw ValidationError("feature vector of length " + std::to_string(v.size()) + " in a track of dim " +
                          std::to_string(dim));
  }
  times.push_back(t);
  values.insert(values.end(), v.begin(), v.end());
}

const VideoRecord* Corpus::find(std::string_view id) const {
  for (const auto& v : videos) {
    if (v.id == id) return &v;
  }
  return nullptr;
}

std::vector<std::string> Corpus::ids() const {
  std::vector<std::string> out;
  out.reserve(videos.size());
  for (const auto& v : videos) out.push_back(v.id);
  return out;
}

std::vector<VideoRecord> Corpus::select(std::span<const std::string> ids) const {
  std::vector<VideoRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const VideoRecord* v = find(id);
    if (!v) throw ValidationError("video '" + id + "' is not in the corpus");
    out.push_back(*v);
  }
  return out;
}

const Matrix& AlignedWindow::seq(Modality m) const {
  switch (m) {
    case Modality::Face:
      return face_seq;
    case Modality::Audio:
      return audio_seq;
    case Modality::Pose:
      return pose_seq;
  }
  return face_seq;
}

bool on_grid(double t, double hz) {
  const double x = t * hz;
  return std::abs(x - std::round(x)) <= 1e-9 * std::max(1.0, std::abs(x));
}

FeatureTrack resample_track(const FeatureTrack& track, double grid_hz) {
  if (track.empty()) throw ValidationError("resample_track: empty track");
  if (!(grid_hz > 0)) throw ValidationError("resample_track: grid rate must be positive");
  const long long g0 = nearest_grid_index(track.times.front(), grid_hz);
  const long long g1 = nearest_grid_index(track.times.back(), grid_hz);
  FeatureTrack out{track.modality, track.dim, {}, {}};
  out.times.reserve(static_cast<std::size_t>(g1 - g0 + 1));
  out.values.reserve(static_cast<std::size_t>(g1 - g0 + 1) * track.dim);
  std::size_t i = 0;  // first sample with time >= grid time
  for (long long g = g0; g <= g1; ++g) {
    const double t = static_cast<double>(g) / grid_hz;
    while (i < track.size() && track.times[i] < t) ++i;
    std::size_t pick;
    if (i == 0) {
      pick = 0;
    } else if (i == track.size()) {
      pick = track.size() - 1;
    } else {
      const double before = t - track.times[i - 1];
      const double after = track.times[i] - t;
      pick = after < before ? i : i - 1;
    }
    out.push_back(t, track.row(pick));
  }
  return out;
}

VideoRecord resample_video(const VideoRecord& video, double grid_hz) {
  VideoRecord out = video;
  for (auto& track : out.tracks) track = resample_track(track, grid_hz);
  return out;
}

std::vector<std::size_t> filter_invalid(const AnnotationTrack& annotations) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < annotations.labels.size(); ++i) {
    if (annotations.labels[i] != kInvalidLabel) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> downsample_frames(std::span<const std::size_t> indices, std::size_t stride) {
  if (stride == 0) throw ValidationError("downsample_frames: stride must be at least 1");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < indices.size(); i += stride) out.push_back(indices[i]);
  return out;
}

AlignedWindow build_window(const VideoRecord& gridded, double t_current, const WindowOptions& options) {
  const std::string where = "video '" + gridded.id + "' at t=" + io::format_double(t_current);
  if (options.length == 0) throw ValidationError("window length must be at least 1");
  if (!(t_current >= 0.0) || t_current > gridded.duration_s) {
    throw ValidationError(where + ": outside the video");
  }
  if (!on_grid(t_current)) throw ValidationError(where + ": not on the 0.5 s grid");
  const long long frame = std::llround(t_current * gridded.fps);
  if (frame >= static_cast<long long>(gridded.annotations.labels.size())) {
    throw ValidationError(where + ": no annotation for frame " + std::to_string(frame));
  }
  const int label = gridded.annotations.labels[static_cast<std::size_t>(frame)];
  if (label == kInvalidLabel) throw ValidationError(where + ": frame has an invalid label");

  const long long len = static_cast<long long>(options.length);
  const long long g_now = grid_index(t_current, kGridHz);
  const long long g_start =
      options.placement == WindowPlacement::Trailing ? g_now - (len - 1) : g_now - len / 2;

  AlignedWindow w;
  w.video_id = gridded.id;
  w.t_current = static_cast<double>(g_now) / kGridHz;
  w.label = label;
  for (long long j = 0; j < len; ++j) w.row_times.push_back(static_cast<double>(g_start + j) / kGridHz);

  for (Modality m : kModalities) {
    const FeatureTrack& track = gridded.track(m);
    const auto [g0, g1] = grid_extent(track, kGridHz);
    if (g_now < g0 || g_now > g1) {
      throw ValidationError(where + ": " + std::string(modality_name(m)) + " track does not cover this time");
    }
    Matrix seq(options.length, track.dim);
    for (long long j = 0; j < len; ++j) {
      const long long g = std::clamp(g_start + j, g0, g1);
      const auto src = track.row(static_cast<std::size_t>(g - g0));
      std::copy(src.begin(), src.end(), seq.row(static_cast<std::size_t>(j)).begin());
    }
    if (m == Modality::Face) {
      const auto cur = track.row(static_cast<std::size_t>(g_now - g0));
      w.current_face.assign(cur.begin(), cur.end());
    }
    switch (m) {
      case Modality::Face:
        w.face_seq = std::move(seq);
        break;
      case Modality::Audio:
        w.audio_seq = std::move(seq);
        break;
      case Modality::Pose:
        w.pose_seq = std::move(seq);
        break;
    }
  }
  return w;
}

std::vector<double> window_times(const VideoRecord& video, std::size_t stride) {
  const auto valid = filter_invalid(video.annotations);
  const auto kept = downsample_frames(valid, stride);
  std::vector<double> out;
  for (std::size_t idx : kept) {
    const double t = static_cast<double>(idx) / video.fps;
    if (on_grid(t)) out.push_back(static_cast<double>(grid_index(t, kGridHz)) / kGridHz);
  }
  return out;
}

void validate_video(const VideoRecord& video, const FeatureDims& dims) {
  check_id(video.id);
  const std::string where = "video '" + video.id + "'";
  if (!(video.fps > 0) || !std::isfinite(video.fps)) throw ValidationError(where + ": fps must be positive");
  if (!(video.duration_s > 0) || !std::isfinite(video.duration_s)) {
    throw ValidationError(where + ": duration must be positive");
  }
  const double expected = video.fps * video.duration_s;
  if (std::abs(static_cast<double>(video.annotations.labels.size()) - expected) > 1.0) {
    throw ValidationError(where + ": " + std::to_string(video.annotations.labels.size()) +
                          " annotated frames, expected about " + io::format_double(expected));
  }
  for (Modality m : kModalities) {
    const FeatureTrack& track = video.track(m);
    const std::string tw = where + " " + std::string(modality_name(m)) + " track";
    if (track.modality != m) throw ValidationError(tw + ": wrong modality tag");
    if (track.dim != dims.of(m)) {
      throw ValidationError(tw + ": dim " + std::to_string(track.dim) + ", manifest says " +
                            std::to_string(dims.of(m)));
    }
    if (track.empty()) throw ValidationError(tw + ": empty");
    if (track.values.size() != track.size() * track.dim) throw ValidationError(tw + ": ragged values");
    for (std::size_t i = 1; i < track.size(); ++i) {
      if (!(track.times[i] > track.times[i - 1])) {
        throw ValidationError(tw + ": timestamps must be strictly increasing");
      }
    }
    if (!all_finite(track.values) || !all_finite(track.times)) throw ValidationError(tw + ": non-finite values");
  }
  for (int l : video.annotations.labels) {
    if (l < kInvalidLabel || l >= static_cast<int>(kNumClasses)) {
      throw ValidationError(where + ": label " + std::to_string(l) + " outside {-1, 0..7}");
    }
  }
}

Corpus load_corpus(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  json manifest;
  try {
    manifest = json::parse(io::read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw ValidationError(manifest_path.string() + ": " + e.what());
  }

  Corpus corpus;
  try {
    const auto& d = manifest.at("dims");
    corpus.dims = {d.at("face").get<std::size_t>(), d.at("audio").get<std::size_t>(),
                   d.at("pose").get<std::size_t>()};
    if (corpus.dims.face == 0 || corpus.dims.audio == 0 || corpus.dims.pose == 0) {
      throw ValidationError(manifest_path.string() + ": dims must be positive");
    }
    std::set<std::string> seen;
    for (const auto& entry : manifest.at("videos")) {
      VideoRecord v;
      v.id = entry.at("id").get<std::string>();
      v.fps = entry.at("fps").get<double>();
      v.duration_s = entry.at("duration_s").get<double>();
      check_id(v.id);
      if (!seen.insert(v.id).second) throw ValidationError(manifest_path.string() + ": duplicate id '" + v.id + "'");
      const fs::path vdir = dir / v.id;
      for (Modality m : kModalities) {
        v.track(m) = read_track(vdir / (std::string(modality_name(m)) + ".csv"), m, corpus.dims.of(m));
      }
      v.annotations = read_labels(vdir / "labels.txt", v.id, v.fps);
      validate_video(v, corpus.dims);
      corpus.videos.push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw ValidationError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const fs::path& dir) {
  fs::create_directories(dir);
  json videos = json::array();
  for (const auto& v : corpus.videos) {
    validate_video(v, corpus.dims);
    videos.push_back({{"id", v.id}, {"fps", v.fps}, {"duration_s", v.duration_s}});
  }
  json manifest = {{"videos", videos},
                   {"dims", {{"face", corpus.dims.face}, {"audio", corpus.dims.audio}, {"pose", corpus.dims.pose}}}};
  io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");

  for (const auto& v : corpus.videos) {
    const fs::path vdir = dir / v.id;
    fs::create_directories(vdir);
    for (Modality m : kModalities) {
      io::write_file_atomic(vdir / (std::string(modality_name(m)) + ".csv"), write_track(v.track(m)));
    }
    std::string labels(kLabelsHeader);
    labels += '\n';
    for (int l : v.annotations.labels) {
      labels += std::to_string(l);
      labels += '\n';
    }
    io::write_file_atomic(vdir / "labels.txt", labels);
  }
}

}  // namespace mmfusion
