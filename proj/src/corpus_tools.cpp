#include "mmfusion/corpus_tools.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>

#include "mmfusion/error.hpp"
#include "mmfusion/fusion.hpp"
#include "mmfusion/io.hpp"

namespace mmfusion {

using nlohmann::json;

std::vector<std::string> dedup_overlap(std::span<const std::string> train_ids, std::span<const std::string> val_ids) {
  const std::set<std::string> train(train_ids.begin(), train_ids.end());
  std::vector<std::string> out;
  for (const auto& id : val_ids) {
    if (!train.count(id)) out.push_back(id);
  }
  return out;
}

namespace {

std::vector<SplitSpec> splits_from_assignment(std::span<const std::string> ids, const std::vector<std::size_t>& fold_of,
                                              std::size_t k) {
  std::vector<SplitSpec> splits(k);
  for (std::size_t f = 0; f < k; ++f) {
    splits[f].name = "Split" + std::to_string(f + 1);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      (fold_of[i] == f ? splits[f].val_ids : splits[f].train_ids).push_back(ids[i]);
    }
  }
  return splits;
}

void check_kfold_args(std::span<const std::string> ids, std::size_t k) {
  if (k < 2) throw ValidationError("k-fold: k must be at least 2");
  if (ids.size() < k) {
    throw ValidationError("k-fold: " + std::to_string(ids.size()) + " ids cannot fill " + std::to_string(k) + " folds");
  }
  const std::set<std::string> unique(ids.begin(), ids.end());
  if (unique.size() != ids.size()) throw ValidationError("k-fold: duplicate ids");
}

}  // namespace

std::vector<SplitSpec> make_kfold(std::span<const std::string> ids, std::size_t k, std::uint64_t seed) {
  check_kfold_args(ids, k);
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  shuffle(order, rng);

  const std::size_t base = ids.size() / k;
  const std::size_t extra = ids.size() % k;
  std::vector<std::size_t> fold_of(ids.size());
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    for (std::size_t j = 0; j < size; ++j) fold_of[order[pos++]] = f;
  }
  return splits_from_assignment(ids, fold_of, k);
}

std::vector<SplitSpec> make_stratified_kfold(std::span<const std::string> ids, std::span<const int> strata,
                                             std::size_t k, std::uint64_t seed) {
  check_kfold_args(ids, k);
  if (strata.size() != ids.size()) throw ValidationError("stratified k-fold: one stratum per id required");
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  shuffle(order, rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return strata[a] < strata[b]; });
  std::vector<std::size_t> fold_of(ids.size());
  for (std::size_t p = 0; p < order.size(); ++p) fold_of[order[p]] = p % k;
  return splits_from_assignment(ids, fold_of, k);
}

int dominant_label(const VideoRecord& video) {
  std::array<std::size_t, kNumClasses> counts{};
  bool any = false;
  for (int l : video.annotations.labels) {
    if (l == kInvalidLabel) continue;
    ++counts[static_cast<std::size_t>(l)];
    any = true;
  }
  if (!any) return kInvalidLabel;
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

json splits_to_json(std::span<const SplitSpec> splits) {
  json arr = json::array();
  for (const auto& s : splits) arr.push_back({{"name", s.name}, {"train", s.train_ids}, {"val", s.val_ids}});
  return {{"splits", arr}};
}

std::vector<SplitSpec> splits_from_json(const json& j) {
  std::vector<SplitSpec> out;
  try {
    for (const auto& s : j.at("splits")) {
      SplitSpec spec{s.at("name").get<std::string>(), s.at("train").get<std::vector<std::string>>(),
                     s.at("val").get<std::vector<std::string>>()};
      const std::set<std::string> train(spec.train_ids.begin(), spec.train_ids.end());
      for (const auto& id : spec.val_ids) {
        if (train.count(id)) throw ValidationError("split '" + spec.name + "': id '" + id + "' in both train and val");
      }
      out.push_back(std::move(spec));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed splits: ") + e.what());
  }
  return out;
}

void save_splits(const std::filesystem::path& path, std::span<const SplitSpec> splits) {
  io::write_file_atomic(path, splits_to_json(splits).dump(2) + "\n");
}

std::vector<SplitSpec> load_splits(const std::filesystem::path& path) {
  try {
    return splits_from_json(json::parse(io::read_file(path)));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

const SplitSpec& find_split(std::span<const SplitSpec> splits, std::string_view name) {
  for (const auto& s : splits) {
    if (s.name == name) return s;
  }
  std::string known;
  for (const auto& s : splits) known += (known.empty() ? "" : ", ") + s.name;
  throw ValidationError("no split named '" + std::string(name) + "' (available: " + known + ")");
}

// ---------------------------------------------------------------------------
// Synthetic corpora

void SynthConfig::validate() const {
  if (n_videos < 1) throw ValidationError("synth: n_videos must be at least 1");
  if (!(duration_s >= 6.0)) throw ValidationError("synth: duration_s must be at least 6 s (one full window)");
  if (dims.face < 1 || dims.audio < 1 || dims.pose < 1) throw ValidationError("synth: dims must be at least 1");
  if (!(fps > 0)) throw ValidationError("synth: fps must be positive");
  if (face_stride < 1) throw ValidationError("synth: face_stride must be at least 1");
  const double half = fps / kGridHz;
  if (half != std::round(half) || static_cast<long long>(half) % static_cast<long long>(face_stride) != 0) {
    throw ValidationError("synth: fps/2 must be a whole multiple of face_stride");
  }
  if (signal_rule == SignalRule::CrossModal && dims.face < 2) throw ValidationError("synth: cross_modal needs face dim >= 2");
  if (signal_rule == SignalRule::FaceOnly && dims.face < kNumClasses) {
    throw ValidationError("synth: face_only needs face dim >= 8");
  }
  if (!(signal_amplitude > 0)) throw ValidationError("synth: signal_amplitude must be positive");
  if (!(noise_std >= 0)) throw ValidationError("synth: noise_std must be non-negative");
  if (!(invalid_fraction >= 0 && invalid_fraction < 1)) throw ValidationError("synth: invalid_fraction must lie in [0, 1)");
}

json synth_config_to_json(const SynthConfig& c) {
  return {{"n_videos", c.n_videos},
          {"duration_s", c.duration_s},
          {"fps", c.fps},
          {"face_stride", c.face_stride},
          {"face_dim", c.dims.face},
          {"audio_dim", c.dims.audio},
          {"pose_dim", c.dims.pose},
          {"signal_rule", c.signal_rule == SignalRule::CrossModal ? "cross_modal" : "face_only"},
          {"noise_std", c.noise_std},
          {"signal_amplitude", c.signal_amplitude},
          {"label_balance", c.label_balance},
          {"invalid_fraction", c.invalid_fraction},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("synth config: expected a JSON object");
  SynthConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "n_videos") c.n_videos = value.get<std::size_t>();
      else if (key == "duration_s") c.duration_s = value.get<double>();
      else if (key == "fps") c.fps = value.get<double>();
      else if (key == "face_stride") c.face_stride = value.get<std::size_t>();
      else if (key == "face_dim") c.dims.face = value.get<std::size_t>();
      else if (key == "audio_dim") c.dims.audio = value.get<std::size_t>();
      else if (key == "pose_dim") c.dims.pose = value.get<std::size_t>();
      else if (key == "noise_std") c.noise_std = value.get<double>();
      else if (key == "signal_amplitude") c.signal_amplitude = value.get<double>();
      else if (key == "label_balance") c.label_balance = value.get<bool>();
      else if (key == "invalid_fraction") c.invalid_fraction = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "signal_rule") {
        const auto name = value.get<std::string>();
        if (name == "cross_modal") c.signal_rule = SignalRule::CrossModal;
        else if (name == "face_only") c.signal_rule = SignalRule::FaceOnly;
        else throw ValidationError("synth config: unknown signal_rule '" + name + "'");
      } else {
        throw ValidationError("synth config: unknown key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("synth config: ") + e.what());
  }
  c.validate();
  return c;
}

int planted_label(const AlignedWindow& w, SignalRule rule) {
  if (rule == SignalRule::FaceOnly) {
    return argmax(std::span<const double>(w.current_face).first(kNumClasses));
  }
  const int face_bit = w.current_face[1] > w.current_face[0] ? 1 : 0;
  double audio = 0.0, pose = 0.0;
  for (std::size_t t = 0; t < w.length(); ++t) {
    audio += w.audio_seq(t, 0);
    pose += w.pose_seq(t, 0);
  }
  return 4 * face_bit + 2 * (audio > 0 ? 1 : 0) + (pose > 0 ? 1 : 0);
}

namespace {

struct BlockRef {
  std::size_t video;
  std::size_t block;
};

std::string video_name(std::size_t i, std::size_t n) {
  const int width = n > 1000 ? static_cast<int>(std::to_string(n - 1).size()) : 3;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth-%0*zu", width, i);
  return buf;
}

// One video plus the label of every 0.5 s block (-1 for invalid blocks).
std::pair<VideoRecord, std::vector<int>> generate_video(const SynthConfig& c, std::size_t index) {
  Rng rng = Rng::derive(c.seed, index);
  const long long block_frames = std::llround(c.fps / kGridHz);
  const long long n_frames = std::llround(c.fps * c.duration_s);
  const std::size_t blocks = static_cast<std::size_t>((n_frames - 1) / block_frames) + 1;
  const std::size_t stride = c.face_stride;

  std::vector<std::size_t> face_cue(blocks);
  std::vector<double> audio_latent(blocks), pose_latent(blocks);
  const std::size_t cue_classes = c.signal_rule == SignalRule::CrossModal ? 2 : kNumClasses;
  for (std::size_t k = 0; k < blocks; ++k) {
    face_cue[k] = static_cast<std::size_t>(rng.uniform_index(cue_classes));
    audio_latent[k] = c.signal_amplitude * rng.normal();
    pose_latent[k] = c.signal_amplitude * rng.normal();
  }

  VideoRecord v;
  v.id = video_name(index, c.n_videos);
  v.fps = c.fps;
  v.duration_s = c.duration_s;
  for (Modality m : kModalities) v.track(m) = FeatureTrack{m, c.dims.of(m), {}, {}};

  const long long last_face_frame = static_cast<long long>(blocks - 1) * block_frames;
  std::vector<double> row(c.dims.face);
  for (long long f = 0; f <= last_face_frame; f += static_cast<long long>(stride)) {
    std::fill(row.begin(), row.end(), 0.0);
    row[face_cue[static_cast<std::size_t>(f / block_frames)]] = c.signal_amplitude;
    v.track(Modality::Face).push_back(static_cast<double>(f) / c.fps, row);
  }
  for (std::size_t k = 0; k < blocks; ++k) {
    const double t = static_cast<double>(k) / kGridHz;
    std::vector<double> a(c.dims.audio, 0.0), p(c.dims.pose, 0.0);
    a[0] = audio_latent[k];
    p[0] = pose_latent[k];
    v.track(Modality::Audio).push_back(t, a);
    v.track(Modality::Pose).push_back(t, p);
  }

  // Labels come from the clean signal seen through the model's own window.
  v.annotations = {v.id, c.fps, std::vector<int>(static_cast<std::size_t>(n_frames), 0)};
  const VideoRecord gridded = resample_video(v);
  std::vector<int> block_labels(blocks);
  for (std::size_t k = 0; k < blocks; ++k) {
    block_labels[k] = planted_label(build_window(gridded, static_cast<double>(k) / kGridHz), c.signal_rule);
  }

  if (c.noise_std > 0) {
    for (auto& track : v.tracks) {
      for (double& x : track.values) x += c.noise_std * rng.normal();
    }
  }
  if (c.invalid_fraction > 0) {
    for (int& l : block_labels) {
      if (rng.uniform01() < c.invalid_fraction) l = kInvalidLabel;
    }
  }
  return {std::move(v), std::move(block_labels)};
}

void write_frame_labels(VideoRecord& v, const std::vector<int>& block_labels) {
  const long long block_frames = std::llround(v.fps / kGridHz);
  for (std::size_t i = 0; i < v.annotations.labels.size(); ++i) {
    v.annotations.labels[i] = block_labels[i / static_cast<std::size_t>(block_frames)];
  }
}

}  // namespace

Corpus generate_synthetic(const SynthConfig& c) {
  c.validate();
  Corpus corpus;
  corpus.dims = c.dims;
  std::vector<std::vector<int>> labels;
  for (std::size_t i = 0; i < c.n_videos; ++i) {
    auto [video, block_labels] = generate_video(c, i);
    corpus.videos.push_back(std::move(video));
    labels.push_back(std::move(block_labels));
  }

  if (c.label_balance) {
    std::array<std::vector<BlockRef>, kNumClasses> by_class;
    for (std::size_t v = 0; v < labels.size(); ++v) {
      for (std::size_t k = 0; k < labels[v].size(); ++k) {
        if (labels[v][k] != kInvalidLabel) by_class[static_cast<std::size_t>(labels[v][k])].push_back({v, k});
      }
    }
    std::size_t target = by_class[0].size();
    for (const auto& refs : by_class) target = std::min(target, refs.size());
    if (target == 0) {
      throw ValidationError("synth: cannot balance labels, some class never occurs; generate more or longer videos");
    }
    Rng rng = Rng::derive(c.seed, c.n_videos);
    for (auto& refs : by_class) {
      shuffle(refs, rng);
      for (std::size_t j = target; j < refs.size(); ++j) labels[refs[j].video][refs[j].block] = kInvalidLabel;
    }
  }

  for (std::size_t v = 0; v < labels.size(); ++v) {
    write_frame_labels(corpus.videos[v], labels[v]);
    validate_video(corpus.videos[v], corpus.dims);
  }
  return corpus;
}

void generate_synthetic_corpus(const SynthConfig& config, const std::filesystem::path& out) {
  save_corpus(generate_synthetic(config), out);
}

}  // namespace mmfusion
