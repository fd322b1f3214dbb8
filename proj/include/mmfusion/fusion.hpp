#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmfusion/datamodel.hpp"
#include "mmfusion/numerics.hpp"

namespace mmfusion {

/// Ablation variants of the classifier head.
enum class FusionMode {
  CurrentFaceOnly,  // FC(current_face)
  VideoOnly,        // FC(face-track attention context)
  ConcatFusion,     // FC([current_face, last hidden state of each encoder])
  AttentionFusion,  // FC([current_face, attention context of each encoder])
};

inline constexpr std::array<FusionMode, 4> kFusionModes = {
    FusionMode::CurrentFaceOnly, FusionMode::VideoOnly, FusionMode::ConcatFusion,
    FusionMode::AttentionFusion};

/// Short identifier used on the command line and in files.
std::string_view mode_name(FusionMode mode);
/// Row label used in comparison tables.
std::string_view mode_label(FusionMode mode);
FusionMode parse_mode(std::string_view name);

struct ModelDims {
  std::size_t face = 512;
  std::size_t audio = 1024;
  std::size_t pose = 50;
  std::size_t hidden = 128;
  std::size_t attn = 128;

  std::size_t input(Modality m) const;
  bool operator==(const ModelDims&) const = default;
};

ModelDims model_dims(const FeatureDims& features, std::size_t hidden, std::size_t attn);

/// Width of the vector fed to the FC layer.
std::size_t fc_input_width(const ModelDims& dims, FusionMode mode);

struct ParamBlock {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
};

/// Fixed enumeration order of all learnable tensors. Per modality in
/// face, audio, pose order: rnn1.{W_in, W_rec, b}, rnn2.{W_in, W_rec, b};
/// then per modality attn.{W_q, W_k, W_v}; then fc.W, fc.b.
/// Biases are column vectors.
class ParamLayout {
 public:
  ParamLayout(const ModelDims& dims, FusionMode mode);

  static constexpr std::size_t kRnnWIn = 0, kRnnWRec = 1, kRnnBias = 2;
  static constexpr std::size_t kAttnQ = 0, kAttnK = 1, kAttnV = 2;

  static std::size_t rnn_block(Modality m, std::size_t layer, std::size_t which);
  static std::size_t attn_block(Modality m, std::size_t which);
  static constexpr std::size_t kFcWeight = 27;
  static constexpr std::size_t kFcBias = 28;

  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& block(std::size_t i) const { return blocks_[i]; }
  std::size_t total() const { return total_; }

 private:
  std::vector<ParamBlock> blocks_;
  std::size_t total_ = 0;
};

struct RnnLayerView {
  ConstMatrixView w_in;   // H x D_in
  ConstMatrixView w_rec;  // H x H
  std::span<const double> bias;
};

struct RnnLayerGrad {
  MatrixView w_in;
  MatrixView w_rec;
  std::span<double> bias;
};

struct AttentionView {
  ConstMatrixView w_q;  // A x D_face
  ConstMatrixView w_k;  // A x H
  ConstMatrixView w_v;  // A x H
};

struct AttentionGrad {
  MatrixView w_q;
  MatrixView w_k;
  MatrixView w_v;
};

/// Flat parameter storage with named views, shared by parameters and
/// their gradients.
class ParamBuffer {
 public:
  ParamBuffer(const ModelDims& dims, FusionMode mode);

  const ModelDims& dims() const { return dims_; }
  FusionMode mode() const { return mode_; }
  const ParamLayout& layout() const { return *layout_; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  ConstMatrixView block(std::size_t i) const;
  MatrixView block(std::size_t i);

  bool operator==(const ParamBuffer& other) const {
    return dims_ == other.dims_ && mode_ == other.mode_ && values_ == other.values_;
  }

 protected:
  ModelDims dims_;
  FusionMode mode_;
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<double> values_;
};

class FusionParams : public ParamBuffer {
 public:
  using ParamBuffer::ParamBuffer;

  /// Xavier-uniform weights, zero biases, drawn in layout order.
  static FusionParams init(const ModelDims& dims, FusionMode mode, Rng& rng);

  RnnLayerView rnn(Modality m, std::size_t layer) const;
  AttentionView head(Modality m) const;
  ConstMatrixView fc_weight() const { return block(ParamLayout::kFcWeight); }
  std::span<const double> fc_bias() const { return block(ParamLayout::kFcBias).data; }

  /// Four-lane FNV-style hash over the parameter words; ties a ForwardCache
  /// to the parameters that produced it.
  std::uint64_t fingerprint() const;
};

class FusionGrads : public ParamBuffer {
 public:
  using ParamBuffer::ParamBuffer;
  explicit FusionGrads(const FusionParams& like) : ParamBuffer(like.dims(), like.mode()) {}

  RnnLayerGrad rnn(Modality m, std::size_t layer);
  AttentionGrad head(Modality m);
  void set_zero();
};

struct EncoderCache {
  Matrix h1;  // T x H, layer-1 hidden states
  Matrix h2;  // T x H, layer-2 hidden states (the encoder output)
};

struct AttentionCache {
  std::vector<double> query;    // A
  Matrix keys;                  // T x A
  Matrix vals;                  // T x A
  std::vector<double> weights;  // T, softmax of the scaled scores
  std::vector<double> context;  // A
};

struct ForwardCache {
  FusionMode mode = FusionMode::AttentionFusion;
  ModelDims dims;
  std::uint64_t params_fingerprint = 0;
  std::array<Matrix, 3> inputs;
  std::vector<double> current_face;
  std::array<bool, 3> encoder_used{};
  std::array<EncoderCache, 3> encoders;
  std::array<bool, 3> head_used{};
  std::array<AttentionCache, 3> heads;
  std::vector<double> fc_input;
  std::vector<double> logits;
};

/// Two stacked Elman layers, h_t = tanh(W_in x_t + W_rec h_{t-1} + b), h_0 = 0.
EncoderCache rnn_forward(ConstMatrixView seq, const RnnLayerView& layer1, const RnnLayerView& layer2);

/// Backpropagation through time given dL/dh2 for every step. Accumulates
/// into the gradient views.
void rnn_backward(ConstMatrixView seq, const RnnLayerView& layer1, const RnnLayerView& layer2,
                  const EncoderCache& cache, ConstMatrixView grad_h2, RnnLayerGrad grad1,
                  RnnLayerGrad grad2);

/// Single-head scaled dot-product attention with the query projected from
/// `query_raw` and keys/values projected from the rows of `hidden`.
AttentionCache cross_attention(std::span<const double> query_raw, ConstMatrixView hidden,
                               const AttentionView& p);

/// Accumulates parameter gradients and writes dL/dhidden into grad_hidden
/// (added, not overwritten).
void cross_attention_backward(std::span<const double> query_raw, ConstMatrixView hidden,
                              const AttentionView& p, const AttentionCache& cache,
                              std::span<const double> grad_context, AttentionGrad grad,
                              MatrixView grad_hidden);

/// Logits for one window. Fills `cache` when given.
std::vector<double> forward(const AlignedWindow& window, const FusionParams& params,
                            ForwardCache* cache = nullptr);

FusionGrads backward(const ForwardCache& cache, const FusionParams& params,
                     std::span<const double> grad_logits);

/// Adds this sample's gradients into `grads`.
void backward_accumulate(const ForwardCache& cache, const FusionParams& params,
                         std::span<const double> grad_logits, FusionGrads& grads);

/// Index of the largest entry; ties go to the lowest index.
int argmax(std::span<const double> v);
int predict(const AlignedWindow& window, const FusionParams& params);

struct Checkpoint {
  FusionParams params;
  std::uint64_t seed = 0;
};

/// One line of JSON (format, dims, mode, seed, layout) followed by the
/// parameters as little-endian IEEE-754 doubles in layout order.
void save_checkpoint(const std::filesystem::path& path, const FusionParams& params, std::uint64_t seed);
std::string serialize_checkpoint(const FusionParams& params, std::uint64_t seed);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint parse_checkpoint(std::string_view bytes, std::string_view source);

}  // namespace mmfusion
