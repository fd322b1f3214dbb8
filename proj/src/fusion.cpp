#include "mmfusion/fusion.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include <json.hpp>

#include "mmfusion/error.hpp"
#include "mmfusion/io.hpp"

namespace mmfusion {

using nlohmann::json;

namespace {

constexpr std::string_view kCheckpointFormat = "mmfusion-checkpoint";
constexpr int kCheckpointVersion = 1;

std::size_t idx(Modality m) { return static_cast<std::size_t>(m); }

bool encoder_used(FusionMode mode, Modality m) {
  switch (mode) {
    case FusionMode::CurrentFaceOnly:
      return false;
    case FusionMode::VideoOnly:
      return m == Modality::Face;
    case FusionMode::ConcatFusion:
    case FusionMode::AttentionFusion:
      return true;
  }
  return false;
}

bool head_used(FusionMode mode, Modality m) {
  return mode == FusionMode::AttentionFusion || (mode == FusionMode::VideoOnly && m == Modality::Face);
}

bool includes_current_face(FusionMode mode) { return mode != FusionMode::VideoOnly; }

void append(std::vector<double>& dst, std::span<const double> src) { dst.insert(dst.end(), src.begin(), src.end()); }

std::string shape(std::size_t r, std::size_t c) { return std::to_string(r) + "x" + std::to_string(c); }

}  // namespace

std::string_view mode_name(FusionMode mode) {
  switch (mode) {
    case FusionMode::CurrentFaceOnly:
      return "current_face";
    case FusionMode::VideoOnly:
      return "video_only";
    case FusionMode::ConcatFusion:
      return "concat";
    case FusionMode::AttentionFusion:
      return "attention";
  }
  return "?";
}

std::string_view mode_label(FusionMode mode) {
  switch (mode) {
    case FusionMode::CurrentFaceOnly:
      return "current face";
    case FusionMode::VideoOnly:
      return "only video";
    case FusionMode::ConcatFusion:
      return "concat fusion";
    case FusionMode::AttentionFusion:
      return "attention fusion";
  }
  return "?";
}

FusionMode parse_mode(std::string_view name) {
  for (FusionMode m : kFusionModes) {
    if (mode_name(m) == name) return m;
  }
  throw ValidationError("unknown fusion mode '" + std::string(name) +
                        "' (expected current_face, video_only, concat or attention)");
}

std::size_t ModelDims::input(Modality m) const {
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

ModelDims model_dims(const FeatureDims& features, std::size_t hidden, std::size_t attn) {
  return {features.face, features.audio, features.pose, hidden, attn};
}

std::size_t fc_input_width(const ModelDims& d, FusionMode mode) {
  switch (mode) {
    case FusionMode::CurrentFaceOnly:
      return d.face;
    case FusionMode::VideoOnly:
      return d.attn;
    case FusionMode::ConcatFusion:
      return d.face + 3 * d.hidden;
    case FusionMode::AttentionFusion:
      return d.face + 3 * d.attn;
  }
  return 0;
}

ParamLayout::ParamLayout(const ModelDims& d, FusionMode mode) {
  if (d.face == 0 || d.audio == 0 || d.pose == 0 || d.hidden == 0 || d.attn == 0) {
    throw ValidationError("model dimensions must all be at least 1");
  }
  auto add = [this](std::string name, std::size_t rows, std::size_t cols) {
    blocks_.push_back({std::move(name), rows, cols, total_});
    total_ += rows * cols;
  };
  for (Modality m : kModalities) {
    const std::string p(modality_name(m));
    add(p + ".rnn1.W_in", d.hidden, d.input(m));
    add(p + ".rnn1.W_rec", d.hidden, d.hidden);
    add(p + ".rnn1.b", d.hidden, 1);
    add(p + ".rnn2.W_in", d.hidden, d.hidden);
    add(p + ".rnn2.W_rec", d.hidden, d.hidden);
    add(p + ".rnn2.b", d.hidden, 1);
  }
  for (Modality m : kModalities) {
    const std::string p(modality_name(m));
    add(p + ".attn.W_q", d.attn, d.face);
    add(p + ".attn.W_k", d.attn, d.hidden);
    add(p + ".attn.W_v", d.attn, d.hidden);
  }
  add("fc.W", kNumClasses, fc_input_width(d, mode));
  add("fc.b", kNumClasses, 1);
}

std::size_t ParamLayout::rnn_block(Modality m, std::size_t layer, std::size_t which) {
  return idx(m) * 6 + layer * 3 + which;
}

std::size_t ParamLayout::attn_block(Modality m, std::size_t which) { return 18 + idx(m) * 3 + which; }

ParamBuffer::ParamBuffer(const ModelDims& dims, FusionMode mode)
    : dims_(dims), mode_(mode), layout_(std::make_shared<const ParamLayout>(dims, mode)) {
  values_.assign(layout_->total(), 0.0);
}

ConstMatrixView ParamBuffer::block(std::size_t i) const {
  const ParamBlock& b = layout_->block(i);
  return {std::span<const double>(values_).subspan(b.offset, b.rows * b.cols), b.rows, b.cols};
}

MatrixView ParamBuffer::block(std::size_t i) {
  const ParamBlock& b = layout_->block(i);
  return {std::span<double>(values_).subspan(b.offset, b.rows * b.cols), b.rows, b.cols};
}

FusionParams FusionParams::init(const ModelDims& dims, FusionMode mode, Rng& rng) {
  FusionParams p(dims, mode);
  for (std::size_t i = 0; i < p.layout().blocks().size(); ++i) {
    MatrixView b = p.block(i);
    if (b.cols > 1) xavier_fill(b, rng);  // biases (column vectors) start at zero
  }
  return p;
}

RnnLayerView FusionParams::rnn(Modality m, std::size_t layer) const {
  return {block(ParamLayout::rnn_block(m, layer, ParamLayout::kRnnWIn)),
          block(ParamLayout::rnn_block(m, layer, ParamLayout::kRnnWRec)),
          block(ParamLayout::rnn_block(m, layer, ParamLayout::kRnnBias)).data};
}

AttentionView FusionParams::head(Modality m) const {
  return {block(ParamLayout::attn_block(m, ParamLayout::kAttnQ)),
          block(ParamLayout::attn_block(m, ParamLayout::kAttnK)),
          block(ParamLayout::attn_block(m, ParamLayout::kAttnV))};
}

std::uint64_t FusionParams::fingerprint() const {
  // Four independent lanes so the multiply chains overlap.
  std::uint64_t h[4] = {0xcbf29ce484222325ULL, 0x84222325cbf29ce4ULL, 0x9e3779b97f4a7c15ULL, 0xbf58476d1ce4e5b9ULL};
  const auto mix = [](std::uint64_t& x, double v) {
    x ^= std::bit_cast<std::uint64_t>(v);
    x *= 0x100000001b3ULL;
    x ^= x >> 32;
  };
  const std::size_t n = values_.size();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    for (std::size_t l = 0; l < 4; ++l) mix(h[l], values_[i + l]);
  }
  for (; i < n; ++i) mix(h[0], values_[i]);
  std::uint64_t out = n;
  for (const std::uint64_t x : h) mix(out, std::bit_cast<double>(x));
  return out;
}

RnnLayerGrad FusionGrads::rnn(Modality m, std::size_t layer) {
  return {block(ParamLayout::rnn_block(m, layer, ParamLayout::kRnnWIn)),
          block(ParamLayout::rnn_block(m, layer, ParamLayout::kRnnWRec)),
          block(ParamLayout::rnn_block(m, layer, ParamLayout::kRnnBias)).data};
}

AttentionGrad FusionGrads::head(Modality m) {
  return {block(ParamLayout::attn_block(m, ParamLayout::kAttnQ)),
          block(ParamLayout::attn_block(m, ParamLayout::kAttnK)),
          block(ParamLayout::attn_block(m, ParamLayout::kAttnV))};
}

void FusionGrads::set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

// ---------------------------------------------------------------------------
// Encoders

namespace {

Matrix elman_layer(ConstMatrixView seq, const RnnLayerView& p) {
  const std::size_t steps = seq.rows;
  const std::size_t hidden = p.w_in.rows;
  Matrix h(steps, hidden);
  for (std::size_t t = 0; t < steps; ++t) {
    auto ht = h.row(t);
    std::copy(p.bias.begin(), p.bias.end(), ht.begin());
    matvec_add(p.w_in, seq.row(t), ht);
    if (t > 0) matvec_add(p.w_rec, h.row(t - 1), ht);
    for (double& x : ht) x = tanh_fwd(x);
  }
  return h;
}

// Returns dL/d(input sequence) when `want_input_grad` is set.
Matrix elman_layer_backward(ConstMatrixView seq, const RnnLayerView& p, const Matrix& h, ConstMatrixView grad_h,
                            RnnLayerGrad g, bool want_input_grad) {
  const std::size_t steps = seq.rows;
  const std::size_t hidden = p.w_in.rows;
  Matrix grad_in = want_input_grad ? Matrix(steps, seq.cols) : Matrix();
  Matrix da(steps, hidden);
  std::vector<double> carry(hidden, 0.0);
  for (std::size_t s = steps; s-- > 0;) {
    const auto ht = h.row(s);
    const auto das = da.row(s);
    for (std::size_t i = 0; i < hidden; ++i) das[i] = tanh_bwd(ht[i], grad_h(s, i) + carry[i]);
    if (s == 0) break;
    std::fill(carry.begin(), carry.end(), 0.0);
    matvec_t_add(p.w_rec, das, carry);
  }
  // Weight and input gradients need all step deltas; batch them.
  gemm_tn_add(g.w_in, da, seq);
  if (steps > 1) {
    const ConstMatrixView da_tail{da.values().subspan(hidden), steps - 1, hidden};
    const ConstMatrixView h_head{h.values().first((steps - 1) * hidden), steps - 1, hidden};
    gemm_tn_add(g.w_rec, da_tail, h_head);
  }
  for (std::size_t s = 0; s < steps; ++s) axpy(1.0, da.row(s), g.bias);
  if (want_input_grad) gemm_nn_add(grad_in.view(), da, p.w_in);
  return grad_in;
}

void check_layer(const RnnLayerView& p, std::size_t d_in, const char* which) {
  const std::size_t h = p.w_in.rows;
  if (p.w_in.cols != d_in || p.w_rec.rows != h || p.w_rec.cols != h || p.bias.size() != h) {
    throw ValidationError(std::string("rnn_forward: ") + which + " expects input width " +
                          std::to_string(p.w_in.cols) + ", got " + std::to_string(d_in));
  }
}

}  // namespace

EncoderCache rnn_forward(ConstMatrixView seq, const RnnLayerView& layer1, const RnnLayerView& layer2) {
  if (seq.rows == 0) throw ValidationError("rnn_forward: empty sequence");
  check_layer(layer1, seq.cols, "layer 1");
  check_layer(layer2, layer1.w_in.rows, "layer 2");
  EncoderCache c;
  c.h1 = elman_layer(seq, layer1);
  c.h2 = elman_layer(c.h1, layer2);
  return c;
}

void rnn_backward(ConstMatrixView seq, const RnnLayerView& layer1, const RnnLayerView& layer2,
                  const EncoderCache& cache, ConstMatrixView grad_h2, RnnLayerGrad grad1, RnnLayerGrad grad2) {
  if (grad_h2.rows != cache.h2.rows() || grad_h2.cols != cache.h2.cols()) {
    throw ValidationError("rnn_backward: gradient shape " + shape(grad_h2.rows, grad_h2.cols) +
                          " does not match hidden states " + shape(cache.h2.rows(), cache.h2.cols()));
  }
  const Matrix grad_h1 = elman_layer_backward(cache.h1, layer2, cache.h2, grad_h2, grad2, true);
  elman_layer_backward(seq, layer1, cache.h1, grad_h1, grad1, false);
}

// ---------------------------------------------------------------------------
// Attention

AttentionCache cross_attention(std::span<const double> query_raw, ConstMatrixView hidden, const AttentionView& p) {
  if (hidden.rows == 0) throw ValidationError("cross_attention: empty sequence");
  if (p.w_q.cols != query_raw.size() || p.w_k.cols != hidden.cols || p.w_v.cols != hidden.cols) {
    throw ValidationError("cross_attention: projection shapes do not match inputs");
  }
  const std::size_t steps = hidden.rows;
  const std::size_t width = p.w_q.rows;
  const double scale = 1.0 / std::sqrt(static_cast<double>(width));

  AttentionCache c;
  c.query.assign(width, 0.0);
  matvec_add(p.w_q, query_raw, c.query);
  c.keys = Matrix(steps, width);
  c.vals = Matrix(steps, width);
  std::vector<double> scores(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    matvec_add(p.w_k, hidden.row(t), c.keys.row(t));
    matvec_add(p.w_v, hidden.row(t), c.vals.row(t));
    scores[t] = dot(c.query, c.keys.row(t)) * scale;
  }
  c.weights = softmax(scores);
  c.context.assign(width, 0.0);
  for (std::size_t t = 0; t < steps; ++t) axpy(c.weights[t], c.vals.row(t), c.context);
  return c;
}

void cross_attention_backward(std::span<const double> query_raw, ConstMatrixView hidden, const AttentionView& p,
                              const AttentionCache& c, std::span<const double> grad_context, AttentionGrad g,
                              MatrixView grad_hidden) {
  const std::size_t steps = hidden.rows;
  const std::size_t width = p.w_q.rows;
  const double scale = 1.0 / std::sqrt(static_cast<double>(width));

  // Through the weighted sum: d weights and d values.
  std::vector<double> dw(steps);
  double mean_dw = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    dw[t] = dot(grad_context, c.vals.row(t));
    mean_dw += c.weights[t] * dw[t];
  }
  std::vector<double> dq(width, 0.0);
  Matrix dk(steps, width), dv(steps, width);
  for (std::size_t t = 0; t < steps; ++t) {
    const double ds = c.weights[t] * (dw[t] - mean_dw) * scale;
    for (std::size_t a = 0; a < width; ++a) {
      dv(t, a) = c.weights[t] * grad_context[a];
      dk(t, a) = ds * c.query[a];
    }
    axpy(ds, c.keys.row(t), dq);
  }
  gemm_tn_add(g.w_v, dv, hidden);
  gemm_tn_add(g.w_k, dk, hidden);
  gemm_nn_add(grad_hidden, dv, p.w_v);
  gemm_nn_add(grad_hidden, dk, p.w_k);
  outer_add(g.w_q, dq, query_raw);
}

// ---------------------------------------------------------------------------
// Full model

std::vector<double> forward(const AlignedWindow& window, const FusionParams& params, ForwardCache* cache) {
  const ModelDims& d = params.dims();
  const FusionMode mode = params.mode();
  const std::size_t steps = window.face_seq.rows();
  if (steps == 0) throw ValidationError("forward: empty window");
  for (Modality m : kModalities) {
    const Matrix& s = window.seq(m);
    if (s.rows() != steps || s.cols() != d.input(m)) {
      throw ValidationError("forward: " + std::string(modality_name(m)) + " sequence is " +
                            shape(s.rows(), s.cols()) + ", model expects " + shape(steps, d.input(m)));
    }
  }
  if (window.current_face.size() != d.face) {
    throw ValidationError("forward: current face has length " + std::to_string(window.current_face.size()) +
                          ", model expects " + std::to_string(d.face));
  }
  if (params.fc_weight().cols != fc_input_width(d, mode)) {
    throw ValidationError("forward: FC width does not match mode " + std::string(mode_name(mode)));
  }

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c = ForwardCache{};
  c.mode = mode;
  c.dims = d;
  c.params_fingerprint = cache ? params.fingerprint() : 0;
  c.current_face = window.current_face;

  std::vector<double>& z = c.fc_input;
  z.reserve(fc_input_width(d, mode));
  if (includes_current_face(mode)) append(z, window.current_face);

  for (Modality m : kModalities) {
    if (!encoder_used(mode, m)) continue;
    const std::size_t i = idx(m);
    c.inputs[i] = window.seq(m);
    c.encoder_used[i] = true;
    c.encoders[i] = rnn_forward(window.seq(m), params.rnn(m, 0), params.rnn(m, 1));
    if (head_used(mode, m)) {
      c.head_used[i] = true;
      c.heads[i] = cross_attention(window.current_face, c.encoders[i].h2, params.head(m));
      append(z, c.heads[i].context);
    } else {
      append(z, c.encoders[i].h2.row(steps - 1));
    }
  }

  c.logits.assign(params.fc_bias().begin(), params.fc_bias().end());
  matvec_add(params.fc_weight(), z, c.logits);
  if (!all_finite(c.logits)) throw NumericError("forward: non-finite logits");
  return c.logits;
}

void backward_accumulate(const ForwardCache& c, const FusionParams& params, std::span<const double> grad_logits,
                         FusionGrads& grads) {
  if (c.mode != params.mode() || !(c.dims == params.dims()) || c.params_fingerprint != params.fingerprint()) {
    throw ValidationError("backward: cache was produced by different parameters");
  }
  if (!(grads.dims() == params.dims()) || grads.mode() != params.mode()) {
    throw ValidationError("backward: gradient buffer does not match parameters");
  }
  if (grad_logits.size() != kNumClasses || c.logits.size() != kNumClasses) {
    throw ValidationError("backward: expected 8 logit gradients");
  }
  const ModelDims& d = params.dims();

  outer_add(grads.block(ParamLayout::kFcWeight), grad_logits, c.fc_input);
  axpy(1.0, grad_logits, grads.block(ParamLayout::kFcBias).data);
  std::vector<double> dz(c.fc_input.size(), 0.0);
  matvec_t_add(params.fc_weight(), grad_logits, dz);

  std::size_t offset = includes_current_face(c.mode) ? d.face : 0;
  for (Modality m : kModalities) {
    const std::size_t i = idx(m);
    if (!c.encoder_used[i]) continue;
    const EncoderCache& enc = c.encoders[i];
    const std::size_t steps = enc.h2.rows();
    Matrix grad_h2(steps, d.hidden);
    if (c.head_used[i]) {
      const auto slice = std::span<const double>(dz).subspan(offset, d.attn);
      offset += d.attn;
      cross_attention_backward(c.current_face, enc.h2, params.head(m), c.heads[i], slice, grads.head(m),
                               grad_h2.view());
    } else {
      const auto slice = std::span<const double>(dz).subspan(offset, d.hidden);
      offset += d.hidden;
      std::copy(slice.begin(), slice.end(), grad_h2.row(steps - 1).begin());
    }
    rnn_backward(c.inputs[i], params.rnn(m, 0), params.rnn(m, 1), enc, grad_h2, grads.rnn(m, 0), grads.rnn(m, 1));
  }
}

FusionGrads backward(const ForwardCache& cache, const FusionParams& params, std::span<const double> grad_logits) {
  FusionGrads g(params);
  backward_accumulate(cache, params, grad_logits, g);
  return g;
}

int argmax(std::span<const double> v) {
  if (v.empty()) throw ValidationError("argmax: empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<int>(best);
}

int predict(const AlignedWindow& window, const FusionParams& params) { return argmax(forward(window, params)); }

// ---------------------------------------------------------------------------
// Checkpoints

std::string serialize_checkpoint(const FusionParams& params, std::uint64_t seed) {
  const ModelDims& d = params.dims();
  json layout = json::array();
  for (const auto& b : params.layout().blocks()) layout.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
  json header = {{"format", kCheckpointFormat},
                 {"version", kCheckpointVersion},
                 {"dims",
                  {{"face", d.face}, {"audio", d.audio}, {"pose", d.pose}, {"hidden", d.hidden}, {"attn", d.attn}}},
                 {"mode", mode_name(params.mode())},
                 {"seed", seed},
                 {"encoding", "f64le"},
                 {"param_count", params.values().size()},
                 {"layout", layout}};
  std::string out = header.dump();
  out += '\n';
  out.reserve(out.size() + params.values().size() * 8);
  for (double v : params.values()) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const FusionParams& params, std::uint64_t seed) {
  io::write_file_atomic(path, serialize_checkpoint(params, seed));
}

Checkpoint parse_checkpoint(std::string_view bytes, std::string_view source) {
  const std::string src(source);
  const std::size_t nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw ValidationError(src + ": missing checkpoint header");
  json header;
  try {
    header = json::parse(bytes.substr(0, nl));
  } catch (const json::exception& e) {
    throw ValidationError(src + ": bad checkpoint header: " + e.what());
  }
  try {
    if (header.at("format").get<std::string>() != kCheckpointFormat ||
        header.at("version").get<int>() != kCheckpointVersion) {
      throw ValidationError(src + ": not a version-1 mmfusion checkpoint");
    }
    if (header.at("encoding").get<std::string>() != "f64le") throw ValidationError(src + ": unsupported encoding");
    const auto& jd = header.at("dims");
    ModelDims d{jd.at("face").get<std::size_t>(), jd.at("audio").get<std::size_t>(), jd.at("pose").get<std::size_t>(),
                jd.at("hidden").get<std::size_t>(), jd.at("attn").get<std::size_t>()};
    const FusionMode mode = parse_mode(header.at("mode").get<std::string>());
    Checkpoint ck{FusionParams(d, mode), header.at("seed").get<std::uint64_t>()};

    const auto& blocks = ck.params.layout().blocks();
    const auto& jl = header.at("layout");
    if (jl.size() != blocks.size()) throw ValidationError(src + ": layout has the wrong number of blocks");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (jl[i].at("name").get<std::string>() != blocks[i].name || jl[i].at("rows").get<std::size_t>() != blocks[i].rows ||
          jl[i].at("cols").get<std::size_t>() != blocks[i].cols) {
        throw ValidationError(src + ": layout block " + std::to_string(i) + " does not match " + blocks[i].name);
      }
    }
    const std::size_t count = header.at("param_count").get<std::size_t>();
    const std::string_view payload = bytes.substr(nl + 1);
    if (count != ck.params.values().size() || payload.size() != count * 8) {
      throw ValidationError(src + ": expected " + std::to_string(ck.params.values().size()) + " parameters");
    }
    auto values = ck.params.values();
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[i * 8 + b])) << (8 * b);
      values[i] = std::bit_cast<double>(bits);
    }
    if (!all_finite(values)) throw ValidationError(src + ": non-finite parameters");
    return ck;
  } catch (const json::exception& e) {
    throw ValidationError(src + ": malformed checkpoint header: " + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(io::read_file(path), path.string()); }

}  // namespace mmfusion
