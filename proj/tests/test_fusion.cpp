#include <doctest.h>

#include <cmath>
#include <string>

#include "mmfusion/error.hpp"
#include "mmfusion/fusion.hpp"
#include "mmfusion/gradcheck.hpp"
#include "mmfusion/trainer.hpp"
#include "test_support.hpp"

using namespace mmfusion;

namespace {

// Reference model written with plain loops over the flat parameter vector.
struct Reference {
  const FusionParams& p;

  double w(std::size_t block, std::size_t r, std::size_t c) const {
    const auto& b = p.layout().block(block);
    return p.values()[b.offset + r * b.cols + c];
  }

  std::vector<std::vector<double>> rows(const Matrix& m) const {
    std::vector<std::vector<double>> out(m.rows(), std::vector<double>(m.cols()));
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
    return out;
  }

  std::vector<std::vector<double>> elman(const std::vector<std::vector<double>>& x, Modality m, std::size_t layer) const {
    const std::size_t H = p.dims().hidden;
    const std::size_t wi = ParamLayout::rnn_block(m, layer, 0), wr = ParamLayout::rnn_block(m, layer, 1),
                      bb = ParamLayout::rnn_block(m, layer, 2);
    std::vector<std::vector<double>> h;
    std::vector<double> prev(H, 0.0);
    for (const auto& xt : x) {
      std::vector<double> cur(H);
      for (std::size_t i = 0; i < H; ++i) {
        double s = w(bb, i, 0);
        for (std::size_t j = 0; j < xt.size(); ++j) s += w(wi, i, j) * xt[j];
        for (std::size_t j = 0; j < H; ++j) s += w(wr, i, j) * prev[j];
        cur[i] = std::tanh(s);
      }
      h.push_back(cur);
      prev = cur;
    }
    return h;
  }

  std::vector<double> attend(const std::vector<double>& q_raw, const std::vector<std::vector<double>>& h, Modality m) const {
    const std::size_t A = p.dims().attn;
    const std::size_t bq = ParamLayout::attn_block(m, 0), bk = ParamLayout::attn_block(m, 1),
                      bv = ParamLayout::attn_block(m, 2);
    std::vector<double> q(A, 0.0);
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t j = 0; j < q_raw.size(); ++j) q[a] += w(bq, a, j) * q_raw[j];
    std::vector<double> score(h.size());
    std::vector<std::vector<double>> v(h.size(), std::vector<double>(A, 0.0));
    for (std::size_t t = 0; t < h.size(); ++t) {
      double s = 0.0;
      for (std::size_t a = 0; a < A; ++a) {
        double k = 0.0;
        for (std::size_t j = 0; j < h[t].size(); ++j) {
          k += w(bk, a, j) * h[t][j];
          v[t][a] += w(bv, a, j) * h[t][j];
        }
        s += q[a] * k;
      }
      score[t] = s / std::sqrt(static_cast<double>(A));
    }
    double mx = score[0];
    for (double s : score) mx = std::max(mx, s);
    double total = 0.0;
    for (double& s : score) total += (s = std::exp(s - mx));
    std::vector<double> ctx(A, 0.0);
    for (std::size_t t = 0; t < h.size(); ++t)
      for (std::size_t a = 0; a < A; ++a) ctx[a] += score[t] / total * v[t][a];
    return ctx;
  }

  std::vector<double> logits(const AlignedWindow& win) const {
    const FusionMode mode = p.mode();
    std::vector<double> z;
    if (mode != FusionMode::VideoOnly) z = win.current_face;
    for (Modality m : kModalities) {
      if (mode == FusionMode::CurrentFaceOnly) break;
      if (mode == FusionMode::VideoOnly && m != Modality::Face) break;
      const auto h = elman(elman(rows(win.seq(m)), m, 0), m, 1);
      const auto part = mode == FusionMode::ConcatFusion ? h.back() : attend(win.current_face, h, m);
      z.insert(z.end(), part.begin(), part.end());
    }
    std::vector<double> out(kNumClasses);
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      out[k] = w(ParamLayout::kFcBias, k, 0);
      for (std::size_t j = 0; j < z.size(); ++j) out[k] += w(ParamLayout::kFcWeight, k, j) * z[j];
    }
    return out;
  }
};

const ModelDims kSmall{8, 8, 4, 16, 16};

}  // namespace

TEST_CASE("layout widths and naming") {
  CHECK(fc_input_width(kSmall, FusionMode::CurrentFaceOnly) == 8);
  CHECK(fc_input_width(kSmall, FusionMode::VideoOnly) == 16);
  CHECK(fc_input_width(kSmall, FusionMode::ConcatFusion) == 8 + 3 * 16);
  CHECK(fc_input_width(kSmall, FusionMode::AttentionFusion) == 8 + 3 * 16);
  const ModelDims full = model_dims(FeatureDims{}, 128, 128);
  CHECK(fc_input_width(full, FusionMode::AttentionFusion) == 512 + 384);

  const ParamLayout layout(kSmall, FusionMode::AttentionFusion);
  REQUIRE(layout.blocks().size() == 29);
  CHECK(layout.block(0).name == "face.rnn1.W_in");
  CHECK(layout.block(ParamLayout::rnn_block(Modality::Audio, 1, ParamLayout::kRnnWRec)).name == "audio.rnn2.W_rec");
  CHECK(layout.block(ParamLayout::attn_block(Modality::Pose, ParamLayout::kAttnV)).name == "pose.attn.W_v");
  CHECK(layout.block(ParamLayout::kFcBias).cols == 1);
  std::size_t offset = 0;
  for (const auto& b : layout.blocks()) {
    CHECK(b.offset == offset);
    offset += b.rows * b.cols;
  }
  CHECK(layout.total() == offset);

  for (FusionMode m : kFusionModes) CHECK(parse_mode(mode_name(m)) == m);
  CHECK_THROWS_AS(parse_mode("late_fusion"), ValidationError);
}

TEST_CASE("scalar Elman example") {
  // D=H=1, W_in=1, W_rec=0.5, b=0, x = [1, 0]: h1 = tanh(1), h2 = tanh(0.5 tanh(1)).
  const double w_in = 1.0, w_rec = 0.5, b = 0.0;
  const RnnLayerView layer{{std::span<const double>(&w_in, 1), 1, 1}, {std::span<const double>(&w_rec, 1), 1, 1},
                           std::span<const double>(&b, 1)};
  const double ident = 1.0, zero = 0.0;
  const RnnLayerView pass{{std::span<const double>(&ident, 1), 1, 1}, {std::span<const double>(&zero, 1), 1, 1},
                          std::span<const double>(&b, 1)};
  const Matrix x{{1.0}, {0.0}};
  const auto c = rnn_forward(x.view(), layer, pass);
  CHECK(c.h1(0, 0) == doctest::Approx(std::tanh(1.0)).epsilon(1e-15));
  CHECK(c.h1(1, 0) == doctest::Approx(std::tanh(0.5 * std::tanh(1.0))).epsilon(1e-15));
  CHECK(c.h2(0, 0) == doctest::Approx(std::tanh(std::tanh(1.0))).epsilon(1e-15));
}

TEST_CASE("cross attention examples") {
  const Matrix eye = Matrix::identity(2);
  const AttentionView p{eye.view(), eye.view(), eye.view()};
  const std::vector<double> q{1.0, 0.0};

  SUBCASE("two-step closed form") {
    const Matrix h{{1.0, 0.0}, {0.0, 1.0}};
    const auto c = cross_attention(q, h.view(), p);
    const double e = std::exp(1.0 / std::sqrt(2.0));
    CHECK(c.weights[0] == doctest::Approx(e / (e + 1.0)).epsilon(1e-14));
    CHECK(c.weights[0] == doctest::Approx(0.6698).epsilon(1e-4));
    CHECK(c.weights[1] == doctest::Approx(0.3302).epsilon(1e-4));
    CHECK(c.context[0] == doctest::Approx(c.weights[0]).epsilon(1e-14));
    CHECK(c.context[1] == doctest::Approx(c.weights[1]).epsilon(1e-14));
  }
  SUBCASE("single step gives weight 1") {
    const Matrix h{{0.3, -0.7}};
    const auto c = cross_attention(q, h.view(), p);
    CHECK(c.weights[0] == 1.0);
    CHECK(c.context == std::vector<double>{0.3, -0.7});
  }
  SUBCASE("identical rows give uniform weights") {
    Matrix h(5, 2);
    for (std::size_t t = 0; t < 5; ++t) h(t, 0) = 2.0, h(t, 1) = -1.0;
    const auto c = cross_attention(q, h.view(), p);
    for (double wt : c.weights) CHECK(wt == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(c.context[0] == doctest::Approx(2.0).epsilon(1e-14));
  }
  SUBCASE("weights are a distribution") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      Matrix h(1 + rng.uniform_index(20), 2);
      for (double& x : h.values()) x = rng.uniform(-50, 50);
      const auto c = cross_attention(q, h.view(), p);
      double s = 0.0;
      for (double wt : c.weights) {
        CHECK(wt >= 0.0);
        s += wt;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(cross_attention(q, Matrix(0, 2).view(), p), ValidationError);
}

TEST_CASE("forward matches the reference model") {
  for (FusionMode mode : kFusionModes) {
    CAPTURE(mode_name(mode));
    Rng rng(42);
    const FusionParams params = random_params(kSmall, mode, rng);
    for (std::size_t steps : {1u, 3u, 12u}) {
      const AlignedWindow w = random_window(kSmall, steps, rng);
      const auto got = forward(w, params);
      const auto want = Reference{params}.logits(w);
      for (std::size_t k = 0; k < kNumClasses; ++k) CHECK(std::abs(got[k] - want[k]) < 1e-10);
    }
  }
}

TEST_CASE("mode properties") {
  Rng rng(7);
  const AlignedWindow w = random_window(kSmall, 12, rng);

  SUBCASE("current-face mode ignores the sequences and trains only the FC layer") {
    const FusionParams p = random_params(kSmall, FusionMode::CurrentFaceOnly, rng);
    AlignedWindow other = w;
    for (double& x : other.audio_seq.values()) x = rng.uniform(-5, 5);
    for (double& x : other.pose_seq.values()) x = 0.0;
    for (std::size_t r = 0; r + 1 < other.face_seq.rows(); ++r)
      for (double& x : other.face_seq.row(r)) x = 9.0;
    CHECK(forward(w, p) == forward(other, p));

    ForwardCache cache;
    const auto logits = forward(w, p, &cache);
    const auto g = backward(cache, p, cross_entropy(logits, w.label).grad);
    for (std::size_t b = 0; b < ParamLayout::kFcWeight; ++b)
      for (double x : g.block(b).data) CHECK(x == 0.0);
  }
  SUBCASE("video-only mode does not read audio or pose") {
    const FusionParams p = random_params(kSmall, FusionMode::VideoOnly, rng);
    AlignedWindow other = w;
    for (double& x : other.audio_seq.values()) x += 1.0;
    for (double& x : other.pose_seq.values()) x -= 1.0;
    CHECK(forward(w, p) == forward(other, p));
  }
  SUBCASE("concat mode ignores the attention heads") {
    FusionParams p = random_params(kSmall, FusionMode::ConcatFusion, rng);
    const auto before = forward(w, p);
    for (double& x : p.block(ParamLayout::attn_block(Modality::Audio, 0)).data) x += 1.0;
    CHECK(forward(w, p) == before);
  }
  SUBCASE("zero upstream gradient gives zero gradients") {
    for (FusionMode mode : kFusionModes) {
      const FusionParams p = random_params(kSmall, mode, rng);
      ForwardCache cache;
      forward(w, p, &cache);
      const std::vector<double> zero(kNumClasses, 0.0);
      for (double x : backward(cache, p, zero).values()) CHECK(x == 0.0);
    }
  }
}

TEST_CASE("gradient check") {
  for (FusionMode mode : kFusionModes) {
    for (std::size_t steps : {1u, 3u, 12u}) {
      CAPTURE(mode_name(mode));
      CAPTURE(steps);
      const auto r = gradient_check(kSmall, mode, steps, 42);
      CHECK(r.max_rel_error < 1e-4);
      CHECK(r.param_count == ParamLayout(kSmall, mode).total());
    }
  }
}

TEST_CASE("backward rejects mismatched inputs") {
  Rng rng(1);
  FusionParams p = random_params(kSmall, FusionMode::AttentionFusion, rng);
  const AlignedWindow w = random_window(kSmall, 4, rng);
  ForwardCache cache;
  forward(w, p, &cache);
  const std::vector<double> g(kNumClasses, 0.1);
  CHECK_NOTHROW(backward(cache, p, g));
  p.values()[0] += 1e-3;
  CHECK_THROWS_WITH_AS(backward(cache, p, g), doctest::Contains("different parameters"), ValidationError);
  p.values()[0] -= 1e-3;
  CHECK_THROWS_AS(backward(cache, p, std::vector<double>(3, 0.0)), ValidationError);

  AlignedWindow bad = w;
  bad.audio_seq = Matrix(4, 7);
  CHECK_THROWS_WITH_AS(forward(bad, p), doctest::Contains("4x7"), ValidationError);
  bad = w;
  bad.current_face.pop_back();
  CHECK_THROWS_AS(forward(bad, p), ValidationError);
}

TEST_CASE("argmax ties go to the lowest index") {
  CHECK(argmax(std::vector<double>{1, 3, 3, 2}) == 1);
  CHECK(argmax(std::vector<double>(8, 0.0)) == 0);
  CHECK(argmax(std::vector<double>{-1, -2}) == 0);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(5);
  const FusionParams p = random_params(kSmall, FusionMode::AttentionFusion, rng);
  const auto dir = testing::temp_dir("ckpt");
  save_checkpoint(dir / "m.ckpt", p, 99);
  const Checkpoint ck = load_checkpoint(dir / "m.ckpt");
  CHECK(ck.seed == 99);
  CHECK(ck.params == p);
  CHECK(ck.params.fingerprint() == p.fingerprint());

  const std::string bytes = serialize_checkpoint(p, 99);
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 8), "x"), ValidationError);
  CHECK_THROWS_AS(parse_checkpoint("not json\n", "x"), ValidationError);
  std::string wrong_mode = bytes;
  wrong_mode.replace(wrong_mode.find("\"attention\""), 11, "\"current_face\"");
  CHECK_THROWS_AS(parse_checkpoint(wrong_mode, "x"), ValidationError);
  std::filesystem::remove_all(dir);
}
