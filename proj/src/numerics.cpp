#include "mmfusion/numerics.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "mmfusion/error.hpp"

namespace mmfusion {

namespace {

std::string shape(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ValidationError("matrix " + shape(rows_, cols_) + " given " +
                          std::to_string(data_.size()) + " values");
  }
  if (!all_finite(data_)) throw ValidationError("matrix " + shape(rows_, cols_) + " has non-finite entries");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ValidationError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t sm = seed;
  for (auto& w : s_) w = splitmix64(sm);
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t sm = seed ^ (0xD1B54A32D192ED03ULL * (index + 1));
  return Rng(splitmix64(sm));
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  assert(n > 0);
  // Rejection sampling keeps the result unbiased for any n.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  const double u1 = 1.0 - uniform01();  // (0, 1]
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ValidationError("matmul: cannot multiply " + shape(a.rows(), a.cols()) + " by " +
                          shape(b.rows(), b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) axpy(a(i, k), b.row(k), dst);
  }
  if (!all_finite(out.values())) throw NumericError("matmul: non-finite result");
  return out;
}

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw ValidationError("softmax: empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

double tanh_fwd(double x) { return std::tanh(x); }
double tanh_bwd(double y, double dy) { return dy * (1.0 - y * y); }
double sigmoid_fwd(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
double sigmoid_bwd(double y, double dy) { return dy * y * (1.0 - y); }

Matrix xavier_init(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  xavier_fill(m.view(), rng);
  return m;
}

void xavier_fill(MatrixView m, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(m.rows + m.cols));
  for (double& x : m.data) x = rng.uniform(-bound, bound);
}

// Hot kernels get an AVX2 clone chosen at load time. AVX2 without FMA keeps
// every multiply and add separately rounded, so results match the baseline
// build bit for bit.
#if defined(__GNUC__) && defined(__x86_64__) && !defined(__clang__)
#define MMFUSION_KERNEL __attribute__((target_clones("avx2", "default")))
#else
#define MMFUSION_KERNEL
#endif

MMFUSION_KERNEL double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  // Four fixed-order partial sums: faster, and still bit-reproducible.
  const std::size_t n = a.size();
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

MMFUSION_KERNEL void matvec_add(ConstMatrixView a, std::span<const double> x, std::span<double> y) {
  assert(x.size() == a.cols && y.size() == a.rows);
  for (std::size_t r = 0; r < a.rows; ++r) y[r] += dot(a.row(r), x);
}

MMFUSION_KERNEL void matvec_t_add(ConstMatrixView a, std::span<const double> x, std::span<double> y) {
  assert(x.size() == a.rows && y.size() == a.cols);
  for (std::size_t r = 0; r < a.rows; ++r) axpy(x[r], a.row(r), y);
}

MMFUSION_KERNEL void outer_add(MatrixView g, std::span<const double> a, std::span<const double> b) {
  assert(a.size() == g.rows && b.size() == g.cols);
  for (std::size_t r = 0; r < g.rows; ++r) axpy(a[r], b, g.row(r));
}

// Both batched kernels keep one output row hot in cache while streaming the
// other operand, instead of sweeping the whole output once per input row.
MMFUSION_KERNEL void gemm_tn_add(MatrixView g, ConstMatrixView a, ConstMatrixView b) {
  assert(a.rows == b.rows && g.rows == a.cols && g.cols == b.cols);
  for (std::size_t r = 0; r < g.rows; ++r) {
    const auto gr = g.row(r);
    for (std::size_t i = 0; i < a.rows; ++i) axpy(a(i, r), b.row(i), gr);
  }
}

MMFUSION_KERNEL void gemm_nn_add(MatrixView y, ConstMatrixView a, ConstMatrixView w) {
  assert(a.rows == y.rows && a.cols == w.rows && y.cols == w.cols);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const auto wr = w.row(r);
    for (std::size_t i = 0; i < a.rows; ++i) axpy(a(i, r), wr, y.row(i));
  }
}

MMFUSION_KERNEL void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  assert(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace mmfusion
