#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace mmfusion {

/// Non-owning row-major view over a rows x cols block of doubles.
struct ConstMatrixView {
  std::span<const double> data;
  std::size_t rows = 0;
  std::size_t cols = 0;

  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return data.subspan(r * cols, cols); }
};

struct MatrixView {
  std::span<double> data;
  std::size_t rows = 0;
  std::size_t cols = 0;

  double& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) const { return data.subspan(r * cols, cols); }
  operator ConstMatrixView() const { return {data, rows, cols}; }
};

/// Dense row-major matrix of 64-bit floats.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  /// Takes ownership of `data`; throws ValidationError unless it holds
  /// rows*cols finite values.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  ConstMatrixView view() const { return {data_, rows_, cols_}; }
  MatrixView view() { return {data_, rows_, cols_}; }
  operator ConstMatrixView() const { return view(); }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// xoshiro256** seeded through splitmix64. The output stream depends only on
/// the seed, so corpora and initializations reproduce across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  /// Independent stream for sub-task `index` (a video, an epoch) of a run
  /// seeded with `seed`.
  static Rng derive(std::uint64_t seed, std::uint64_t index);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform01();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal via Box-Muller (no caching, two uniforms per draw).
  double normal();

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);

/// Fisher-Yates shuffle driven by `rng`.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.uniform_index(i));
    std::swap(items[i - 1], items[j]);
  }
}

Matrix matmul(const Matrix& a, const Matrix& b);

/// Numerically stable softmax (max subtracted). Throws on empty input.
std::vector<double> softmax(std::span<const double> v);

double tanh_fwd(double x);
/// Derivative of tanh expressed through its output y.
double tanh_bwd(double y, double dy);
double sigmoid_fwd(double x);
double sigmoid_bwd(double y, double dy);

/// Uniform in +-sqrt(6 / (rows + cols)).
Matrix xavier_init(std::size_t rows, std::size_t cols, Rng& rng);
void xavier_fill(MatrixView m, Rng& rng);

// Kernels used by the model. No shape checks beyond debug asserts; callers
// own the dimensions.

double dot(std::span<const double> a, std::span<const double> b);
/// y += A x
void matvec_add(ConstMatrixView a, std::span<const double> x, std::span<double> y);
/// y += A^T x
void matvec_t_add(ConstMatrixView a, std::span<const double> x, std::span<double> y);
/// G += a b^T
void outer_add(MatrixView g, std::span<const double> a, std::span<const double> b);
/// G += A^T B, for A (n x r) and B (n x c). Equivalent to outer_add over the n rows.
void gemm_tn_add(MatrixView g, ConstMatrixView a, ConstMatrixView b);
/// Y += A W, for A (n x r) and W (r x c). Equivalent to matvec_t_add per row of A.
void gemm_nn_add(MatrixView y, ConstMatrixView a, ConstMatrixView w);
void axpy(double alpha, std::span<const double> x, std::span<double> y);

bool all_finite(std::span<const double> v);

}  // namespace mmfusion
