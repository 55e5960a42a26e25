#pragma once

// Dense 64-bit matrices, the elementary differentiable operators, parameter
// storage and the seeded random source. Every backward function accumulates
// (+=) into its output gradients; callers zero buffers explicitly.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dyrex {

inline constexpr double kLayerNormEps = 1e-5;

class Matrix {
 public:
  Matrix() = default;
  // Zero-filled.
  Matrix(std::size_t rows, std::size_t cols);
  // Takes ownership of row-major data; rejects size mismatch and non-finite values.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix row_vector(std::span<const double> values);
  static Matrix identity(std::size_t n);
  static Matrix filled(std::size_t rows, std::size_t cols, double value);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_str() const;

  Matrix transpose() const;
  // Rows [begin, begin + count).
  Matrix slice_rows(std::size_t begin, std::size_t count) const;

  // In-place elementwise accumulate / scale.
  Matrix& operator+=(const Matrix& other);
  Matrix& operator*=(double s);
  void set_zero();

  // Bitwise equality of shape and contents.
  friend bool operator==(const Matrix& a, const Matrix& b);

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Throws NumericalError naming `where` when any entry is NaN/Inf.
void require_finite(const Matrix& m, const char* where);

#ifndef NDEBUG
#define DYREX_DEBUG_FINITE(m, where) ::dyrex::require_finite((m), (where))
#else
#define DYREX_DEBUG_FINITE(m, where) ((void)0)
#endif

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
double max_abs_diff(const Matrix& a, const Matrix& b);

// ---- forward ops ----------------------------------------------------------

// a * b. Row-parallel under OpenMP; each entry sums k = 0..K-1 left to right,
// so results are bitwise identical to serial::matmul for any thread count.
Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// Rowwise softmax. Entries where mask == 0 receive exactly 0; a row with no
// unmasked entry raises InvalidMaskError.
Matrix softmax_rows(const Matrix& x, const Matrix* mask = nullptr);

struct LayerNormCache {
  Matrix x_hat;
  std::vector<double> inv_std;
};

// Per-row normalization with biased variance, then gamma * x_hat + beta.
// gamma and beta are 1 x d.
Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                  double eps = kLayerNormEps, LayerNormCache* cache = nullptr);

// Exact x * Phi(x).
Matrix gelu(const Matrix& x);

// x * w + b, with b (1 x d_out) broadcast over rows.
Matrix linear_forward(const Matrix& x, const Matrix& w, const Matrix& b);

// Sum over rows, as a 1 x cols matrix.
Matrix column_sums(const Matrix& x);

// ---- backward ops (all accumulate) ----------------------------------------

void matmul_backward(const Matrix& a, const Matrix& b, const Matrix& d_out,
                     Matrix* d_a, Matrix* d_b);
// Returns d_x given y = softmax(x) and upstream d_y.
Matrix softmax_backward(const Matrix& y, const Matrix& d_y);
void layer_norm_backward(const LayerNormCache& cache, const Matrix& gamma,
                         const Matrix& d_y, Matrix* d_x, Matrix* d_gamma,
                         Matrix* d_beta);
void gelu_backward(const Matrix& x, const Matrix& d_y, Matrix& d_x);
void linear_backward(const Matrix& x, const Matrix& w, const Matrix& d_y,
                     Matrix* d_x, Matrix* d_w, Matrix* d_b);

// Serial reference kernels kept for testing and benchmarking.
namespace serial {
Matrix matmul(const Matrix& a, const Matrix& b);
}

// ---- parameters -----------------------------------------------------------

using ParamId = std::size_t;

// Gradient buffers laid out like a ParamStore; one per worker when batches
// are processed in parallel, reduced in a fixed order afterwards.
class GradBuffer {
 public:
  GradBuffer() = default;
  explicit GradBuffer(std::vector<Matrix> grads) : grads_(std::move(grads)) {}

  Matrix& operator[](ParamId id) { return grads_.at(id); }
  const Matrix& operator[](ParamId id) const { return grads_.at(id); }
  std::size_t size() const noexcept { return grads_.size(); }

  void append(Matrix zeros) { grads_.push_back(std::move(zeros)); }
  void zero();
  void add(const GradBuffer& other);
  void scale(double s);
  double squared_norm() const;

 private:
  std::vector<Matrix> grads_;
};

class ParamStore {
 public:
  // Names must be unique; insertion order is the iteration order.
  ParamId add(std::string name, Matrix init, bool trainable = true);

  std::size_t size() const noexcept { return entries_.size(); }
  const std::string& name(ParamId id) const { return entries_.at(id).name; }
  bool trainable(ParamId id) const { return entries_.at(id).trainable; }
  void set_trainable(ParamId id, bool trainable) { entries_.at(id).trainable = trainable; }

  const Matrix& value(ParamId id) const { return entries_.at(id).value; }
  Matrix& value(ParamId id) { return entries_.at(id).value; }
  Matrix& grad(ParamId id) { return grads_[id]; }
  const Matrix& grad(ParamId id) const { return grads_[id]; }
  GradBuffer& grads() noexcept { return grads_; }
  const GradBuffer& grads() const noexcept { return grads_; }

  std::optional<ParamId> find(const std::string& name) const;
  ParamId at(const std::string& name) const;

  // Zeroed buffer with this store's layout.
  GradBuffer make_grad_buffer() const;
  void zero_grad() { grads_.zero(); }
  std::size_t scalar_count() const;

 private:
  struct Entry {
    std::string name;
    Matrix value;
    bool trainable;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, ParamId> index_;
  GradBuffer grads_;
};

// ---- randomness -----------------------------------------------------------

// std::mt19937_64 with hand-written distributions (53-bit uniform, Box-Muller
// normal, rejection-sampled integers), so a seed gives the same stream on
// every platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double normal(double mean = 0.0, double stddev = 1.0);
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  // Uniform integer in [lo, hi].
  std::size_t between(std::size_t lo, std::size_t hi) { return lo + below(hi - lo + 1); }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev);

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_normal_;
};

// ---- DYRXMAT1 serialization -----------------------------------------------

// "DYRXMAT1", rows u32 LE, cols u32 LE, rows*cols float64 LE, row-major.
void write_matrix(std::ostream& out, const Matrix& m);
Matrix read_matrix(std::istream& in);
void save_matrix(const std::filesystem::path& path, const Matrix& m);
Matrix load_matrix(const std::filesystem::path& path);

}  // namespace dyrex
