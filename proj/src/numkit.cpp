#include "dyrex/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "dyrex/errors.hpp"
#include "dyrex/parallel.hpp"

namespace dyrex {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
  }
}

void require_row_vector(const Matrix& v, std::size_t cols, const char* op) {
  if (v.rows() != 1 || v.cols() != cols) {
    throw DimensionError(std::string(op) + ": expected 1x" + std::to_string(cols) +
                         " vector, got " + v.shape_str());
  }
}

// Rows per parallel chunk are independent; below this size the region is not
// worth spawning.
constexpr std::size_t kParallelMinWork = 4096;

bool go_parallel(std::size_t work) {
  return parallel::thread_count() > 1 && work >= kParallelMinWork;
}

constexpr double kMaskedScore = -1e30;

}  // namespace

// ---- Matrix ---------------------------------------------------------------

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str());
  }
  require_finite(*this, "Matrix construction");
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::filled(std::size_t rows, std::size_t cols, double value) {
  return Matrix(rows, cols, std::vector<double>(rows * cols, value));
}

std::string Matrix::shape_str() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t count) const {
  if (begin + count > rows_) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + shape_str());
  }
  Matrix out(count, cols_);
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_), count * cols_,
              out.data_.begin());
  return out;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

void Matrix::set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

bool operator==(const Matrix& a, const Matrix& b) {
  return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
}

void require_finite(const Matrix& m, const char* where) {
  for (double v : m.data()) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string(where) + ": non-finite entry in " + m.shape_str());
    }
  }
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  out += b;
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "operator-");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

// ---- matmul family --------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape_str() + " x " + b.shape_str());
  }
  const std::size_t n = a.rows(), k_dim = a.cols(), m = b.cols();
  Matrix c(n, m);
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* cp = c.data().data();
  const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for num_threads(parallel::thread_count()) if (go_parallel(n * k_dim * m)) schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = cp + i * m;
    for (std::size_t k = 0; k < k_dim; ++k) {
      const double aik = ap[i * k_dim + k];
      const double* brow = bp + k * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aik * brow[j];
    }
  }
  DYREX_DEBUG_FINITE(c, "matmul");
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + a.shape_str() + " x " + b.shape_str() + "^T");
  }
  const std::size_t n = a.rows(), k_dim = a.cols(), m = b.rows();
  Matrix c(n, m);
  const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for num_threads(parallel::thread_count()) if (go_parallel(n * k_dim * m)) schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    auto arow = a.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < k_dim; ++k) acc += arow[k] * brow[k];
      c(i, j) = acc;
    }
  }
  DYREX_DEBUG_FINITE(c, "matmul_nt");
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + a.shape_str() + "^T x " + b.shape_str());
  }
  const std::size_t n = a.cols(), k_dim = a.rows(), m = b.cols();
  Matrix c(n, m);
  const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for num_threads(parallel::thread_count()) if (go_parallel(n * k_dim * m)) schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    auto crow = c.row(i);
    for (std::size_t k = 0; k < k_dim; ++k) {
      const double aki = a(k, i);
      auto brow = b.row(k);
      for (std::size_t j = 0; j < m; ++j) crow[j] += aki * brow[j];
    }
  }
  DYREX_DEBUG_FINITE(c, "matmul_tn");
  return c;
}

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape_str() + " x " + b.shape_str());
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  }
  return c;
}

}  // namespace serial

void matmul_backward(const Matrix& a, const Matrix& b, const Matrix& d_out,
                     Matrix* d_a, Matrix* d_b) {
  if (d_out.rows() != a.rows() || d_out.cols() != b.cols()) {
    throw DimensionError("matmul_backward: upstream " + d_out.shape_str() +
                         " for product " + a.shape_str() + " x " + b.shape_str());
  }
  if (d_a) *d_a += matmul_nt(d_out, b);
  if (d_b) *d_b += matmul_tn(a, d_out);
}

// ---- softmax ----------------------------------------------------------------

Matrix softmax_rows(const Matrix& x, const Matrix* mask) {
  if (mask) require_same_shape(x, *mask, "softmax_rows mask");
  Matrix y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    bool any_allowed = false;
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < in.size(); ++c) {
      const bool allowed = !mask || (*mask)(r, c) != 0.0;
      out[c] = allowed ? in[c] : in[c] + kMaskedScore;
      any_allowed = any_allowed || allowed;
      hi = std::max(hi, out[c]);
    }
    if (!any_allowed) {
      throw InvalidMaskError("softmax_rows: row " + std::to_string(r) +
                             " has no unmasked entry");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      const bool allowed = !mask || (*mask)(r, c) != 0.0;
      out[c] = allowed ? std::exp(out[c] - hi) : 0.0;
      total += out[c];
    }
    for (double& v : out) v /= total;
  }
  DYREX_DEBUG_FINITE(y, "softmax_rows");
  return y;
}

Matrix softmax_backward(const Matrix& y, const Matrix& d_y) {
  require_same_shape(y, d_y, "softmax_backward");
  Matrix d_x(y.rows(), y.cols());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto yr = y.row(r);
    auto gr = d_y.row(r);
    double dot = 0.0;
    for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
    auto out = d_x.row(r);
    for (std::size_t c = 0; c < yr.size(); ++c) out[c] = yr[c] * (gr[c] - dot);
  }
  return d_x;
}

// ---- layer norm -------------------------------------------------------------

Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, double eps,
                  LayerNormCache* cache) {
  const std::size_t d = x.cols();
  require_row_vector(gamma, d, "layer_norm gamma");
  require_row_vector(beta, d, "layer_norm beta");
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");

  Matrix y(x.rows(), d);
  Matrix x_hat(x.rows(), d);
  std::vector<double> inv_std(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    auto xh = x_hat.row(r);
    auto out = y.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      xh[c] = (in[c] - mean) * is;
      out[c] = gamma(0, c) * xh[c] + beta(0, c);
    }
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
  }
  DYREX_DEBUG_FINITE(y, "layer_norm");
  return y;
}

void layer_norm_backward(const LayerNormCache& cache, const Matrix& gamma,
                         const Matrix& d_y, Matrix* d_x, Matrix* d_gamma,
                         Matrix* d_beta) {
  require_same_shape(cache.x_hat, d_y, "layer_norm_backward");
  const std::size_t d = d_y.cols();
  require_row_vector(gamma, d, "layer_norm_backward gamma");
  std::vector<double> g(d);
  for (std::size_t r = 0; r < d_y.rows(); ++r) {
    auto dy = d_y.row(r);
    auto xh = cache.x_hat.row(r);
    if (d_gamma || d_beta) {
      for (std::size_t c = 0; c < d; ++c) {
        if (d_gamma) (*d_gamma)(0, c) += dy[c] * xh[c];
        if (d_beta) (*d_beta)(0, c) += dy[c];
      }
    }
    if (!d_x) continue;
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      g[c] = dy[c] * gamma(0, c);
      mean_g += g[c];
      mean_gx += g[c] * xh[c];
    }
    mean_g /= static_cast<double>(d);
    mean_gx /= static_cast<double>(d);
    auto dx = d_x->row(r);
    const double is = cache.inv_std[r];
    for (std::size_t c = 0; c < d; ++c) dx[c] += is * (g[c] - mean_g - xh[c] * mean_gx);
  }
}

// ---- gelu -------------------------------------------------------------------

namespace {

double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

Matrix gelu(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  auto in = x.data();
  auto out = y.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * normal_cdf(in[i]);
  return y;
}

void gelu_backward(const Matrix& x, const Matrix& d_y, Matrix& d_x) {
  require_same_shape(x, d_y, "gelu_backward");
  require_same_shape(x, d_x, "gelu_backward d_x");
  auto in = x.data();
  auto dy = d_y.data();
  auto dx = d_x.data();
  for (std::size_t i = 0; i < in.size(); ++i)
    dx[i] += dy[i] * (normal_cdf(in[i]) + in[i] * normal_pdf(in[i]));
}

// ---- linear -----------------------------------------------------------------

Matrix linear_forward(const Matrix& x, const Matrix& w, const Matrix& b) {
  if (x.cols() != w.rows()) {
    throw DimensionError("linear_forward: input " + x.shape_str() + " vs weight " +
                         w.shape_str());
  }
  require_row_vector(b, w.cols(), "linear_forward bias");
  Matrix y = matmul(x, w);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto out = y.row(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += b(0, c);
  }
  return y;
}

Matrix column_sums(const Matrix& x) {
  Matrix s(1, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) s(0, c) += in[c];
  }
  return s;
}

void linear_backward(const Matrix& x, const Matrix& w, const Matrix& d_y, Matrix* d_x,
                     Matrix* d_w, Matrix* d_b) {
  if (d_y.rows() != x.rows() || d_y.cols() != w.cols()) {
    throw DimensionError("linear_backward: upstream " + d_y.shape_str() + " for " +
                         x.shape_str() + " x " + w.shape_str());
  }
  matmul_backward(x, w, d_y, d_x, d_w);
  if (d_b) *d_b += column_sums(d_y);
}

}  // namespace dyrex
