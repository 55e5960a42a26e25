#include <cmath>

#include "dyrex/errors.hpp"
#include "dyrex/numkit.hpp"

namespace dyrex {

void GradBuffer::zero() {
  for (Matrix& g : grads_) g.set_zero();
}

void GradBuffer::add(const GradBuffer& other) {
  if (other.grads_.size() != grads_.size()) {
    throw DimensionError("GradBuffer::add: layout mismatch");
  }
  for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += other.grads_[i];
}

void GradBuffer::scale(double s) {
  for (Matrix& g : grads_) g *= s;
}

double GradBuffer::squared_norm() const {
  double total = 0.0;
  for (const Matrix& g : grads_)
    for (double v : g.data()) total += v * v;
  return total;
}

ParamId ParamStore::add(std::string name, Matrix init, bool trainable) {
  if (index_.contains(name)) throw ConfigError("ParamStore: duplicate parameter '" + name + "'");
  const ParamId id = entries_.size();
  index_.emplace(name, id);
  grads_.append(Matrix(init.rows(), init.cols()));
  entries_.push_back(Entry{std::move(name), std::move(init), trainable});
  return id;
}

std::optional<ParamId> ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

ParamId ParamStore::at(const std::string& name) const {
  auto id = find(name);
  if (!id) throw ConfigError("ParamStore: no parameter named '" + name + "'");
  return *id;
}

GradBuffer ParamStore::make_grad_buffer() const {
  GradBuffer buf;
  for (const Entry& e : entries_) buf.append(Matrix(e.value.rows(), e.value.cols()));
  return buf;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const Entry& e : entries_) n += e.value.size();
  return n;
}

// ---- Rng ----------------------------------------------------------------------

double Rng::uniform() {
  // Top 53 bits -> [0, 1).
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
  if (spare_normal_) {
    const double z = *spare_normal_;
    spare_normal_.reset();
    return mean + stddev * z;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * 3.14159265358979323846 * u2;
  spare_normal_ = radius * std::sin(angle);
  return mean + stddev * radius * std::cos(angle);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw ConfigError("Rng::below: empty range");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return static_cast<std::size_t>(x % bound);
}

Matrix Rng::normal_matrix(std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = normal(0.0, stddev);
  return m;
}

}  // namespace dyrex
