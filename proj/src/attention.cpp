#include "dyrex/attention.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "dyrex/errors.hpp"

namespace dyrex {

std::string_view to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::Bidirectional: return "bidirectional";
    case MaskStrategy::Causal: return "causal";
    case MaskStrategy::Independent: return "independent";
  }
  return "unknown";
}

MaskStrategy parse_mask_strategy(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "bidirectional") return MaskStrategy::Bidirectional;
  if (lower == "causal") return MaskStrategy::Causal;
  if (lower == "independent") return MaskStrategy::Independent;
  throw ConfigError("unknown mask strategy '" + std::string(name) +
                    "' (expected bidirectional, causal or independent)");
}

AttnMask::AttnMask(Matrix allow_matrix) : allow(std::move(allow_matrix)) {
  for (std::size_t r = 0; r < allow.rows(); ++r) {
    bool any = false;
    for (double v : allow.row(r)) {
      if (v != 0.0 && v != 1.0) throw InvalidMaskError("AttnMask: entries must be 0 or 1");
      any = any || v == 1.0;
    }
    if (!any) throw InvalidMaskError("AttnMask: query row " + std::to_string(r) + " allows no key");
  }
}

AttnMask build_query_mask(MaskStrategy strategy) {
  switch (strategy) {
    case MaskStrategy::Bidirectional: return AttnMask(Matrix::from_rows({{1, 1}, {1, 1}}));
    case MaskStrategy::Causal: return AttnMask(Matrix::from_rows({{1, 0}, {1, 1}}));
    case MaskStrategy::Independent: return AttnMask(Matrix::from_rows({{1, 0}, {0, 1}}));
  }
  throw ConfigError("build_query_mask: unknown strategy");
}

MhaParams MhaParams::create(ParamStore& store, const std::string& prefix, std::size_t dim,
                            std::size_t heads, Rng& rng, double init_std, bool trainable) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError(prefix + ": embedding dim " + std::to_string(dim) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  MhaParams p;
  p.dim = dim;
  p.heads = heads;
  p.w_q = store.add(prefix + ".w_q", rng.normal_matrix(dim, dim, init_std), trainable);
  p.b_q = store.add(prefix + ".b_q", Matrix(1, dim), trainable);
  p.w_k = store.add(prefix + ".w_k", rng.normal_matrix(dim, dim, init_std), trainable);
  p.w_v = store.add(prefix + ".w_v", rng.normal_matrix(dim, dim, init_std), trainable);
  p.b_v = store.add(prefix + ".b_v", Matrix(1, dim), trainable);
  p.w_o = store.add(prefix + ".w_o", rng.normal_matrix(dim, dim, init_std), trainable);
  p.b_o = store.add(prefix + ".b_o", Matrix(1, dim), trainable);
  return p;
}

namespace {

Matrix head_columns(const Matrix& x, std::size_t head, std::size_t head_dim) {
  Matrix out(x.rows(), head_dim);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < head_dim; ++c) out(r, c) = x(r, head * head_dim + c);
  return out;
}

void add_head_columns(Matrix& x, const Matrix& part, std::size_t head, std::size_t head_dim) {
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < head_dim; ++c) x(r, head * head_dim + c) += part(r, c);
}

}  // namespace

MhaResult mha_forward(const ParamStore& store, const MhaParams& params, const Matrix& queries,
                      const Matrix& keys_values, const AttnMask* mask,
                      std::span<const std::uint8_t> key_padding) {
  const std::size_t d = params.dim;
  if (params.heads == 0 || d % params.heads != 0) {
    throw ConfigError("mha_forward: dim " + std::to_string(d) + " not divisible by heads");
  }
  if (queries.cols() != d || keys_values.cols() != d) {
    throw DimensionError("mha_forward: inputs " + queries.shape_str() + ", " +
                         keys_values.shape_str() + " for dim " + std::to_string(d));
  }
  const std::size_t m = queries.rows(), n = keys_values.rows();
  if (mask && (mask->allow.rows() != m || mask->allow.cols() != n)) {
    throw DimensionError("mha_forward: mask " + mask->allow.shape_str() + " for " +
                         std::to_string(m) + " queries and " + std::to_string(n) + " keys");
  }
  if (!key_padding.empty() && key_padding.size() != n) {
    throw DimensionError("mha_forward: key padding length " + std::to_string(key_padding.size()) +
                         " for " + std::to_string(n) + " keys");
  }

  MhaResult res;
  MhaCache& c = res.cache;
  c.x_q = queries;
  c.x_kv = keys_values;
  c.q = linear_forward(queries, store.value(params.w_q), store.value(params.b_q));
  c.k = matmul(keys_values, store.value(params.w_k));
  c.v = linear_forward(keys_values, store.value(params.w_v), store.value(params.b_v));

  c.allow = Matrix::filled(m, n, 1.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const bool allowed = (!mask || mask->allow(i, j) != 0.0) &&
                           (key_padding.empty() || key_padding[j] != 0);
      c.allow(i, j) = allowed ? 1.0 : 0.0;
    }
  }

  const std::size_t dh = params.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.concat = Matrix(m, d);
  c.weights.reserve(params.heads);
  for (std::size_t h = 0; h < params.heads; ++h) {
    Matrix qh = head_columns(c.q, h, dh);
    Matrix kh = head_columns(c.k, h, dh);
    Matrix vh = head_columns(c.v, h, dh);
    Matrix scores = matmul_nt(qh, kh);
    scores *= scale;
    Matrix w = softmax_rows(scores, &c.allow);
    add_head_columns(c.concat, matmul(w, vh), h, dh);
    c.weights.push_back(std::move(w));
  }
  res.output = linear_forward(c.concat, store.value(params.w_o), store.value(params.b_o));
  return res;
}

void mha_backward(const ParamStore& store, const MhaParams& params, const MhaCache& cache,
                  const Matrix& d_output, GradBuffer& grads, Matrix* d_queries,
                  Matrix* d_keys_values) {
  const std::size_t d = params.dim;
  const std::size_t m = cache.x_q.rows();
  if (d_output.rows() != m || d_output.cols() != d) {
    throw DimensionError("mha_backward: upstream " + d_output.shape_str() + " for output (" +
                         std::to_string(m) + "x" + std::to_string(d) + ")");
  }
  Matrix d_concat(m, d);
  linear_backward(cache.concat, store.value(params.w_o), d_output, &d_concat,
                  &grads[params.w_o], &grads[params.b_o]);

  const std::size_t dh = params.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix d_q(m, d), d_k(cache.x_kv.rows(), d), d_v(cache.x_kv.rows(), d);
  for (std::size_t h = 0; h < params.heads; ++h) {
    const Matrix& w = cache.weights[h];
    Matrix qh = head_columns(cache.q, h, dh);
    Matrix kh = head_columns(cache.k, h, dh);
    Matrix vh = head_columns(cache.v, h, dh);
    Matrix d_head = head_columns(d_concat, h, dh);

    Matrix d_w = matmul_nt(d_head, vh);
    add_head_columns(d_v, matmul_tn(w, d_head), h, dh);
    Matrix d_scores = softmax_backward(w, d_w);
    d_scores *= scale;
    add_head_columns(d_q, matmul(d_scores, kh), h, dh);
    add_head_columns(d_k, matmul_tn(d_scores, qh), h, dh);
  }

  linear_backward(cache.x_q, store.value(params.w_q), d_q, d_queries, &grads[params.w_q],
                  &grads[params.b_q]);
  matmul_backward(cache.x_kv, store.value(params.w_k), d_k, d_keys_values, &grads[params.w_k]);
  linear_backward(cache.x_kv, store.value(params.w_v), d_v, d_keys_values, &grads[params.w_v],
                  &grads[params.b_v]);
}

}  // namespace dyrex
