#pragma once

// Pieces shared by encoder and decoder layers: the point-wise feed-forward
// network and layer-norm parameter pairs.

#include <string>

#include "dyrex/numkit.hpp"

namespace dyrex {

struct NormParams {
  ParamId gamma = 0, beta = 0;

  // gamma = 1, beta = 0.
  static NormParams create(ParamStore& store, const std::string& prefix, std::size_t dim,
                           bool trainable = true);
};

// W2 * GeLU(W1 * x + b1) + b2, hidden width 4 * dim.
struct FfnParams {
  ParamId w1 = 0, b1 = 0, w2 = 0, b2 = 0;

  static FfnParams create(ParamStore& store, const std::string& prefix, std::size_t dim,
                          Rng& rng, double init_std, bool trainable = true);
};

inline constexpr std::size_t kFfnExpansion = 4;

struct FfnCache {
  Matrix x, pre, act;
};

Matrix ffn_forward(const ParamStore& store, const FfnParams& p, const Matrix& x,
                   FfnCache* cache = nullptr);
void ffn_backward(const ParamStore& store, const FfnParams& p, const FfnCache& cache,
                  const Matrix& d_y, GradBuffer& grads, Matrix* d_x);

inline Matrix norm_forward(const ParamStore& store, const NormParams& p, const Matrix& x,
                           LayerNormCache* cache = nullptr) {
  return layer_norm(x, store.value(p.gamma), store.value(p.beta), kLayerNormEps, cache);
}

inline void norm_backward(const ParamStore& store, const NormParams& p,
                          const LayerNormCache& cache, const Matrix& d_y, GradBuffer& grads,
                          Matrix* d_x) {
  layer_norm_backward(cache, store.value(p.gamma), d_y, d_x, &grads[p.gamma], &grads[p.beta]);
}

}  // namespace dyrex
