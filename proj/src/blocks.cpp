#include "dyrex/blocks.hpp"

namespace dyrex {

NormParams NormParams::create(ParamStore& store, const std::string& prefix, std::size_t dim,
                              bool trainable) {
  NormParams p;
  p.gamma = store.add(prefix + ".gamma", Matrix::filled(1, dim, 1.0), trainable);
  p.beta = store.add(prefix + ".beta", Matrix(1, dim), trainable);
  return p;
}

FfnParams FfnParams::create(ParamStore& store, const std::string& prefix, std::size_t dim,
                            Rng& rng, double init_std, bool trainable) {
  const std::size_t hidden = kFfnExpansion * dim;
  FfnParams p;
  p.w1 = store.add(prefix + ".w1", rng.normal_matrix(dim, hidden, init_std), trainable);
  p.b1 = store.add(prefix + ".b1", Matrix(1, hidden), trainable);
  p.w2 = store.add(prefix + ".w2", rng.normal_matrix(hidden, dim, init_std), trainable);
  p.b2 = store.add(prefix + ".b2", Matrix(1, dim), trainable);
  return p;
}

Matrix ffn_forward(const ParamStore& store, const FfnParams& p, const Matrix& x,
                   FfnCache* cache) {
  Matrix pre = linear_forward(x, store.value(p.w1), store.value(p.b1));
  Matrix act = gelu(pre);
  Matrix y = linear_forward(act, store.value(p.w2), store.value(p.b2));
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

void ffn_backward(const ParamStore& store, const FfnParams& p, const FfnCache& cache,
                  const Matrix& d_y, GradBuffer& grads, Matrix* d_x) {
  Matrix d_act(cache.act.rows(), cache.act.cols());
  linear_backward(cache.act, store.value(p.w2), d_y, &d_act, &grads[p.w2], &grads[p.b2]);
  Matrix d_pre(cache.pre.rows(), cache.pre.cols());
  gelu_backward(cache.pre, d_act, d_pre);
  linear_backward(cache.x, store.value(p.w1), d_pre, d_x, &grads[p.w1], &grads[p.b1]);
}

}  // namespace dyrex
