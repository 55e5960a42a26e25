#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dyrex/numkit.hpp"

namespace dyrex {

// How the two span queries may attend to each other in decoder self-attention.
enum class MaskStrategy { Bidirectional, Causal, Independent };

std::string_view to_string(MaskStrategy s);
// Accepts "bidirectional", "causal", "independent" (case-insensitive).
MaskStrategy parse_mask_strategy(std::string_view name);

// allow(i, j) == 1 iff query i may attend key j. Every row allows at least one key.
struct AttnMask {
  Matrix allow;

  explicit AttnMask(Matrix allow_matrix);
};

// 2x2 mask over the query rows [q_s, q_e]:
//   Bidirectional [[1,1],[1,1]]; Causal [[1,0],[1,1]] (q_s feeds q_e); Independent I2.
AttnMask build_query_mask(MaskStrategy strategy);

// Projections for one multi-head attention block. Queries, values and output
// carry biases; the key projection does not (a key bias adds the same score
// to every key of a row and cancels in the softmax).
struct MhaParams {
  std::size_t dim = 0;
  std::size_t heads = 0;
  ParamId w_q = 0, b_q = 0, w_k = 0, w_v = 0, b_v = 0, w_o = 0, b_o = 0;

  std::size_t head_dim() const { return dim / heads; }

  // Weights ~ N(0, init_std), biases zero.
  static MhaParams create(ParamStore& store, const std::string& prefix, std::size_t dim,
                          std::size_t heads, Rng& rng, double init_std, bool trainable = true);
};

struct MhaCache {
  Matrix x_q, x_kv;
  Matrix q, k, v;
  Matrix concat;
  Matrix allow;                  // combined mask actually applied (m x n)
  std::vector<Matrix> weights;   // per head, m x n
};

struct MhaResult {
  Matrix output;
  MhaCache cache;
};

// Scaled dot-product attention per head over projected queries/keys/values.
// `key_padding` (length n, 1 = real token) may be empty. Keys that are
// disallowed by `mask` or padded get exactly zero weight.
MhaResult mha_forward(const ParamStore& store, const MhaParams& params, const Matrix& queries,
                      const Matrix& keys_values, const AttnMask* mask,
                      std::span<const std::uint8_t> key_padding);

// Accumulates parameter gradients into `grads`, and input gradients into
// d_queries / d_keys_values when non-null. For self-attention pass the same
// matrix for both.
void mha_backward(const ParamStore& store, const MhaParams& params, const MhaCache& cache,
                  const Matrix& d_output, GradBuffer& grads, Matrix* d_queries,
                  Matrix* d_keys_values);

}  // namespace dyrex
