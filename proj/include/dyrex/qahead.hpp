#pragma once

// Span-prediction head. Two learned queries (start, end) are refined by an
// L-layer transformer decoder over the token representations H, then each
// query scores every token by dot product and a softmax over the allowed
// positions gives p(start = i) and p(end = j). With L = 0 the queries stay
// static and the head reduces to the classic start/end estimator.
//
// Query rows are stored in the order [q_s, q_e]: row 0 start, row 1 end.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dyrex/attention.hpp"
#include "dyrex/blocks.hpp"
#include "dyrex/encoder.hpp"
#include "dyrex/numkit.hpp"

namespace dyrex {

inline constexpr std::size_t kStartRow = 0;
inline constexpr std::size_t kEndRow = 1;

struct HeadConfig {
  std::size_t num_layers = 3;
  std::size_t num_heads = 8;
  MaskStrategy strategy = MaskStrategy::Bidirectional;
  bool restrict_to_passage = true;
  std::size_t max_answer_len = 30;
  double init_std = 0.02;
  // Kept for configuration parity; only 0 is supported.
  double dropout = 0.0;

  void validate(std::size_t dim) const;
};

struct QueryBank {
  ParamId start = 0;  // q_s^0, 1 x d
  ParamId end = 0;    // q_e^0, 1 x d

  static QueryBank create(ParamStore& store, std::size_t dim, Rng& rng, double init_std);
};

struct DecoderLayerParams {
  MhaParams self_att;
  MhaParams cross_att;
  NormParams norm1, norm2, norm3;
  FfnParams ffn;

  static DecoderLayerParams create(ParamStore& store, const std::string& prefix,
                                   std::size_t dim, std::size_t heads, Rng& rng,
                                   double init_std);
};

struct HeadParams {
  QueryBank bank;
  std::vector<DecoderLayerParams> layers;

  static HeadParams create(ParamStore& store, std::size_t dim, const HeadConfig& config,
                           Rng& rng);
};

struct DecoderLayerCache {
  MhaCache self_att, cross_att;
  LayerNormCache norm1, norm2, norm3;
  FfnCache ffn;
};

// Post-norm block:
//   Q~ = LN1(Q + SelfAtt(Q, Q, Q; mask))
//   Q^ = LN2(Q~ + CrossAtt(Q~, H, H; key_padding))
//   out = LN3(Q^ + FFN(Q^))
Matrix decoder_layer_forward(const ParamStore& store, const DecoderLayerParams& params,
                             const Matrix& q_in, const Matrix& h, const AttnMask& mask,
                             std::span<const std::uint8_t> key_padding,
                             DecoderLayerCache* cache = nullptr);

// Accumulates parameter gradients; adds dL/dQ_in into d_q_in and, when
// non-null, dL/dH into d_h.
void decoder_layer_backward(const ParamStore& store, const DecoderLayerParams& params,
                            const DecoderLayerCache& cache, const Matrix& d_out,
                            GradBuffer& grads, Matrix& d_q_in, Matrix* d_h);

// Q^0 = [q_s^0 ; q_e^0] as a 2 x d matrix.
Matrix initial_queries(const ParamStore& store, const QueryBank& bank);

// Folds decoder_layer_forward over `layers` starting from Q^0.
Matrix decode_queries(const ParamStore& store, const HeadParams& head, const Matrix& h,
                      const HeadConfig& config, std::span<const std::uint8_t> key_padding,
                      std::vector<DecoderLayerCache>* caches = nullptr);

struct SpanDistributions {
  std::vector<double> p_start;
  std::vector<double> p_end;
  std::vector<double> log_p_start;  // -inf outside the allowed positions
  std::vector<double> log_p_end;
};

// 1 where a span boundary may fall: real tokens, and passage tokens only when
// restrict_to_passage is set.
std::vector<std::uint8_t> allowed_positions(const TokenizedInput& input,
                                            bool restrict_to_passage);

// p_start = softmax_i(q_s . h_i), p_end = softmax_j(q_e . h_j) over allowed positions.
SpanDistributions span_distributions(const Matrix& queries, const Matrix& h,
                                     const TokenizedInput& input, const HeadConfig& config);


// -log p_start[start] - log p_end[end] from the log-softmax. Raises DataError
// naming `example_id` when the gold position is outside the allowed region.
double span_nll(const SpanDistributions& dists, TokenSpan gold,
                std::string_view example_id = {});

struct HeadForward {
  std::vector<std::uint8_t> allowed;
  std::vector<DecoderLayerCache> layers;
  Matrix q_final;
  SpanDistributions dists;
};

HeadForward head_forward(const ParamStore& store, const HeadParams& head,
                         const HeadConfig& config, const Matrix& h,
                         const TokenizedInput& input);

// Backward of `scale * span_nll` through the estimators and every decoder
// layer. Accumulates into `grads`; returns dL/dH.
Matrix head_backward(const ParamStore& store, const HeadParams& head,
                     const HeadForward& forward, const Matrix& h, TokenSpan gold,
                     double scale, GradBuffer& grads);

struct SpanPrediction {
  std::size_t start = 0;
  std::size_t end = 0;
  double score = 0.0;
  std::string text;
};

// Best (i, j) with i <= j, j - i + 1 <= max_answer_len, both allowed,
// maximizing p_start[i] * p_end[j]; ties go to the smaller i, then smaller j.
SpanPrediction decode_span(const SpanDistributions& dists, std::span<const std::uint8_t> allowed,
                           std::size_t max_answer_len);

}  // namespace dyrex
