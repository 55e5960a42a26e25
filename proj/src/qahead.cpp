#include "dyrex/qahead.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dyrex/errors.hpp"

namespace dyrex {

void HeadConfig::validate(std::size_t dim) const {
  if (num_layers > 0 && (num_heads == 0 || dim % num_heads != 0)) {
    throw ConfigError("head: dim " + std::to_string(dim) + " not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  if (max_answer_len == 0) throw ConfigError("head: max_answer_len must be positive");
  if (dropout != 0.0) throw ConfigError("head: dropout is not supported (must be 0)");
}

QueryBank QueryBank::create(ParamStore& store, std::size_t dim, Rng& rng, double init_std) {
  QueryBank bank;
  bank.start = store.add("head.query_start", rng.normal_matrix(1, dim, init_std));
  bank.end = store.add("head.query_end", rng.normal_matrix(1, dim, init_std));
  return bank;
}

DecoderLayerParams DecoderLayerParams::create(ParamStore& store, const std::string& prefix,
                                              std::size_t dim, std::size_t heads, Rng& rng,
                                              double init_std) {
  DecoderLayerParams p;
  p.self_att = MhaParams::create(store, prefix + ".self_att", dim, heads, rng, init_std);
  p.norm1 = NormParams::create(store, prefix + ".norm1", dim);
  p.cross_att = MhaParams::create(store, prefix + ".cross_att", dim, heads, rng, init_std);
  p.norm2 = NormParams::create(store, prefix + ".norm2", dim);
  p.ffn = FfnParams::create(store, prefix + ".ffn", dim, rng, init_std);
  p.norm3 = NormParams::create(store, prefix + ".norm3", dim);
  return p;
}

HeadParams HeadParams::create(ParamStore& store, std::size_t dim, const HeadConfig& config,
                              Rng& rng) {
  config.validate(dim);
  const double init_std = config.init_std;
  HeadParams head;
  head.bank = QueryBank::create(store, dim, rng, init_std);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    head.layers.push_back(DecoderLayerParams::create(store, "head.layer" + std::to_string(l), dim,
                                                     config.num_heads, rng, init_std));
  }
  return head;
}

Matrix decoder_layer_forward(const ParamStore& store, const DecoderLayerParams& params,
                             const Matrix& q_in, const Matrix& h, const AttnMask& mask,
                             std::span<const std::uint8_t> key_padding,
                             DecoderLayerCache* cache) {
  DecoderLayerCache local;
  DecoderLayerCache& c = cache ? *cache : local;

  MhaResult self = mha_forward(store, params.self_att, q_in, q_in, &mask, {});
  Matrix q_tilde = norm_forward(store, params.norm1, q_in + self.output, &c.norm1);
  c.self_att = std::move(self.cache);

  MhaResult cross = mha_forward(store, params.cross_att, q_tilde, h, nullptr, key_padding);
  Matrix q_hat = norm_forward(store, params.norm2, q_tilde + cross.output, &c.norm2);
  c.cross_att = std::move(cross.cache);

  Matrix f = ffn_forward(store, params.ffn, q_hat, &c.ffn);
  return norm_forward(store, params.norm3, q_hat + f, &c.norm3);
}

void decoder_layer_backward(const ParamStore& store, const DecoderLayerParams& params,
                            const DecoderLayerCache& cache, const Matrix& d_out,
                            GradBuffer& grads, Matrix& d_q_in, Matrix* d_h) {
  const std::size_t m = d_out.rows(), d = d_out.cols();

  Matrix d_r3(m, d);
  norm_backward(store, params.norm3, cache.norm3, d_out, grads, &d_r3);
  Matrix d_q_hat = d_r3;
  ffn_backward(store, params.ffn, cache.ffn, d_r3, grads, &d_q_hat);

  Matrix d_r2(m, d);
  norm_backward(store, params.norm2, cache.norm2, d_q_hat, grads, &d_r2);
  Matrix d_q_tilde = d_r2;
  mha_backward(store, params.cross_att, cache.cross_att, d_r2, grads, &d_q_tilde, d_h);

  Matrix d_r1(m, d);
  norm_backward(store, params.norm1, cache.norm1, d_q_tilde, grads, &d_r1);
  d_q_in += d_r1;
  mha_backward(store, params.self_att, cache.self_att, d_r1, grads, &d_q_in, &d_q_in);
}

Matrix initial_queries(const ParamStore& store, const QueryBank& bank) {
  const Matrix& qs = store.value(bank.start);
  const Matrix& qe = store.value(bank.end);
  Matrix q(2, qs.cols());
  std::copy(qs.data().begin(), qs.data().end(), q.row(kStartRow).begin());
  std::copy(qe.data().begin(), qe.data().end(), q.row(kEndRow).begin());
  return q;
}

Matrix decode_queries(const ParamStore& store, const HeadParams& head, const Matrix& h,
                      const HeadConfig& config, std::span<const std::uint8_t> key_padding,
                      std::vector<DecoderLayerCache>* caches) {
  if (head.layers.size() != config.num_layers) {
    throw ConfigError("decode_queries: head has " + std::to_string(head.layers.size()) +
                      " decoder layers, config says " + std::to_string(config.num_layers));
  }
  Matrix q = initial_queries(store, head.bank);
  if (q.cols() != h.cols()) {
    throw DimensionError("decode_queries: query dim " + std::to_string(q.cols()) +
                         " vs token dim " + std::to_string(h.cols()));
  }
  const AttnMask mask = build_query_mask(config.strategy);
  if (caches) caches->assign(head.layers.size(), {});
  for (std::size_t l = 0; l < head.layers.size(); ++l) {
    q = decoder_layer_forward(store, head.layers[l], q, h, mask, key_padding,
                              caches ? &(*caches)[l] : nullptr);
  }
  return q;
}

std::vector<std::uint8_t> allowed_positions(const TokenizedInput& input,
                                            bool restrict_to_passage) {
  std::vector<std::uint8_t> allowed(input.size(), 0);
  for (std::size_t i = 0; i < input.size(); ++i) {
    const bool in_passage = i >= input.passage_begin && i <= input.passage_end;
    allowed[i] = input.padding_mask[i] != 0 && (!restrict_to_passage || in_passage);
  }
  return allowed;
}

namespace {

SpanDistributions distributions_from(const Matrix& queries, const Matrix& h,
                                     std::span<const std::uint8_t> allowed) {
  if (queries.rows() != 2 || queries.cols() != h.cols()) {
    throw DimensionError("span_distributions: queries " + queries.shape_str() + " vs H " +
                         h.shape_str());
  }
  if (allowed.size() != h.rows()) {
    throw DimensionError("span_distributions: mask length " + std::to_string(allowed.size()) +
                         " vs " + std::to_string(h.rows()) + " tokens");
  }
  Matrix logits = matmul_nt(queries, h);
  Matrix mask(2, h.rows());
  for (std::size_t i = 0; i < h.rows(); ++i) {
    mask(kStartRow, i) = allowed[i];
    mask(kEndRow, i) = allowed[i];
  }
  Matrix p;
  try {
    p = softmax_rows(logits, &mask);
  } catch (const InvalidMaskError&) {
    throw DataError("span_distributions: no allowed answer position");
  }
  SpanDistributions out;
  out.p_start.assign(p.row(kStartRow).begin(), p.row(kStartRow).end());
  out.p_end.assign(p.row(kEndRow).begin(), p.row(kEndRow).end());
  // log-softmax computed directly so the loss stays exact when p underflows.
  auto log_softmax = [&](std::size_t r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < h.rows(); ++i)
      if (allowed[i]) mx = std::max(mx, logits(r, i));
    double sum = 0.0;
    for (std::size_t i = 0; i < h.rows(); ++i)
      if (allowed[i]) sum += std::exp(logits(r, i) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out_row(h.rows(), -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < h.rows(); ++i)
      if (allowed[i]) out_row[i] = logits(r, i) - lse;
    return out_row;
  };
  out.log_p_start = log_softmax(kStartRow);
  out.log_p_end = log_softmax(kEndRow);
  return out;
}

}  // namespace

SpanDistributions span_distributions(const Matrix& queries, const Matrix& h,
                                     const TokenizedInput& input, const HeadConfig& config) {
  return distributions_from(queries, h, allowed_positions(input, config.restrict_to_passage));
}

double span_nll(const SpanDistributions& dists, TokenSpan gold, std::string_view example_id) {
  const auto where = [&] {
    return example_id.empty() ? std::string() : " (example " + std::string(example_id) + ")";
  };
  if (gold.start >= dists.log_p_start.size() || gold.end >= dists.log_p_end.size()) {
    throw DataError("span_nll: gold span out of range" + where());
  }
  const double ls = dists.log_p_start[gold.start];
  const double le = dists.log_p_end[gold.end];
  if (!std::isfinite(ls) || !std::isfinite(le)) {
    throw DataError("span_nll: gold span lies outside the allowed region" + where());
  }
  return -ls - le;
}

HeadForward head_forward(const ParamStore& store, const HeadParams& head,
                         const HeadConfig& config, const Matrix& h,
                         const TokenizedInput& input) {
  if (h.rows() != input.size()) {
    throw DimensionError("head_forward: H has " + std::to_string(h.rows()) + " rows for " +
                         std::to_string(input.size()) + " tokens");
  }
  HeadForward f;
  f.allowed = allowed_positions(input, config.restrict_to_passage);
  f.q_final = decode_queries(store, head, h, config, input.padding_mask, &f.layers);
  f.dists = distributions_from(f.q_final, h, f.allowed);
  return f;
}

Matrix head_backward(const ParamStore& store, const HeadParams& head,
                     const HeadForward& forward, const Matrix& h, TokenSpan gold,
                     double scale, GradBuffer& grads) {
  const std::size_t n = h.rows();
  if (forward.dists.p_start.size() != n || gold.start >= n || gold.end >= n) {
    throw DimensionError("head_backward: gold span or distributions do not match H");
  }
  // Softmax cross-entropy: dL/dlogit = p - onehot(gold).
  Matrix d_logits(2, n);
  for (std::size_t i = 0; i < n; ++i) {
    d_logits(kStartRow, i) = scale * forward.dists.p_start[i];
    d_logits(kEndRow, i) = scale * forward.dists.p_end[i];
  }
  d_logits(kStartRow, gold.start) -= scale;
  d_logits(kEndRow, gold.end) -= scale;

  Matrix d_q = matmul(d_logits, h);
  Matrix d_h = matmul_tn(d_logits, forward.q_final);
  for (std::size_t l = head.layers.size(); l-- > 0;) {
    Matrix d_q_in(d_q.rows(), d_q.cols());
    decoder_layer_backward(store, head.layers[l], forward.layers[l], d_q, grads, d_q_in, &d_h);
    d_q = std::move(d_q_in);
  }
  auto gs = grads[head.bank.start].row(0);
  auto ge = grads[head.bank.end].row(0);
  for (std::size_t c = 0; c < d_q.cols(); ++c) {
    gs[c] += d_q(kStartRow, c);
    ge[c] += d_q(kEndRow, c);
  }
  return d_h;
}

SpanPrediction decode_span(const SpanDistributions& dists, std::span<const std::uint8_t> allowed,
                           std::size_t max_answer_len) {
  const std::size_t n = dists.p_start.size();
  if (dists.p_end.size() != n || allowed.size() != n) {
    throw DimensionError("decode_span: distribution and mask lengths differ");
  }
  bool found = false;
  SpanPrediction best;
  for (std::size_t i = 0; i < n; ++i) {
    if (!allowed[i]) continue;
    const std::size_t last = std::min(n, i + max_answer_len);
    for (std::size_t j = i; j < last; ++j) {
      if (!allowed[j]) continue;
      const double score = dists.p_start[i] * dists.p_end[j];
      if (!found || score > best.score) {
        found = true;
        best.start = i;
        best.end = j;
        best.score = score;
      }
    }
  }
  if (!found) throw DataError("decode_span: no valid (start, end) pair");
  return best;
}

}  // namespace dyrex
