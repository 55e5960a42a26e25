#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "dyrex/errors.hpp"
#include "dyrex/model.hpp"
#include "dyrex/qahead.hpp"
#include "test_util.hpp"

using namespace dyrex;
using dyrex::testing::max_fd_rel_error;

namespace {

TokenizedInput plain_input(std::size_t n, std::size_t question_len = 0, std::size_t pad = 0) {
  TokenizedInput in;
  for (std::size_t i = 0; i < n + pad; ++i) {
    in.token_ids.push_back(i < n ? 2 : Vocab::kPadId);
    in.segment_ids.push_back(i < question_len ? 0 : 1);
    in.padding_mask.push_back(i < n ? 1 : 0);
  }
  in.passage_begin = question_len;
  in.passage_end = n - 1;
  return in;
}

struct Head {
  ParamStore store;
  HeadParams params;
  HeadConfig config;
  Head(std::size_t dim, std::size_t layers, MaskStrategy s, std::uint64_t seed, double std = 0.3) {
    config.num_layers = layers;
    config.num_heads = 2;
    config.strategy = s;
    config.init_std = std;
    Rng rng(seed);
    params = HeadParams::create(store, dim, config, rng);
  }
  SpanDistributions dists(const Matrix& h, const TokenizedInput& in) {
    return head_forward(store, params, config, h, in).dists;
  }
};

// Vanilla estimator straight from the definition.
std::vector<double> vanilla(std::span<const double> q, const Matrix& h,
                            const std::vector<std::uint8_t>& allowed) {
  std::vector<double> logits(h.rows()), p(h.rows(), 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < h.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < q.size(); ++c) s += q[c] * h(i, c);
    logits[i] = s;
    if (allowed[i]) mx = std::max(mx, s);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < h.rows(); ++i)
    if (allowed[i]) z += std::exp(logits[i] - mx);
  for (std::size_t i = 0; i < h.rows(); ++i)
    if (allowed[i]) p[i] = std::exp(logits[i] - mx) / z;
  return p;
}

SpanDistributions from_probs(std::vector<double> ps, std::vector<double> pe) {
  SpanDistributions d;
  d.p_start = std::move(ps);
  d.p_end = std::move(pe);
  for (double p : d.p_start) d.log_p_start.push_back(std::log(p));
  for (double p : d.p_end) d.log_p_end.push_back(std::log(p));
  return d;
}

SpanPrediction brute_force(const SpanDistributions& d, const std::vector<std::uint8_t>& allowed,
                           std::size_t max_len) {
  SpanPrediction best;
  double score = -1.0;
  const std::size_t n = allowed.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (!allowed[i] || !allowed[j] || j < i || j - i + 1 > max_len) continue;
      const double s = d.p_start[i] * d.p_end[j];
      if (s > score) {
        score = s;
        best.start = i;
        best.end = j;
      }
    }
  best.score = score;
  return best;
}

}  // namespace

TEST_CASE("zero-weight decoder layer is three layer norms") {
  Head hd(8, 1, MaskStrategy::Bidirectional, 1);
  const auto& layer = hd.params.layers[0];
  for (ParamId id = 0; id < hd.store.size(); ++id) {
    const std::string& n = hd.store.name(id);
    if (n.find("gamma") == std::string::npos && n.find("beta") == std::string::npos &&
        n.find("query") == std::string::npos)
      hd.store.value(id).set_zero();
  }
  Rng rng(2);
  const Matrix q = rng.normal_matrix(2, 8, 1.0), h = rng.normal_matrix(5, 8, 1.0);
  const Matrix one = Matrix::filled(1, 8, 1.0), zero(1, 8);
  const Matrix expected = layer_norm(layer_norm(layer_norm(q, one, zero), one, zero), one, zero);
  const Matrix got = decoder_layer_forward(hd.store, layer, q, h,
                                           build_query_mask(MaskStrategy::Bidirectional), {});
  CHECK(max_abs_diff(got, expected) < 1e-12);
}

TEST_CASE("decoder layer matches the composition of its sublayers") {
  Head hd(8, 1, MaskStrategy::Causal, 3);
  const auto& p = hd.params.layers[0];
  Rng rng(4);
  const Matrix q = rng.normal_matrix(2, 8, 1.0), h = rng.normal_matrix(6, 8, 1.0);
  const std::vector<std::uint8_t> pad{1, 1, 1, 1, 1, 0};
  const AttnMask mask = build_query_mask(MaskStrategy::Causal);
  const auto& s = hd.store;
  const Matrix t = norm_forward(s, p.norm1, q + mha_forward(s, p.self_att, q, q, &mask, {}).output);
  const Matrix u = norm_forward(s, p.norm2, t + mha_forward(s, p.cross_att, t, h, nullptr, pad).output);
  const Matrix expected = norm_forward(s, p.norm3, u + ffn_forward(s, p.ffn, u));
  CHECK(max_abs_diff(decoder_layer_forward(s, p, q, h, mask, pad), expected) < 1e-12);
}

TEST_CASE("decode_queries folds the layers") {
  Rng rng(5);
  const Matrix h = rng.normal_matrix(7, 8, 1.0);
  {
    Head hd(8, 0, MaskStrategy::Bidirectional, 6);
    const Matrix q = decode_queries(hd.store, hd.params, h, hd.config, {});
    CHECK(q == initial_queries(hd.store, hd.params.bank));
    CHECK(q.slice_rows(0, 1) == hd.store.value(hd.params.bank.start));
    CHECK(q.slice_rows(1, 1) == hd.store.value(hd.params.bank.end));
  }
  for (std::size_t layers : {1, 3}) {
    Head hd(8, layers, MaskStrategy::Bidirectional, 7);
    const AttnMask mask = build_query_mask(hd.config.strategy);
    Matrix q = initial_queries(hd.store, hd.params.bank);
    for (const auto& l : hd.params.layers) q = decoder_layer_forward(hd.store, l, q, h, mask, {});
    CHECK(decode_queries(hd.store, hd.params, h, hd.config, {}) == q);
  }
  Head hd(8, 2, MaskStrategy::Bidirectional, 8);
  HeadConfig wrong = hd.config;
  wrong.num_layers = 3;
  CHECK_THROWS_AS(decode_queries(hd.store, hd.params, h, wrong, {}), ConfigError);
}

TEST_CASE("span distribution examples") {
  const TokenizedInput in = plain_input(4);
  HeadConfig cfg;
  cfg.restrict_to_passage = false;
  Matrix h = Matrix::from_rows({{1, 0}, {2, 0}, {3, 0}, {0, 0}});
  Matrix q = Matrix::from_rows({{1, 0}, {0, 0}});
  const auto d = span_distributions(q, h, in, cfg);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0) + 1.0;
  CHECK(std::abs(d.p_start[0] - std::exp(1.0) / z) < 1e-12);
  CHECK(std::abs(d.p_start[2] - std::exp(3.0) / z) < 1e-12);
  CHECK(std::abs(d.p_start[3] - 1.0 / z) < 1e-12);
  for (double p : d.p_end) CHECK(std::abs(p - 0.25) < 1e-15);

  const Matrix eye = Matrix::identity(4);
  Matrix q2(2, 4);
  q2(0, 2) = 50.0;
  CHECK(span_distributions(q2, eye, in, cfg).p_start[2] > 1.0 - 1e-9);
}

TEST_CASE("allowed region: zero mass outside, question and padding excluded") {
  Rng rng(9);
  const TokenizedInput in = plain_input(8, 3, 2);
  const Matrix h = rng.normal_matrix(10, 4, 1.0), q = rng.normal_matrix(2, 4, 1.0);
  HeadConfig cfg;
  const auto d = span_distributions(q, h, in, cfg);
  double sum = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    const bool allowed = i >= 3 && i < 8;
    if (!allowed) {
      CHECK(d.p_start[i] == 0.0);
      CHECK(d.p_end[i] == 0.0);
      CHECK(std::isinf(d.log_p_start[i]));
    }
    sum += d.p_start[i];
  }
  CHECK(std::abs(sum - 1.0) < 1e-9);
  cfg.restrict_to_passage = false;
  const auto open = span_distributions(q, h, in, cfg);
  CHECK(open.p_start[0] > 0.0);
  CHECK(open.p_start[9] == 0.0);
}

TEST_CASE("span nll examples") {
  auto uniform = from_probs({0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25});
  CHECK(std::abs(span_nll(uniform, {1, 2}) - 2.0 * std::log(4.0)) < 1e-12);
  CHECK(std::abs(span_nll(uniform, {1, 2}) - 2.772589) < 1e-6);
  auto sure = from_probs({0, 1, 0}, {0, 0, 1});
  CHECK(span_nll(sure, {1, 2}) == 0.0);
  auto mixed = from_probs({0.5, 0.5}, {0.75, 0.25});
  CHECK(std::abs(span_nll(mixed, {0, 1}) - (std::log(2.0) + std::log(4.0))) < 1e-12);
  CHECK(std::abs(span_nll(mixed, {0, 1}) - 2.079442) < 1e-6);
  CHECK_THROWS_AS(span_nll(sure, {0, 2}, "q7"), DataError);
  try {
    span_nll(sure, {0, 2}, "q7");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("q7") != std::string::npos);
  }
  CHECK_THROWS_AS(span_nll(sure, {1, 5}), DataError);
}

TEST_CASE("loss is recomputable from the returned distributions") {
  Rng rng(10);
  for (std::size_t layers : {0, 2}) {
    Head hd(8, layers, MaskStrategy::Bidirectional, 11 + layers);
    const TokenizedInput in = plain_input(9, 2);
    const Matrix h = rng.normal_matrix(9, 8, 1.0);
    const auto d = hd.dists(h, in);
    const double loss = span_nll(d, {3, 5});
    CHECK(loss >= 0.0);
    CHECK(loss == -d.log_p_start[3] - d.log_p_end[5]);
  }
}

TEST_CASE("L = 0 equals the vanilla estimator") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    Head hd(8, 0, MaskStrategy::Bidirectional, 100 + trial, 1.0);
    const TokenizedInput in = plain_input(11, 3, 2);
    const Matrix h = rng.normal_matrix(13, 8, 1.0);
    const auto d = hd.dists(h, in);
    const auto allowed = allowed_positions(in, true);
    const auto ps = vanilla(hd.store.value(hd.params.bank.start).row(0), h, allowed);
    const auto pe = vanilla(hd.store.value(hd.params.bank.end).row(0), h, allowed);
    for (std::size_t i = 0; i < 13; ++i) {
      CHECK(std::abs(d.p_start[i] - ps[i]) <= 1e-12);
      CHECK(std::abs(d.p_end[i] - pe[i]) <= 1e-12);
    }
  }
}

TEST_CASE("L = 0 query gradient has the softmax cross-entropy closed form") {
  Rng rng(13);
  Head hd(6, 0, MaskStrategy::Bidirectional, 14, 1.0);
  const TokenizedInput in = plain_input(7, 2);
  const Matrix h = rng.normal_matrix(7, 6, 1.0);
  const TokenSpan gold{3, 4};
  const auto fwd = head_forward(hd.store, hd.params, hd.config, h, in);
  GradBuffer grads = hd.store.make_grad_buffer();
  const Matrix d_h = head_backward(hd.store, hd.params, fwd, h, gold, 1.0, grads);
  for (std::size_t c = 0; c < 6; ++c) {
    double gs = 0.0, ge = 0.0;
    for (std::size_t i = 0; i < 7; ++i) {
      gs += (fwd.dists.p_start[i] - (i == gold.start ? 1.0 : 0.0)) * h(i, c);
      ge += (fwd.dists.p_end[i] - (i == gold.end ? 1.0 : 0.0)) * h(i, c);
    }
    CHECK(std::abs(grads[hd.params.bank.start](0, c) - gs) < 1e-12);
    CHECK(std::abs(grads[hd.params.bank.end](0, c) - ge) < 1e-12);
  }
  CHECK(d_h.same_shape(h));
}

TEST_CASE("saturated correct prediction has vanishing gradients") {
  Head hd(4, 0, MaskStrategy::Bidirectional, 15);
  const TokenizedInput in = plain_input(4);
  const Matrix h = Matrix::identity(4);
  hd.store.value(hd.params.bank.start) = Matrix::from_rows({{0, 60, 0, 0}});
  hd.store.value(hd.params.bank.end) = Matrix::from_rows({{0, 0, 60, 0}});
  hd.config.restrict_to_passage = false;
  const auto fwd = head_forward(hd.store, hd.params, hd.config, h, in);
  GradBuffer grads = hd.store.make_grad_buffer();
  head_backward(hd.store, hd.params, fwd, h, {1, 2}, 1.0, grads);
  CHECK(std::sqrt(grads.squared_norm()) < 1e-6);
}

TEST_CASE("head backward matches finite differences on a well-conditioned model") {
  // L = 2, d = 8, two heads, N = 10 with H and query inputs that keep every
  // gradient coordinate well above the finite-difference noise floor.
  for (MaskStrategy s : {MaskStrategy::Bidirectional, MaskStrategy::Causal,
                         MaskStrategy::Independent}) {
    CAPTURE(to_string(s));
    Head hd(8, 2, s, 16, 0.5);
    Rng rng(17);
    Matrix h = rng.normal_matrix(10, 8, 1.0);
    const TokenizedInput in = plain_input(10, 2);
    const TokenSpan gold{4, 6};
    auto loss = [&] { return span_nll(hd.dists(h, in), gold); };
    const auto fwd = head_forward(hd.store, hd.params, hd.config, h, in);
    GradBuffer grads = hd.store.make_grad_buffer();
    const Matrix d_h = head_backward(hd.store, hd.params, fwd, h, gold, 1.0, grads);

    // Coordinates whose gradient is below 1e-6 are compared absolutely: there
    // the central difference is dominated by loss roundoff.
    auto check = [&](Matrix& m, const Matrix& g, const std::string& name) {
      CAPTURE(name);
      double worst_rel = 0.0, worst_abs = 0.0;
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double saved = m.data()[i];
        m.data()[i] = saved + 1e-5;
        const double up = loss();
        m.data()[i] = saved - 1e-5;
        const double down = loss();
        m.data()[i] = saved;
        const double fd = (up - down) / 2e-5, ga = g.data()[i];
        if (std::max(std::abs(fd), std::abs(ga)) > 1e-6)
          worst_rel = std::max(worst_rel, dyrex::testing::rel_err(ga, fd));
        else
          worst_abs = std::max(worst_abs, std::abs(ga - fd));
      }
      CHECK(worst_rel < 1e-4);
      CHECK(worst_abs < 1e-8);
    };
    for (ParamId id = 0; id < hd.store.size(); ++id)
      check(hd.store.value(id), grads[id], hd.store.name(id));
    check(h, d_h, "H");
  }
}

TEST_CASE("mask isolation") {
  Rng rng(18);
  for (std::size_t layers : {1, 2, 3}) {
    for (MaskStrategy s : {MaskStrategy::Independent, MaskStrategy::Causal}) {
      Head hd(8, layers, s, 19 + layers, 0.5);
      const TokenizedInput in = plain_input(9, 2);
      const Matrix h = rng.normal_matrix(9, 8, 1.0);
      const auto base = hd.dists(h, in);

      Head moved_end = hd;
      for (double& v : moved_end.store.value(moved_end.params.bank.end).data()) v += rng.normal();
      const auto a = moved_end.dists(h, in);
      for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(a.p_start[i] - base.p_start[i]) <= 1e-12);

      Head moved_start = hd;
      for (double& v : moved_start.store.value(moved_start.params.bank.start).data())
        v += rng.normal();
      const auto b = moved_start.dists(h, in);
      double change = 0.0;
      for (std::size_t i = 0; i < 9; ++i) change = std::max(change, std::abs(b.p_end[i] - base.p_end[i]));
      if (s == MaskStrategy::Independent)
        CHECK(change <= 1e-12);
      else
        CHECK(change > 0.0);
    }
  }
}

TEST_CASE("decode span examples") {
  std::vector<std::uint8_t> all(8, 1);
  std::vector<double> ps(8, 0.0), pe(8, 0.0);
  ps[3] = 1.0;
  pe[5] = 1.0;
  auto r = decode_span(from_probs(ps, pe), all, 3);
  CHECK(r.start == 3);
  CHECK(r.end == 5);

  ps.assign(8, 0.02);
  pe.assign(8, 0.02);
  ps[5] = 0.86;
  pe[2] = 0.86;
  const auto crossed = from_probs(ps, pe);
  r = decode_span(crossed, all, 30);
  const auto bf = brute_force(crossed, all, 30);
  CHECK(r.start == bf.start);
  CHECK(r.end == bf.end);
  CHECK(r.start <= r.end);

  const auto uniform = from_probs(std::vector<double>(8, 0.125), std::vector<double>(8, 0.125));
  std::vector<std::uint8_t> tail{0, 0, 1, 1, 1, 1, 1, 1};
  r = decode_span(uniform, tail, 30);
  CHECK(r.start == 2);
  CHECK(r.end == 2);

  CHECK_THROWS_AS(decode_span(uniform, std::vector<std::uint8_t>(8, 0), 30), DataError);
}

TEST_CASE("decode span equals brute force on random distributions with ties") {
  Rng rng(20);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(50);
    std::vector<double> ps(n), pe(n);
    std::vector<std::uint8_t> allowed(n);
    const bool coarse = trial % 2 == 0;  // few distinct values: many ties
    for (std::size_t i = 0; i < n; ++i) {
      ps[i] = coarse ? static_cast<double>(rng.below(3)) : rng.uniform();
      pe[i] = coarse ? static_cast<double>(rng.below(3)) : rng.uniform();
      allowed[i] = rng.below(5) != 0;
    }
    allowed[rng.below(n)] = 1;
    const std::size_t max_len = 1 + rng.below(12);
    const auto d = from_probs(ps, pe);
    const auto r = decode_span(d, allowed, max_len);
    const auto bf = brute_force(d, allowed, max_len);
    CHECK(r.start == bf.start);
    CHECK(r.end == bf.end);
  }
}

TEST_CASE("head config validation") {
  HeadConfig c;
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(16), ConfigError);
  c.num_layers = 0;
  CHECK_NOTHROW(c.validate(16));
  c.max_answer_len = 0;
  CHECK_THROWS_AS(c.validate(16), ConfigError);
  HeadConfig d;
  d.dropout = 0.1;
  CHECK_THROWS_AS(d.validate(16), ConfigError);
}

TEST_CASE("model: frozen encoder receives no gradient") {
  ModelConfig mc;
  mc.encoder.vocab_size = 10;
  mc.encoder.dim = 8;
  mc.encoder.num_heads = 2;
  mc.encoder.num_layers = 1;
  mc.encoder.trainable = false;
  mc.head.num_layers = 1;
  mc.head.num_heads = 2;
  DyrexModel model(mc);
  TokenizedInput in = plain_input(6, 2);
  GradBuffer g = model.params().make_grad_buffer();
  model.forward_backward(in, {3, 4}, 1.0, g);
  double enc = 0.0, head = 0.0;
  for (ParamId id = 0; id < model.params().size(); ++id) {
    const double n = g[id].data().empty() ? 0.0 : max_abs_diff(g[id], Matrix(g[id].rows(), g[id].cols()));
    (model.params().name(id).rfind("encoder.", 0) == 0 ? enc : head) += n;
    if (model.params().name(id).rfind("encoder.", 0) == 0) CHECK_FALSE(model.params().trainable(id));
  }
  CHECK(enc == 0.0);
  CHECK(head > 0.0);
}
