#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dyrex/encoder.hpp"
#include "dyrex/errors.hpp"
#include "test_util.hpp"

using namespace dyrex;
using dyrex::testing::dot;
using dyrex::testing::max_fd_rel_error;

namespace {

TokenizedInput make_input(std::vector<std::uint32_t> ids, std::size_t question_len,
                          std::size_t padded_len = 0) {
  TokenizedInput in;
  const std::size_t n = ids.size();
  in.token_ids = std::move(ids);
  for (std::size_t i = 0; i < n; ++i) in.segment_ids.push_back(i < question_len ? 0 : 1);
  in.padding_mask.assign(n, 1);
  in.passage_begin = question_len;
  in.passage_end = n - 1;
  for (std::size_t i = n; i < padded_len; ++i) {
    in.token_ids.push_back(Vocab::kPadId);
    in.segment_ids.push_back(1);
    in.padding_mask.push_back(0);
  }
  return in;
}

EncoderConfig small_config(std::size_t layers) {
  EncoderConfig c;
  c.vocab_size = 12;
  c.dim = 8;
  c.num_heads = 2;
  c.num_layers = layers;
  c.max_len = 32;
  c.init_std = 0.5;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dyrex_test_encoder_" + name);
}

}  // namespace

TEST_CASE("vocab and tokenizer") {
  Vocab v;
  CHECK(v.size() == 2);
  CHECK(v.id("[PAD]") == Vocab::kPadId);
  CHECK(v.id("nope") == Vocab::kUnkId);
  CHECK(v.add("cat") == 2);
  CHECK(v.add("cat") == 2);
  CHECK(v.token(2) == "cat");
  const auto path = temp_path("vocab.txt");
  v.save(path);
  CHECK(Vocab::load(path) == v);
  std::filesystem::remove(path);
  CHECK(whitespace_tokenize("  a b\tc\n d ") == std::vector<std::string>{"a", "b", "c", "d"});
  CHECK(whitespace_tokenize("   ").empty());
}

TEST_CASE("sinusoidal positions") {
  const Matrix pe = sinusoidal_positions(5, 6);
  CHECK(pe(0, 0) == 0.0);
  CHECK(pe(0, 1) == 1.0);
  CHECK(std::abs(pe(3, 0) - std::sin(3.0)) < 1e-15);
  CHECK(std::abs(pe(2, 2) - std::sin(2.0 / std::pow(10000.0, 2.0 / 6))) < 1e-15);
  CHECK(std::abs(pe(4, 5) - std::cos(4.0 / std::pow(10000.0, 4.0 / 6))) < 1e-15);
}

TEST_CASE("zero embeddings give positional encodings alone") {
  EncoderConfig c = small_config(0);
  c.use_segment_embeddings = false;
  ParamStore store;
  Rng rng(0);
  const Encoder enc = Encoder::create(store, c, rng);
  store.value(store.at("encoder.token_emb")).set_zero();
  const auto in = make_input({2, 3, 4, 5, 6}, 2);
  CHECK(enc.encode(store, in) == sinusoidal_positions(5, 8));
}

TEST_CASE("zero layers: embedding sum") {
  ParamStore store;
  Rng rng(1);
  const Encoder enc = Encoder::create(store, small_config(0), rng);
  const auto in = make_input({2, 3, 4, 5}, 1);
  const Matrix h = enc.encode(store, in);
  const Matrix pe = sinusoidal_positions(4, 8);
  const Matrix& emb = store.value(store.at("encoder.token_emb"));
  const Matrix& seg = store.value(store.at("encoder.segment_emb"));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 8; ++c)
      CHECK(h(i, c) == pe(i, c) + emb(in.token_ids[i], c) + seg(i < 1 ? 0 : 1, c));
}

TEST_CASE("one layer matches a composition of the published ops") {
  ParamStore store;
  Rng rng(2);
  const Encoder enc = Encoder::create(store, small_config(1), rng);
  const auto in = make_input({2, 7, 4, 9, 3, 3}, 2);

  EncoderConfig c0 = small_config(0);
  Matrix x = sinusoidal_positions(6, 8);
  const Matrix& emb = store.value(store.at("encoder.token_emb"));
  const Matrix& seg = store.value(store.at("encoder.segment_emb"));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t c = 0; c < 8; ++c) x(i, c) += emb(in.token_ids[i], c) + seg(i < 2 ? 0 : 1, c);

  auto v = [&](const std::string& n) -> const Matrix& { return store.value(store.at(n)); };
  const std::string p = "encoder.layer0.";
  // Attention by hand: two heads of width 4.
  const Matrix q = linear_forward(x, v(p + "self_att.w_q"), v(p + "self_att.b_q"));
  const Matrix k = matmul(x, v(p + "self_att.w_k"));
  const Matrix val = linear_forward(x, v(p + "self_att.w_v"), v(p + "self_att.b_v"));
  Matrix concat(6, 8);
  for (std::size_t head = 0; head < 2; ++head) {
    Matrix scores(6, 6);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) s += q(i, head * 4 + c) * k(j, head * 4 + c);
        scores(i, j) = s / 2.0;
      }
    const Matrix w = softmax_rows(scores);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t c = 0; c < 4; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < 6; ++j) s += w(i, j) * val(j, head * 4 + c);
        concat(i, head * 4 + c) = s;
      }
  }
  const Matrix att = linear_forward(concat, v(p + "self_att.w_o"), v(p + "self_att.b_o"));
  const Matrix x1 = layer_norm(x + att, v(p + "norm1.gamma"), v(p + "norm1.beta"));
  const Matrix f = linear_forward(gelu(linear_forward(x1, v(p + "ffn.w1"), v(p + "ffn.b1"))),
                                  v(p + "ffn.w2"), v(p + "ffn.b2"));
  const Matrix expected = layer_norm(x1 + f, v(p + "norm2.gamma"), v(p + "norm2.beta"));
  CHECK(max_abs_diff(enc.encode(store, in), expected) < 1e-12);
  (void)c0;
}

TEST_CASE("padding invariance for every depth") {
  for (std::size_t layers : {0, 1, 2}) {
    ParamStore store;
    Rng rng(3 + layers);
    const Encoder enc = Encoder::create(store, small_config(layers), rng);
    const Matrix a = enc.encode(store, make_input({2, 5, 6, 7, 8}, 2));
    const Matrix b = enc.encode(store, make_input({2, 5, 6, 7, 8}, 2, 9));
    REQUIRE(b.rows() == 9);
    CHECK(b.cols() == 8);
    CHECK(max_abs_diff(a, b.slice_rows(0, 5)) < 1e-9);
  }
}

TEST_CASE("encoder input errors") {
  ParamStore store;
  Rng rng(4);
  EncoderConfig c = small_config(1);
  c.max_len = 4;
  const Encoder enc = Encoder::create(store, c, rng);
  CHECK_THROWS_AS(enc.encode(store, make_input({2, 3, 4, 5, 6}, 1)), DataError);
  CHECK_THROWS_AS(enc.encode(store, make_input({2, 99}, 1)), DataError);
  EncoderConfig bad = small_config(1);
  bad.num_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  TokenizedInput broken = make_input({2, 3, 4}, 1);
  broken.segment_ids.pop_back();
  CHECK_THROWS_AS(broken.validate(), DataError);
  TokenizedInput gap = make_input({2, 3, 4}, 1, 5);
  gap.padding_mask[1] = 0;
  CHECK_THROWS_AS(gap.validate(), DataError);
}

TEST_CASE("encoder backward matches finite differences") {
  ParamStore store;
  Rng rng(5);
  const Encoder enc = Encoder::create(store, small_config(2), rng);
  const auto in = make_input({2, 7, 4, 9, 3}, 2, 7);
  const Matrix w = rng.normal_matrix(7, 8, 1.0);
  auto loss = [&] { return dot(enc.encode(store, in), w); };

  EncoderCache cache;
  enc.encode(store, in, &cache);
  GradBuffer grads = store.make_grad_buffer();
  enc.backward(store, in, cache, w, grads);
  for (ParamId id = 0; id < store.size(); ++id) {
    CAPTURE(store.name(id));
    CHECK(max_fd_rel_error(store.value(id), loss, grads[id]) < 1e-5);
  }
}

TEST_CASE("precomputed embeddings files") {
  const auto path = temp_path("emb.bin");
  {
    // rows = 3, cols = 2, payload 1..6.
    std::ofstream out(path, std::ios::binary);
    out.write("DYRXMAT1", 8);
    const unsigned char dims[8] = {3, 0, 0, 0, 2, 0, 0, 0};
    out.write(reinterpret_cast<const char*>(dims), 8);
    for (double v : {1.0, 2.0, 3.0, 4.0, 5.0, 6.0}) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) out.put(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  }
  CHECK(load_precomputed_embeddings(path) == Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}}));

  Rng rng(6);
  const Matrix m = rng.normal_matrix(4, 3, 1.0);
  save_matrix(path, m);
  CHECK(load_precomputed_embeddings(path) == m);

  save_matrix(path, Matrix(0, 3));
  CHECK_THROWS_AS(load_precomputed_embeddings(path), DataError);

  {
    std::ofstream out(path, std::ios::binary);
    out.write("NOTMAGIC", 8);
  }
  CHECK_THROWS_AS(load_precomputed_embeddings(path), FormatError);
  std::filesystem::remove(path);
}
