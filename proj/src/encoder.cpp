#include "dyrex/encoder.hpp"

#include <cctype>
#include <cmath>
#include <fstream>

#include "dyrex/errors.hpp"

namespace dyrex {

// ---- Vocab ------------------------------------------------------------------

Vocab::Vocab() {
  add(kPadToken);
  add(kUnkToken);
}

std::uint32_t Vocab::add(std::string_view token) {
  auto it = ids_.find(std::string(token));
  if (it != ids_.end()) return it->second;
  const auto id = static_cast<std::uint32_t>(tokens_.size());
  tokens_.emplace_back(token);
  ids_.emplace(tokens_.back(), id);
  return id;
}

std::uint32_t Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  Vocab v;
  v.tokens_.clear();
  v.ids_.clear();
  std::string line;
  while (std::getline(in, line)) {
    if (v.ids_.contains(line)) {
      throw FormatError(path.string() + ": duplicate token '" + line + "'");
    }
    v.ids_.emplace(line, static_cast<std::uint32_t>(v.tokens_.size()));
    v.tokens_.push_back(line);
  }
  if (v.tokens_.size() < 2 || v.tokens_[kPadId] != kPadToken || v.tokens_[kUnkId] != kUnkToken) {
    throw FormatError(path.string() + ": vocabulary must start with [PAD] and [UNK]");
  }
  return v;
}

std::vector<std::string> whitespace_tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

// ---- TokenizedInput -----------------------------------------------------------

std::size_t TokenizedInput::unpadded_size() const {
  std::size_t n = 0;
  for (auto p : padding_mask) n += p;
  return n;
}

void TokenizedInput::validate() const {
  const std::size_t n = token_ids.size();
  if (segment_ids.size() != n || padding_mask.size() != n) {
    throw DataError("TokenizedInput: sequence lengths differ");
  }
  if (n == 0) throw DataError("TokenizedInput: empty sequence");
  if (passage_begin > passage_end || passage_end >= n) {
    throw DataError("TokenizedInput: passage span out of bounds");
  }
  bool seen_pad = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (padding_mask[i] == 0) {
      seen_pad = true;
    } else if (seen_pad) {
      throw DataError("TokenizedInput: padding must be a tail");
    }
  }
  if (padding_mask[passage_end] == 0) throw DataError("TokenizedInput: passage overlaps padding");
}

// ---- EncoderConfig --------------------------------------------------------------

void EncoderConfig::validate() const {
  if (dim == 0) throw ConfigError("encoder: dim must be positive");
  if (vocab_size < 2) throw ConfigError("encoder: vocab_size must cover [PAD] and [UNK]");
  if (num_layers > 0 && (num_heads == 0 || dim % num_heads != 0)) {
    throw ConfigError("encoder: dim " + std::to_string(dim) + " not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  if (max_len == 0) throw ConfigError("encoder: max_len must be positive");
}

Matrix sinusoidal_positions(std::size_t length, std::size_t dim) {
  Matrix pe(length, dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t c = 0; c < dim; ++c) {
      const double pair = static_cast<double>(c - c % 2);
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, pair / static_cast<double>(dim));
      pe(pos, c) = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

// ---- Encoder ----------------------------------------------------------------------

Encoder Encoder::create(ParamStore& store, const EncoderConfig& config, Rng& rng) {
  config.validate();
  Encoder enc;
  enc.config_ = config;
  const bool t = config.trainable;
  const std::size_t d = config.dim;
  enc.token_emb_ =
      store.add("encoder.token_emb", rng.normal_matrix(config.vocab_size, d, config.init_std), t);
  if (config.use_segment_embeddings) {
    enc.segment_emb_ =
        store.add("encoder.segment_emb", rng.normal_matrix(2, d, config.init_std), t);
  }
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::string prefix = "encoder.layer" + std::to_string(l);
    EncoderLayerParams layer;
    layer.self_att = MhaParams::create(store, prefix + ".self_att", d, config.num_heads, rng,
                                       config.init_std, t);
    layer.norm1 = NormParams::create(store, prefix + ".norm1", d, t);
    layer.ffn = FfnParams::create(store, prefix + ".ffn", d, rng, config.init_std, t);
    layer.norm2 = NormParams::create(store, prefix + ".norm2", d, t);
    enc.layers_.push_back(layer);
  }
  return enc;
}

Matrix Encoder::encode(const ParamStore& store, const TokenizedInput& input,
                       EncoderCache* cache) const {
  input.validate();
  const std::size_t n = input.size();
  if (n > config_.max_len) {
    throw DataError("encoder: sequence length " + std::to_string(n) + " exceeds max_len " +
                    std::to_string(config_.max_len));
  }
  const Matrix& emb = store.value(token_emb_);
  Matrix x = sinusoidal_positions(n, config_.dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto id = input.token_ids[i];
    if (id >= emb.rows()) {
      throw DataError("encoder: token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(emb.rows()));
    }
    auto row = x.row(i);
    auto e = emb.row(id);
    for (std::size_t c = 0; c < config_.dim; ++c) row[c] += e[c];
    if (segment_emb_) {
      auto s = store.value(*segment_emb_).row(input.segment_ids[i] ? 1 : 0);
      for (std::size_t c = 0; c < config_.dim; ++c) row[c] += s[c];
    }
  }
  if (cache) cache->layers.assign(layers_.size(), {});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& p = layers_[l];
    EncoderLayerCache local;
    EncoderLayerCache& lc = cache ? cache->layers[l] : local;
    MhaResult att = mha_forward(store, p.self_att, x, x, nullptr, input.padding_mask);
    Matrix x1 = norm_forward(store, p.norm1, x + att.output, &lc.norm1);
    lc.att = std::move(att.cache);
    Matrix f = ffn_forward(store, p.ffn, x1, &lc.ffn);
    x = norm_forward(store, p.norm2, x1 + f, &lc.norm2);
  }
  DYREX_DEBUG_FINITE(x, "encode");
  return x;
}

void Encoder::backward(const ParamStore& store, const TokenizedInput& input,
                       const EncoderCache& cache, const Matrix& d_h, GradBuffer& grads) const {
  if (cache.layers.size() != layers_.size()) {
    throw DimensionError("encoder backward: cache has " + std::to_string(cache.layers.size()) +
                         " layers, encoder has " + std::to_string(layers_.size()));
  }
  Matrix d_x = d_h;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const auto& p = layers_[l];
    const auto& lc = cache.layers[l];
    Matrix d_r2(d_x.rows(), d_x.cols());
    norm_backward(store, p.norm2, lc.norm2, d_x, grads, &d_r2);
    Matrix d_x1 = d_r2;
    ffn_backward(store, p.ffn, lc.ffn, d_r2, grads, &d_x1);
    Matrix d_r1(d_x.rows(), d_x.cols());
    norm_backward(store, p.norm1, lc.norm1, d_x1, grads, &d_r1);
    Matrix d_in = d_r1;
    mha_backward(store, p.self_att, lc.att, d_r1, grads, &d_in, &d_in);
    d_x = std::move(d_in);
  }
  Matrix& d_emb = grads[token_emb_];
  for (std::size_t i = 0; i < input.size(); ++i) {
    auto src = d_x.row(i);
    auto dst = d_emb.row(input.token_ids[i]);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    if (segment_emb_) {
      auto seg = grads[*segment_emb_].row(input.segment_ids[i] ? 1 : 0);
      for (std::size_t c = 0; c < src.size(); ++c) seg[c] += src[c];
    }
  }
}

Matrix load_precomputed_embeddings(const std::filesystem::path& path) {
  Matrix h = load_matrix(path);
  if (h.rows() == 0) throw DataError(path.string() + ": empty sequence (0 rows)");
  if (h.cols() == 0) throw DataError(path.string() + ": zero embedding dimension");
  return h;
}

}  // namespace dyrex
