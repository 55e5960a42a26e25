#pragma once

// Token representations H for the concatenated [question ; passage] input:
// a small transformer encoder standing in for a pretrained contextualizer, or
// precomputed frozen embeddings loaded from DYRXMAT1 files.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dyrex/attention.hpp"
#include "dyrex/blocks.hpp"
#include "dyrex/numkit.hpp"

namespace dyrex {

// Whitespace tokenizer vocabulary. Ids 0 and 1 are reserved for [PAD] and [UNK].
class Vocab {
 public:
  static constexpr std::uint32_t kPadId = 0;
  static constexpr std::uint32_t kUnkId = 1;
  static constexpr std::string_view kPadToken = "[PAD]";
  static constexpr std::string_view kUnkToken = "[UNK]";

  Vocab();

  // Adds the token if unseen; returns its id.
  std::uint32_t add(std::string_view token);
  std::uint32_t id(std::string_view token) const;  // kUnkId when unknown
  const std::string& token(std::uint32_t id) const { return tokens_.at(id); }
  std::size_t size() const noexcept { return tokens_.size(); }

  // One token per line; line number == id.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

std::vector<std::string> whitespace_tokenize(std::string_view text);

// Inclusive token span.
struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t length() const noexcept { return end - start + 1; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct TokenizedInput {
  std::vector<std::uint32_t> token_ids;
  std::vector<std::uint8_t> segment_ids;   // 0 question, 1 passage
  std::vector<std::uint8_t> padding_mask;  // 1 real token, 0 padding
  std::size_t passage_begin = 0;           // inclusive token range of the passage
  std::size_t passage_end = 0;

  std::size_t size() const noexcept { return token_ids.size(); }
  std::size_t unpadded_size() const;
  // Throws DataError when the invariants do not hold.
  void validate() const;
};

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 64;
  std::size_t num_layers = 0;  // 0: embeddings only
  std::size_t num_heads = 8;
  std::size_t max_len = 512;
  bool use_segment_embeddings = true;
  bool trainable = true;
  double init_std = 0.02;

  void validate() const;
};

// pe(p, 2i) = sin(p / 10000^(2i/d)), pe(p, 2i+1) = cos(p / 10000^(2i/d)).
Matrix sinusoidal_positions(std::size_t length, std::size_t dim);

struct EncoderLayerParams {
  MhaParams self_att;
  NormParams norm1;
  FfnParams ffn;
  NormParams norm2;
};

struct EncoderLayerCache {
  MhaCache att;
  LayerNormCache norm1, norm2;
  FfnCache ffn;
};

struct EncoderCache {
  std::vector<EncoderLayerCache> layers;
};

class Encoder {
 public:
  Encoder() = default;
  static Encoder create(ParamStore& store, const EncoderConfig& config, Rng& rng);

  const EncoderConfig& config() const noexcept { return config_; }

  // Embedding sum (+ positions, + segments), then num_layers post-norm
  // self-attention blocks masked by the input's padding. Output N x dim.
  Matrix encode(const ParamStore& store, const TokenizedInput& input,
                EncoderCache* cache = nullptr) const;

  // Accumulates encoder parameter gradients given dL/dH.
  void backward(const ParamStore& store, const TokenizedInput& input, const EncoderCache& cache,
                const Matrix& d_h, GradBuffer& grads) const;

 private:
  EncoderConfig config_;
  ParamId token_emb_ = 0;
  std::optional<ParamId> segment_emb_;
  std::vector<EncoderLayerParams> layers_;
};

// Loads a precomputed N x d representation; rejects empty sequences.
Matrix load_precomputed_embeddings(const std::filesystem::path& path);

}  // namespace dyrex
