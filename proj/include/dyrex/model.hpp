#pragma once

// Encoder + span head sharing one ParamStore, and checkpoint directories:
// one DYRXMAT1 file per parameter plus manifest.json and vocab.txt.

#include <cstdint>
#include <filesystem>
#include <string_view>

#include "dyrex/encoder.hpp"
#include "dyrex/qahead.hpp"
#include "json.hpp"

namespace dyrex {

struct ModelConfig {
  EncoderConfig encoder;
  HeadConfig head;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

class DyrexModel {
 public:
  // Parameters are drawn from Rng(config.seed): encoder first, then head.
  explicit DyrexModel(const ModelConfig& config);

  DyrexModel(const DyrexModel&) = default;
  DyrexModel& operator=(const DyrexModel&) = default;
  DyrexModel(DyrexModel&&) = default;
  DyrexModel& operator=(DyrexModel&&) = default;

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }
  const Encoder& encoder() const noexcept { return encoder_; }
  const HeadParams& head() const noexcept { return head_; }

  struct Pass {
    Matrix h;
    EncoderCache encoder_cache;
    HeadForward head;
  };

  // `precomputed` replaces the encoder output; it must have one row per
  // unpadded token and is zero-padded to the input length.
  Pass forward(const TokenizedInput& input, const Matrix* precomputed = nullptr) const;

  double loss(const TokenizedInput& input, TokenSpan gold,
              const Matrix* precomputed = nullptr) const;

  // Loss of one example; gradients of `scale * loss` accumulate into `grads`.
  // Encoder gradients are computed only when the encoder is trainable and
  // no precomputed representation is used.
  double forward_backward(const TokenizedInput& input, TokenSpan gold, double scale,
                          GradBuffer& grads, const Matrix* precomputed = nullptr,
                          std::string_view example_id = {}) const;

  // Span in input coordinates; text is left empty.
  SpanPrediction predict(const TokenizedInput& input, const Matrix* precomputed = nullptr) const;

 private:
  ModelConfig config_;
  ParamStore store_;
  Encoder encoder_;
  HeadParams head_;
};

inline constexpr std::string_view kManifestFile = "manifest.json";
inline constexpr std::string_view kVocabFile = "vocab.txt";

// Writes the checkpoint; `extra` keys are merged into the manifest.
void save_checkpoint(const std::filesystem::path& dir, const DyrexModel& model,
                     const Vocab& vocab, const nlohmann::json& extra = nlohmann::json::object());

struct Checkpoint {
  DyrexModel model;
  Vocab vocab;
  nlohmann::json manifest;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Overwrites `model`'s parameters with the checkpoint's, checking names and shapes.
void restore_parameters(const std::filesystem::path& dir, DyrexModel& model);

}  // namespace dyrex
