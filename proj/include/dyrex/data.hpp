#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dyrex/encoder.hpp"
#include "dyrex/errors.hpp"

namespace dyrex {

struct QAExample {
  std::string qid;
  std::vector<std::string> question_tokens;
  std::vector<std::string> passage_tokens;
  std::vector<std::string> gold_answers;
  TokenSpan gold_span;  // into passage_tokens
};

// Passage tokens [span.start, span.end] joined by single spaces.
std::string span_text(const QAExample& ex, TokenSpan span);

// ---- MRQA line-delimited JSON -----------------------------------------------

struct MrqaReadResult {
  std::vector<QAExample> examples;
  std::size_t skipped_missing_span = 0;  // no detected_answers / token_spans
  std::size_t skipped_mismatch = 0;      // detected text disagrees with the context tokens
  std::size_t skipped() const noexcept { return skipped_missing_span + skipped_mismatch; }
};

// Reads an MRQA file (plain or gzip, detected by magic bytes). The first
// line must be a header object. Each context yields one example per entry of
// "qas"; the gold span is the first token span of the first detected answer.
MrqaReadResult read_mrqa_jsonl(const std::filesystem::path& path);

// Writes one context line per example, in the layout read_mrqa_jsonl accepts.
void write_mrqa_jsonl(const std::filesystem::path& path, std::span<const QAExample> examples,
                      const std::string& dataset_name);

// ---- synthetic key/value retrieval ----------------------------------------------

// Passages are records "key value..." in fixed-width slots of 1 + max value
// length tokens (short values are padded with filler). Slots not holding a
// record are all filler, and the passage ends with filler up to passage_len.
// The question is one key of the passage; the answer is its value.
struct SynthSpec {
  std::size_t vocab_size = 200;
  std::size_t num_keys = 4;
  std::size_t passage_len = 40;
  std::size_t value_len_min = 2;
  std::size_t value_len_max = 4;
  std::uint64_t seed = 0;

  // Vocabulary split; fillers take whatever keys and values leave.
  std::size_t key_tokens = 50;
  std::size_t value_tokens = 10;
  std::size_t key_alphabet() const { return key_tokens; }
  std::size_t value_alphabet() const { return value_tokens; }
  std::size_t filler_alphabet() const {
    return vocab_size > key_tokens + value_tokens ? vocab_size - key_tokens - value_tokens : 0;
  }

  // Throws ConfigError naming the violated constraint.
  void validate() const;
};

std::string synth_key_token(std::size_t i);
std::string synth_value_token(std::size_t i);
std::string synth_filler_token(std::size_t i);

std::vector<QAExample> generate_synthetic(const SynthSpec& spec, std::size_t n);

// ---- batching -------------------------------------------------------------------

class GoldTruncatedError : public DataError {
 public:
  explicit GoldTruncatedError(const std::string& what) : DataError(what) {}
};

// Vocabulary over question then passage tokens, in example order.
Vocab build_vocab(std::span<const QAExample> examples);

struct EncodedExample {
  TokenizedInput input;
  TokenSpan gold;  // in input coordinates (shifted by the question length)
  std::size_t question_len = 0;
  std::string qid;
};

// [question ; passage]; the passage tail is cut to fit max_len.
EncodedExample encode_example(const QAExample& ex, const Vocab& vocab, std::size_t max_len);

struct Batch {
  std::vector<TokenizedInput> inputs;
  std::vector<TokenSpan> gold;
  std::vector<std::size_t> question_lengths;
  std::vector<std::string> qids;
  std::size_t size() const noexcept { return inputs.size(); }
};

// Right-pads every input to the longest in the batch.
Batch pad_batch(std::vector<EncodedExample> encoded);

Batch make_batch(std::span<const QAExample> examples, const Vocab& vocab, std::size_t max_len);

}  // namespace dyrex
