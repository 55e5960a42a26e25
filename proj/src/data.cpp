#include "dyrex/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <iostream>

#include "dyrex/metrics.hpp"
#include "json.hpp"

namespace dyrex {

namespace fs = std::filesystem;
using nlohmann::json;

std::string span_text(const QAExample& ex, TokenSpan span) {
  std::string out;
  for (std::size_t i = span.start; i <= span.end && i < ex.passage_tokens.size(); ++i) {
    if (i > span.start) out.push_back(' ');
    out += ex.passage_tokens[i];
  }
  return out;
}

// ---- MRQA reading ---------------------------------------------------------------

namespace {

bool has_gzip_magic(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::array<unsigned char, 2> magic{};
  in.read(reinterpret_cast<char*>(magic.data()), 2);
  return in.gcount() == 2 && magic[0] == 0x1f && magic[1] == 0x8b;
}

std::string read_gzip(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw DataError("cannot open " + path.string());
  std::string out;
  std::array<char, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.append(buf.data(), n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError(path.string() + ": corrupt gzip stream");
  return out;
}

std::string read_all(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("no such file: " + path.string());
  if (has_gzip_magic(path)) return read_gzip(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// MRQA stores tokens as [text, char_offset] pairs; plain strings are accepted too.
std::vector<std::string> token_texts(const json& tokens) {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) {
    if (t.is_string()) {
      out.push_back(t.get<std::string>());
    } else if (t.is_array() && !t.empty() && t[0].is_string()) {
      out.push_back(t[0].get<std::string>());
    } else {
      throw FormatError("token entry is neither a string nor [text, offset]");
    }
  }
  return out;
}

std::string squash(std::string_view s) {
  std::string out;
  for (char c : normalize_answer(s))
    if (c != ' ') out.push_back(c);
  return out;
}

}  // namespace

MrqaReadResult read_mrqa_jsonl(const fs::path& path) {
  const std::string content = read_all(path);
  MrqaReadResult result;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool header_seen = false;
  while (pos < content.size()) {
    std::size_t nl = content.find('\n', pos);
    if (nl == std::string::npos) nl = content.size();
    std::string_view line(content.data() + pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed JSON: " +
                        e.what());
    }
    if (!header_seen) {
      if (!obj.is_object() || !obj.contains("header")) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) +
                          ": first line must be a header object");
      }
      header_seen = true;
      continue;
    }
    try {
      const auto passage = token_texts(obj.at("context_tokens"));
      for (const auto& qa : obj.at("qas")) {
        QAExample ex;
        ex.qid = qa.at("qid").get<std::string>();
        ex.question_tokens = token_texts(qa.at("question_tokens"));
        ex.passage_tokens = passage;
        for (const auto& a : qa.value("answers", json::array())) {
          auto s = a.get<std::string>();
          if (!s.empty()) ex.gold_answers.push_back(std::move(s));
        }
        const json detected = qa.value("detected_answers", json::array());
        if (detected.empty() || !detected[0].contains("token_spans") ||
            detected[0]["token_spans"].empty()) {
          ++result.skipped_missing_span;
          continue;
        }
        const json& span = detected[0]["token_spans"][0];
        ex.gold_span = {span.at(0).get<std::size_t>(), span.at(1).get<std::size_t>()};
        if (ex.gold_span.start > ex.gold_span.end || ex.gold_span.end >= passage.size()) {
          ++result.skipped_mismatch;
          continue;
        }
        const std::string detected_text = detected[0].value("text", std::string());
        if (!detected_text.empty() && squash(detected_text) != squash(span_text(ex, ex.gold_span))) {
          ++result.skipped_mismatch;
          continue;
        }
        if (ex.gold_answers.empty()) {
          ex.gold_answers.push_back(detected_text.empty() ? span_text(ex, ex.gold_span)
                                                          : detected_text);
        }
        result.examples.push_back(std::move(ex));
      }
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!header_seen) throw FormatError(path.string() + ": missing header line");
  if (result.skipped() > 0) {
    std::cerr << "warning: " << path.string() << ": skipped " << result.skipped_missing_span
              << " examples without token spans and " << result.skipped_mismatch
              << " with mismatched spans\n";
  }
  return result;
}

void write_mrqa_jsonl(const fs::path& path, std::span<const QAExample> examples,
                      const std::string& dataset_name) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << json{{"header", {{"dataset", dataset_name}, {"split", "train"}}}}.dump() << '\n';
  for (const auto& ex : examples) {
    json context_tokens = json::array();
    std::vector<std::size_t> offsets;
    std::string context;
    for (const auto& t : ex.passage_tokens) {
      if (!context.empty()) context.push_back(' ');
      offsets.push_back(context.size());
      context_tokens.push_back(json::array({t, context.size()}));
      context += t;
    }
    json question_tokens = json::array();
    std::string question;
    for (const auto& t : ex.question_tokens) {
      if (!question.empty()) question.push_back(' ');
      question_tokens.push_back(json::array({t, question.size()}));
      question += t;
    }
    const std::string answer = span_text(ex, ex.gold_span);
    const std::size_t char_start = offsets.at(ex.gold_span.start);
    const std::size_t char_end = char_start + answer.size() - 1;
    json qa = {{"qid", ex.qid},
               {"question", question},
               {"question_tokens", question_tokens},
               {"answers", ex.gold_answers},
               {"detected_answers",
                json::array({{{"text", answer},
                              {"char_spans", json::array({json::array({char_start, char_end})})},
                              {"token_spans", json::array({json::array(
                                                  {ex.gold_span.start, ex.gold_span.end})})}}})}};
    out << json{{"context", context}, {"context_tokens", context_tokens},
                {"qas", json::array({qa})}}
               .dump()
        << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

// ---- synthetic ------------------------------------------------------------------

void SynthSpec::validate() const {
  if (num_keys == 0) throw ConfigError("synthetic spec: num_keys must be positive");
  if (value_len_min == 0 || value_len_min > value_len_max) {
    throw ConfigError("synthetic spec: value length range must satisfy 1 <= min <= max");
  }
  if (num_keys * (1 + value_len_max) > passage_len) {
    throw ConfigError("synthetic spec: num_keys * (1 + max value length) = " +
                      std::to_string(num_keys * (1 + value_len_max)) + " exceeds passage_len " +
                      std::to_string(passage_len));
  }
  if (key_alphabet() < num_keys) {
    throw ConfigError("synthetic spec: key alphabet (" + std::to_string(key_alphabet()) +
                      ") smaller than num_keys");
  }
  if (value_alphabet() == 0 || filler_alphabet() == 0) {
    throw ConfigError("synthetic spec: value and filler alphabets must be non-empty (vocab_size > key_tokens + value_tokens)");
  }
}

std::string synth_key_token(std::size_t i) { return "key" + std::to_string(i); }
std::string synth_value_token(std::size_t i) { return "val" + std::to_string(i); }
std::string synth_filler_token(std::size_t i) { return "fill" + std::to_string(i); }

std::vector<QAExample> generate_synthetic(const SynthSpec& spec, std::size_t n) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<std::size_t> key_pool(spec.key_alphabet());
  const std::size_t slot = 1 + spec.value_len_max;
  const std::size_t free_fillers = spec.passage_len - spec.num_keys * slot;

  std::vector<QAExample> out;
  out.reserve(n);
  for (std::size_t e = 0; e < n; ++e) {
    for (std::size_t i = 0; i < key_pool.size(); ++i) key_pool[i] = i;
    // Partial Fisher-Yates: the first num_keys entries become distinct keys.
    for (std::size_t i = 0; i < spec.num_keys; ++i)
      std::swap(key_pool[i], key_pool[i + rng.below(key_pool.size() - i)]);

    // true = record slot, false = single filler.
    std::vector<char> layout(spec.num_keys, 1);
    layout.resize(spec.num_keys + free_fillers, 0);
    rng.shuffle(std::span<char>(layout));

    const std::size_t asked = rng.below(spec.num_keys);
    QAExample ex;
    ex.qid = "synth-" + std::to_string(spec.seed) + "-" + std::to_string(e);
    std::size_t record = 0;
    for (char is_record : layout) {
      if (!is_record) {
        ex.passage_tokens.push_back(synth_filler_token(rng.below(spec.filler_alphabet())));
        continue;
      }
      const std::size_t len = rng.between(spec.value_len_min, spec.value_len_max);
      ex.passage_tokens.push_back(synth_key_token(key_pool[record]));
      const std::size_t value_start = ex.passage_tokens.size();
      for (std::size_t v = 0; v < len; ++v)
        ex.passage_tokens.push_back(synth_value_token(rng.below(spec.value_alphabet())));
      if (record == asked) {
        ex.question_tokens = {synth_key_token(key_pool[record])};
        ex.gold_span = {value_start, value_start + len - 1};
      }
      for (std::size_t f = len; f < spec.value_len_max; ++f)
        ex.passage_tokens.push_back(synth_filler_token(rng.below(spec.filler_alphabet())));
      ++record;
    }
    ex.gold_answers = {span_text(ex, ex.gold_span)};
    out.push_back(std::move(ex));
  }
  return out;
}

// ---- batching -------------------------------------------------------------------

Vocab build_vocab(std::span<const QAExample> examples) {
  Vocab v;
  for (const auto& ex : examples) {
    for (const auto& t : ex.question_tokens) v.add(t);
    for (const auto& t : ex.passage_tokens) v.add(t);
  }
  return v;
}

EncodedExample encode_example(const QAExample& ex, const Vocab& vocab, std::size_t max_len) {
  const std::size_t q = ex.question_tokens.size();
  if (ex.passage_tokens.empty()) throw DataError("example " + ex.qid + ": empty passage");
  if (q >= max_len) {
    throw DataError("example " + ex.qid + ": question of " + std::to_string(q) +
                    " tokens leaves no room for the passage within max_len " +
                    std::to_string(max_len));
  }
  const std::size_t p = std::min(ex.passage_tokens.size(), max_len - q);
  if (ex.gold_span.end >= p) {
    throw GoldTruncatedError("example " + ex.qid + ": gold span ends at passage token " +
                             std::to_string(ex.gold_span.end) + " but the passage is truncated to " +
                             std::to_string(p) + " tokens");
  }
  EncodedExample out;
  out.qid = ex.qid;
  out.question_len = q;
  auto& in = out.input;
  for (const auto& t : ex.question_tokens) {
    in.token_ids.push_back(vocab.id(t));
    in.segment_ids.push_back(0);
  }
  for (std::size_t i = 0; i < p; ++i) {
    in.token_ids.push_back(vocab.id(ex.passage_tokens[i]));
    in.segment_ids.push_back(1);
  }
  in.padding_mask.assign(in.token_ids.size(), 1);
  in.passage_begin = q;
  in.passage_end = q + p - 1;
  out.gold = {ex.gold_span.start + q, ex.gold_span.end + q};
  return out;
}

Batch pad_batch(std::vector<EncodedExample> encoded) {
  std::size_t longest = 0;
  for (const auto& e : encoded) longest = std::max(longest, e.input.size());
  Batch b;
  for (auto& e : encoded) {
    auto& in = e.input;
    const std::size_t pad = longest - in.size();
    in.token_ids.insert(in.token_ids.end(), pad, Vocab::kPadId);
    in.segment_ids.insert(in.segment_ids.end(), pad, 1);
    in.padding_mask.insert(in.padding_mask.end(), pad, 0);
    b.inputs.push_back(std::move(in));
    b.gold.push_back(e.gold);
    b.question_lengths.push_back(e.question_len);
    b.qids.push_back(std::move(e.qid));
  }
  return b;
}

Batch make_batch(std::span<const QAExample> examples, const Vocab& vocab, std::size_t max_len) {
  std::vector<EncodedExample> encoded;
  encoded.reserve(examples.size());
  for (const auto& ex : examples) encoded.push_back(encode_example(ex, vocab, max_len));
  return pad_batch(std::move(encoded));
}

}  // namespace dyrex
