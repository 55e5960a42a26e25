#include "dyrex/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <iostream>
#include <unordered_map>

#include "dyrex/data.hpp"

namespace dyrex {

namespace {

bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c); }

bool is_article(std::string_view w) { return w == "a" || w == "an" || w == "the"; }

bool is_word_byte(unsigned char c) { return c >= 0x80 || std::isalnum(c) || c == '_'; }

std::vector<std::string> split_ws(std::string_view s) { return whitespace_tokenize(s); }

}  // namespace

std::string normalize_answer(std::string_view s) {
  std::string text;
  text.reserve(s.size());
  for (unsigned char c : s) {
    if (is_ascii_punct(c)) continue;
    text.push_back(static_cast<char>(std::tolower(c)));
  }
  // Blank out articles delimited by word boundaries. Bytes >= 0x80 count as
  // word characters (UTF-8 letters); ASCII input matches the reference regex.
  std::string spaced;
  spaced.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_word_byte(static_cast<unsigned char>(text[i]))) {
      spaced.push_back(text[i++]);
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
    const std::string_view word(text.data() + i, j - i);
    if (is_article(word)) {
      spaced.push_back(' ');
    } else {
      spaced.append(word);
    }
    i = j;
  }
  std::string out;
  for (const auto& w : whitespace_tokenize(spaced)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

int exact_match(std::string_view prediction, std::span<const std::string> golds) {
  const std::string p = normalize_answer(prediction);
  for (const auto& g : golds)
    if (normalize_answer(g) == p) return 1;
  return 0;
}

namespace {

double f1_single(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::unordered_map<std::string, int> counts;
  for (const auto& t : gold) ++counts[t];
  int overlap = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace

double f1_score(std::string_view prediction, std::span<const std::string> golds) {
  const auto pred = split_ws(normalize_answer(prediction));
  double best = 0.0;
  for (const auto& g : golds) best = std::max(best, f1_single(pred, split_ws(normalize_answer(g))));
  return best;
}

nlohmann::json EvalResult::to_json() const {
  return {{"em", em}, {"f1", f1}, {"count", per_example.size()}, {"missing", missing}};
}

EvalResult evaluate(const std::map<std::string, std::string>& predictions,
                    std::span<const QAExample> examples) {
  EvalResult r;
  double em_total = 0.0, f1_total = 0.0;
  for (const auto& ex : examples) {
    ExampleScore s{ex.qid, 0.0, 0.0};
    auto it = predictions.find(ex.qid);
    if (it == predictions.end()) {
      ++r.missing;
    } else {
      s.em = exact_match(it->second, ex.gold_answers);
      s.f1 = f1_score(it->second, ex.gold_answers);
    }
    em_total += s.em;
    f1_total += s.f1;
    r.per_example.push_back(std::move(s));
  }
  if (r.missing > 0) {
    std::cerr << "warning: " << r.missing << " of " << examples.size()
              << " examples have no prediction (scored 0)\n";
  }
  if (!examples.empty()) {
    r.em = em_total / static_cast<double>(examples.size());
    r.f1 = f1_total / static_cast<double>(examples.size());
  }
  return r;
}

}  // namespace dyrex
