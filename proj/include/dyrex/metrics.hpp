#pragma once

// Exact match and token-level F1 over normalized answer strings, following
// the SQuAD/MRQA evaluation scripts.

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace dyrex {

struct QAExample;

// Lowercase, drop ASCII punctuation, drop whole-word "a"/"an"/"the",
// collapse whitespace.
std::string normalize_answer(std::string_view s);

// 1 iff the normalized prediction equals some normalized gold.
int exact_match(std::string_view prediction, std::span<const std::string> golds);

// Max over golds of the multiset token-overlap F1.
double f1_score(std::string_view prediction, std::span<const std::string> golds);

struct ExampleScore {
  std::string qid;
  double em = 0.0;
  double f1 = 0.0;
};

struct EvalResult {
  double em = 0.0;  // fraction in [0, 1]
  double f1 = 0.0;
  std::vector<ExampleScore> per_example;
  std::size_t missing = 0;  // examples without a prediction (scored 0)

  // {"em", "f1", "count", "missing"}; fractions as stored.
  nlohmann::json to_json() const;
};

EvalResult evaluate(const std::map<std::string, std::string>& predictions,
                    std::span<const QAExample> examples);

}  // namespace dyrex
