#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lmf {

std::vector<std::string_view> whitespace_tokens(std::string_view text);

std::size_t lcs_length(std::span<const std::string_view> a, std::span<const std::string_view> b);

// Rouge-L F1 over whitespace tokens; case-sensitive, no stemming.
double rouge_l(std::string_view candidate, std::string_view reference);

// 1 iff the strings match after trimming surrounding whitespace.
int exact_match(std::string_view candidate, std::string_view reference);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population
};

Aggregate aggregate(std::span<const double> scores);

struct ScoredPair {
  std::string candidate;
  std::string reference;
  double score = 0.0;
};

struct BatchScores {
  Aggregate rouge_l;
  Aggregate exact_match;
  std::size_t n = 0;
};

/// Line-delimited {"candidate", "reference"} records.
BatchScores score_batch(const std::filesystem::path& path);
std::string to_json(const BatchScores& scores);

}  // namespace lmf
