#include "lmf/evalmetrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "lmf/error.hpp"

namespace lmf {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace

std::vector<std::string_view> whitespace_tokens(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::size_t lcs_length(std::span<const std::string_view> a, std::span<const std::string_view> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::string_view candidate, std::string_view reference) {
  auto cand = whitespace_tokens(candidate);
  auto ref = whitespace_tokens(reference);
  if (cand.empty() || ref.empty()) return 0.0;
  const auto lcs = static_cast<double>(lcs_length(cand, ref));
  if (lcs == 0.0) return 0.0;
  const double precision = lcs / static_cast<double>(cand.size());
  const double recall = lcs / static_cast<double>(ref.size());
  return 2.0 * precision * recall / (precision + recall);
}

int exact_match(std::string_view candidate, std::string_view reference) {
  return trim(candidate) == trim(reference) ? 1 : 0;
}

Aggregate aggregate(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorCode::kInvalidArgument, "aggregate: no scores");
  Aggregate a;
  for (double s : scores) a.mean += s;
  a.mean /= static_cast<double>(scores.size());
  double sq = 0.0;
  for (double s : scores) sq += (s - a.mean) * (s - a.mean);
  a.std = std::sqrt(sq / static_cast<double>(scores.size()));
  return a;
}

BatchScores score_batch(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot open '{}'", path.string()));
  std::vector<double> rouge, em;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      auto rec = nlohmann::json::parse(line);
      auto cand = rec.at("candidate").get<std::string>();
      auto ref = rec.at("reference").get<std::string>();
      rouge.push_back(rouge_l(cand, ref));
      em.push_back(exact_match(cand, ref));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kParse,
                  fmt::format("{}:{}: malformed record: {}", path.string(), line_no, e.what()));
    }
  }
  if (rouge.empty()) throw Error(ErrorCode::kParse, fmt::format("{}: no records", path.string()));
  return {aggregate(rouge), aggregate(em), rouge.size()};
}

std::string to_json(const BatchScores& scores) {
  nlohmann::ordered_json doc = {
      {"rouge_l", {{"mean", scores.rouge_l.mean}, {"std", scores.rouge_l.std}}},
      {"exact_match", {{"mean", scores.exact_match.mean}, {"std", scores.exact_match.std}}},
      {"n", scores.n}};
  return doc.dump();
}

}  // namespace lmf
