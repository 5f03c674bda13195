#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace lmf {

using TokenId = std::uint32_t;

struct TokenizedExample {
  std::vector<TokenId> ids;  // tokenized input followed by output

  bool operator==(const TokenizedExample&) const = default;
};

struct TokenizedDataset {
  std::string dataset_id;
  std::size_t vocab_size = 0;
  std::vector<TokenizedExample> examples;

  std::size_t total_tokens() const;
  std::vector<TokenId> flattened() const;
  // Throws if any invariant (non-empty id, examples, ids < vocab) is broken.
  void validate() const;

  bool operator==(const TokenizedDataset&) const = default;
};

// Unigram distribution over vocabulary indices plus the raw token stream
// that sample-based metrics draw from.
struct EmpiricalTokenDistribution {
  std::size_t vocab_size = 0;
  std::vector<double> probs;
  std::vector<double> log_probs;  // ln(probs), -inf where probs is zero
  std::vector<TokenId> token_sample;
  double smoothing_epsilon = 0.0;
};

/// Reads the line-delimited token format. An optional first line
/// `{"meta": {"dataset_id": ..., "vocab_size": ...}}` names the dataset;
/// otherwise the id is the file stem and `expected_vocab` is required.
TokenizedDataset load_token_dataset(const std::filesystem::path& path,
                                    std::optional<std::size_t> expected_vocab = std::nullopt);

/// Writes the meta line followed by one `{"ids": [...]}` record per example.
void write_token_dataset(const TokenizedDataset& ds, const std::filesystem::path& path);

/// UTF-8 bytes as token ids (vocab 256). Stand-in for a model tokenizer.
TokenizedExample byte_fallback_tokenize(std::string_view text);
std::string byte_fallback_decode(const TokenizedExample& example);

inline constexpr std::size_t kByteVocab = 256;

/// probs[v] = (count_v + eps) / (total + eps * vocab_size).
EmpiricalTokenDistribution to_empirical_distribution(const TokenizedDataset& ds,
                                                     double epsilon);

/// All tokens when total <= m, otherwise m tokens drawn without replacement.
std::vector<TokenId> subsample_tokens(const TokenizedDataset& ds, std::size_t m,
                                      std::uint64_t seed);

}  // namespace lmf
