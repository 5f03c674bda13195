#include "lmf/corpus.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include <json.hpp>

#include "lmf/error.hpp"

namespace lmf {

namespace {

bool is_blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

TokenizedExample parse_record(const nlohmann::json& record, const std::string& where,
                              std::size_t vocab) {
  if (!record.is_object() || !record.contains("ids") || !record["ids"].is_array()) {
    throw Error(ErrorCode::kParse,
                fmt::format("{}: expected an object with an \"ids\" array", where));
  }
  const auto& ids = record["ids"];
  if (ids.empty()) {
    throw Error(ErrorCode::kParse, fmt::format("{}: empty example", where));
  }
  TokenizedExample ex;
  ex.ids.reserve(ids.size());
  for (const auto& v : ids) {
    if (!v.is_number_unsigned()) {
      throw Error(ErrorCode::kParse,
                  fmt::format("{}: token ids must be non-negative integers", where));
    }
    auto id = v.get<std::uint64_t>();
    if (id >= vocab) {
      throw Error(ErrorCode::kOutOfRange,
                  fmt::format("{}: token id {} out of range for vocab size {}", where, id,
                              vocab));
    }
    ex.ids.push_back(static_cast<TokenId>(id));
  }
  return ex;
}

}  // namespace

std::size_t TokenizedDataset::total_tokens() const {
  std::size_t n = 0;
  for (const auto& ex : examples) n += ex.ids.size();
  return n;
}

std::vector<TokenId> TokenizedDataset::flattened() const {
  std::vector<TokenId> out;
  out.reserve(total_tokens());
  for (const auto& ex : examples) out.insert(out.end(), ex.ids.begin(), ex.ids.end());
  return out;
}

void TokenizedDataset::validate() const {
  if (dataset_id.empty()) throw Error(ErrorCode::kInvalidArgument, "dataset id is empty");
  if (vocab_size == 0) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("dataset '{}': vocab size must be positive", dataset_id));
  }
  if (examples.empty()) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("dataset '{}' has no examples", dataset_id));
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ids = examples[i].ids;
    if (ids.empty()) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("dataset '{}': example {} is empty", dataset_id, i));
    }
    for (TokenId id : ids) {
      if (id >= vocab_size) {
        throw Error(ErrorCode::kOutOfRange,
                    fmt::format("dataset '{}': example {} has token id {} >= vocab {}",
                                dataset_id, i, id, vocab_size));
      }
    }
  }
}

TokenizedDataset load_token_dataset(const std::filesystem::path& path,
                                    std::optional<std::size_t> expected_vocab) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot open '{}'", path.string()));

  TokenizedDataset ds;
  ds.dataset_id = path.stem().string();
  std::optional<std::size_t> vocab = expected_vocab;

  std::string line;
  std::size_t line_no = 0;
  bool seen_record = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::kParse, fmt::format("{}:{}: malformed record: {}",
                                                 path.string(), line_no, e.what()));
    }
    if (!seen_record && record.is_object() && record.contains("meta")) {
      const auto& meta = record["meta"];
      try {
        if (meta.contains("dataset_id")) ds.dataset_id = meta["dataset_id"].get<std::string>();
        if (meta.contains("vocab_size")) {
          auto meta_vocab = meta["vocab_size"].get<std::size_t>();
          if (vocab && *vocab != meta_vocab) {
            throw Error(ErrorCode::kVocabMismatch,
                        fmt::format("{}: meta vocab_size {} differs from expected {}",
                                    path.string(), meta_vocab, *vocab));
          }
          vocab = meta_vocab;
        }
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kParse,
                    fmt::format("{}:{}: malformed meta: {}", path.string(), line_no, e.what()));
      }
      seen_record = true;
      continue;
    }
    seen_record = true;
    if (!vocab || *vocab == 0) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("{}: no vocab_size in meta and none supplied", path.string()));
    }
    ds.examples.push_back(parse_record(record, fmt::format("{}:{}", path.string(), line_no), *vocab));
  }
  if (ds.examples.empty()) {
    throw Error(ErrorCode::kParse, fmt::format("{}: no examples", path.string()));
  }
  ds.vocab_size = *vocab;
  ds.validate();
  return ds;
}

void write_token_dataset(const TokenizedDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write '{}'", path.string()));
  nlohmann::json meta = {{"meta", {{"dataset_id", ds.dataset_id}, {"vocab_size", ds.vocab_size}}}};
  out << meta.dump() << '\n';
  for (const auto& ex : ds.examples) {
    out << nlohmann::json{{"ids", ex.ids}}.dump() << '\n';
  }
  if (!out) throw Error(ErrorCode::kIo, fmt::format("write failed for '{}'", path.string()));
}

TokenizedExample byte_fallback_tokenize(std::string_view text) {
  if (text.empty()) throw Error(ErrorCode::kInvalidArgument, "cannot tokenize empty text");
  TokenizedExample ex;
  ex.ids.reserve(text.size());
  for (unsigned char c : text) ex.ids.push_back(c);
  return ex;
}

std::string byte_fallback_decode(const TokenizedExample& example) {
  std::string out;
  out.reserve(example.ids.size());
  for (TokenId id : example.ids) {
    if (id >= kByteVocab) {
      throw Error(ErrorCode::kOutOfRange, fmt::format("token id {} is not a byte", id));
    }
    out.push_back(static_cast<char>(id));
  }
  return out;
}

EmpiricalTokenDistribution to_empirical_distribution(const TokenizedDataset& ds,
                                                     double epsilon) {
  ds.validate();
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw Error(ErrorCode::kInvalidArgument, "smoothing epsilon must be finite and >= 0");
  }
  EmpiricalTokenDistribution dist;
  dist.vocab_size = ds.vocab_size;
  dist.smoothing_epsilon = epsilon;
  dist.token_sample = ds.flattened();

  std::vector<std::uint64_t> counts(ds.vocab_size, 0);
  for (TokenId id : dist.token_sample) ++counts[id];

  const double denom = static_cast<double>(dist.token_sample.size()) +
                       epsilon * static_cast<double>(ds.vocab_size);
  dist.probs.resize(ds.vocab_size);
  dist.log_probs.resize(ds.vocab_size);
  for (std::size_t v = 0; v < ds.vocab_size; ++v) {
    double p = (static_cast<double>(counts[v]) + epsilon) / denom;
    dist.probs[v] = p;
    dist.log_probs[v] = p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
  }
  return dist;
}

std::vector<TokenId> subsample_tokens(const TokenizedDataset& ds, std::size_t m,
                                      std::uint64_t seed) {
  if (m == 0) throw Error(ErrorCode::kInvalidArgument, "sample size must be positive");
  std::vector<TokenId> tokens = ds.flattened();
  if (tokens.size() <= m) return tokens;
  // Partial Fisher-Yates: the first m slots end up a uniform draw without
  // replacement.
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, tokens.size() - 1);
    std::swap(tokens[i], tokens[pick(rng)]);
  }
  tokens.resize(m);
  return tokens;
}

}  // namespace lmf
