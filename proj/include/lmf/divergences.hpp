#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmf/corpus.hpp"

namespace lmf {

enum class Metric : std::uint8_t { kWD = 0, kKL = 1, kJS = 2, kMMD = 3 };

std::string_view to_string(Metric metric);
Metric parse_metric(std::string_view name);

struct MetricKind {
  Metric tag = Metric::kJS;
  std::optional<double> bandwidth;  // MMD only; nullopt selects the median heuristic
  double epsilon = 1e-10;           // KL/JS smoothing
  std::uint64_t seed = 0;           // MMD subsampling
  std::uint32_t sample_cap = 2048;  // MMD tokens per dataset

  bool symmetric() const { return tag != Metric::kKL; }
  void validate() const;
  // Short tag plus every parameter that changes the result; used in cache keys.
  std::string describe() const;

  bool operator==(const MetricKind&) const = default;
};

// Masked entries carry this value and receive weight exactly 0 downstream.
inline constexpr double kMaskSentinel = std::numeric_limits<double>::max();

/// 1-D Wasserstein-1 on the token-id line: sum_v |CDF_p(v) - CDF_q(v)|.
double wasserstein1(const EmpiricalTokenDistribution& p, const EmpiricalTokenDistribution& q);

/// KL(p || q) = sum_v p_v ln(p_v / q_v), with 0 ln 0 = 0.
double kl(const EmpiricalTokenDistribution& p, const EmpiricalTokenDistribution& q);

/// Jensen-Shannon against the midpoint mixture; lies in [0, ln 2].
double js(const EmpiricalTokenDistribution& p, const EmpiricalTokenDistribution& q);

/// Biased (V-statistic) squared MMD under a Gaussian kernel, clamped at 0.
double mmd2_gaussian(std::span<const TokenId> xs, std::span<const TokenId> ys, double sigma);

/// Median pairwise |a - b| over the pooled sample, thinned to at most 2048
/// points by an even stride. Falls back to the median of the non-zero
/// differences when ties dominate.
double median_bandwidth(std::span<const TokenId> xs, std::span<const TokenId> ys);

inline constexpr std::size_t kBandwidthPoolCap = 2048;

// Run-length view of a token sample, sorted by value.
struct SampleHistogram {
  std::vector<TokenId> values;
  std::vector<double> counts;
  std::size_t total = 0;
};

SampleHistogram make_histogram(std::span<const TokenId> sample);

// Per-dataset state computed once and reused across every pair.
struct PreparedDataset {
  std::string id;
  EmpiricalTokenDistribution dist;
  std::vector<TokenId> mmd_sample;
  SampleHistogram mmd_histogram;
};

PreparedDataset prepare_dataset(const TokenizedDataset& ds, const MetricKind& metric);

/// rho(query, other) for the metric; KL is oriented query-first.
double divergence(const PreparedDataset& query, const PreparedDataset& other,
                  const MetricKind& metric);

struct AlignmentVector {
  std::string query_id;
  std::vector<std::string> bank_ids;
  std::vector<double> values;
  std::vector<std::size_t> masked;  // sorted

  bool is_masked(std::size_t k) const;
};

AlignmentVector alignment_vector(const TokenizedDataset& query,
                                 std::span<const TokenizedDataset> bank,
                                 const MetricKind& metric, std::size_t workers = 1);

struct DistanceMatrix {
  MetricKind metric;
  std::vector<std::string> ids;
  std::vector<double> values;  // row-major N x N
  bool self_masked = false;
  std::uint64_t pair_evaluations = 0;

  std::size_t size() const { return ids.size(); }
  double at(std::size_t i, std::size_t j) const { return values[i * ids.size() + j]; }
  double& at(std::size_t i, std::size_t j) { return values[i * ids.size() + j]; }
  // Row i as an alignment vector with index i masked.
  AlignmentVector row(std::size_t i) const;

  bool operator==(const DistanceMatrix&) const = default;
};

/// Full bank matrix. Symmetric metrics evaluate each unordered pair once and
/// mirror it; KL evaluates both orientations. Diagonal is the mask sentinel.
/// The result does not depend on `workers`.
DistanceMatrix pairwise_distance_matrix(std::span<const TokenizedDataset> bank,
                                        const MetricKind& metric, std::size_t workers);

// Matrix cache: "LMFD", u16 version, metric tag, params, counters, ids,
// row-major f64 values, trailing CRC32 of everything after the magic.
inline constexpr std::uint16_t kMatrixFormatVersion = 1;

void save_matrix(const DistanceMatrix& m, const std::filesystem::path& path);
DistanceMatrix load_matrix(const std::filesystem::path& path);
std::vector<std::byte> serialize_matrix(const DistanceMatrix& m);
DistanceMatrix deserialize_matrix(std::span<const std::byte> bytes);

}  // namespace lmf
