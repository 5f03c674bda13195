#include "lmf/divergences.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <set>

#include "lmf/error.hpp"
#include "lmf/parallel.hpp"

namespace lmf {

namespace {

void require_same_vocab(const EmpiricalTokenDistribution& p, const EmpiricalTokenDistribution& q) {
  if (p.vocab_size != q.vocab_size || p.probs.size() != q.probs.size()) {
    throw Error(ErrorCode::kVocabMismatch,
                fmt::format("vocab mismatch: {} vs {}", p.vocab_size, q.vocab_size));
  }
}

// Kernel values indexed by |a - b|, so each distinct difference costs one exp.
std::vector<double> kernel_table(std::size_t max_diff, double sigma) {
  std::vector<double> table(max_diff + 1);
  const double denom = 2.0 * sigma * sigma;
  for (std::size_t d = 0; d <= max_diff; ++d) {
    double diff = static_cast<double>(d);
    table[d] = std::exp(-(diff * diff) / denom);
  }
  return table;
}

double kernel_sum(const SampleHistogram& a, const SampleHistogram& b,
                  const std::vector<double>& table) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const TokenId va = a.values[i];
    double row = 0.0;
    for (std::size_t j = 0; j < b.values.size(); ++j) {
      const TokenId vb = b.values[j];
      std::size_t d = va > vb ? va - vb : vb - va;
      row += b.counts[j] * table[d];
    }
    total += a.counts[i] * row;
  }
  return total;
}

double mmd2_from_histograms(const SampleHistogram& hx, const SampleHistogram& hy, double sigma) {
  if (hx.total == 0 || hy.total == 0) {
    throw Error(ErrorCode::kInvalidArgument, "mmd: samples must be non-empty");
  }
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw Error(ErrorCode::kInvalidArgument, "mmd: bandwidth must be positive");
  }
  TokenId lo = std::min(hx.values.front(), hy.values.front());
  TokenId hi = std::max(hx.values.back(), hy.values.back());
  auto table = kernel_table(hi - lo, sigma);
  const double n = static_cast<double>(hx.total);
  const double m = static_cast<double>(hy.total);
  double xx = kernel_sum(hx, hx, table) / (n * n);
  double xy = kernel_sum(hx, hy, table) / (n * m);
  double yy = kernel_sum(hy, hy, table) / (m * m);
  return std::max(0.0, xx - 2.0 * xy + yy);
}

}  // namespace

std::string_view to_string(Metric metric) {
  switch (metric) {
    case Metric::kWD: return "wd";
    case Metric::kKL: return "kl";
    case Metric::kJS: return "js";
    case Metric::kMMD: return "mmd";
  }
  return "unknown";
}

Metric parse_metric(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "wd") return Metric::kWD;
  if (lower == "kl") return Metric::kKL;
  if (lower == "js") return Metric::kJS;
  if (lower == "mmd") return Metric::kMMD;
  throw Error(ErrorCode::kInvalidArgument, fmt::format("unknown metric '{}'", name));
}

void MetricKind::validate() const {
  if (bandwidth && !(*bandwidth > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "MMD bandwidth must be positive");
  }
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw Error(ErrorCode::kInvalidArgument, "smoothing epsilon must be >= 0");
  }
  if (sample_cap == 0) throw Error(ErrorCode::kInvalidArgument, "MMD sample cap must be positive");
}

std::string MetricKind::describe() const {
  switch (tag) {
    case Metric::kWD: return "wd";
    case Metric::kKL:
    case Metric::kJS: return fmt::format("{}:eps={:a}", to_string(tag), epsilon);
    case Metric::kMMD:
      return fmt::format("mmd:sigma={}:seed={}:cap={}",
                         bandwidth ? fmt::format("{:a}", *bandwidth) : std::string("median"),
                         seed, sample_cap);
  }
  return "unknown";
}

double wasserstein1(const EmpiricalTokenDistribution& p, const EmpiricalTokenDistribution& q) {
  require_same_vocab(p, q);
  double cdf_gap = 0.0;
  double total = 0.0;
  // The last CDF value is 1 on both sides, so it contributes nothing.
  for (std::size_t v = 0; v + 1 < p.probs.size(); ++v) {
    cdf_gap += p.probs[v] - q.probs[v];
    total += std::abs(cdf_gap);
  }
  return total;
}

double kl(const EmpiricalTokenDistribution& p, const EmpiricalTokenDistribution& q) {
  require_same_vocab(p, q);
  double total = 0.0;
  for (std::size_t v = 0; v < p.probs.size(); ++v) {
    const double pv = p.probs[v];
    if (pv <= 0.0) continue;
    if (q.probs[v] <= 0.0) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("kl: q has a zero entry at token {} where p is positive "
                              "(use smoothing epsilon > 0)",
                              v));
    }
    total += pv * (p.log_probs[v] - q.log_probs[v]);
  }
  return std::max(0.0, total);
}

double js(const EmpiricalTokenDistribution& p, const EmpiricalTokenDistribution& q) {
  require_same_vocab(p, q);
  double kl_pm = 0.0;
  double kl_qm = 0.0;
  for (std::size_t v = 0; v < p.probs.size(); ++v) {
    const double pv = p.probs[v];
    const double qv = q.probs[v];
    const double mv = 0.5 * (pv + qv);
    if (mv <= 0.0) continue;
    const double log_m = std::log(mv);
    if (pv > 0.0) kl_pm += pv * (p.log_probs[v] - log_m);
    if (qv > 0.0) kl_qm += qv * (q.log_probs[v] - log_m);
  }
  return std::clamp(0.5 * kl_pm + 0.5 * kl_qm, 0.0, std::numbers::ln2);
}

SampleHistogram make_histogram(std::span<const TokenId> sample) {
  std::vector<TokenId> sorted(sample.begin(), sample.end());
  std::sort(sorted.begin(), sorted.end());
  SampleHistogram h;
  h.total = sorted.size();
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    h.values.push_back(sorted[i]);
    h.counts.push_back(static_cast<double>(j - i));
    i = j;
  }
  return h;
}

double mmd2_gaussian(std::span<const TokenId> xs, std::span<const TokenId> ys, double sigma) {
  if (xs.empty() || ys.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "mmd: samples must be non-empty");
  }
  return mmd2_from_histograms(make_histogram(xs), make_histogram(ys), sigma);
}

double median_bandwidth(std::span<const TokenId> xs, std::span<const TokenId> ys) {
  std::vector<TokenId> pooled;
  pooled.reserve(xs.size() + ys.size());
  pooled.insert(pooled.end(), xs.begin(), xs.end());
  pooled.insert(pooled.end(), ys.begin(), ys.end());
  if (pooled.size() > kBandwidthPoolCap) {
    std::vector<TokenId> thinned(kBandwidthPoolCap);
    for (std::size_t i = 0; i < kBandwidthPoolCap; ++i) {
      thinned[i] = pooled[i * pooled.size() / kBandwidthPoolCap];
    }
    pooled = std::move(thinned);
  }
  SampleHistogram h = make_histogram(pooled);
  if (h.values.size() < 2) {
    throw Error(ErrorCode::kDegenerate, "degenerate bandwidth: all points identical");
  }

  // Count unordered pairs by absolute difference.
  std::vector<std::uint64_t> by_diff(h.values.back() - h.values.front() + 1, 0);
  for (std::size_t i = 0; i < h.values.size(); ++i) {
    auto ci = static_cast<std::uint64_t>(h.counts[i]);
    by_diff[0] += ci * (ci - 1) / 2;
    for (std::size_t j = i + 1; j < h.values.size(); ++j) {
      by_diff[h.values[j] - h.values[i]] += ci * static_cast<std::uint64_t>(h.counts[j]);
    }
  }

  auto value_at_rank = [&](std::uint64_t rank, std::size_t first_diff) {
    std::uint64_t seen = 0;
    for (std::size_t d = first_diff; d < by_diff.size(); ++d) {
      seen += by_diff[d];
      if (seen > rank) return static_cast<double>(d);
    }
    return static_cast<double>(by_diff.size() - 1);
  };
  auto median_from = [&](std::size_t first_diff) {
    std::uint64_t pairs = 0;
    for (std::size_t d = first_diff; d < by_diff.size(); ++d) pairs += by_diff[d];
    if (pairs % 2 == 1) return value_at_rank(pairs / 2, first_diff);
    return 0.5 * (value_at_rank(pairs / 2 - 1, first_diff) + value_at_rank(pairs / 2, first_diff));
  };

  double med = median_from(0);
  if (med <= 0.0) med = median_from(1);
  return med;
}

PreparedDataset prepare_dataset(const TokenizedDataset& ds, const MetricKind& metric) {
  metric.validate();
  PreparedDataset out;
  out.id = ds.dataset_id;
  switch (metric.tag) {
    case Metric::kWD:
      out.dist = to_empirical_distribution(ds, 0.0);
      break;
    case Metric::kKL:
    case Metric::kJS:
      out.dist = to_empirical_distribution(ds, metric.epsilon);
      break;
    case Metric::kMMD:
      ds.validate();
      out.dist.vocab_size = ds.vocab_size;
      out.mmd_sample = subsample_tokens(ds, metric.sample_cap, metric.seed);
      out.mmd_histogram = make_histogram(out.mmd_sample);
      break;
  }
  return out;
}

double divergence(const PreparedDataset& query, const PreparedDataset& other,
                  const MetricKind& metric) {
  switch (metric.tag) {
    case Metric::kWD: return wasserstein1(query.dist, other.dist);
    case Metric::kKL: return kl(query.dist, other.dist);
    case Metric::kJS: return js(query.dist, other.dist);
    case Metric::kMMD: {
      if (query.dist.vocab_size != other.dist.vocab_size) {
        throw Error(ErrorCode::kVocabMismatch,
                    fmt::format("vocab mismatch: {} vs {}", query.dist.vocab_size,
                                other.dist.vocab_size));
      }
      double sigma = metric.bandwidth ? *metric.bandwidth
                                      : median_bandwidth(query.mmd_sample, other.mmd_sample);
      return mmd2_from_histograms(query.mmd_histogram, other.mmd_histogram, sigma);
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown metric");
}

bool AlignmentVector::is_masked(std::size_t k) const {
  return std::binary_search(masked.begin(), masked.end(), k);
}

AlignmentVector alignment_vector(const TokenizedDataset& query,
                                 std::span<const TokenizedDataset> bank,
                                 const MetricKind& metric, std::size_t workers) {
  if (bank.empty()) throw Error(ErrorCode::kInvalidArgument, "bank is empty");
  std::set<std::string> seen;
  for (const auto& ds : bank) {
    if (!seen.insert(ds.dataset_id).second) {
      throw Error(ErrorCode::kDuplicateId, fmt::format("duplicate bank id '{}'", ds.dataset_id));
    }
    if (ds.vocab_size != query.vocab_size) {
      throw Error(ErrorCode::kVocabMismatch,
                  fmt::format("dataset '{}' has vocab {} but query '{}' has {}", ds.dataset_id,
                              ds.vocab_size, query.dataset_id, query.vocab_size));
    }
  }

  AlignmentVector out;
  out.query_id = query.dataset_id;
  out.values.assign(bank.size(), 0.0);
  for (std::size_t k = 0; k < bank.size(); ++k) {
    out.bank_ids.push_back(bank[k].dataset_id);
    if (bank[k].dataset_id == query.dataset_id) out.masked.push_back(k);
  }

  const PreparedDataset prepared_query = prepare_dataset(query, metric);
  parallel_for(bank.size(), workers, [&](std::size_t k) {
    if (out.is_masked(k)) {
      out.values[k] = kMaskSentinel;
      return;
    }
    out.values[k] = divergence(prepared_query, prepare_dataset(bank[k], metric), metric);
  });
  return out;
}

AlignmentVector DistanceMatrix::row(std::size_t i) const {
  AlignmentVector a;
  a.query_id = ids.at(i);
  a.bank_ids = ids;
  a.values.assign(values.begin() + static_cast<std::ptrdiff_t>(i * size()),
                  values.begin() + static_cast<std::ptrdiff_t>((i + 1) * size()));
  a.masked = {i};
  a.values[i] = kMaskSentinel;
  return a;
}

DistanceMatrix pairwise_distance_matrix(std::span<const TokenizedDataset> bank,
                                        const MetricKind& metric, std::size_t workers) {
  metric.validate();
  const std::size_t n = bank.size();
  if (n < 2) throw Error(ErrorCode::kInvalidArgument, "pairwise matrix needs at least 2 datasets");
  std::set<std::string> seen;
  for (const auto& ds : bank) {
    if (!seen.insert(ds.dataset_id).second) {
      throw Error(ErrorCode::kDuplicateId, fmt::format("duplicate bank id '{}'", ds.dataset_id));
    }
    if (ds.vocab_size != bank[0].vocab_size) {
      throw Error(ErrorCode::kVocabMismatch,
                  fmt::format("dataset '{}' has vocab {} but '{}' has {}", ds.dataset_id,
                              ds.vocab_size, bank[0].dataset_id, bank[0].vocab_size));
    }
  }

  std::vector<PreparedDataset> prepared(n);
  parallel_for(n, workers, [&](std::size_t i) { prepared[i] = prepare_dataset(bank[i], metric); });

  std::vector<std::pair<std::uint32_t, std::uint32_t>> tasks;
  tasks.reserve(metric.symmetric() ? n * (n - 1) / 2 : n * (n - 1));
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = metric.symmetric() ? i + 1 : 0; j < n; ++j) {
      if (i != j) tasks.emplace_back(i, j);
    }
  }

  DistanceMatrix m;
  m.metric = metric;
  m.self_masked = true;
  m.values.assign(n * n, kMaskSentinel);
  for (const auto& ds : bank) m.ids.push_back(ds.dataset_id);

  std::atomic<std::uint64_t> evaluations{0};
  parallel_for(tasks.size(), workers, [&](std::size_t t) {
    auto [i, j] = tasks[t];
    double d = divergence(prepared[i], prepared[j], metric);
    evaluations.fetch_add(1, std::memory_order_relaxed);
    m.at(i, j) = d;
    if (metric.symmetric()) m.at(j, i) = d;
  });
  m.pair_evaluations = evaluations.load();
  return m;
}

}  // namespace lmf
