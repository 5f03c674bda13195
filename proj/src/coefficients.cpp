#include "lmf/coefficients.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "lmf/error.hpp"

namespace lmf {

namespace {

std::vector<bool> mask_flags(std::size_t n, std::span<const std::size_t> masked) {
  std::vector<bool> flags(n, false);
  for (auto k : masked) {
    if (k >= n) {
      throw Error(ErrorCode::kOutOfRange, fmt::format("masked index {} out of range {}", k, n));
    }
    flags[k] = true;
  }
  return flags;
}

}  // namespace

std::string_view to_string(Method method) {
  switch (method) {
    case Method::kAttentional: return "attentional";
    case Method::kNormalized: return "normalized";
    case Method::kNeural: return "neural";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "attentional") return Method::kAttentional;
  if (lower == "normalized") return Method::kNormalized;
  if (lower == "neural") return Method::kNeural;
  throw Error(ErrorCode::kInvalidArgument, fmt::format("unknown method '{}'", name));
}

CoefficientVector softmin(std::span<const double> values, double temperature,
                          std::span<const std::size_t> masked) {
  if (!(temperature > 0.0)) throw Error(ErrorCode::kInvalidArgument, "temperature must be positive");
  auto is_masked = mask_flags(values.size(), masked);
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (is_masked[k]) continue;
    if (!std::isfinite(values[k])) {
      throw Error(ErrorCode::kNonFinite, fmt::format("softmin: entry {} is not finite", k));
    }
    lo = std::min(lo, values[k]);
  }
  if (!std::isfinite(lo)) throw Error(ErrorCode::kInvalidArgument, "softmin: every entry is masked");

  CoefficientVector out;
  out.weights.assign(values.size(), 0.0);
  double total = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (is_masked[k]) continue;
    out.weights[k] = std::exp(-(values[k] - lo) / temperature);
    total += out.weights[k];
  }
  for (auto& w : out.weights) w /= total;
  return out;
}

CoefficientVector attentional(const AlignmentVector& a, double temperature) {
  auto out = softmin(a.values, temperature, a.masked);
  out.bank_ids = a.bank_ids;
  out.method = Method::kAttentional;
  return out;
}

CoefficientVector normalized(const AlignmentVector& a) {
  auto is_masked = mask_flags(a.values.size(), a.masked);
  std::size_t count = 0;
  double sum = 0.0;
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    if (is_masked[k]) continue;
    ++count;
    sum += a.values[k];
  }
  if (count < 2) {
    throw Error(ErrorCode::kInvalidArgument, "normalized: needs at least 2 unmasked distances");
  }
  const double mean = sum / static_cast<double>(count);
  double sq = 0.0;
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    if (!is_masked[k]) sq += (a.values[k] - mean) * (a.values[k] - mean);
  }
  const double sd = std::sqrt(sq / static_cast<double>(count));

  std::vector<double> z(a.values.size(), 0.0);
  if (sd >= 1e-12) {
    for (std::size_t k = 0; k < a.values.size(); ++k) {
      if (!is_masked[k]) z[k] = (a.values[k] - mean) / sd;
    }
  }
  auto out = softmin(z, 1.0, a.masked);
  out.bank_ids = a.bank_ids;
  out.method = Method::kNormalized;
  return out;
}

double entropic_objective(const AlignmentVector& a, std::span<const double> weights,
                          double alpha) {
  auto is_masked = mask_flags(a.values.size(), a.masked);
  const double k = static_cast<double>(a.values.size() - a.masked.size());
  double alignment = 0.0;
  double entropy = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    if (is_masked[i] || weights[i] <= 0.0) continue;
    alignment += weights[i] * a.values[i];
    entropy += weights[i] * std::log(weights[i]);
  }
  return alignment / k + entropy / alpha;
}

CoefficientVector entropic_oracle(const AlignmentVector& a, double alpha, int iterations) {
  if (!(alpha > 0.0)) throw Error(ErrorCode::kInvalidArgument, "alpha must be positive");
  if (iterations <= 0) throw Error(ErrorCode::kInvalidArgument, "iterations must be positive");
  auto is_masked = mask_flags(a.values.size(), a.masked);
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    if (is_masked[i]) continue;
    if (!std::isfinite(a.values[i])) {
      throw Error(ErrorCode::kNonFinite, fmt::format("entropic oracle: entry {} not finite", i));
    }
    active.push_back(i);
  }
  if (active.empty()) throw Error(ErrorCode::kInvalidArgument, "entropic oracle: all entries masked");
  const double k = static_cast<double>(active.size());

  // Mirror descent in log space from the uniform point:
  //   log w <- log w - step * grad,  grad = rho/K + (log w + 1)/alpha,
  // then renormalise. With step = alpha/2 the log-error halves each iteration.
  const double step = 0.5 * alpha;
  std::vector<double> log_w(active.size(), -std::log(k));
  std::vector<double> weights(a.values.size(), 0.0);
  auto materialise = [&] {
    for (std::size_t t = 0; t < active.size(); ++t) weights[active[t]] = std::exp(log_w[t]);
  };
  materialise();
  double objective = entropic_objective(a, weights, alpha);

  for (int it = 0; it < iterations; ++it) {
    double max_shift = 0.0;
    std::vector<double> next(active.size());
    for (std::size_t t = 0; t < active.size(); ++t) {
      double grad = a.values[active[t]] / k + (log_w[t] + 1.0) / alpha;
      next[t] = log_w[t] - step * grad;
    }
    double hi = *std::max_element(next.begin(), next.end());
    double z = 0.0;
    for (double v : next) z += std::exp(v - hi);
    const double log_z = hi + std::log(z);
    for (std::size_t t = 0; t < active.size(); ++t) {
      next[t] -= log_z;
      max_shift = std::max(max_shift, std::abs(next[t] - log_w[t]));
    }
    log_w = std::move(next);
    materialise();
    double updated = entropic_objective(a, weights, alpha);
    bool settled = std::abs(objective - updated) < 1e-14 && max_shift < 1e-12;
    objective = updated;
    if (settled) {
      double total = 0.0;
      for (double w : weights) total += w;
      for (auto& w : weights) w /= total;
      CoefficientVector out;
      out.bank_ids = a.bank_ids;
      out.weights = std::move(weights);
      return out;
    }
  }
  throw Error(ErrorCode::kNonConvergence,
              fmt::format("entropic oracle did not converge in {} iterations", iterations));
}

CoefficientMatrix coefficient_matrix(const DistanceMatrix& d, Method method) {
  if (!d.self_masked) {
    throw Error(ErrorCode::kInvalidArgument, "coefficient matrix needs a self-masked distance matrix");
  }
  if (method == Method::kNeural) {
    throw Error(ErrorCode::kInvalidArgument,
                "neural coefficients need MLP parameters; use neural_coefficient_matrix");
  }
  CoefficientMatrix out;
  out.ids = d.ids;
  out.rows.reserve(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto row = d.row(i);
    out.rows.push_back(method == Method::kAttentional ? attentional(row) : normalized(row));
  }
  return out;
}

void check_simplex(std::span<const double> weights, double tol) {
  double total = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (!(weights[k] >= 0.0) || !std::isfinite(weights[k])) {
      throw Error(ErrorCode::kOffSimplex, fmt::format("weight {} is negative or not finite", k));
    }
    total += weights[k];
  }
  if (std::abs(total - 1.0) > tol) {
    throw Error(ErrorCode::kOffSimplex,
                fmt::format("weights sum to {:.17g}, not 1 (tol {})", total, tol));
  }
}

void write_coefficients_json(const CoefficientFile& file, const std::filesystem::path& path) {
  nlohmann::ordered_json doc;
  doc["method"] = file.method;
  doc["metric"] = file.metric;
  doc["ids"] = file.matrix.ids;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : file.matrix.rows) rows.push_back(r.weights);
  doc["rows"] = std::move(rows);
  if (!file.query_rows.empty()) doc["query_rows"] = file.query_rows;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write '{}'", path.string()));
  out << doc.dump(1) << '\n';
  if (!out) throw Error(ErrorCode::kIo, fmt::format("write failed for '{}'", path.string()));
}

CoefficientFile read_coefficients_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot open '{}'", path.string()));
  CoefficientFile file;
  try {
    auto doc = nlohmann::json::parse(in);
    file.method = doc.at("method").get<std::string>();
    file.metric = doc.at("metric").get<std::string>();
    file.matrix.ids = doc.at("ids").get<std::vector<std::string>>();
    Method method = parse_method(file.method);
    for (const auto& r : doc.at("rows")) {
      CoefficientVector v;
      v.bank_ids = file.matrix.ids;
      v.weights = r.get<std::vector<double>>();
      v.method = method;
      if (v.weights.size() != file.matrix.ids.size()) {
        throw Error(ErrorCode::kDimensionMismatch,
                    fmt::format("{}: row length {} but {} ids", path.string(), v.weights.size(),
                                file.matrix.ids.size()));
      }
      file.matrix.rows.push_back(std::move(v));
    }
    if (doc.contains("query_rows")) {
      file.query_rows = doc["query_rows"].get<std::map<std::string, std::vector<double>>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, fmt::format("{}: {}", path.string(), e.what()));
  }
  return file;
}

void write_coefficients_csv(const CoefficientMatrix& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write '{}'", path.string()));
  out << "id";
  for (const auto& id : m.ids) out << ',' << id;
  out << '\n';
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    out << m.ids[i];
    for (double w : m.rows[i].weights) out << ',' << fmt::format("{:.17g}", w);
    out << '\n';
  }
}

}  // namespace lmf
