#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmf/divergences.hpp"

namespace lmf {

enum class Method { kAttentional, kNormalized, kNeural };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);

struct CoefficientVector {
  std::vector<std::string> bank_ids;
  std::vector<double> weights;
  Method method = Method::kAttentional;
};

// Row i holds the mixture for dataset i over the bank with i itself masked.
struct CoefficientMatrix {
  std::vector<std::string> ids;
  std::vector<CoefficientVector> rows;
};

/// w_k proportional to exp(-values_k / temperature) over unmasked k, masked
/// entries exactly 0. Stabilised by subtracting the unmasked minimum.
CoefficientVector softmin(std::span<const double> values, double temperature,
                          std::span<const std::size_t> masked);

CoefficientVector attentional(const AlignmentVector& a, double temperature = 1.0);

/// z-score the unmasked distances (population std), then softmin at
/// temperature 1. Constant distances give uniform weights.
CoefficientVector normalized(const AlignmentVector& a);

/// Minimises (1/K) sum w_k rho_k + (1/alpha) sum w_k ln w_k over the simplex
/// by entropic mirror descent. Independent of the softmin closed form and
/// kept as a cross-check for it.
CoefficientVector entropic_oracle(const AlignmentVector& a, double alpha, int iterations);

/// Value of the entropic objective above; masked entries are ignored.
double entropic_objective(const AlignmentVector& a, std::span<const double> weights,
                          double alpha);

CoefficientMatrix coefficient_matrix(const DistanceMatrix& d, Method method);

/// Throws unless weights are non-negative, sum to 1 within `tol`, and are 0 on masked indices.
void check_simplex(std::span<const double> weights, double tol = 1e-9);

// {"method", "metric", "ids", "rows"} plus optional "query_rows" for
// datasets outside the bank.
struct CoefficientFile {
  std::string method;
  std::string metric;
  CoefficientMatrix matrix;
  std::map<std::string, std::vector<double>> query_rows;
};

void write_coefficients_json(const CoefficientFile& file, const std::filesystem::path& path);
CoefficientFile read_coefficients_json(const std::filesystem::path& path);
/// Header row of ids, then one row of weights per id.
void write_coefficients_csv(const CoefficientMatrix& m, const std::filesystem::path& path);

}  // namespace lmf
