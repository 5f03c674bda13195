#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lmf/adapter_bank.hpp"
#include "lmf/coefficients.hpp"
#include "lmf/divergences.hpp"

namespace lmf {

// Scalar-to-scalar network applied to each distance independently:
//   y = W3 . relu(LN2(W2 relu(LN1(W1 x + b1)) + b2)) + b3
struct MlpParameters {
  std::size_t hidden = 0;
  std::vector<double> w1, b1;              // H
  std::vector<double> ln1_gain, ln1_bias;  // H
  std::vector<double> w2;                  // H x H, row-major (out, in)
  std::vector<double> b2;                  // H
  std::vector<double> ln2_gain, ln2_bias;  // H
  std::vector<double> w3;                  // H
  double b3 = 0.0;
  double layer_norm_epsilon = 1e-5;

  static MlpParameters zeros(std::size_t hidden);
  void validate() const;
  std::size_t parameter_count() const;

  bool operator==(const MlpParameters&) const = default;
};

inline constexpr std::size_t kCanonicalHiddenWidth = 4000;

struct TrainConfig {
  double learning_rate = 1e-2;
  int epochs = 100;
  std::uint64_t seed = 0;
  double layer_norm_epsilon = 1e-5;
  std::optional<double> gradient_clip;  // global L2 norm
  std::size_t workers = 1;
};

/// Uniform in +-sqrt(1/fan_in) for weights; biases 0, LN gains 1.
MlpParameters init_mlp(std::size_t hidden, std::uint64_t seed, double layer_norm_epsilon = 1e-5);

double mlp_forward(const MlpParameters& params, double x);

CoefficientVector neural_coefficients(const MlpParameters& params, const AlignmentVector& a);
CoefficientMatrix neural_coefficient_matrix(const MlpParameters& params, const DistanceMatrix& d);

/// tr((W - I) G (W - I)^T) / (N p): the mean squared parameter error of
/// reconstructing every bank adapter from its row of W.
double loss_gram(const CoefficientMatrix& coeffs, const GramMatrix& gram);

/// Loss of the neural pipeline and, when `grad` is non-null, its gradient
/// with respect to every parameter. Row blocks are reduced in a fixed order,
/// so the result does not depend on `workers`.
double neural_loss(const MlpParameters& params, const DistanceMatrix& d, const GramMatrix& gram,
                   MlpParameters* grad, std::size_t workers = 1);

struct TrainResult {
  MlpParameters params;       // lowest-loss iterate, never worse than the initial one
  std::vector<double> losses;  // loss before each epoch, then the final loss
  double best_loss = 0.0;
};

TrainResult train(const DistanceMatrix& d, const GramMatrix& gram, std::size_t hidden,
                  const TrainConfig& cfg);

struct GradCheckReport {
  struct Group {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_analytic = 0.0;
    std::size_t worst_index = 0;
  };
  std::vector<Group> groups;  // w1, b1, ln1.gain, ln1.bias, w2, b2, ln2.gain, ln2.bias, w3, b3
  double max_rel_error = 0.0;
  std::string worst;
  bool passed = false;
};

/// Central differences against the analytic gradient. The step starts at
/// 1e-5 and shrinks by 10x (down to 1e-8) while some ReLU changes state
/// between the two probe points. A parameter's error is |a - n| / max(|a|, |n|, 1e-8, 1e-6 |L|).
GradCheckReport grad_check(const MlpParameters& params, const DistanceMatrix& d,
                           const GramMatrix& gram, double tol);

struct MlpCheckpointInfo {
  std::size_t hidden = 0;
  std::uint64_t seed = 0;
  int epochs = 0;
  double learning_rate = 0.0;
};

/// Tensor file with "mlp.*" F64 tensors plus a JSON sidecar at path + ".json".
void save_mlp(const MlpParameters& params, const MlpCheckpointInfo& info,
              const std::filesystem::path& path);
MlpParameters load_mlp(const std::filesystem::path& path, MlpCheckpointInfo* info = nullptr);

}  // namespace lmf
