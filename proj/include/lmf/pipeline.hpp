#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lmf/coefficients.hpp"
#include "lmf/divergences.hpp"
#include "lmf/error.hpp"

namespace lmf {

namespace fs = std::filesystem;

// A bank directory holds `datasets/<id>.jsonl` token files and
// `adapters/<id>.safetensors` adapter files with matching ids.
struct PipelineConfig {
  fs::path bank_dir;
  std::optional<fs::path> query_path;
  MetricKind metric;
  Method method = Method::kNormalized;
  std::size_t workers = 1;
  fs::path cache_dir = ".lmf-cache";
  std::uint64_t seed = 0;
  fs::path output_path;
  std::optional<std::size_t> vocab_size;  // for token files without a meta line

  // Inputs of later stages.
  std::optional<fs::path> coefficients_path;
  std::optional<std::string> query_id;

  // Neural pipeline.
  std::optional<fs::path> checkpoint;
  bool no_train = false;
  std::size_t hidden = 16;
  int epochs = 200;
  double learning_rate = 0.05;
};

/// Parses the JSON mirror of PipelineConfig; absent keys keep defaults.
PipelineConfig load_pipeline_config(const fs::path& path);

// Failure of one command, carrying the stage and command names for reporting.
class StageError : public Error {
 public:
  StageError(ErrorCode code, const std::string& message, std::string stage, std::string command)
      : Error(code, message), stage_(std::move(stage)), command_(std::move(command)) {}
  const std::string& stage() const { return stage_; }
  const std::string& command() const { return command_; }

 private:
  std::string stage_;
  std::string command_;
};

/// {"error", "message", "stage"?, "command"?} for the diagnostic stream.
std::string error_json(const std::exception& e);

struct BankFiles {
  std::vector<std::string> ids;  // sorted
  std::vector<fs::path> dataset_paths;
  std::vector<fs::path> adapter_paths;
};

BankFiles gather_bank(const PipelineConfig& config);
std::string distance_cache_key(const PipelineConfig& config, const BankFiles& files);
fs::path distance_cache_path(const PipelineConfig& config, const BankFiles& files);

struct DistancesResult {
  fs::path cache_file;
  bool cache_hit = false;
  bool version_warning = false;  // a stale cache was found and rebuilt
  std::uint64_t pair_evaluations = 0;  // performed by this call
  double wall_seconds = 0.0;
  DistanceMatrix matrix;
};

DistancesResult cmd_distances(const PipelineConfig& config);

struct CoefficientsResult {
  fs::path json_path;
  fs::path csv_path;
  CoefficientFile file;
  bool trained = false;
};

/// Writes `output_path` (JSON) and the same path with a .csv extension.
CoefficientsResult cmd_coefficients(const PipelineConfig& config);

/// Combines bank adapters with the coefficient row for `query_id` and writes
/// the result to `output_path`.
fs::path cmd_predict(const PipelineConfig& config, const std::string& query_id);

/// Binary PGM, pixel (i, j) = round(255 * w_ij / max_j w_ij).
void cmd_heatmap(const fs::path& coefficients, const fs::path& out);
std::vector<std::uint8_t> heatmap_pixels(const CoefficientMatrix& m);

struct StageTiming {
  std::string name;
  double seconds = 0.0;
};

struct PipelineReport {
  std::vector<StageTiming> stages;  // gather, preprocess, distances, coefficients, predict
  std::string query_id;
  fs::path adapter_path;
  fs::path coefficients_path;
  std::uint64_t pair_evaluations = 0;
  bool cache_hit = false;

  std::string to_json() const;
};

/// Runs every stage for the query dataset; the report is also written next
/// to the adapter as <output>.report.json.
PipelineReport cmd_pipeline(const PipelineConfig& config);

}  // namespace lmf
