#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lmf/coefficients.hpp"

namespace lmf {

struct AdapterLayout {
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::string dtype = "F32";

    std::size_t numel() const;
    bool operator==(const Entry&) const = default;
  };

  std::vector<Entry> tensors;  // strictly increasing by name
  std::size_t total_params = 0;

  static AdapterLayout from_entries(std::vector<Entry> entries);
  void validate() const;
  bool operator==(const AdapterLayout&) const = default;
};

/// The bank layout of the public Mistral-7B adapters: rank-16 LoRA on the
/// q/k/v projections of all 32 decoder layers (9,437,184 parameters).
AdapterLayout mistral_lora_layout();

struct FlatAdapter {
  std::string adapter_id;
  AdapterLayout layout;
  std::vector<float> values;  // tensors in layout order, each row-major
};

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

/// Reads an F32 tensor file; id is the file stem.
FlatAdapter load_adapter(const std::filesystem::path& path);
AdapterLayout read_adapter_layout(const std::filesystem::path& path);
void save_adapter(const FlatAdapter& adapter, const std::filesystem::path& path);

std::vector<NamedTensor> unflatten(const FlatAdapter& flat);
FlatAdapter flatten(std::string adapter_id, std::vector<NamedTensor> tensors);

class AdapterBank {
 public:
  const std::vector<FlatAdapter>& adapters() const { return adapters_; }
  const AdapterLayout& layout() const { return adapters_.front().layout; }
  std::size_t size() const { return adapters_.size(); }
  std::vector<std::string> ids() const;

 private:
  friend AdapterBank validate_bank(std::vector<FlatAdapter> adapters);
  std::vector<FlatAdapter> adapters_;
};

AdapterBank validate_bank(std::vector<FlatAdapter> adapters);

/// Throws naming the first tensor on which the two layouts disagree.
void require_same_layout(const AdapterLayout& expected, const AdapterLayout& actual,
                         const std::string& adapter_id);

inline constexpr std::size_t kCombineChunk = 1u << 20;

/// sum_k w_k theta_k with f64 accumulation per fixed-size chunk, stored as f32.
/// Weights within 1e-9 of the simplex are renormalised by their sum.
FlatAdapter combine(const AdapterBank& bank, std::span<const double> weights,
                    std::size_t workers = 1);
/// Same, checking that the vector's ids line up with the bank.
FlatAdapter combine(const AdapterBank& bank, const CoefficientVector& weights,
                    std::size_t workers = 1);

/// Out-of-core combine over adapter files. Files are memory-mapped and read
/// chunk by chunk, so at most one input chunk and one accumulator chunk are
/// resident besides the output. Bit-identical to the in-memory combine.
FlatAdapter combine_files(std::span<const std::filesystem::path> paths,
                          std::span<const double> weights, std::string output_id,
                          std::size_t workers = 1);

struct GramMatrix {
  std::vector<std::string> ids;
  std::vector<double> values;  // row-major N x N
  std::size_t num_params = 0;

  std::size_t size() const { return ids.size(); }
  double at(std::size_t i, std::size_t j) const { return values[i * ids.size() + j]; }
};

GramMatrix gram_matrix(const AdapterBank& bank, std::size_t workers = 1);
GramMatrix gram_matrix_files(std::span<const std::filesystem::path> paths,
                             std::size_t workers = 1);

}  // namespace lmf
