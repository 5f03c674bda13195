#include "lmf/adapter_bank.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <set>

#include "lmf/error.hpp"
#include "lmf/parallel.hpp"
#include "lmf/safetensors.hpp"

namespace lmf {

namespace {

// Random access to a flattened adapter by value range.
class ChunkSource {
 public:
  virtual ~ChunkSource() = default;
  virtual void read(std::size_t offset, std::span<float> out) const = 0;
};

class MemorySource final : public ChunkSource {
 public:
  explicit MemorySource(const FlatAdapter& a) : values_(a.values) {}
  void read(std::size_t offset, std::span<float> out) const override {
    std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(offset), out.size(), out.begin());
  }

 private:
  const std::vector<float>& values_;
};

class FileSource final : public ChunkSource {
 public:
  FileSource(const std::filesystem::path& path, const AdapterLayout& expected)
      : file_(SafetensorsFile::open(path)) {
    auto layout = layout_of(file_);
    require_same_layout(expected, layout, path.stem().string());
    std::size_t flat = 0;
    for (const auto& t : file_.tensors()) {
      segments_.push_back({flat, file_.payload(t)});
      flat += t.numel();
    }
  }

  void read(std::size_t offset, std::span<float> out) const override {
    std::size_t done = 0;
    for (const auto& seg : segments_) {
      const std::size_t seg_len = seg.bytes.size() / sizeof(float);
      const std::size_t want = offset + done;
      if (done == out.size()) break;
      if (want >= seg.flat_offset + seg_len || want < seg.flat_offset) continue;
      const std::size_t within = want - seg.flat_offset;
      const std::size_t n = std::min(seg_len - within, out.size() - done);
      std::memcpy(out.data() + done, seg.bytes.data() + within * sizeof(float), n * sizeof(float));
      done += n;
    }
  }

  static AdapterLayout layout_of(const SafetensorsFile& file) {
    std::vector<AdapterLayout::Entry> entries;
    for (const auto& t : file.tensors()) {
      if (t.dtype != "F32") {
        throw Error(ErrorCode::kUnsupportedDtype,
                    fmt::format("{}: tensor '{}' has unsupported dtype {} (only F32)",
                                file.path().string(), t.name, t.dtype));
      }
      if (t.end - t.begin != t.numel() * sizeof(float)) {
        throw Error(ErrorCode::kParse,
                    fmt::format("{}: tensor '{}' byte range does not match its shape",
                                file.path().string(), t.name));
      }
      entries.push_back({t.name, t.shape, t.dtype});
    }
    return AdapterLayout::from_entries(std::move(entries));
  }

 private:
  struct Segment {
    std::size_t flat_offset;
    std::span<const std::byte> bytes;
  };
  SafetensorsFile file_;
  std::vector<Segment> segments_;
};

std::vector<double> checked_weights(std::span<const double> weights, std::size_t n) {
  if (weights.size() != n) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("{} weights for a bank of {}", weights.size(), n));
  }
  check_simplex(weights, 1e-9);
  double total = 0.0;
  for (double w : weights) total += w;
  std::vector<double> out(weights.begin(), weights.end());
  for (auto& w : out) w /= total;
  return out;
}

std::vector<float> combine_sources(std::span<const ChunkSource* const> sources,
                                   std::span<const double> weights, std::size_t num_params,
                                   std::size_t workers) {
  std::vector<float> out(num_params);
  const std::size_t chunks = (num_params + kCombineChunk - 1) / kCombineChunk;
  parallel_for(chunks, workers, [&](std::size_t c) {
    const std::size_t begin = c * kCombineChunk;
    const std::size_t len = std::min(kCombineChunk, num_params - begin);
    std::vector<double> acc(len, 0.0);
    std::vector<float> buf(len);
    for (std::size_t k = 0; k < sources.size(); ++k) {
      const double w = weights[k];
      if (w == 0.0) continue;
      sources[k]->read(begin, buf);
      for (std::size_t j = 0; j < len; ++j) acc[j] += w * static_cast<double>(buf[j]);
    }
    for (std::size_t j = 0; j < len; ++j) out[begin + j] = static_cast<float>(acc[j]);
  });
  return out;
}

constexpr std::size_t kGramChunk = 1u << 16;

std::vector<double> gram_sources(std::span<const ChunkSource* const> sources,
                                 std::size_t num_params, std::size_t workers) {
  const std::size_t n = sources.size();
  std::vector<double> gram(n * n, 0.0);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) pairs.emplace_back(i, j);
  }
  std::vector<std::vector<float>> bufs(n);
  for (std::size_t begin = 0; begin < num_params; begin += kGramChunk) {
    const std::size_t len = std::min(kGramChunk, num_params - begin);
    parallel_for(n, workers, [&](std::size_t k) {
      bufs[k].resize(len);
      sources[k]->read(begin, bufs[k]);
    });
    parallel_for(pairs.size(), workers, [&](std::size_t t) {
      auto [i, j] = pairs[t];
      double dot = 0.0;
      for (std::size_t x = 0; x < len; ++x) {
        dot += static_cast<double>(bufs[i][x]) * static_cast<double>(bufs[j][x]);
      }
      gram[i * n + j] += dot;
    });
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) gram[i * n + j] = gram[j * n + i];
  }
  return gram;
}

}  // namespace

std::size_t AdapterLayout::Entry::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

AdapterLayout AdapterLayout::from_entries(std::vector<Entry> entries) {
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.name < b.name; });
  AdapterLayout layout;
  layout.tensors = std::move(entries);
  for (const auto& e : layout.tensors) layout.total_params += e.numel();
  layout.validate();
  return layout;
}

void AdapterLayout::validate() const {
  std::size_t total = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (i > 0 && !(tensors[i - 1].name < tensors[i].name)) {
      throw Error(ErrorCode::kDuplicateId,
                  fmt::format("layout: tensor names not strictly ordered at '{}'", tensors[i].name));
    }
    total += tensors[i].numel();
  }
  if (total != total_params || total == 0) {
    throw Error(ErrorCode::kLayoutMismatch, "layout: parameter count inconsistent or zero");
  }
}

AdapterLayout mistral_lora_layout() {
  constexpr std::size_t kLayers = 32;
  constexpr std::size_t kRank = 16;
  constexpr std::size_t kHidden = 4096;
  constexpr std::size_t kKvDim = 1024;
  std::vector<AdapterLayout::Entry> entries;
  for (std::size_t layer = 0; layer < kLayers; ++layer) {
    for (auto [proj, out_dim] : {std::pair{"q_proj", kHidden}, std::pair{"k_proj", kKvDim},
                                 std::pair{"v_proj", kKvDim}}) {
      auto prefix = fmt::format("base_model.model.model.layers.{}.self_attn.{}", layer, proj);
      entries.push_back({prefix + ".lora_A.weight", {kRank, kHidden}, "F32"});
      entries.push_back({prefix + ".lora_B.weight", {out_dim, kRank}, "F32"});
    }
  }
  return AdapterLayout::from_entries(std::move(entries));
}

AdapterLayout read_adapter_layout(const std::filesystem::path& path) {
  return FileSource::layout_of(SafetensorsFile::open(path));
}

FlatAdapter load_adapter(const std::filesystem::path& path) {
  auto file = SafetensorsFile::open(path);
  FlatAdapter flat;
  flat.adapter_id = path.stem().string();
  flat.layout = FileSource::layout_of(file);
  flat.values.resize(flat.layout.total_params);
  std::size_t offset = 0;
  for (const auto& t : file.tensors()) {
    auto bytes = file.payload(t);
    std::memcpy(flat.values.data() + offset, bytes.data(), bytes.size());
    offset += t.numel();
  }
  for (std::size_t j = 0; j < flat.values.size(); ++j) {
    if (!std::isfinite(flat.values[j])) {
      throw Error(ErrorCode::kNonFinite,
                  fmt::format("{}: non-finite value at flat index {}", path.string(), j));
    }
  }
  return flat;
}

std::vector<NamedTensor> unflatten(const FlatAdapter& flat) {
  std::vector<NamedTensor> out;
  out.reserve(flat.layout.tensors.size());
  std::size_t offset = 0;
  for (const auto& e : flat.layout.tensors) {
    const std::size_t n = e.numel();
    auto first = flat.values.begin() + static_cast<std::ptrdiff_t>(offset);
    out.push_back({e.name, e.shape, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(n))});
    offset += n;
  }
  return out;
}

FlatAdapter flatten(std::string adapter_id, std::vector<NamedTensor> tensors) {
  std::sort(tensors.begin(), tensors.end(),
            [](const NamedTensor& a, const NamedTensor& b) { return a.name < b.name; });
  std::vector<AdapterLayout::Entry> entries;
  FlatAdapter flat;
  flat.adapter_id = std::move(adapter_id);
  for (auto& t : tensors) {
    AdapterLayout::Entry e{t.name, t.shape, "F32"};
    if (e.numel() != t.values.size()) {
      throw Error(ErrorCode::kDimensionMismatch,
                  fmt::format("tensor '{}': {} values for shape of {}", t.name, t.values.size(),
                              e.numel()));
    }
    flat.values.insert(flat.values.end(), t.values.begin(), t.values.end());
    entries.push_back(std::move(e));
  }
  flat.layout = AdapterLayout::from_entries(std::move(entries));
  return flat;
}

void save_adapter(const FlatAdapter& adapter, const std::filesystem::path& path) {
  std::vector<TensorData> tensors;
  for (auto& t : unflatten(adapter)) {
    TensorData d{t.name, "F32", t.shape, std::vector<std::byte>(t.values.size() * sizeof(float))};
    std::memcpy(d.bytes.data(), t.values.data(), d.bytes.size());
    tensors.push_back(std::move(d));
  }
  write_safetensors(path, std::move(tensors));
}

std::vector<std::string> AdapterBank::ids() const {
  std::vector<std::string> out;
  for (const auto& a : adapters_) out.push_back(a.adapter_id);
  return out;
}

void require_same_layout(const AdapterLayout& expected, const AdapterLayout& actual,
                         const std::string& adapter_id) {
  if (expected == actual) return;
  const auto& a = expected.tensors;
  const auto& b = actual.tensors;
  for (std::size_t i = 0; i < std::max(a.size(), b.size()); ++i) {
    if (i < a.size() && i < b.size() && a[i] == b[i]) continue;
    // Name the tensor present in the reference layout when there is one.
    const std::string& name = i < a.size() ? a[i].name : b[i].name;
    throw Error(ErrorCode::kLayoutMismatch,
                fmt::format("adapter '{}': layout differs at tensor \"{}\"", adapter_id, name));
  }
  throw Error(ErrorCode::kLayoutMismatch, fmt::format("adapter '{}': layout differs", adapter_id));
}

AdapterBank validate_bank(std::vector<FlatAdapter> adapters) {
  if (adapters.empty()) throw Error(ErrorCode::kInvalidArgument, "bank needs at least one adapter");
  std::set<std::string> seen;
  for (const auto& a : adapters) {
    if (!seen.insert(a.adapter_id).second) {
      throw Error(ErrorCode::kDuplicateId, fmt::format("duplicate adapter id '{}'", a.adapter_id));
    }
    require_same_layout(adapters.front().layout, a.layout, a.adapter_id);
    if (a.values.size() != a.layout.total_params) {
      throw Error(ErrorCode::kDimensionMismatch,
                  fmt::format("adapter '{}' has {} values for {} parameters", a.adapter_id,
                              a.values.size(), a.layout.total_params));
    }
  }
  AdapterBank bank;
  bank.adapters_ = std::move(adapters);
  return bank;
}

FlatAdapter combine(const AdapterBank& bank, std::span<const double> weights, std::size_t workers) {
  auto w = checked_weights(weights, bank.size());
  std::vector<MemorySource> owned;
  owned.reserve(bank.size());
  std::vector<const ChunkSource*> sources;
  for (const auto& a : bank.adapters()) {
    owned.emplace_back(a);
    sources.push_back(&owned.back());
  }
  FlatAdapter out;
  out.adapter_id = "combined";
  out.layout = bank.layout();
  out.values = combine_sources(sources, w, bank.layout().total_params, workers);
  return out;
}

FlatAdapter combine(const AdapterBank& bank, const CoefficientVector& weights, std::size_t workers) {
  if (!weights.bank_ids.empty() && weights.bank_ids != bank.ids()) {
    throw Error(ErrorCode::kDimensionMismatch, "coefficient ids do not match bank order");
  }
  return combine(bank, std::span<const double>(weights.weights), workers);
}

FlatAdapter combine_files(std::span<const std::filesystem::path> paths,
                          std::span<const double> weights, std::string output_id,
                          std::size_t workers) {
  if (paths.empty()) throw Error(ErrorCode::kInvalidArgument, "no adapter files");
  auto w = checked_weights(weights, paths.size());
  const AdapterLayout layout = read_adapter_layout(paths.front());
  std::vector<std::unique_ptr<FileSource>> owned;
  std::vector<const ChunkSource*> sources;
  std::set<std::string> seen;
  for (const auto& p : paths) {
    if (!seen.insert(p.stem().string()).second) {
      throw Error(ErrorCode::kDuplicateId, fmt::format("duplicate adapter id '{}'", p.stem().string()));
    }
    owned.push_back(std::make_unique<FileSource>(p, layout));
    sources.push_back(owned.back().get());
  }
  FlatAdapter out;
  out.adapter_id = std::move(output_id);
  out.layout = layout;
  out.values = combine_sources(sources, w, layout.total_params, workers);
  return out;
}

GramMatrix gram_matrix(const AdapterBank& bank, std::size_t workers) {
  std::vector<MemorySource> owned;
  owned.reserve(bank.size());
  std::vector<const ChunkSource*> sources;
  for (const auto& a : bank.adapters()) {
    owned.emplace_back(a);
    sources.push_back(&owned.back());
  }
  GramMatrix g;
  g.ids = bank.ids();
  g.num_params = bank.layout().total_params;
  g.values = gram_sources(sources, g.num_params, workers);
  return g;
}

GramMatrix gram_matrix_files(std::span<const std::filesystem::path> paths, std::size_t workers) {
  if (paths.empty()) throw Error(ErrorCode::kInvalidArgument, "no adapter files");
  const AdapterLayout layout = read_adapter_layout(paths.front());
  std::vector<std::unique_ptr<FileSource>> owned;
  std::vector<const ChunkSource*> sources;
  GramMatrix g;
  for (const auto& p : paths) {
    owned.push_back(std::make_unique<FileSource>(p, layout));
    sources.push_back(owned.back().get());
    g.ids.push_back(p.stem().string());
  }
  g.num_params = layout.total_params;
  g.values = gram_sources(sources, g.num_params, workers);
  return g;
}

}  // namespace lmf
