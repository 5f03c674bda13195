#include "lmf/pipeline.hpp"

#include <fcntl.h>
#include <fmt/format.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "lmf/adapter_bank.hpp"
#include "lmf/corpus.hpp"
#include "lmf/hashing.hpp"
#include "lmf/mlp.hpp"
#include "lmf/parallel.hpp"

namespace lmf {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename Fn>
auto run_stage(const std::string& stage, const std::string& command, Fn&& fn) {
  try {
    return fn();
  } catch (const StageError& e) {
    throw StageError(e.code(), e.what(), stage, e.command());
  } catch (const Error& e) {
    throw StageError(e.code(), e.what(), stage, command);
  } catch (const nlohmann::json::exception& e) {
    throw StageError(ErrorCode::kParse, e.what(), stage, command);
  } catch (const std::exception& e) {
    throw StageError(ErrorCode::kIo, e.what(), stage, command);
  }
}

// Advisory exclusive lock on <dir>/.lock, held for the object's lifetime.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) {
    fs::create_directories(dir);
    fd_ = ::open((dir / ".lock").c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error(ErrorCode::kIo, fmt::format("cannot open lock in '{}'", dir.string()));
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw Error(ErrorCode::kIo, fmt::format("cannot lock '{}'", dir.string()));
    }
  }
  ~DirectoryLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

std::string peek_dataset_id(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto first = nlohmann::json::parse(line);
      if (first.is_object() && first.contains("meta") && first["meta"].contains("dataset_id")) {
        return first["meta"]["dataset_id"].get<std::string>();
      }
    } catch (const nlohmann::json::exception&) {
      // Reported with a line number when the file is actually loaded.
    }
    break;
  }
  return path.stem().string();
}

std::vector<TokenizedDataset> load_bank_datasets(const PipelineConfig& config,
                                                 const BankFiles& files) {
  std::vector<TokenizedDataset> out(files.ids.size());
  parallel_for(out.size(), config.workers, [&](std::size_t i) {
    out[i] = load_token_dataset(files.dataset_paths[i], config.vocab_size);
    if (out[i].dataset_id != files.ids[i]) {
      throw Error(ErrorCode::kParse, fmt::format("{}: dataset id changed while loading",
                                                 files.dataset_paths[i].string()));
    }
  });
  return out;
}

std::vector<fs::path> adapter_paths_for(const BankFiles& files, const std::vector<std::string>& ids) {
  std::map<std::string, fs::path> by_id;
  for (std::size_t i = 0; i < files.ids.size(); ++i) by_id[files.ids[i]] = files.adapter_paths[i];
  std::vector<fs::path> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw Error(ErrorCode::kMissingInput, fmt::format("no bank adapter for id '{}'", id));
    }
    out.push_back(it->second);
  }
  return out;
}

fs::path csv_path_for(const fs::path& json_path) {
  auto p = json_path;
  p.replace_extension(".csv");
  return p;
}

MetricKind effective_metric(const PipelineConfig& config) {
  MetricKind m = config.metric;
  m.seed = config.seed;
  return m;
}

}  // namespace

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot open config '{}'", path.string()));
  PipelineConfig c;
  try {
    auto doc = nlohmann::json::parse(in);
    if (doc.contains("bank_dir")) c.bank_dir = doc["bank_dir"].get<std::string>();
    if (doc.contains("query_path")) c.query_path = doc["query_path"].get<std::string>();
    if (doc.contains("metric")) {
      const auto& m = doc["metric"];
      if (m.is_string()) {
        c.metric.tag = parse_metric(m.get<std::string>());
      } else {
        c.metric.tag = parse_metric(m.at("tag").get<std::string>());
        if (m.contains("epsilon")) c.metric.epsilon = m["epsilon"].get<double>();
        if (m.contains("bandwidth")) {
          const auto& bw = m["bandwidth"];
          if (!(bw.is_string() && bw.get<std::string>() == "median")) c.metric.bandwidth = bw.get<double>();
        }
        if (m.contains("sample_cap")) c.metric.sample_cap = m["sample_cap"].get<std::uint32_t>();
      }
    }
    if (doc.contains("method")) c.method = parse_method(doc["method"].get<std::string>());
    if (doc.contains("workers")) c.workers = doc["workers"].get<std::size_t>();
    if (doc.contains("cache_dir")) c.cache_dir = doc["cache_dir"].get<std::string>();
    if (doc.contains("seed")) c.seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("output_path")) c.output_path = doc["output_path"].get<std::string>();
    if (doc.contains("vocab_size")) c.vocab_size = doc["vocab_size"].get<std::size_t>();
    if (doc.contains("checkpoint")) c.checkpoint = doc["checkpoint"].get<std::string>();
    if (doc.contains("no_train")) c.no_train = doc["no_train"].get<bool>();
    if (doc.contains("hidden")) c.hidden = doc["hidden"].get<std::size_t>();
    if (doc.contains("epochs")) c.epochs = doc["epochs"].get<int>();
    if (doc.contains("learning_rate")) c.learning_rate = doc["learning_rate"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, fmt::format("{}: {}", path.string(), e.what()));
  }
  if (c.workers == 0) throw Error(ErrorCode::kInvalidArgument, "workers must be >= 1");
  return c;
}

std::string error_json(const std::exception& e) {
  nlohmann::ordered_json doc;
  if (const auto* stage = dynamic_cast<const StageError*>(&e)) {
    doc["error"] = to_string(stage->code());
    doc["message"] = stage->what();
    doc["stage"] = stage->stage();
    doc["command"] = stage->command();
  } else if (const auto* err = dynamic_cast<const Error*>(&e)) {
    doc["error"] = to_string(err->code());
    doc["message"] = err->what();
  } else {
    doc["error"] = "internal";
    doc["message"] = e.what();
  }
  return doc.dump();
}

BankFiles gather_bank(const PipelineConfig& config) {
  const fs::path datasets = config.bank_dir / "datasets";
  const fs::path adapters = config.bank_dir / "adapters";
  if (!fs::is_directory(datasets)) {
    throw Error(ErrorCode::kMissingInput, fmt::format("missing directory '{}'", datasets.string()));
  }
  std::vector<std::pair<std::string, fs::path>> found;
  for (const auto& entry : fs::directory_iterator(datasets)) {
    if (entry.is_regular_file() && entry.path().extension() == ".jsonl") {
      found.emplace_back(peek_dataset_id(entry.path()), entry.path());
    }
  }
  std::sort(found.begin(), found.end());
  BankFiles files;
  for (std::size_t i = 0; i < found.size(); ++i) {
    if (i > 0 && found[i - 1].first == found[i].first) {
      throw Error(ErrorCode::kDuplicateId, fmt::format("duplicate dataset id '{}'", found[i].first));
    }
    files.ids.push_back(found[i].first);
    files.dataset_paths.push_back(found[i].second);
    fs::path adapter = adapters / (found[i].first + ".safetensors");
    if (!fs::is_regular_file(adapter)) {
      throw Error(ErrorCode::kMissingInput,
                  fmt::format("dataset '{}' has no adapter at '{}'", found[i].first, adapter.string()));
    }
    files.adapter_paths.push_back(adapter);
  }
  if (files.ids.size() < 2) {
    throw Error(ErrorCode::kMissingInput,
                fmt::format("bank '{}' needs at least 2 datasets", config.bank_dir.string()));
  }
  return files;
}

std::string distance_cache_key(const PipelineConfig& config, const BankFiles& files) {
  Sha256 h;
  h.update(fmt::format("lmfd-v{}\n{}\nvocab={}\n", kMatrixFormatVersion,
                       effective_metric(config).describe(),
                       config.vocab_size ? std::to_string(*config.vocab_size) : "meta"));
  for (std::size_t i = 0; i < files.ids.size(); ++i) {
    std::ifstream in(files.dataset_paths[i], std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    h.update(fmt::format("{}\n{}\n", files.ids[i], bytes.size()));
    h.update(bytes);
  }
  return h.hex_digest();
}

fs::path distance_cache_path(const PipelineConfig& config, const BankFiles& files) {
  return config.cache_dir / fmt::format("distances-{}.lmfd", distance_cache_key(config, files));
}

DistancesResult cmd_distances(const PipelineConfig& config) {
  return run_stage("distances", "cmd_distances", [&] {
    const auto start = Clock::now();
    DistancesResult r;
    const BankFiles files = gather_bank(config);
    const MetricKind metric = effective_metric(config);
    r.cache_file = distance_cache_path(config, files);

    if (fs::exists(r.cache_file)) {
      try {
        DistanceMatrix cached = load_matrix(r.cache_file);
        if (cached.ids == files.ids && cached.metric == metric) {
          r.cache_hit = true;
          r.matrix = std::move(cached);
        } else {
          r.version_warning = true;
        }
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kVersion && e.code() != ErrorCode::kChecksum &&
            e.code() != ErrorCode::kParse) {
          throw;
        }
        r.version_warning = true;
      }
    }
    if (!r.cache_hit) {
      auto datasets = load_bank_datasets(config, files);
      r.matrix = pairwise_distance_matrix(datasets, metric, config.workers);
      r.pair_evaluations = r.matrix.pair_evaluations;
      DirectoryLock lock(config.cache_dir);
      save_matrix(r.matrix, r.cache_file);
    }
    r.wall_seconds = seconds_since(start);
    return r;
  });
}

CoefficientsResult cmd_coefficients(const PipelineConfig& config) {
  return run_stage("coefficients", "cmd_coefficients", [&] {
    if (config.output_path.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "cmd_coefficients: no output path");
    }
    CoefficientsResult r;
    const BankFiles files = gather_bank(config);
    const std::string key = distance_cache_key(config, files);
    const fs::path cache = config.cache_dir / fmt::format("distances-{}.lmfd", key);
    if (!fs::exists(cache)) {
      throw Error(ErrorCode::kMissingInput,
                  fmt::format("cmd_coefficients: missing distance cache '{}' (run `distances` first)",
                              cache.string()));
    }
    const DistanceMatrix d = load_matrix(cache);
    if (d.ids != files.ids) {
      throw Error(ErrorCode::kMissingInput, "cmd_coefficients: distance cache does not match bank");
    }

    std::optional<MlpParameters> mlp;
    if (config.method == Method::kNeural) {
      fs::path ckpt = config.checkpoint.value_or(
          config.cache_dir /
          fmt::format("mlp-{}-h{}-s{}.safetensors", key.substr(0, 16), config.hidden, config.seed));
      if (fs::exists(ckpt)) {
        mlp = load_mlp(ckpt);
      } else if (config.no_train) {
        throw Error(ErrorCode::kMissingInput,
                    fmt::format("cmd_coefficients: no MLP checkpoint at '{}' and training disabled",
                                ckpt.string()));
      } else {
        GramMatrix gram = gram_matrix_files(files.adapter_paths, config.workers);
        gram.ids = files.ids;
        TrainConfig tc;
        tc.learning_rate = config.learning_rate;
        tc.epochs = config.epochs;
        tc.seed = config.seed;
        tc.workers = config.workers;
        auto trained = train(d, gram, config.hidden, tc);
        mlp = std::move(trained.params);
        r.trained = true;
        DirectoryLock lock(config.cache_dir);
        if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
        save_mlp(*mlp, {config.hidden, config.seed, config.epochs, config.learning_rate}, ckpt);
      }
    }

    auto row_for = [&](const AlignmentVector& a) {
      switch (config.method) {
        case Method::kAttentional: return attentional(a);
        case Method::kNormalized: return normalized(a);
        case Method::kNeural: return neural_coefficients(*mlp, a);
      }
      throw Error(ErrorCode::kInvalidArgument, "unknown method");
    };

    r.file.method = std::string(to_string(config.method));
    r.file.metric = std::string(to_string(config.metric.tag));
    r.file.matrix.ids = d.ids;
    for (std::size_t i = 0; i < d.size(); ++i) r.file.matrix.rows.push_back(row_for(d.row(i)));

    if (config.query_path) {
      auto query = load_token_dataset(*config.query_path, config.vocab_size);
      auto bank = load_bank_datasets(config, files);
      auto a = alignment_vector(query, bank, effective_metric(config), config.workers);
      r.file.query_rows[query.dataset_id] = row_for(a).weights;
    }

    for (const auto& row : r.file.matrix.rows) check_simplex(row.weights);
    for (const auto& [id, w] : r.file.query_rows) check_simplex(w);

    r.json_path = config.output_path;
    r.csv_path = csv_path_for(config.output_path);
    if (r.json_path.has_parent_path()) fs::create_directories(r.json_path.parent_path());
    write_coefficients_json(r.file, r.json_path);
    write_coefficients_csv(r.file.matrix, r.csv_path);
    return r;
  });
}

fs::path cmd_predict(const PipelineConfig& config, const std::string& query_id) {
  return run_stage("predict", "cmd_predict", [&] {
    if (!config.coefficients_path) {
      throw Error(ErrorCode::kMissingInput, "cmd_predict: no coefficient file given");
    }
    if (config.output_path.empty()) throw Error(ErrorCode::kInvalidArgument, "cmd_predict: no output path");
    const CoefficientFile coeffs = read_coefficients_json(*config.coefficients_path);
    std::vector<double> weights;
    if (auto it = coeffs.query_rows.find(query_id); it != coeffs.query_rows.end()) {
      weights = it->second;
    } else {
      auto pos = std::find(coeffs.matrix.ids.begin(), coeffs.matrix.ids.end(), query_id);
      if (pos == coeffs.matrix.ids.end()) {
        throw Error(ErrorCode::kMissingInput,
                    fmt::format("cmd_predict: no coefficient row for '{}'", query_id));
      }
      weights = coeffs.matrix.rows[static_cast<std::size_t>(pos - coeffs.matrix.ids.begin())].weights;
    }
    if (weights.size() != coeffs.matrix.ids.size()) {
      throw Error(ErrorCode::kDimensionMismatch, "cmd_predict: row length does not match ids");
    }
    const BankFiles files = gather_bank(config);
    const auto paths = adapter_paths_for(files, coeffs.matrix.ids);
    FlatAdapter out = combine_files(paths, weights, query_id, config.workers);
    if (config.output_path.has_parent_path()) fs::create_directories(config.output_path.parent_path());
    save_adapter(out, config.output_path);
    return config.output_path;
  });
}

std::vector<std::uint8_t> heatmap_pixels(const CoefficientMatrix& m) {
  const std::size_t n = m.ids.size();
  if (n == 0 || m.rows.size() != n) {
    throw Error(ErrorCode::kInvalidArgument, "heatmap: empty or non-square coefficient matrix");
  }
  std::vector<std::uint8_t> pixels(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& w = m.rows[i].weights;
    if (w.size() != n) throw Error(ErrorCode::kDimensionMismatch, "heatmap: ragged row");
    const double hi = *std::max_element(w.begin(), w.end());
    if (!(hi > 0.0)) throw Error(ErrorCode::kOffSimplex, fmt::format("heatmap: row {} is all zero", i));
    for (std::size_t j = 0; j < n; ++j) {
      pixels[i * n + j] = static_cast<std::uint8_t>(std::lround(255.0 * w[j] / hi));
    }
  }
  return pixels;
}

void cmd_heatmap(const fs::path& coefficients, const fs::path& out) {
  run_stage("heatmap", "cmd_heatmap", [&] {
    auto file = read_coefficients_json(coefficients);
    auto pixels = heatmap_pixels(file.matrix);
    const std::size_t n = file.matrix.ids.size();
    std::ofstream o(out, std::ios::binary | std::ios::trunc);
    if (!o) throw Error(ErrorCode::kIo, fmt::format("cannot write '{}'", out.string()));
    o << "P5\n" << n << ' ' << n << "\n255\n";
    o.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!o) throw Error(ErrorCode::kIo, fmt::format("write failed for '{}'", out.string()));
    return 0;
  });
}

std::string PipelineReport::to_json() const {
  nlohmann::ordered_json doc;
  auto stages_json = nlohmann::ordered_json::array();
  for (const auto& s : stages) stages_json.push_back({{"name", s.name}, {"seconds", s.seconds}});
  doc["stages"] = std::move(stages_json);
  doc["query_id"] = query_id;
  doc["adapter"] = adapter_path.string();
  doc["coefficients"] = coefficients_path.string();
  doc["pair_evaluations"] = pair_evaluations;
  doc["cache_hit"] = cache_hit;
  return doc.dump(2);
}

PipelineReport cmd_pipeline(const PipelineConfig& config) {
  PipelineReport report;
  auto timed = [&](const std::string& stage, const std::string& command, auto&& fn) {
    const auto start = Clock::now();
    auto result = run_stage(stage, command, fn);
    report.stages.push_back({stage, seconds_since(start)});
    return result;
  };

  if (!config.query_path) {
    throw StageError(ErrorCode::kMissingInput, "pipeline needs a query dataset", "gather", "cmd_pipeline");
  }
  if (config.output_path.empty()) {
    throw StageError(ErrorCode::kInvalidArgument, "pipeline needs an output path", "gather", "cmd_pipeline");
  }

  const BankFiles files = timed("gather", "cmd_pipeline", [&] { return gather_bank(config); });

  const TokenizedDataset query = timed("preprocess", "cmd_pipeline", [&] {
    auto q = load_token_dataset(*config.query_path, config.vocab_size);
    const AdapterLayout layout = read_adapter_layout(files.adapter_paths.front());
    for (std::size_t i = 1; i < files.adapter_paths.size(); ++i) {
      require_same_layout(layout, read_adapter_layout(files.adapter_paths[i]), files.ids[i]);
    }
    return q;
  });
  report.query_id = query.dataset_id;

  const DistancesResult distances = timed("distances", "cmd_distances", [&] { return cmd_distances(config); });
  report.pair_evaluations = distances.pair_evaluations;
  report.cache_hit = distances.cache_hit;

  PipelineConfig coeff_config = config;
  coeff_config.output_path = config.output_path;
  coeff_config.output_path += ".coefficients.json";
  const CoefficientsResult coeffs =
      timed("coefficients", "cmd_coefficients", [&] { return cmd_coefficients(coeff_config); });
  report.coefficients_path = coeffs.json_path;

  PipelineConfig predict_config = config;
  predict_config.coefficients_path = coeffs.json_path;
  report.adapter_path =
      timed("predict", "cmd_predict", [&] { return cmd_predict(predict_config, query.dataset_id); });

  auto report_path = config.output_path;
  report_path += ".report.json";
  std::ofstream out(report_path, std::ios::trunc);
  out << report.to_json() << '\n';
  return report;
}

}  // namespace lmf
