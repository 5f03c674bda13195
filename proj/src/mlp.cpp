#include "lmf/mlp.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

#include "lmf/error.hpp"
#include "lmf/parallel.hpp"
#include "lmf/safetensors.hpp"

namespace lmf {

namespace {

using VecMember = std::vector<double> MlpParameters::*;

struct GroupSpec {
  const char* name;
  const char* tensor;
  VecMember member;
};

constexpr std::array<GroupSpec, 9> kVectorGroups{{
    {"W1", "mlp.W1", &MlpParameters::w1},
    {"b1", "mlp.b1", &MlpParameters::b1},
    {"ln1.gain", "mlp.ln1.gain", &MlpParameters::ln1_gain},
    {"ln1.bias", "mlp.ln1.bias", &MlpParameters::ln1_bias},
    {"W2", "mlp.W2", &MlpParameters::w2},
    {"b2", "mlp.b2", &MlpParameters::b2},
    {"ln2.gain", "mlp.ln2.gain", &MlpParameters::ln2_gain},
    {"ln2.bias", "mlp.ln2.bias", &MlpParameters::ln2_bias},
    {"W3", "mlp.W3", &MlpParameters::w3},
}};

// Activations of one forward pass, kept for the backward pass.
struct Trace {
  std::vector<double> xhat1, a1, h1, xhat2, a2, h2;
  double inv_std1 = 0.0;
  double inv_std2 = 0.0;

  explicit Trace(std::size_t h) : xhat1(h), a1(h), h1(h), xhat2(h), a2(h), h2(h) {}
};

// pre -> xhat, returns 1/sqrt(var + eps) with population variance.
double layer_norm(std::vector<double>& pre, double eps) {
  const double n = static_cast<double>(pre.size());
  double mean = 0.0;
  for (double v : pre) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : pre) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  for (double& v : pre) v = (v - mean) * inv;
  return inv;
}

void layer_norm_backward(std::span<const double> xhat, double inv_std, std::span<double> dxhat) {
  const double n = static_cast<double>(xhat.size());
  double mean_d = 0.0;
  double mean_dx = 0.0;
  for (std::size_t k = 0; k < xhat.size(); ++k) {
    mean_d += dxhat[k];
    mean_dx += dxhat[k] * xhat[k];
  }
  mean_d /= n;
  mean_dx /= n;
  for (std::size_t k = 0; k < xhat.size(); ++k) {
    dxhat[k] = inv_std * (dxhat[k] - mean_d - xhat[k] * mean_dx);
  }
}

double forward_trace(const MlpParameters& p, double x, Trace& t) {
  const std::size_t h = p.hidden;
  for (std::size_t k = 0; k < h; ++k) t.xhat1[k] = p.w1[k] * x + p.b1[k];
  t.inv_std1 = layer_norm(t.xhat1, p.layer_norm_epsilon);
  for (std::size_t k = 0; k < h; ++k) {
    t.a1[k] = p.ln1_gain[k] * t.xhat1[k] + p.ln1_bias[k];
    t.h1[k] = t.a1[k] > 0.0 ? t.a1[k] : 0.0;
  }
  for (std::size_t r = 0; r < h; ++r) {
    const double* row = p.w2.data() + r * h;
    double acc = p.b2[r];
    for (std::size_t c = 0; c < h; ++c) acc += row[c] * t.h1[c];
    t.xhat2[r] = acc;
  }
  t.inv_std2 = layer_norm(t.xhat2, p.layer_norm_epsilon);
  double y = p.b3;
  for (std::size_t k = 0; k < h; ++k) {
    t.a2[k] = p.ln2_gain[k] * t.xhat2[k] + p.ln2_bias[k];
    t.h2[k] = t.a2[k] > 0.0 ? t.a2[k] : 0.0;
    y += p.w3[k] * t.h2[k];
  }
  return y;
}

// Accumulates dy * dy/dparams into g. `scratch` holds two H-vectors.
void backward_trace(const MlpParameters& p, double x, const Trace& t, double dy,
                    MlpParameters& g, std::vector<double>& d2, std::vector<double>& d1) {
  const std::size_t h = p.hidden;
  g.b3 += dy;
  for (std::size_t k = 0; k < h; ++k) {
    g.w3[k] += dy * t.h2[k];
    double da = t.a2[k] > 0.0 ? dy * p.w3[k] : 0.0;
    g.ln2_gain[k] += da * t.xhat2[k];
    g.ln2_bias[k] += da;
    d2[k] = da * p.ln2_gain[k];
  }
  layer_norm_backward(t.xhat2, t.inv_std2, d2);  // d2 = dL/dpre2
  std::fill(d1.begin(), d1.end(), 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    const double dr = d2[r];
    g.b2[r] += dr;
    if (dr == 0.0) continue;
    double* grow = g.w2.data() + r * h;
    const double* wrow = p.w2.data() + r * h;
    for (std::size_t c = 0; c < h; ++c) {
      grow[c] += dr * t.h1[c];
      d1[c] += dr * wrow[c];
    }
  }
  for (std::size_t k = 0; k < h; ++k) {
    double da = t.a1[k] > 0.0 ? d1[k] : 0.0;
    g.ln1_gain[k] += da * t.xhat1[k];
    g.ln1_bias[k] += da;
    d1[k] = da * p.ln1_gain[k];
  }
  layer_norm_backward(t.xhat1, t.inv_std1, d1);  // d1 = dL/dpre1
  for (std::size_t k = 0; k < h; ++k) {
    g.w1[k] += d1[k] * x;
    g.b1[k] += d1[k];
  }
}

void add_into(MlpParameters& dst, const MlpParameters& src) {
  for (const auto& spec : kVectorGroups) {
    auto& d = dst.*spec.member;
    const auto& s = src.*spec.member;
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += s[k];
  }
  dst.b3 += src.b3;
}

void check_ids(const DistanceMatrix& d, const GramMatrix& gram) {
  if (d.ids != gram.ids) {
    throw Error(ErrorCode::kDimensionMismatch, "gram ids do not match distance matrix ids");
  }
  if (!d.self_masked) {
    throw Error(ErrorCode::kInvalidArgument, "neural pipeline needs a self-masked distance matrix");
  }
}

constexpr std::size_t kRowBlocks = 4;

}  // namespace

MlpParameters MlpParameters::zeros(std::size_t hidden) {
  MlpParameters p;
  p.hidden = hidden;
  for (const auto& spec : kVectorGroups) (p.*spec.member).assign(hidden, 0.0);
  p.w2.assign(hidden * hidden, 0.0);
  return p;
}

void MlpParameters::validate() const {
  if (hidden == 0) throw Error(ErrorCode::kInvalidArgument, "mlp: hidden width must be positive");
  for (const auto& spec : kVectorGroups) {
    const auto& v = this->*spec.member;
    const std::size_t want = spec.member == &MlpParameters::w2 ? hidden * hidden : hidden;
    if (v.size() != want) {
      throw Error(ErrorCode::kDimensionMismatch,
                  fmt::format("mlp: {} has {} entries, expected {}", spec.name, v.size(), want));
    }
    for (double x : v) {
      if (!std::isfinite(x)) throw Error(ErrorCode::kNonFinite, fmt::format("mlp: {} not finite", spec.name));
    }
  }
  if (!std::isfinite(b3)) throw Error(ErrorCode::kNonFinite, "mlp: b3 not finite");
  if (!(layer_norm_epsilon >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "mlp: negative LN epsilon");
}

std::size_t MlpParameters::parameter_count() const {
  std::size_t n = 1;
  for (const auto& spec : kVectorGroups) n += (this->*spec.member).size();
  return n;
}

MlpParameters init_mlp(std::size_t hidden, std::uint64_t seed, double layer_norm_epsilon) {
  if (hidden == 0) throw Error(ErrorCode::kInvalidArgument, "mlp: hidden width must be positive");
  MlpParameters p = MlpParameters::zeros(hidden);
  p.layer_norm_epsilon = layer_norm_epsilon;
  std::mt19937_64 rng(seed);
  auto fill = [&](std::vector<double>& v, std::size_t fan_in) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& x : v) x = dist(rng);
  };
  fill(p.w1, 1);
  fill(p.w2, hidden);
  fill(p.w3, hidden);
  std::fill(p.ln1_gain.begin(), p.ln1_gain.end(), 1.0);
  std::fill(p.ln2_gain.begin(), p.ln2_gain.end(), 1.0);
  return p;
}

double mlp_forward(const MlpParameters& params, double x) {
  Trace t(params.hidden);
  return forward_trace(params, x, t);
}

CoefficientVector neural_coefficients(const MlpParameters& params, const AlignmentVector& a) {
  std::vector<double> scores(a.values.size(), 0.0);
  Trace t(params.hidden);
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    if (!a.is_masked(k)) scores[k] = forward_trace(params, a.values[k], t);
  }
  auto out = softmin(scores, 1.0, a.masked);
  out.bank_ids = a.bank_ids;
  out.method = Method::kNeural;
  return out;
}

CoefficientMatrix neural_coefficient_matrix(const MlpParameters& params, const DistanceMatrix& d) {
  if (!d.self_masked) {
    throw Error(ErrorCode::kInvalidArgument, "neural pipeline needs a self-masked distance matrix");
  }
  CoefficientMatrix out;
  out.ids = d.ids;
  for (std::size_t i = 0; i < d.size(); ++i) out.rows.push_back(neural_coefficients(params, d.row(i)));
  return out;
}

double loss_gram(const CoefficientMatrix& coeffs, const GramMatrix& gram) {
  const std::size_t n = gram.size();
  if (coeffs.rows.size() != n || gram.values.size() != n * n || gram.num_params == 0) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("loss: {} coefficient rows for a {}x{} gram", coeffs.rows.size(), n, n));
  }
  double total = 0.0;
  std::vector<double> e(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& w = coeffs.rows[i].weights;
    if (w.size() != n) throw Error(ErrorCode::kDimensionMismatch, "loss: row length mismatch");
    for (std::size_t j = 0; j < n; ++j) e[j] = w[j] - (i == j ? 1.0 : 0.0);
    double quad = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      double ga = 0.0;
      for (std::size_t b = 0; b < n; ++b) ga += gram.at(a, b) * e[b];
      quad += e[a] * ga;
    }
    total += quad;
  }
  return std::max(0.0, total) / (static_cast<double>(n) * static_cast<double>(gram.num_params));
}

double neural_loss(const MlpParameters& params, const DistanceMatrix& d, const GramMatrix& gram,
                   MlpParameters* grad, std::size_t workers) {
  check_ids(d, gram);
  const std::size_t n = d.size();
  const std::size_t h = params.hidden;

  // Scores and coefficient rows.
  std::vector<double> scores(n * n, 0.0);
  parallel_for(n, workers, [&](std::size_t i) {
    Trace t(h);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) scores[i * n + j] = forward_trace(params, d.at(i, j), t);
    }
  });
  std::vector<double> w(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<std::size_t, 1> mask{i};
    auto row = softmin(std::span(scores).subspan(i * n, n), 1.0, mask);
    std::copy(row.weights.begin(), row.weights.end(), w.begin() + static_cast<std::ptrdiff_t>(i * n));
  }

  // E = W - I; loss = sum_i e_i^T G e_i / (N p); dL/dW = 2 E G / (N p).
  const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(gram.num_params));
  std::vector<double> dw(n * n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t b = 0; b < n; ++b) {
      double eg = 0.0;
      for (std::size_t a = 0; a < n; ++a) {
        eg += (w[i * n + a] - (i == a ? 1.0 : 0.0)) * gram.at(a, b);
      }
      dw[i * n + b] = 2.0 * scale * eg;
      total += eg * (w[i * n + b] - (i == b ? 1.0 : 0.0));
    }
  }
  const double loss = std::max(0.0, total) * scale;
  if (grad == nullptr) return loss;

  // Through the softmin: dL/ds_ij = -w_ij (g_ij - sum_k w_ik g_ik).
  std::vector<double> ds(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_g = 0.0;
    for (std::size_t k = 0; k < n; ++k) mean_g += w[i * n + k] * dw[i * n + k];
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) ds[i * n + j] = -w[i * n + j] * (dw[i * n + j] - mean_g);
    }
  }

  const std::size_t blocks = std::min(n, kRowBlocks);
  std::vector<MlpParameters> partial(blocks, MlpParameters::zeros(h));
  parallel_for(blocks, workers, [&](std::size_t b) {
    Trace t(h);
    std::vector<double> d1(h), d2(h);
    for (std::size_t i = b * n / blocks; i < (b + 1) * n / blocks; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double x = d.at(i, j);
        forward_trace(params, x, t);
        backward_trace(params, x, t, ds[i * n + j], partial[b], d2, d1);
      }
    }
  });
  *grad = MlpParameters::zeros(h);
  grad->layer_norm_epsilon = params.layer_norm_epsilon;
  for (const auto& p : partial) add_into(*grad, p);
  return loss;
}

TrainResult train(const DistanceMatrix& d, const GramMatrix& gram, std::size_t hidden,
                  const TrainConfig& cfg) {
  if (!(cfg.learning_rate >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "learning rate must be >= 0");
  if (cfg.epochs <= 0) throw Error(ErrorCode::kInvalidArgument, "epochs must be positive");
  check_ids(d, gram);
  TrainResult result;
  MlpParameters params = init_mlp(hidden, cfg.seed, cfg.layer_norm_epsilon);
  MlpParameters grad;
  result.best_loss = std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch <= cfg.epochs; ++epoch) {
    const bool last = epoch == cfg.epochs;
    double loss = neural_loss(params, d, gram, last ? nullptr : &grad, cfg.workers);
    if (!std::isfinite(loss)) {
      throw Error(ErrorCode::kNonFinite, fmt::format("training loss not finite at epoch {}", epoch));
    }
    result.losses.push_back(loss);
    if (loss < result.best_loss) {
      result.best_loss = loss;
      result.params = params;
    }
    if (last) break;

    double step = cfg.learning_rate;
    if (cfg.gradient_clip) {
      double sq = grad.b3 * grad.b3;
      for (const auto& spec : kVectorGroups) {
        for (double g : grad.*spec.member) sq += g * g;
      }
      const double norm = std::sqrt(sq);
      if (norm > *cfg.gradient_clip) step *= *cfg.gradient_clip / norm;
    }
    for (const auto& spec : kVectorGroups) {
      auto& v = params.*spec.member;
      const auto& g = grad.*spec.member;
      for (std::size_t k = 0; k < v.size(); ++k) v[k] -= step * g[k];
    }
    params.b3 -= step * grad.b3;
  }
  return result;
}

namespace {

// Which ReLUs are active for every off-diagonal input.
std::vector<bool> relu_pattern(const MlpParameters& p, const DistanceMatrix& d) {
  const std::size_t n = d.ids.size();
  std::vector<bool> out;
  out.reserve(n * n * 2 * p.hidden);
  Trace t(p.hidden);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      forward_trace(p, d.at(i, j), t);
      for (double a : t.a1) out.push_back(a > 0.0);
      for (double a : t.a2) out.push_back(a > 0.0);
    }
  }
  return out;
}

}  // namespace

GradCheckReport grad_check(const MlpParameters& params, const DistanceMatrix& d,
                           const GramMatrix& gram, double tol) {
  constexpr double kStep = 1e-5, kMinStep = 1e-8;
  MlpParameters analytic;
  const double base = neural_loss(params, d, gram, &analytic);
  // Central differences cannot resolve slopes much below ulp(L) / step, so
  // the denominator floor follows the loss scale.
  const double floor = std::max(1e-8, 1e-6 * std::abs(base));
  MlpParameters probe = params;

  GradCheckReport report;
  auto check_one = [&](GradCheckReport::Group& group, double& slot, double a, std::size_t index) {
    const double saved = slot;
    double numeric = 0.0;
    // Shrink the step while a ReLU flips inside [x - h, x + h]; the slope
    // there is one-sided and central differences straddle the kink.
    for (double step = kStep; step >= kMinStep; step /= 10.0) {
      slot = saved + step;
      const double up = neural_loss(probe, d, gram, nullptr);
      const auto up_pattern = relu_pattern(probe, d);
      slot = saved - step;
      const double down = neural_loss(probe, d, gram, nullptr);
      const bool smooth = relu_pattern(probe, d) == up_pattern;
      slot = saved;
      numeric = (up - down) / (2.0 * step);
      if (smooth) break;
    }
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    group.max_abs_analytic = std::max(group.max_abs_analytic, std::abs(a));
    if (rel > group.max_rel_error) {
      group.max_rel_error = rel;
      group.worst_index = index;
    }
  };

  for (const auto& spec : kVectorGroups) {
    GradCheckReport::Group group{spec.name};
    auto& values = probe.*spec.member;
    const auto& grads = analytic.*spec.member;
    for (std::size_t k = 0; k < values.size(); ++k) check_one(group, values[k], grads[k], k);
    report.groups.push_back(group);
  }
  GradCheckReport::Group b3{"b3"};
  check_one(b3, probe.b3, analytic.b3, 0);
  report.groups.push_back(b3);

  for (const auto& g : report.groups) {
    if (g.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = g.max_rel_error;
      report.worst = fmt::format("{}[{}]", g.name, g.worst_index);
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

void save_mlp(const MlpParameters& params, const MlpCheckpointInfo& info,
              const std::filesystem::path& path) {
  params.validate();
  const std::size_t h = params.hidden;
  auto tensor = [](const char* name, std::vector<std::size_t> shape, const std::vector<double>& v) {
    TensorData t{name, "F64", std::move(shape), std::vector<std::byte>(v.size() * sizeof(double))};
    std::memcpy(t.bytes.data(), v.data(), t.bytes.size());
    return t;
  };
  std::vector<TensorData> tensors;
  for (const auto& spec : kVectorGroups) {
    std::vector<std::size_t> shape{h};
    if (spec.member == &MlpParameters::w1) shape = {h, 1};
    if (spec.member == &MlpParameters::w2) shape = {h, h};
    if (spec.member == &MlpParameters::w3) shape = {1, h};
    tensors.push_back(tensor(spec.tensor, shape, params.*spec.member));
  }
  tensors.push_back(tensor("mlp.b3", {1}, {params.b3}));
  write_safetensors(path, std::move(tensors),
                    {{"layer_norm_epsilon", fmt::format("{:.17g}", params.layer_norm_epsilon)}});

  nlohmann::ordered_json sidecar = {{"H", info.hidden},
                                    {"seed", info.seed},
                                    {"epochs", info.epochs},
                                    {"learning_rate", info.learning_rate},
                                    {"layer_norm_epsilon", params.layer_norm_epsilon}};
  auto sidecar_path = path;
  sidecar_path += ".json";
  std::ofstream out(sidecar_path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write '{}'", sidecar_path.string()));
  out << sidecar.dump(2) << '\n';
}

MlpParameters load_mlp(const std::filesystem::path& path, MlpCheckpointInfo* info) {
  auto file = SafetensorsFile::open(path);
  auto find = [&](const std::string& name) -> std::vector<double> {
    for (const auto& t : file.tensors()) {
      if (t.name != name) continue;
      if (t.dtype != "F64") {
        throw Error(ErrorCode::kUnsupportedDtype,
                    fmt::format("{}: tensor '{}' must be F64", path.string(), name));
      }
      auto bytes = file.payload(t);
      std::vector<double> v(bytes.size() / sizeof(double));
      std::memcpy(v.data(), bytes.data(), v.size() * sizeof(double));
      return v;
    }
    throw Error(ErrorCode::kMissingInput, fmt::format("{}: missing tensor '{}'", path.string(), name));
  };
  MlpParameters p;
  for (const auto& spec : kVectorGroups) p.*spec.member = find(spec.tensor);
  auto b3 = find("mlp.b3");
  if (b3.size() != 1) throw Error(ErrorCode::kDimensionMismatch, "mlp.b3 must hold one value");
  p.b3 = b3[0];
  p.hidden = p.b1.size();
  if (auto it = file.metadata().find("layer_norm_epsilon"); it != file.metadata().end()) {
    p.layer_norm_epsilon = std::stod(it->second);
  }
  p.validate();

  if (info != nullptr) {
    auto sidecar_path = path;
    sidecar_path += ".json";
    std::ifstream in(sidecar_path);
    if (!in) throw Error(ErrorCode::kMissingInput, fmt::format("missing sidecar '{}'", sidecar_path.string()));
    try {
      auto doc = nlohmann::json::parse(in);
      info->hidden = doc.at("H").get<std::size_t>();
      info->seed = doc.at("seed").get<std::uint64_t>();
      info->epochs = doc.at("epochs").get<int>();
      info->learning_rate = doc.at("learning_rate").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kParse, fmt::format("{}: {}", sidecar_path.string(), e.what()));
    }
  }
  return p;
}

}  // namespace lmf
