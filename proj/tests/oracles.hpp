#pragma once

// Independent reference implementations used only by tests. None of these
// call into the library paths they are used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmf/adapter_bank.hpp"
#include "lmf/corpus.hpp"

namespace oracle {

// Dense two-phase simplex for  min c^T x  s.t.  A x = b, x >= 0  (b >= 0),
// Bland's rule. Returns the optimal objective.
inline double solve_lp(std::vector<std::vector<double>> a, std::vector<double> b,
                       const std::vector<double>& c) {
  const std::size_t m = a.size();
  const std::size_t n = c.size();
  const double eps = 1e-12;
  for (std::size_t i = 0; i < m; ++i) {
    if (b[i] < 0) {
      for (auto& v : a[i]) v = -v;
      b[i] = -b[i];
    }
  }
  // Columns: n real, m artificial, then rhs.
  const std::size_t cols = n + m + 1;
  std::vector<std::vector<double>> t(m, std::vector<double>(cols, 0.0));
  std::vector<std::size_t> basis(m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) t[i][j] = a[i][j];
    t[i][n + i] = 1.0;
    t[i][cols - 1] = b[i];
    basis[i] = n + i;
  }

  auto pivot = [&](std::size_t r, std::size_t col) {
    const double p = t[r][col];
    for (auto& v : t[r]) v /= p;
    for (std::size_t i = 0; i < m; ++i) {
      if (i == r || t[i][col] == 0.0) continue;
      const double f = t[i][col];
      for (std::size_t j = 0; j < cols; ++j) t[i][j] -= f * t[r][j];
    }
    basis[r] = col;
  };

  auto run = [&](const std::vector<double>& cost, std::size_t allowed) {
    for (int guard = 0; guard < 100000; ++guard) {
      // Reduced costs.
      std::size_t enter = cols;
      for (std::size_t j = 0; j < allowed; ++j) {
        double rc = cost[j];
        for (std::size_t i = 0; i < m; ++i) rc -= cost[basis[i]] * t[i][j];
        if (rc < -eps) {
          enter = j;
          break;
        }
      }
      if (enter == cols) return;
      std::size_t leave = m;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < m; ++i) {
        if (t[i][enter] > eps) {
          double ratio = t[i][cols - 1] / t[i][enter];
          if (ratio < best - eps || (std::abs(ratio - best) <= eps && basis[i] < basis[leave])) {
            best = ratio;
            leave = i;
          }
        }
      }
      if (leave == m) throw std::runtime_error("lp: unbounded");
      pivot(leave, enter);
    }
    throw std::runtime_error("lp: iteration guard hit");
  };

  std::vector<double> phase1(n + m, 0.0);
  for (std::size_t j = n; j < n + m; ++j) phase1[j] = 1.0;
  run(phase1, n + m);
  // Drive zero-level artificials out of the basis where possible.
  for (std::size_t i = 0; i < m; ++i) {
    if (basis[i] < n) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(t[i][j]) > 1e-9) {
        pivot(i, j);
        break;
      }
    }
  }
  std::vector<double> phase2(n + m, 0.0);
  for (std::size_t j = 0; j < n; ++j) phase2[j] = c[j];
  run(phase2, n);
  double obj = 0.0;
  for (std::size_t i = 0; i < m; ++i) obj += phase2[basis[i]] * t[i][cols - 1];
  return obj;
}

// Exact optimal transport cost between weighted point sets on the line.
inline double transport_lp(const std::vector<double>& xs, const std::vector<double>& wx,
                           const std::vector<double>& ys, const std::vector<double>& wy) {
  const std::size_t p = xs.size(), q = ys.size();
  std::vector<std::vector<double>> a(p + q, std::vector<double>(p * q, 0.0));
  std::vector<double> b(p + q), c(p * q);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < q; ++j) {
      a[i][i * q + j] = 1.0;
      a[p + j][i * q + j] = 1.0;
      c[i * q + j] = std::abs(xs[i] - ys[j]);
    }
  }
  for (std::size_t i = 0; i < p; ++i) b[i] = wx[i];
  for (std::size_t j = 0; j < q; ++j) b[p + j] = wy[j];
  return solve_lp(std::move(a), std::move(b), c);
}

// Transport between two probability vectors over the token line, using only
// their supports.
inline double transport_lp(const std::vector<double>& p, const std::vector<double>& q) {
  std::vector<double> xs, wx, ys, wy;
  for (std::size_t v = 0; v < p.size(); ++v) {
    if (p[v] > 0) {
      xs.push_back(static_cast<double>(v));
      wx.push_back(p[v]);
    }
    if (q[v] > 0) {
      ys.push_back(static_cast<double>(v));
      wy.push_back(q[v]);
    }
  }
  return transport_lp(xs, wx, ys, wy);
}

inline double mmd2_brute(const std::vector<lmf::TokenId>& xs, const std::vector<lmf::TokenId>& ys,
                         double sigma) {
  auto k = [&](double a, double b) { return std::exp(-((a - b) * (a - b)) / (2 * sigma * sigma)); };
  double xx = 0, xy = 0, yy = 0;
  for (auto a : xs)
    for (auto b : xs) xx += k(a, b);
  for (auto a : xs)
    for (auto b : ys) xy += k(a, b);
  for (auto a : ys)
    for (auto b : ys) yy += k(a, b);
  const double n = static_cast<double>(xs.size()), m = static_cast<double>(ys.size());
  return std::max(0.0, xx / (n * n) - 2 * xy / (n * m) + yy / (m * m));
}

inline double kl_direct(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

// LCS by enumerating every subsequence of `a` (|a| <= ~14).
inline std::size_t lcs_brute(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::size_t best = 0;
  const std::uint32_t total = 1u << a.size();
  for (std::uint32_t mask = 0; mask < total; ++mask) {
    std::size_t len = static_cast<std::size_t>(__builtin_popcount(mask));
    if (len <= best) continue;
    std::size_t pos = 0;
    bool ok = true;
    for (std::size_t i = 0; i < a.size() && ok; ++i) {
      if (!(mask & (1u << i))) continue;
      while (pos < b.size() && b[pos] != a[i]) ++pos;
      if (pos == b.size()) ok = false;
      else ++pos;
    }
    if (ok) best = len;
  }
  return best;
}

inline double rouge_brute(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  double l = static_cast<double>(lcs_brute(cand, ref));
  if (l == 0) return 0.0;
  double p = l / static_cast<double>(cand.size()), r = l / static_cast<double>(ref.size());
  return 2 * p * r / (p + r);
}

// ||W theta - theta||_F^2 / (N p), evaluated directly in parameter space.
inline double reconstruction_mse(const std::vector<std::vector<double>>& w,
                                 const std::vector<std::vector<float>>& thetas) {
  const std::size_t n = thetas.size(), p = thetas[0].size();
  long double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t x = 0; x < p; ++x) {
      long double pred = 0;
      for (std::size_t k = 0; k < n; ++k) pred += static_cast<long double>(w[i][k]) * thetas[k][x];
      long double err = pred - thetas[i][x];
      total += err * err;
    }
  }
  return static_cast<double>(total / (static_cast<long double>(n) * p));
}

}  // namespace oracle

namespace fixtures {

// Dataset whose tokens follow `probs`, split into examples of `example_len`.
inline lmf::TokenizedDataset sample_dataset(const std::string& id, const std::vector<double>& probs,
                                            std::size_t tokens, std::size_t example_len,
                                            std::mt19937_64& rng) {
  std::discrete_distribution<lmf::TokenId> pick(probs.begin(), probs.end());
  lmf::TokenizedDataset ds{id, probs.size(), {}};
  for (std::size_t done = 0; done < tokens;) {
    lmf::TokenizedExample ex;
    for (std::size_t i = 0; i < example_len && done < tokens; ++i, ++done) ex.ids.push_back(pick(rng));
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

// Random probability vector over `vocab` with roughly `support` non-zeros.
inline std::vector<double> random_probs(std::size_t vocab, std::size_t support, std::mt19937_64& rng) {
  std::vector<double> p(vocab, 0.0);
  std::uniform_int_distribution<std::size_t> idx(0, vocab - 1);
  std::exponential_distribution<double> mass(1.0);
  for (std::size_t i = 0; i < support; ++i) p[idx(rng)] += mass(rng);
  double s = 0;
  for (double v : p) s += v;
  if (s == 0) {
    p[0] = 1.0;
    s = 1.0;
  }
  for (double& v : p) v /= s;
  return p;
}

inline lmf::FlatAdapter random_adapter(const std::string& id, const lmf::AdapterLayout& layout,
                                       std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<float> g(0.0f, static_cast<float>(scale));
  lmf::FlatAdapter a{id, layout, std::vector<float>(layout.total_params)};
  for (auto& v : a.values) v = g(rng);
  return a;
}

inline lmf::AdapterLayout flat_layout(std::size_t p) {
  return lmf::AdapterLayout::from_entries({{"probe.weight", {p}, "F32"}});
}

}  // namespace fixtures
