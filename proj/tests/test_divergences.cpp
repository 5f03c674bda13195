#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "lmf/divergences.hpp"
#include "lmf/error.hpp"
#include "oracles.hpp"
#include "scratch.hpp"

using lmf::EmpiricalTokenDistribution;
using lmf::Metric;
using lmf::MetricKind;
using lmf::TokenizedDataset;

namespace {

EmpiricalTokenDistribution dist_from(std::vector<double> probs) {
  EmpiricalTokenDistribution d;
  d.vocab_size = probs.size();
  for (double p : probs) d.log_probs.push_back(p > 0 ? std::log(p) : -INFINITY);
  d.probs = std::move(probs);
  return d;
}

EmpiricalTokenDistribution point_mass(std::size_t vocab, std::size_t at) {
  std::vector<double> p(vocab, 0.0);
  p[at] = 1.0;
  return dist_from(p);
}

// Smoothed distribution built the same way the library does, but by hand.
EmpiricalTokenDistribution smoothed(const std::vector<double>& raw, double eps) {
  std::vector<double> p(raw.size());
  double denom = 1.0 + eps * static_cast<double>(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) p[i] = (raw[i] + eps) / denom;
  return dist_from(p);
}

std::vector<TokenizedDataset> synthetic_bank(std::size_t n, std::size_t vocab, std::size_t tokens,
                                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenizedDataset> bank;
  for (std::size_t i = 0; i < n; ++i) {
    auto probs = fixtures::random_probs(vocab, 12, rng);
    bank.push_back(fixtures::sample_dataset("d" + std::to_string(100 + i), probs, tokens, 16, rng));
  }
  return bank;
}

MetricKind metric_of(Metric tag) {
  MetricKind m;
  m.tag = tag;
  return m;
}

}  // namespace

TEST_CASE("wasserstein examples") {
  auto p = dist_from({0.1, 0.2, 0.3, 0.4});
  CHECK(lmf::wasserstein1(p, p) == 0.0);
  CHECK(lmf::wasserstein1(point_mass(10, 3), point_mass(10, 7)) == doctest::Approx(4.0));
  auto a = dist_from({0.5, 0.5});
  auto b = dist_from({0.0, 1.0});
  CHECK(lmf::wasserstein1(a, b) == doctest::Approx(0.5));
  CHECK(oracle::transport_lp(a.probs, b.probs) == doctest::Approx(0.5));
  CHECK_THROWS_AS(lmf::wasserstein1(a, point_mass(3, 0)), lmf::Error);
}

TEST_CASE("wasserstein matches the LP transport oracle") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> support(1, 10);
  for (int c = 0; c < 200; ++c) {
    auto p = dist_from(fixtures::random_probs(40, support(rng), rng));
    auto q = dist_from(fixtures::random_probs(40, support(rng), rng));
    CHECK(std::abs(lmf::wasserstein1(p, q) - oracle::transport_lp(p.probs, q.probs)) <= 1e-9);
  }
}

TEST_CASE("wasserstein triangle inequality") {
  std::mt19937_64 rng(22);
  for (int c = 0; c < 200; ++c) {
    auto p = dist_from(fixtures::random_probs(30, 8, rng));
    auto q = dist_from(fixtures::random_probs(30, 8, rng));
    auto r = dist_from(fixtures::random_probs(30, 8, rng));
    CHECK(lmf::wasserstein1(p, r) <= lmf::wasserstein1(p, q) + lmf::wasserstein1(q, r) + 1e-9);
    CHECK(lmf::wasserstein1(p, q) == lmf::wasserstein1(q, p));
  }
}

TEST_CASE("kl examples") {
  auto p = dist_from({0.5, 0.5});
  auto q = dist_from({0.25, 0.75});
  CHECK(lmf::kl(p, p) == 0.0);
  CHECK(lmf::kl(p, q) == doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)).epsilon(1e-12));
  CHECK(lmf::kl(p, q) == doctest::Approx(0.143841).epsilon(1e-5));

  auto a = smoothed({1, 0, 0, 0}, 1e-10);
  auto b = smoothed({0, 0, 0, 1}, 1e-10);
  double v = lmf::kl(a, b);
  CHECK(std::isfinite(v));
  CHECK(v > 10);

  CHECK_THROWS_AS(lmf::kl(point_mass(3, 0), point_mass(3, 1)), lmf::Error);
}

TEST_CASE("kl is zero on identical and non-negative under smoothing") {
  std::mt19937_64 rng(23);
  for (int c = 0; c < 1000; ++c) {
    auto p = smoothed(fixtures::random_probs(50, 10, rng), 1e-10);
    auto q = smoothed(fixtures::random_probs(50, 10, rng), 1e-10);
    CHECK(std::abs(lmf::kl(p, p)) <= 1e-12);
    CHECK(lmf::kl(p, q) >= 0.0);
    CHECK(lmf::kl(p, q) == doctest::Approx(oracle::kl_direct(p.probs, q.probs)).epsilon(1e-9));
  }
}

TEST_CASE("js examples and bounds") {
  auto p = dist_from({0.2, 0.8, 0.0});
  CHECK(lmf::js(p, p) == 0.0);
  CHECK(lmf::js(point_mass(4, 0), point_mass(4, 3)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  std::mt19937_64 rng(24);
  for (int c = 0; c < 1000; ++c) {
    double eps = (c % 2 == 0) ? 0.0 : 1e-10;
    auto a = smoothed(fixtures::random_probs(40, 6, rng), eps);
    auto b = smoothed(fixtures::random_probs(40, 6, rng), eps);
    double v = lmf::js(a, b);
    CHECK(v >= 0.0);
    CHECK(v <= std::log(2.0));
    CHECK(v == lmf::js(b, a));
  }
}

TEST_CASE("mmd examples") {
  std::vector<lmf::TokenId> x = {1, 5, 9};
  CHECK(lmf::mmd2_gaussian(x, x, 2.0) <= 1e-12);
  std::vector<lmf::TokenId> zero = {0}, one = {1};
  CHECK(lmf::mmd2_gaussian(zero, one, 1.0) == doctest::Approx(2 - 2 * std::exp(-0.5)).epsilon(1e-12));
  CHECK(lmf::mmd2_gaussian(zero, one, 1.0) == doctest::Approx(0.786939).epsilon(1e-6));
  std::vector<lmf::TokenId> empty;
  CHECK_THROWS_AS(lmf::mmd2_gaussian(empty, one, 1.0), lmf::Error);
  CHECK_THROWS_AS(lmf::mmd2_gaussian(zero, one, 0.0), lmf::Error);
}

TEST_CASE("mmd matches brute force double sums") {
  std::mt19937_64 rng(25);
  std::uniform_int_distribution<std::size_t> len(1, 20);
  std::uniform_int_distribution<lmf::TokenId> tok(0, 60);
  std::uniform_real_distribution<double> sig(0.3, 30.0);
  for (int c = 0; c < 200; ++c) {
    std::vector<lmf::TokenId> xs(len(rng)), ys(len(rng));
    for (auto& t : xs) t = tok(rng);
    for (auto& t : ys) t = tok(rng);
    double s = sig(rng);
    CHECK(std::abs(lmf::mmd2_gaussian(xs, ys, s) - oracle::mmd2_brute(xs, ys, s)) <= 1e-9);
  }
}

TEST_CASE("median bandwidth") {
  std::vector<lmf::TokenId> a = {0}, b = {2}, c = {0, 1}, d = {2};
  CHECK(lmf::median_bandwidth(a, b) == 2.0);
  CHECK(lmf::median_bandwidth(c, d) == 1.0);
  std::vector<lmf::TokenId> same = {4, 4, 4};
  CHECK_THROWS_AS(lmf::median_bandwidth(same, same), lmf::Error);

  std::mt19937_64 rng(26);
  std::uniform_int_distribution<lmf::TokenId> tok(0, 50);
  for (int k = 0; k < 50; ++k) {
    std::vector<lmf::TokenId> xs(15), ys(10);
    for (auto& t : xs) t = tok(rng);
    for (auto& t : ys) t = tok(rng);
    auto scaled = [](std::vector<lmf::TokenId> v) {
      for (auto& t : v) t *= 3;
      return v;
    };
    double base;
    try {
      base = lmf::median_bandwidth(xs, ys);
    } catch (const lmf::Error&) {
      continue;
    }
    CHECK(lmf::median_bandwidth(scaled(xs), scaled(ys)) == doctest::Approx(3 * base));
  }
}

TEST_CASE("self-divergence vanishes for every metric") {
  auto bank = synthetic_bank(2, 64, 500, 1);
  auto copy = bank[0];
  copy.dataset_id = "copy";
  for (Metric tag : {Metric::kWD, Metric::kKL, Metric::kJS, Metric::kMMD}) {
    auto m = metric_of(tag);
    auto a = lmf::prepare_dataset(bank[0], m);
    auto b = lmf::prepare_dataset(copy, m);
    CHECK(lmf::divergence(a, b, m) <= 1e-12);
  }
}

TEST_CASE("alignment vector") {
  auto bank = synthetic_bank(4, 64, 400, 2);
  auto query = bank[0];
  query.dataset_id = "q";
  auto m = metric_of(Metric::kJS);
  auto a = lmf::alignment_vector(query, bank, m);
  CHECK(a.values[0] == 0.0);
  CHECK(a.masked.empty());

  auto masked = lmf::alignment_vector(bank[2], bank, m);
  CHECK(masked.masked == std::vector<std::size_t>{2});
  CHECK(masked.values[2] == lmf::kMaskSentinel);
  CHECK(masked.is_masked(2));

  for (Metric tag : {Metric::kWD, Metric::kKL, Metric::kJS, Metric::kMMD}) {
    auto mk = metric_of(tag);
    auto av = lmf::alignment_vector(query, bank, mk, 3);
    auto pq = lmf::prepare_dataset(query, mk);
    for (std::size_t k = 0; k < bank.size(); ++k) {
      CHECK(av.values[k] == lmf::divergence(pq, lmf::prepare_dataset(bank[k], mk), mk));
    }
  }

  auto dup = bank;
  dup[1].dataset_id = dup[0].dataset_id;
  CHECK_THROWS_AS(lmf::alignment_vector(query, dup, m), lmf::Error);
  auto other_vocab = query;
  other_vocab.vocab_size = 65;
  CHECK_THROWS_AS(lmf::alignment_vector(other_vocab, bank, m), lmf::Error);
}

TEST_CASE("pairwise matrix counts, symmetry and worker independence") {
  auto bank3 = synthetic_bank(3, 32, 300, 3);
  auto js3 = lmf::pairwise_distance_matrix(bank3, metric_of(Metric::kJS), 1);
  CHECK(js3.pair_evaluations == 3);
  CHECK(js3.self_masked);

  auto bank = synthetic_bank(9, 48, 300, 4);
  for (Metric tag : {Metric::kWD, Metric::kKL, Metric::kJS, Metric::kMMD}) {
    auto m = metric_of(tag);
    auto one = lmf::pairwise_distance_matrix(bank, m, 1);
    auto eight = lmf::pairwise_distance_matrix(bank, m, 8);
    CHECK(lmf::serialize_matrix(one) == lmf::serialize_matrix(eight));
    const std::uint64_t n = bank.size();
    CHECK(one.pair_evaluations == (m.symmetric() ? n * (n - 1) / 2 : n * (n - 1)));
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(one.at(i, i) == lmf::kMaskSentinel);
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        CHECK(one.at(i, j) >= 0.0);
        if (m.symmetric()) {
          CHECK(std::memcmp(&one.values[i * n + j], &one.values[j * n + i], sizeof(double)) == 0);
        }
        if (tag == Metric::kJS) CHECK(one.at(i, j) <= std::log(2.0) + 1e-12);
      }
    }
  }
}

TEST_CASE("kl matrix matches scalar calls") {
  auto bank = synthetic_bank(5, 40, 300, 5);
  auto m = metric_of(Metric::kKL);
  auto d = lmf::pairwise_distance_matrix(bank, m, 2);
  int checked = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      if (i == j) continue;
      auto p = lmf::to_empirical_distribution(bank[i], m.epsilon);
      auto q = lmf::to_empirical_distribution(bank[j], m.epsilon);
      CHECK(d.at(i, j) == doctest::Approx(oracle::kl_direct(p.probs, q.probs)).epsilon(1e-12));
      ++checked;
    }
  }
  CHECK(checked == 20);
  auto dup = bank;
  dup[3].dataset_id = dup[1].dataset_id;
  CHECK_THROWS_AS(lmf::pairwise_distance_matrix(dup, m, 1), lmf::Error);
}

TEST_CASE("matrix cache round trip and corruption") {
  Scratch s("matrix");
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0, 5);
  lmf::DistanceMatrix m;
  m.metric = metric_of(Metric::kMMD);
  m.metric.bandwidth = 3.5;
  m.metric.seed = 77;
  m.self_masked = true;
  m.pair_evaluations = 45;
  for (int i = 0; i < 10; ++i) m.ids.push_back("task-\xc3\xa9-" + std::to_string(i));
  for (int i = 0; i < 100; ++i) m.values.push_back(u(rng));
  for (int i = 0; i < 10; ++i) m.at(i, i) = lmf::kMaskSentinel;

  lmf::save_matrix(m, s / "m.lmfd");
  auto back = lmf::load_matrix(s / "m.lmfd");
  CHECK(back == m);
  CHECK(back.metric.tag == Metric::kMMD);
  CHECK(lmf::serialize_matrix(back) == lmf::serialize_matrix(m));

  auto bytes = lmf::serialize_matrix(m);
  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{9}}) {
    std::vector<std::byte> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    try {
      lmf::deserialize_matrix(part);
      FAIL("truncated cache was accepted");
    } catch (const lmf::Error& e) {
      CHECK(e.code() == lmf::ErrorCode::kChecksum);
    }
  }
  auto flipped = bytes;
  flipped[40] ^= std::byte{0x01};
  CHECK_THROWS_AS(lmf::deserialize_matrix(flipped), lmf::Error);

  {
    std::ofstream out(s / "t.lmfd", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size() - 5));
  }
  CHECK_THROWS_AS(lmf::load_matrix(s / "t.lmfd"), lmf::Error);
}
