#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "lmf/corpus.hpp"
#include "lmf/error.hpp"
#include "oracles.hpp"
#include "scratch.hpp"

using lmf::TokenizedDataset;

namespace {

void write_lines(const std::filesystem::path& p, std::initializer_list<const char*> lines) {
  std::ofstream out(p);
  for (const char* l : lines) out << l << '\n';
}

TokenizedDataset random_dataset(std::mt19937_64& rng, const std::string& id) {
  std::uniform_int_distribution<std::size_t> vocab_d(1, 500), n_ex(1, 20), len(1, 30);
  TokenizedDataset ds{id, vocab_d(rng), {}};
  std::uniform_int_distribution<lmf::TokenId> tok(0, static_cast<lmf::TokenId>(ds.vocab_size - 1));
  for (std::size_t e = n_ex(rng); e > 0; --e) {
    lmf::TokenizedExample ex;
    for (std::size_t i = len(rng); i > 0; --i) ex.ids.push_back(tok(rng));
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace

TEST_CASE("load keeps example order") {
  Scratch s("corpus-load");
  write_lines(s / "task.jsonl", {R"({"ids":[1,2]})", R"({"ids":[3]})"});
  auto ds = lmf::load_token_dataset(s / "task.jsonl", 10);
  CHECK(ds.dataset_id == "task");
  CHECK(ds.vocab_size == 10);
  REQUIRE(ds.examples.size() == 2);
  CHECK(ds.examples[0].ids == std::vector<lmf::TokenId>{1, 2});
  CHECK(ds.examples[1].ids == std::vector<lmf::TokenId>{3});
}

TEST_CASE("token id at vocab size names line 1") {
  Scratch s("corpus-range");
  write_lines(s / "bad.jsonl", {R"({"ids":[10]})"});
  try {
    lmf::load_token_dataset(s / "bad.jsonl", 10);
    FAIL("expected an error");
  } catch (const lmf::Error& e) {
    CHECK(e.code() == lmf::ErrorCode::kOutOfRange);
    CHECK(std::string(e.what()).find(":1:") != std::string::npos);
  }
}

TEST_CASE("malformed and empty files") {
  Scratch s("corpus-bad");
  write_lines(s / "m.jsonl", {R"({"ids":[1]})", R"({"ids":[1,)"});
  try {
    lmf::load_token_dataset(s / "m.jsonl", 4);
    FAIL("expected an error");
  } catch (const lmf::Error& e) {
    CHECK(e.code() == lmf::ErrorCode::kParse);
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  write_lines(s / "e.jsonl", {});
  CHECK_THROWS_AS(lmf::load_token_dataset(s / "e.jsonl", 4), lmf::Error);
  write_lines(s / "n.jsonl", {R"({"ids":[1]})"});
  CHECK_THROWS_AS(lmf::load_token_dataset(s / "n.jsonl"), lmf::Error);
  write_lines(s / "v.jsonl", {R"({"meta":{"dataset_id":"v","vocab_size":8}})", R"({"ids":[1]})"});
  CHECK(lmf::load_token_dataset(s / "v.jsonl").vocab_size == 8);
  CHECK_THROWS_AS(lmf::load_token_dataset(s / "v.jsonl", 9), lmf::Error);
}

TEST_CASE("write then load round trips 100 random datasets") {
  Scratch s("corpus-rt");
  std::mt19937_64 rng(7);
  for (int i = 0; i < 100; ++i) {
    auto ds = random_dataset(rng, "ds" + std::to_string(i));
    auto path = s / ("f" + std::to_string(i) + ".jsonl");
    lmf::write_token_dataset(ds, path);
    CHECK(lmf::load_token_dataset(path) == ds);
  }
}

TEST_CASE("byte fallback tokenizer") {
  CHECK(lmf::byte_fallback_tokenize("AB").ids == std::vector<lmf::TokenId>{65, 66});
  CHECK(lmf::byte_fallback_tokenize("\xc3\xa9").ids == std::vector<lmf::TokenId>{195, 169});
  CHECK_THROWS_AS(lmf::byte_fallback_tokenize(""), lmf::Error);

  std::mt19937_64 rng(3);
  const std::vector<std::string> pieces = {"a", "Z", " ", "\xc3\xa9", "\xe2\x82\xac", "\xf0\x9f\x99\x82", "\n"};
  std::uniform_int_distribution<std::size_t> pick(0, pieces.size() - 1), len(1, 40);
  for (int i = 0; i < 200; ++i) {
    std::string text;
    for (std::size_t k = len(rng); k > 0; --k) text += pieces[pick(rng)];
    CHECK(lmf::byte_fallback_decode(lmf::byte_fallback_tokenize(text)) == text);
  }
}

TEST_CASE("empirical distribution") {
  TokenizedDataset a{"a", 2, {{{0, 0, 1}}}};
  auto d = lmf::to_empirical_distribution(a, 0.0);
  CHECK(d.probs[0] == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(d.probs[1] == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(d.token_sample == std::vector<lmf::TokenId>{0, 0, 1});

  TokenizedDataset b{"b", 2, {{{0}}}};
  auto e = lmf::to_empirical_distribution(b, 1.0);
  CHECK(e.probs[0] == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(e.probs[1] == doctest::Approx(1.0 / 3).epsilon(1e-15));

  CHECK_THROWS_AS(lmf::to_empirical_distribution(a, -1.0), lmf::Error);
}

TEST_CASE("empirical distribution lies on the simplex and ignores example order") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 100; ++i) {
    auto ds = random_dataset(rng, "x");
    for (double eps : {0.0, 1e-10, 0.5}) {
      auto d = lmf::to_empirical_distribution(ds, eps);
      double sum = std::accumulate(d.probs.begin(), d.probs.end(), 0.0);
      CHECK(std::abs(sum - 1.0) <= 1e-9);
      auto flat = ds.flattened();
      for (std::size_t v = 0; v < ds.vocab_size; ++v) {
        bool present = std::find(flat.begin(), flat.end(), v) != flat.end();
        if (eps == 0.0) CHECK((d.probs[v] > 0) == present);
        else CHECK(d.probs[v] > 0);
      }
    }
    auto shuffled = ds;
    std::shuffle(shuffled.examples.begin(), shuffled.examples.end(), rng);
    CHECK(lmf::to_empirical_distribution(ds, 1e-10).probs ==
          lmf::to_empirical_distribution(shuffled, 1e-10).probs);
  }
}

TEST_CASE("subsample") {
  TokenizedDataset small{"s", 10, {{{1, 2, 3, 4, 5}}}};
  CHECK(lmf::subsample_tokens(small, 10, 1) == small.flattened());
  CHECK_THROWS_AS(lmf::subsample_tokens(small, 0, 1), lmf::Error);

  std::mt19937_64 rng(5);
  std::vector<double> probs = {0.4, 0.25, 0.15, 0.1, 0.05, 0.03, 0.02};
  auto big = fixtures::sample_dataset("big", probs, 100000, 100, rng);
  CHECK(lmf::subsample_tokens(big, 2048, 9) == lmf::subsample_tokens(big, 2048, 9));
  CHECK(lmf::subsample_tokens(big, 2048, 9) != lmf::subsample_tokens(big, 2048, 10));

  // Per-token counts of a without-replacement draw are hypergeometric; the
  // binomial variance bounds theirs from above.
  auto src = lmf::to_empirical_distribution(big, 0.0);
  const double m = 2048;
  int outside = 0, trials = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto sample = lmf::subsample_tokens(big, 2048, seed);
    REQUIRE(sample.size() == 2048);
    std::vector<double> counts(probs.size(), 0);
    for (auto t : sample) counts[t] += 1;
    for (std::size_t v = 0; v < probs.size(); ++v) {
      double p = src.probs[v];
      double sd = std::sqrt(m * p * (1 - p));
      ++trials;
      if (std::abs(counts[v] - m * p) > 3 * sd) ++outside;
    }
  }
  // 3-sigma excursions occur ~0.3% of the time; allow one.
  CHECK(outside <= 1);
  CHECK(trials == 140);
}
