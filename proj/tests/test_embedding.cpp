#include <cmath>

#include "doctest.h"
#include "lsurv/embedding.hpp"
#include "oracles.hpp"

using namespace lsurv;

namespace {

FeatureSchema mixed_schema() {
  return FeatureSchema({{"a", FeatureKind::Numeric, 0, 0.0, 1.0},
                        {"b", FeatureKind::Categorical, 3, 0.0, 1.0},
                        {"c", FeatureKind::Numeric, 0, 0.0, 1.0},
                        {"d", FeatureKind::Numeric, 0, 0.0, 1.0}});
}

struct Fixture {
  ParameterStore store;
  CovariateEmbedding emb;
  explicit Fixture(bool decay = true, std::size_t e = 16) {
    Rng rng(5);
    emb = CovariateEmbedding(mixed_schema(), e, decay, store, rng);
  }
  Array z(const std::string& f) { return store.find("emb." + f + ".missing")->value; }
};

Batch random_batch(std::size_t B, std::size_t S, std::size_t D, Rng& rng) {
  Batch b;
  b.batch = B;
  b.steps = S;
  b.features = D;
  b.x = Array({B, S, D});
  b.delta = Array({B, S, D});
  b.missing = Mask({B, S, D}, false);
  for (std::size_t i = 0; i < B * S * D; ++i) {
    const std::size_t d = i % D;
    b.x[i] = d == 1 ? static_cast<double>(uniform_index(rng, 3)) : standard_normal(rng);
    b.missing.keep[i] = bernoulli(rng, 0.4);
    b.delta[i] = b.missing.keep[i] ? static_cast<double>(uniform_index(rng, 6)) : 0.0;
  }
  b.valid.assign(B * S, 1);
  return b;
}

}  // namespace

TEST_CASE("missing cell with zero staleness is the missing embedding") {
  Fixture f;
  CHECK(f.emb.embed_cell(0.7, true, 0.0, 0) == f.z("a"));
  CHECK(f.emb.embed_cell(2.0, true, 0.0, 1) == f.z("b"));
}

TEST_CASE("unit decay rate halves the missing embedding at delta ln 2") {
  Fixture f;
  f.store.find("emb.a.raw_decay")->value[0] = std::log(std::expm1(1.0));
  CHECK(f.emb.decay_rate(0) == doctest::Approx(1.0).epsilon(1e-15));
  const Array out = f.emb.embed_cell(0.0, true, std::log(2.0), 0);
  const Array z = f.z("a");
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(out[i] == doctest::Approx(z[i] / 2).epsilon(1e-14));
}

TEST_CASE("observed cells ignore staleness") {
  Fixture f;
  for (double delta : {0.0, 1.0, 7.5})
    CHECK(f.emb.embed_cell(0.3, false, delta, 0) == f.emb.embed_cell(0.3, false, 0.0, 0));
  CHECK(f.emb.embed_cell(2.0, false, 4.0, 1) == f.emb.embed_cell(2.0, false, 0.0, 1));
  // categorical lookup is the table row
  const Array table = f.store.find("emb.b.table")->value;
  const Array row = f.emb.embed_cell(2.0, false, 0.0, 1);
  for (std::size_t i = 0; i < 16; ++i) CHECK(row[i] == table[2 * 16 + i]);
}

TEST_CASE("initial decay rate and parameter inventory") {
  Fixture with, without(false);
  CHECK(with.emb.decay_rate(2) == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(with.store.find("emb.a.raw_decay") != nullptr);
  CHECK(without.store.find("emb.a.raw_decay") == nullptr);
  CHECK(with.store.size() == without.store.size() + 4);
  CHECK(without.emb.decay_rate(0) == 0.0);
}

TEST_CASE("without time decay the missing path is z for every delta") {
  Fixture f(false);
  for (double delta : {0.0, 3.0, 50.0}) CHECK(f.emb.embed_cell(1.0, true, delta, 2) == f.z("c"));
  Fixture g;
  const CovariateEmbedding plain = g.emb.without_time_decay();
  CHECK(plain.embed_cell(1.0, true, 9.0, 0) == g.z("a"));
  CHECK_FALSE(g.emb.embed_cell(1.0, true, 9.0, 0) == g.z("a"));
}

TEST_CASE("property: decayed magnitude shrinks with staleness towards zero") {
  Fixture f;
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = uniform_index(rng, 4);
    f.store.find("emb." + std::string(1, char('a' + d)) + ".raw_decay")->value[0] = 4 * uniform01(rng) - 2;
    double prev = INFINITY;
    for (double delta = 0; delta <= 10; delta += 0.5) {
      const Array v = f.emb.embed_cell(0.0, true, delta, d);
      double norm = 0;
      for (double x : v.values()) norm += x * x;
      CHECK(norm <= prev);
      prev = norm;
    }
  }
  f.store.find("emb.a.raw_decay")->value[0] = 0.0;
  for (double x : f.emb.embed_cell(0.0, true, 2000.0, 0).values()) CHECK(std::abs(x) < 1e-100);
}

TEST_CASE("batch embedding shape and per-cell gating") {
  Fixture f;
  Rng rng(9);
  Batch b = random_batch(2, 3, 4, rng);
  Tape tape;
  const Array out = f.emb.forward(tape, b).value();
  CHECK(out.shape() == Shape{2, 3, 4, 16});
  for (std::size_t c = 0; c < 2 * 3 * 4; ++c) {
    const Array cell = f.emb.embed_cell(b.x[c], b.missing.keep[c], b.delta[c], c % 4);
    for (std::size_t i = 0; i < 16; ++i) CHECK(out[c * 16 + i] == doctest::Approx(cell[i]).epsilon(1e-14));
  }

  // flipping one mask bit changes exactly that cell
  Batch flipped = b;
  flipped.missing.keep[5] ^= 1;
  Tape t2;
  const Array out2 = f.emb.forward(t2, flipped).value();
  for (std::size_t c = 0; c < 2 * 3 * 4; ++c) {
    bool same = true;
    for (std::size_t i = 0; i < 16; ++i) same = same && out[c * 16 + i] == out2[c * 16 + i];
    CHECK(same == (c != 5));
  }
}

TEST_CASE("embedding input errors") {
  Fixture f;
  CHECK_THROWS_AS(f.emb.embed_cell(3.0, false, 0.0, 1), std::out_of_range);
  CHECK_THROWS_AS(f.emb.embed_cell(-1.0, false, 0.0, 1), std::out_of_range);
  CHECK_THROWS_AS(f.emb.embed_cell(0.0, true, -1.0, 0), std::invalid_argument);
  Rng rng(1);
  Batch b = random_batch(1, 2, 3, rng);
  Tape tape;
  CHECK_THROWS_AS(f.emb.forward(tape, b), std::invalid_argument);
}

TEST_CASE("embedding gradients match finite differences") {
  Fixture f(true, 8);
  Rng rng(12);
  Batch b = random_batch(2, 3, 4, rng);
  Array weights = oracle::uniform({2, 3, 4, 8}, -1, 1, rng);
  for (Parameter* p : f.store.all())
    if (p->name.ends_with("raw_decay")) p->value[0] = uniform01(rng) - 0.5;
  const auto params = f.store.all();
  const auto r = grad_check([&](Tape& t) { return sum(mul_const(f.emb.forward(t, b), weights)); }, params);
  CHECK(r.max_rel_error < 1e-6);
}
