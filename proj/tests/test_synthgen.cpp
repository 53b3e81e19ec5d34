#include <cmath>
#include <sstream>

#include "doctest.h"
#include "lsurv/synthgen.hpp"

using namespace lsurv;

namespace {

SynthConfig constant_hazards(std::vector<double> base, double censor, std::size_t n) {
  SynthConfig c;
  c.subjects = n;
  c.base_hazard = std::move(base);
  c.censor_hazard = censor;
  SynthFeature f;
  f.name = "x";
  f.effect.assign(c.base_hazard.size(), 1.0);
  c.features.push_back(f);
  return c;
}

}  // namespace

TEST_CASE("zero hazards censor everyone at the grid end") {
  const auto out = generate(constant_hazards({0.0}, 0.0, 200));
  for (const SubjectRecord& s : out.cohort.subjects) CHECK(s.outcome == Outcome{40, 0});
}

TEST_CASE("constant hazard gives a geometric event time") {
  const std::size_t n = 10000;
  const auto out = generate(constant_hazards({0.5}, 0.0, n));
  double mean = 0.0;
  for (const SubjectRecord& s : out.cohort.subjects) {
    CHECK(s.outcome.cause == 1);
    mean += static_cast<double>(s.outcome.interval);
  }
  mean /= static_cast<double>(n);
  // geometric(p): mean 1/p, variance (1-p)/p^2
  const double se = std::sqrt(0.5 / 0.25 / static_cast<double>(n));
  CHECK(std::abs(mean - 2.0) < 3 * se);
}

TEST_CASE("competing causes split in proportion to their hazards") {
  const std::size_t n = 10000;
  const auto out = generate(constant_hazards({0.2, 0.3}, 0.0, n));
  double second = 0, events = 0;
  for (const SubjectRecord& s : out.cohort.subjects) {
    if (s.outcome.cause > 0) events += 1;
    if (s.outcome.cause == 2) second += 1;
  }
  const double p = second / events;
  CHECK(std::abs(p - 0.6) < 3 * std::sqrt(0.6 * 0.4 / events));
}

TEST_CASE("closed-form cif examples") {
  const auto zero = true_cif(constant_hazards({0.0, 0.0}, 0.0, 1), {0.0});
  for (std::size_t i = 0; i < zero.size(); ++i) CHECK(zero[i] == 0.0);

  const auto half = true_cif(constant_hazards({0.5}, 0.0, 1), {0.0});
  CHECK(half[0] == 0.5);
  CHECK(half[1] == 0.75);

  SynthConfig c = default_synth_config();
  for (double a : {0.0, 1.0})
    for (double b : {0.0, 1.0}) {
      const std::vector<double> cov{a, b, 0.3, -1.2};
      std::vector<double> path;
      for (std::size_t j = 0; j < c.intervals; ++j) path.insert(path.end(), cov.begin(), cov.end());
      const Array h = true_hazards(c, path);
      const Array s = true_survival(h), f = true_cif(h);
      const std::size_t J = c.intervals;
      CHECK(std::abs(f[(J - 1) * 2] + f[(J - 1) * 2 + 1] + s[J - 1] - 1.0) < 1e-12);
      CHECK(f == true_cif(c, cov));
    }
}

TEST_CASE("driver features scale their own cause") {
  SynthConfig c = default_synth_config(4, 2, 3.0);
  std::vector<double> path(c.intervals * 4, 0.0);
  for (std::size_t j = 0; j < c.intervals; ++j) path[j * 4] = 1.0;
  const Array h = true_hazards(c, path);
  CHECK(h[0] == doctest::Approx(0.12));
  CHECK(h[1] == doctest::Approx(0.04));
}

TEST_CASE("empirical incidence converges to the true cif") {
  SynthConfig c = default_synth_config();
  c.subjects = 50000;
  c.censor_hazard = 0.0;
  const auto out = generate(c);
  const std::size_t J = c.intervals, K = 2;
  std::vector<double> emp(J * K, 0.0), truth(J * K, 0.0);
  for (std::size_t i = 0; i < c.subjects; ++i) {
    const Outcome o = out.cohort.subjects[i].outcome;
    if (o.cause > 0)
      for (std::size_t j = o.interval; j <= J; ++j) emp[(j - 1) * K + (o.cause - 1)] += 1.0;
    for (std::size_t r = 0; r < J * K; ++r) truth[r] += out.truth.subjects[i].cif[r];
  }
  double worst = 0.0;
  for (std::size_t r = 0; r < J * K; ++r)
    worst = std::max(worst, std::abs(emp[r] - truth[r]) / static_cast<double>(c.subjects));
  CHECK(worst < 0.01);
}

TEST_CASE("ground truth satisfies the survival and cif identities per subject") {
  SynthConfig c = staleness_synth_config();
  c.subjects = 100;
  const auto out = generate(c);
  for (const SubjectTruth& t : out.truth.subjects) {
    double surv = 1.0;
    std::vector<double> acc(2, 0.0);
    for (std::size_t j = 0; j < c.intervals; ++j) {
      const double l1 = t.hazards[j * 2], l2 = t.hazards[j * 2 + 1];
      CHECK(l1 + l2 <= 0.95 + 1e-15);
      acc[0] += l1 * surv;
      acc[1] += l2 * surv;
      surv *= 1.0 - l1 - l2;
      CHECK(t.survival[j] == doctest::Approx(surv).epsilon(1e-14));
      CHECK(t.cif[j * 2] == doctest::Approx(acc[0]).epsilon(1e-14));
    }
  }
}

TEST_CASE("dropout stops measurement of the chosen feature") {
  SynthConfig c = staleness_synth_config(0.0, 3.0);
  c.subjects = 300;
  const auto out = generate(c);
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < c.subjects; ++i) {
    const SubjectTruth& t = out.truth.subjects[i];
    if (!t.dropped) continue;
    ++dropped;
    for (const ObservedCell& cell : out.cohort.subjects[i].cells)
      if (cell.feature == c.dropout.feature) CHECK(cell.interval < t.dropout_onset);
  }
  CHECK(dropped > 100);
  CHECK(dropped < 200);
}

TEST_CASE("generation is deterministic under the seed") {
  SynthConfig c = default_synth_config();
  c.subjects = 300;
  auto a = generate(c), b = generate(c);
  CHECK(a.cohort == b.cohort);
  std::ostringstream ga, gb;
  write_ground_truth(ga, a.cohort, a.truth);
  write_ground_truth(gb, b.cohort, b.truth);
  CHECK(ga.str() == gb.str());
  c.seed = 2;
  CHECK_FALSE(generate(c).cohort == a.cohort);
}

TEST_CASE("invalid configurations are rejected") {
  CHECK_THROWS_AS(generate(constant_hazards({0.6, 0.5}, 0.0, 10)), std::invalid_argument);
  CHECK_THROWS_AS(generate(constant_hazards({0.5}, 0.6, 10)), std::invalid_argument);
  CHECK_THROWS_AS(generate(constant_hazards({-0.1}, 0.0, 10)), std::invalid_argument);
  SynthConfig c = default_synth_config();
  c.features[0].missing_rate = 1.0;
  CHECK_THROWS_AS(generate(c), std::invalid_argument);
  c = default_synth_config();
  c.features[1].effect = {1.0};
  CHECK_THROWS_AS(generate(c), std::invalid_argument);
  CHECK_THROWS_AS(default_synth_config(1, 2), std::invalid_argument);
}
