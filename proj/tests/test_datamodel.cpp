#include <cmath>
#include <fstream>
#include <map>

#include "doctest.h"
#include "lsurv/datamodel.hpp"
#include "lsurv/synthgen.hpp"
#include "oracles.hpp"

using namespace lsurv;

namespace {

FeatureSchema two_features() {
  return FeatureSchema({{"hr", FeatureKind::Numeric, 0, 0.0, 1.0}, {"grade", FeatureKind::Categorical, 3, 0.0, 1.0}});
}

SubjectTrajectory traj_from(std::vector<ObservedCell> cells, Outcome o, std::size_t D = 2) {
  std::vector<FeatureSpec> specs;
  for (std::size_t d = 0; d < D; ++d) specs.push_back({"f" + std::to_string(d), FeatureKind::Numeric, 0, 0.0, 1.0});
  return build_trajectory({"s", std::move(cells)}, FeatureSchema(specs), DiscretizationGrid(1.0, 50), o);
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

}  // namespace

TEST_CASE("discretize assigns intervals and keeps the latest value") {
  const FeatureSchema schema = two_features();
  const DiscretizationGrid grid(1.0, 10);
  std::vector<RawObservation> obs = {{"a", 0.0, "hr", 7.0}, {"b", 0.9, "hr", 2.0}, {"b", 0.2, "hr", 1.0}};
  const auto out = discretize(obs, schema, grid);
  REQUIRE(out.size() == 2);
  CHECK(out[0].cells == std::vector<ObservedCell>{{1, 0, 7.0}});
  CHECK(out[1].cells == std::vector<ObservedCell>{{1, 0, 2.0}});

  // equal times: the later input row wins
  std::vector<RawObservation> tie = {{"a", 0.5, "hr", 1.0}, {"a", 0.5, "hr", 3.0}};
  CHECK(discretize(tie, schema, grid)[0].cells[0].value == 3.0);

  CHECK(DiscretizationGrid(0.25, 40).interval_of(4.31) == 18);

  std::vector<RawObservation> late = {{"zed", 10.0, "hr", 1.0}};
  try {
    discretize(late, schema, grid);
    FAIL("expected throw");
  } catch (const std::out_of_range& e) {
    CHECK(std::string(e.what()).find("zed") != std::string::npos);
  }
}

TEST_CASE("mask and staleness examples") {
  // feature 0 observed at intervals {1,3}; feature 1 never observed
  const SubjectTrajectory t = traj_from({{1, 0, 5.0}, {3, 0, 6.0}}, {9, 1});
  REQUIRE(t.length == 3);
  CHECK(std::vector<int>{t.m_at(0, 0), t.m_at(1, 0), t.m_at(2, 0)} == std::vector<int>{0, 1, 0});
  CHECK(std::vector<double>{t.delta_at(0, 0), t.delta_at(1, 0), t.delta_at(2, 0)} == std::vector<double>{0, 1, 0});
  CHECK(t.x_at(1, 0) == 5.0);
  CHECK(std::vector<int>{t.m_at(0, 1), t.m_at(1, 1), t.m_at(2, 1)} == std::vector<int>{1, 1, 1});
  CHECK(std::vector<double>{t.delta_at(0, 1), t.delta_at(1, 1), t.delta_at(2, 1)} == std::vector<double>{0, 1, 2});
  CHECK(t.x_at(2, 1) == 0.0);

  const SubjectTrajectory full = traj_from({{1, 0, 1.0}, {2, 0, 2.0}, {3, 0, 3.0}}, {9, 1}, 1);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(full.m_at(r, 0) == 0);
    CHECK(full.delta_at(r, 0) == 0.0);
  }
}

TEST_CASE("numeric values are standardised with schema statistics") {
  FeatureSchema s({{"v", FeatureKind::Numeric, 0, 10.0, 2.0}});
  const auto t = build_trajectory({"s", {{1, 0, 14.0}}}, s, DiscretizationGrid(1.0, 5), {3, 0});
  CHECK(t.x_at(0, 0) == 2.0);
}

TEST_CASE("property: staleness and forward fill on random sparse trajectories") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t D = 1 + uniform_index(rng, 4), J = 1 + uniform_index(rng, 15);
    std::vector<ObservedCell> cells;
    for (std::size_t j = 1; j <= J; ++j)
      for (std::size_t d = 0; d < D; ++d)
        if (bernoulli(rng, 0.35)) cells.push_back({j, d, standard_normal(rng)});
    if (cells.empty()) cells.push_back({J, 0, 1.0});
    const SubjectTrajectory t = traj_from(cells, {J + 1, 0}, D);
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t r = 0; r < t.length; ++r) {
        CHECK(t.delta_at(r, d) >= 0.0);
        if (t.m_at(r, d) == 0) CHECK(t.delta_at(r, d) == 0.0);
        if (r > 0 && t.m_at(r, d) == 1) CHECK(t.delta_at(r, d) == t.delta_at(r - 1, d) + 1.0);
        // forward fill reads only the past: x equals the latest observation at or before r
        double expect = 0.0;
        for (const ObservedCell& c : cells)
          if (c.feature == d && c.interval <= r + 1) expect = c.value;
        CHECK(t.x_at(r, d) == expect);
      }
    }
  }
}

TEST_CASE("landmark label examples") {
  const std::vector<ObservedCell> cells = {{1, 0, 1.0}, {2, 0, 1.0}, {3, 0, 1.0}, {4, 0, 1.0}};
  const auto ev = traj_from(cells, {5, 1}, 1);
  const LandmarkSample a = landmark_at(ev, 2, 10, 2);
  double total = 0;
  for (double y : a.labels) total += y;
  CHECK(total == 1.0);
  CHECK(a.labels[(5 - 2 - 1) * 2 + 0] == 1.0);
  CHECK(a.history.length == 2);

  const auto cens = traj_from(cells, {5, 0}, 1);
  const LandmarkSample b = landmark_at(cens, 2, 10, 2);
  for (double y : b.labels) CHECK(y == 0.0);
  std::vector<std::uint8_t> mask(10, 0);
  mask[0] = mask[1] = mask[2] = 1;  // intervals 3, 4, 5
  CHECK(b.loss_mask == mask);

  const LandmarkSample c = landmark_at(ev, 2, 2, 2);
  for (double y : c.labels) CHECK(y == 0.0);
  CHECK(c.loss_mask == std::vector<std::uint8_t>{1, 1});

  const auto first = traj_from(cells, {1, 1}, 1);
  Rng rng(1);
  CHECK_FALSE(sample_landmark(first, 5, 1, rng).has_value());
}

TEST_CASE("property: labels hold at most one event, inside the horizon") {
  Rng rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t T = 2 + uniform_index(rng, 20), H = 1 + uniform_index(rng, 10);
    const int e = static_cast<int>(uniform_index(rng, 3));
    std::vector<ObservedCell> cells;
    for (std::size_t j = 1; j < T; ++j) cells.push_back({j, 0, 0.0});
    const auto t = traj_from(cells, {T, e}, 1);
    auto s = sample_landmark(t, H, 2, rng);
    REQUIRE(s.has_value());
    double total = 0;
    for (double y : s->labels) total += y;
    const bool inside = e > 0 && T > s->landmark && T <= s->landmark + H;
    CHECK(total == (inside ? 1.0 : 0.0));
    for (std::size_t h = 1; h <= H; ++h) CHECK(s->loss_mask[h - 1] == (s->landmark + h <= std::min(T, s->landmark + H)));
  }
}

TEST_CASE("landmark draws are uniform over the admissible range") {
  std::vector<ObservedCell> cells;
  for (std::size_t j = 1; j <= 10; ++j) cells.push_back({j, 0, 0.0});
  const auto t = traj_from(cells, {20, 1}, 1);
  REQUIRE(t.max_landmark() == 10);
  Rng rng(2024);
  std::vector<double> count(10, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) count[sample_landmark(t, 5, 1, rng)->landmark - 1] += 1;
  double chi2 = 0;
  for (double c : count) chi2 += (c - n / 10.0) * (c - n / 10.0) / (n / 10.0);
  // chi-square 99th percentile with 9 degrees of freedom
  CHECK(chi2 < 21.666);
}

TEST_CASE("make_batch pads to the longest history") {
  std::vector<ObservedCell> cells;
  for (std::size_t j = 1; j <= 6; ++j) cells.push_back({j, 0, double(j)});
  const auto t = traj_from(cells, {7, 1}, 1);
  std::vector<LandmarkSample> s = {landmark_at(t, 2, 3, 1), landmark_at(t, 5, 3, 1)};
  const Batch b = make_batch(s);
  CHECK(b.steps == 5);
  CHECK(b.x.shape() == Shape{2, 5, 1});
  for (std::size_t r = 2; r < 5; ++r) {
    CHECK(b.valid[r] == 0);
    CHECK(b.missing.keep[r] == 1);
    CHECK(b.delta[r] == 0.0);
  }
  CHECK(b.valid[5 + 4] == 1);
  CHECK(make_batch(std::span(s).subspan(0, 1)).steps == 2);

  const auto t2 = traj_from(cells, {7, 1}, 2);
  std::vector<LandmarkSample> mixed = {landmark_at(t, 2, 3, 1), landmark_at(t2, 2, 3, 1)};
  CHECK_THROWS_AS(make_batch(mixed), std::invalid_argument);
}

TEST_CASE("csv ingest round trip and errors") {
  const auto dir = oracle::temp_dir("ingest");
  SynthConfig c = default_synth_config();
  c.subjects = 60;
  const auto gen = generate(c);
  const auto obs = (dir / "obs.csv").string(), out = (dir / "out.csv").string(), sch = (dir / "schema.txt").string();
  emit_csv(gen.cohort, obs, out, sch);
  const Cohort back = ingest_csv(obs, out, sch, gen.cohort.grid);
  CHECK(back == gen.cohort);

  write_file(dir / "empty.csv", "");
  CHECK_THROWS(ingest_csv((dir / "empty.csv").string(), out, sch, gen.cohort.grid));

  write_file(dir / "bad.csv", "subject_id,time,feature,value\ns1,0.5,driver_1,1\ns1,1.5,mystery,2\n");
  try {
    ingest_csv((dir / "bad.csv").string(), out, sch, gen.cohort.grid);
    FAIL("expected throw");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find(":3:") != std::string::npos);
    CHECK(msg.find("mystery") != std::string::npos);
  }

  write_file(dir / "malformed.csv", "subject_id,time,feature,value\ns1,abc,driver_1,1\n");
  CHECK_THROWS_WITH(ingest_csv((dir / "malformed.csv").string(), out, sch, gen.cohort.grid),
                    doctest::Contains("malformed.csv:2"));

  write_file(dir / "orphan.csv", "subject_id,time,feature,value\nghost,0.5,driver_1,1\n");
  CHECK_THROWS_WITH(ingest_csv((dir / "orphan.csv").string(), out, sch, gen.cohort.grid),
                    doctest::Contains("no outcome row"));
}

TEST_CASE("schema parsing") {
  const FeatureSchema s = FeatureSchema::parse({"# comment", "age,numeric", "", "sex,categorical,2"});
  CHECK(s.size() == 2);
  CHECK(s[1].cardinality == 2);
  CHECK_THROWS(FeatureSchema::parse({"a,categorical,1"}));
  CHECK_THROWS(FeatureSchema::parse({"a,numeric", "a,numeric"}));
  CHECK_THROWS(FeatureSchema::parse({"a,text"}));
}

TEST_CASE("standardisation uses only the chosen subjects") {
  SynthConfig c = default_synth_config();
  c.subjects = 40;
  const auto gen = generate(c);
  std::vector<std::size_t> first{0, 1, 2, 3, 4};
  const FeatureSchema s = fit_standardization(gen.cohort, first);
  double sum = 0, n = 0;
  for (std::size_t i : first)
    for (const ObservedCell& cell : gen.cohort.subjects[i].cells)
      if (cell.feature == 2) {
        sum += cell.value;
        n += 1;
      }
  CHECK(s[2].mean == doctest::Approx(sum / n).epsilon(1e-12));
}
