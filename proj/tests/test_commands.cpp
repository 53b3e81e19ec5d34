#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "lsurv/commands.hpp"
#include "lsurv/csv.hpp"
#include "oracles.hpp"

using namespace lsurv;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

RunConfig small_run(const fs::path& dir, std::size_t subjects = 120) {
  RunConfig c;
  c.out_dir = dir.string();
  c.subjects = subjects;
  c.observations = (dir / "observations.csv").string();
  c.outcomes = (dir / "outcomes.csv").string();
  c.schema = (dir / "schema.txt").string();
  c.train.epochs = 2;
  c.train.horizon = 6;
  c.train.lr = 1e-3;
  return c;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream is(p);
  std::size_t n = 0;
  for (std::string line; std::getline(is, line);) ++n;
  return n;
}

}  // namespace

TEST_CASE("synth output is byte-identical under a fixed seed") {
  const auto a = oracle::temp_dir("synth_a"), b = oracle::temp_dir("synth_b");
  CHECK(cmd_synth(small_run(a)) == 0);
  CHECK(cmd_synth(small_run(b)) == 0);
  for (const char* f : {"observations.csv", "outcomes.csv", "schema.txt", "ground_truth.csv", "truth_predictions.csv"})
    CHECK(slurp(a / f) == slurp(b / f));
  CHECK(count_lines(a / "ground_truth.csv") == 1 + 120 * 40 * 2);

  RunConfig bad = small_run(a);
  bad.censor_hazard = 0.99;
  CHECK_THROWS_AS(cmd_synth(bad), std::invalid_argument);
  bad = small_run(a);
  bad.preset = "nonsense";
  CHECK_THROWS_AS(cmd_synth(bad), std::invalid_argument);
}

TEST_CASE("train, predict and evaluate pipeline") {
  const auto dir = oracle::temp_dir("pipeline");
  RunConfig c = small_run(dir);
  REQUIRE(cmd_synth(c) == 0);
  REQUIRE(cmd_train(c) == 0);
  CHECK(fs::exists(dir / "checkpoint.txt"));
  CHECK(count_lines(dir / "train_log.csv") == 1 + 3);

  c.checkpoint = (dir / "checkpoint.txt").string();
  c.landmark = "fixed:1";
  REQUIRE(cmd_predict(c) == 0);
  const std::string first = slurp(dir / "predictions.csv");
  REQUIRE(cmd_predict(c) == 0);
  CHECK(slurp(dir / "predictions.csv") == first);

  const auto rows = read_predictions((dir / "predictions.csv").string());
  const auto outs = read_outcomes((dir / "landmark_outcomes.csv").string(), 1.0);
  CHECK(rows.size() == outs.size());
  CHECK(count_lines(dir / "predictions.csv") == 1 + rows.size() * 6 * 2);
  for (const PredictionRow& r : rows) {
    const HazardGrid& g = r.grid;
    CHECK(std::abs(g.F[10] + g.F[11] + g.surv[5] - 1.0) < 1e-12);
  }

  c.predictions = (dir / "predictions.csv").string();
  c.outcomes = (dir / "landmark_outcomes.csv").string();
  REQUIRE(cmd_evaluate(c) == 0);
  CHECK(fs::exists(dir / "metrics.csv"));
  CHECK(fs::exists(dir / "calibration_1.csv"));
  CHECK(fs::exists(dir / "calibration_2.csv"));
}

TEST_CASE("landmark policies") {
  const auto dir = oracle::temp_dir("policy");
  RunConfig c = small_run(dir, 80);
  REQUIRE(cmd_synth(c) == 0);
  const Cohort cohort = ingest_csv(c.observations, c.outcomes, c.schema, DiscretizationGrid(1.0, 40));
  ModelConfig mc;
  mc.horizon = 5;
  const SurvivalModel model(mc, fit_standardization(cohort, std::vector<std::size_t>{0, 1, 2, 3}), cohort.grid);
  std::vector<std::size_t> all(80);
  for (std::size_t i = 0; i < 80; ++i) all[i] = i;

  const auto fixed = predict_cohort(model, cohort, all, "fixed:3", 1);
  std::size_t eligible = 0;
  for (const SubjectRecord& s : cohort.subjects) {
    const auto t = build_trajectory({s.subject_id, s.cells}, cohort.schema, cohort.grid, s.outcome);
    eligible += t.max_landmark() >= 3;
  }
  CHECK(fixed.rows.size() == eligible);
  for (std::size_t i = 0; i < fixed.rows.size(); ++i) {
    const SubjectRecord* rec = nullptr;
    for (const SubjectRecord& s : cohort.subjects)
      if (s.subject_id == fixed.outcomes[i].subject_id) rec = &s;
    REQUIRE(rec);
    CHECK(fixed.outcomes[i].outcome.interval == rec->outcome.interval - 3);
  }

  const auto r1 = predict_cohort(model, cohort, all, "random", 4), r2 = predict_cohort(model, cohort, all, "random", 4);
  REQUIRE(r1.rows.size() == r2.rows.size());
  for (std::size_t i = 0; i < r1.rows.size(); ++i) CHECK(r1.rows[i].grid.F == r2.rows[i].grid.F);
  CHECK_THROWS_AS(predict_cohort(model, cohort, all, "fixed:x", 1), std::invalid_argument);
  CHECK_THROWS_AS(predict_cohort(model, cohort, all, "sometimes", 1), std::invalid_argument);
}

TEST_CASE("evaluate rejects empty or inconsistent inputs") {
  const auto dir = oracle::temp_dir("evaluate_errors");
  {
    std::ofstream(dir / "empty.csv") << "subject_id,interval_offset,cause,hazard,cif,survival\n";
    std::ofstream(dir / "outcomes.csv") << "subject_id,event_interval,event_cause\na,1,1\n";
  }
  RunConfig c;
  c.out_dir = dir.string();
  c.predictions = (dir / "empty.csv").string();
  c.outcomes = (dir / "outcomes.csv").string();
  CHECK_THROWS(cmd_evaluate(c));
  c.predictions = (dir / "missing.csv").string();
  CHECK_THROWS_AS(cmd_evaluate(c), std::invalid_argument);
}

TEST_CASE("perfectly ranked predictions give a concordance of one") {
  std::vector<PredictionRow> rows;
  std::vector<LabeledOutcome> outs;
  for (std::size_t i = 0; i < 6; ++i) {
    const double lam = 0.05 * static_cast<double>(6 - i);
    rows.push_back({"s" + std::to_string(i), HazardGrid::from_hazards(Array({8, 1}, lam))});
    outs.push_back({"s" + std::to_string(i), Outcome{i + 1, 1}});
  }
  const auto dir = oracle::temp_dir("rank");
  {
    std::ofstream p(dir / "p.csv");
    write_predictions(p, rows);
    std::ofstream o(dir / "o.csv");
    write_outcomes(o, outs);
  }
  const auto back = read_predictions((dir / "p.csv").string());
  REQUIRE(back.size() == 6);
  CHECK(back[3].grid.lambda == rows[3].grid.lambda);
  const EvalReport rep = evaluate_predictions(back, read_outcomes((dir / "o.csv").string(), 1.0), {});
  CHECK(*rep.causes[0].ctd.value == 1.0);
}

TEST_CASE("outcomes can be read from event times") {
  const auto dir = oracle::temp_dir("times");
  std::ofstream(dir / "o.csv") << "subject_id,event_time,event_cause\na,0.1,1\nb,4.31,0\n";
  const auto o = read_outcomes((dir / "o.csv").string(), 0.25);
  CHECK(o[0].outcome == Outcome{1, 1});
  CHECK(o[1].outcome == Outcome{18, 0});
}

TEST_CASE("train/validation split") {
  std::vector<std::size_t> tr, va;
  split_indices(100, 0.15, 3, tr, va);
  CHECK(tr.size() == 85);
  CHECK(va.size() == 15);
  std::vector<std::size_t> all(tr);
  all.insert(all.end(), va.begin(), va.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 100; ++i) CHECK(all[i] == i);
  CHECK_THROWS(split_indices(10, 1.0, 1, tr, va));
}

TEST_CASE("cross-validation output structure") {
  const auto dir = oracle::temp_dir("crossval");
  RunConfig c = small_run(dir, 150);
  REQUIRE(cmd_synth(c) == 0);
  c.folds = 3;
  c.train.epochs = 1;
  REQUIRE(cmd_crossval(c) == 0);
  CHECK(count_lines(dir / "crossval_metrics.csv") == 1 + 3 * 2 * 2);
  CHECK(count_lines(dir / "crossval_summary.csv") == 1 + 2 * 2);
  for (int f = 1; f <= 3; ++f) CHECK(fs::exists(dir / ("train_log_fold" + std::to_string(f) + ".csv")));
  c.folds = 1;
  CHECK_THROWS_AS(cmd_crossval(c), std::invalid_argument);
}
