// The five pipeline commands behind the `lsurv` executable.
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lsurv/metrics.hpp"
#include "lsurv/model.hpp"
#include "lsurv/synthgen.hpp"
#include "lsurv/training.hpp"

namespace lsurv {

struct RunConfig {
  TrainConfig train;

  // data
  std::string observations;
  std::string outcomes;
  std::string schema;
  double width = 1.0;
  std::size_t intervals = 40;
  std::string out_dir = "out";

  // train
  double val_fraction = 0.15;

  // predict / evaluate
  std::string checkpoint;
  std::string predictions;
  std::string landmark = "random";  // "random" or "fixed:<k>"
  std::size_t eval_horizon = 0;     // 0: full prediction grid
  std::size_t calibration_time = 0; // 0: evaluation horizon
  std::size_t bins = 10;
  std::string ctd = "earlier";      // "earlier" or "own"

  // crossval
  std::size_t folds = 5;
  double test_fraction = 0.2;

  // synth
  std::string preset = "default";   // "default" or "staleness"
  std::size_t subjects = 2000;
  std::size_t features = 4;
  std::size_t causes = 2;
  double driver_mult = 3.0;
  double censor_hazard = 0.02;
  double missing_rate = 0.3;
  double stale_mult = 3.0;

  SynthConfig synth_config() const;
  EvalOptions eval_options() const;
};

struct PredictionRow {
  std::string subject_id;
  HazardGrid grid;
};

// predictions.csv: subject_id,interval_offset,cause,hazard,cif,survival
void write_predictions(std::ostream& os, const std::vector<PredictionRow>& rows);
std::vector<PredictionRow> read_predictions(const std::string& path);

struct LabeledOutcome {
  std::string subject_id;
  Outcome outcome;
};
// subject_id,event_interval,event_cause
void write_outcomes(std::ostream& os, const std::vector<LabeledOutcome>& rows);
// Accepts an event_interval column, or event_time converted with `width`.
std::vector<LabeledOutcome> read_outcomes(const std::string& path, double width);

// Landmark predictions for the given cohort subjects. Returns the rows and
// the landmark-relative outcomes in the same order.
struct LandmarkPredictions {
  std::vector<PredictionRow> rows;
  std::vector<LabeledOutcome> outcomes;
};
LandmarkPredictions predict_cohort(const SurvivalModel& model, const Cohort& cohort,
                                   const std::vector<std::size_t>& subjects, const std::string& landmark_policy,
                                   std::uint64_t seed);

EvalReport evaluate_predictions(const std::vector<PredictionRow>& rows, const std::vector<LabeledOutcome>& outcomes,
                                const EvalOptions& opts);

// Deterministic train / validation split of 0..n-1.
void split_indices(std::size_t n, double val_fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& val);

int cmd_synth(const RunConfig& config);
int cmd_train(const RunConfig& config);
int cmd_predict(const RunConfig& config);
int cmd_evaluate(const RunConfig& config);
int cmd_crossval(const RunConfig& config);

}  // namespace lsurv
