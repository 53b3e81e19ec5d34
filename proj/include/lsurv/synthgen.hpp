// Synthetic longitudinal cohorts with known discrete cause-specific hazards.
//
// Hazard link: lambda_k = base_k * prod_d effect[d][k] ^ x_d, optionally
// times a monitoring-dropout multiplier, rescaled so that the total event
// hazard never exceeds min(0.95, 1 - censor_hazard). Each interval is one
// multinomial trial over {survive, cause 1..K, censor}.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lsurv/datamodel.hpp"

namespace lsurv {

struct SynthFeature {
  std::string name;
  FeatureKind kind = FeatureKind::Numeric;  // categorical features are binary
  double prevalence = 0.5;                  // P(x = 1) for binary features
  bool dynamic = false;                     // numeric random walk
  double drift_sd = 0.3;
  std::vector<double> effect;               // per cause, multiplier per unit x
  double missing_rate = 0.0;
};

// Subjects selected with `subject_prob` stop being measured on `feature`
// from a uniform onset in [onset_min, onset_max]; from then on their
// hazards are multiplied by `hazard_mult`. Staleness of that feature is
// therefore informative about risk.
struct MonitoringDropout {
  bool enabled = false;
  std::size_t feature = 0;
  double subject_prob = 0.5;
  std::size_t onset_min = 2;
  std::size_t onset_max = 20;
  std::vector<double> hazard_mult;
};

struct SynthConfig {
  std::size_t subjects = 2000;
  std::size_t intervals = 40;
  std::vector<double> base_hazard{0.04, 0.04};
  std::vector<SynthFeature> features;
  double censor_hazard = 0.02;
  MonitoringDropout dropout;
  std::uint64_t seed = 1;

  std::size_t causes() const { return base_hazard.size(); }
  // Throws std::invalid_argument on an invalid hazard/probability setup.
  void validate() const;
};

// K binary risk drivers (driver k multiplies cause k by `driver_mult`) plus
// numeric noise features up to `n_features`.
SynthConfig default_synth_config(std::size_t n_features = 4, std::size_t causes = 2, double driver_mult = 3.0);

// Cohort where measurement staleness carries risk: numeric features are
// missing at `missing_rate`, and half of the subjects stop being measured on
// the first numeric feature at a random onset, after which every cause
// hazard is multiplied by `stale_mult`.
SynthConfig staleness_synth_config(double missing_rate = 0.5, double stale_mult = 3.0);

struct SubjectTruth {
  std::vector<double> covariates;  // static draw (dynamic: value at interval 1)
  bool dropped = false;
  std::size_t dropout_onset = 0;
  Array hazards;  // J x K
  Array survival; // J
  Array cif;      // J x K
};

struct GroundTruth {
  std::vector<SubjectTruth> subjects;  // cohort order
};

struct SynthOutput {
  Cohort cohort;
  GroundTruth truth;
};

SynthOutput generate(const SynthConfig& config);

// Hazard grid J x K for a covariate path; `path` is J x D (row j-1 holds the
// covariates in force during interval j).
Array true_hazards(const SynthConfig& config, const std::vector<double>& path, bool dropped = false,
                   std::size_t onset = 0);
// Closed-form survival and CIF from a hazard grid.
Array true_survival(const Array& hazards);
Array true_cif(const Array& hazards);
// Static-covariate convenience: constant path.
Array true_cif(const SynthConfig& config, const std::vector<double>& covariates);

// ground_truth.csv: subject_id,interval,cause,true_cif
void write_ground_truth(std::ostream& os, const Cohort& cohort, const GroundTruth& truth);

}  // namespace lsurv
