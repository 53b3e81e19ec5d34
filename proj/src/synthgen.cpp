#include "lsurv/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "lsurv/csv.hpp"
#include "lsurv/rng.hpp"

namespace lsurv {

namespace {

double event_cap(double censor_hazard) { return std::min(0.95, 1.0 - censor_hazard); }

}  // namespace

void SynthConfig::validate() const {
  const std::size_t K = causes();
  if (subjects < 1) throw std::invalid_argument("synth: need at least one subject");
  if (intervals < 1) throw std::invalid_argument("synth: need at least one interval");
  if (K < 1) throw std::invalid_argument("synth: need at least one cause");
  if (features.empty()) throw std::invalid_argument("synth: need at least one feature");
  if (!(censor_hazard >= 0.0 && censor_hazard < 1.0)) throw std::invalid_argument("synth: censor hazard must be in [0,1)");
  double total = 0.0;
  for (double b : base_hazard) {
    if (!(b >= 0.0 && b < 1.0)) throw std::invalid_argument("synth: base hazards must be in [0,1)");
    total += b;
  }
  if (total + censor_hazard >= 1.0 || total > event_cap(censor_hazard))
    throw std::invalid_argument("synth: base hazards sum to " + csv::format_double(total) +
                                ", which with censoring hazard " + csv::format_double(censor_hazard) +
                                " leaves no survival probability");
  for (const SynthFeature& f : features) {
    if (f.effect.size() != K) throw std::invalid_argument("synth: feature '" + f.name + "' needs one effect per cause");
    for (double e : f.effect)
      if (!(e > 0.0)) throw std::invalid_argument("synth: effects must be positive multipliers");
    if (!(f.missing_rate >= 0.0 && f.missing_rate < 1.0))
      throw std::invalid_argument("synth: missing rate must be in [0,1)");
    if (!(f.prevalence >= 0.0 && f.prevalence <= 1.0)) throw std::invalid_argument("synth: prevalence must be in [0,1]");
  }
  if (dropout.enabled) {
    if (dropout.feature >= features.size()) throw std::invalid_argument("synth: dropout feature out of range");
    if (dropout.hazard_mult.size() != K) throw std::invalid_argument("synth: dropout needs one multiplier per cause");
    if (dropout.onset_min < 1 || dropout.onset_max < dropout.onset_min)
      throw std::invalid_argument("synth: bad dropout onset range");
  }
}

SynthConfig default_synth_config(std::size_t n_features, std::size_t causes, double driver_mult) {
  if (n_features < causes) throw std::invalid_argument("synth: need one driver feature per cause");
  SynthConfig c;
  c.base_hazard.assign(causes, 0.04);
  for (std::size_t d = 0; d < n_features; ++d) {
    SynthFeature f;
    f.effect.assign(causes, 1.0);
    if (d < causes) {
      f.name = "driver_" + std::to_string(d + 1);
      f.kind = FeatureKind::Categorical;
      f.effect[d] = driver_mult;
    } else {
      f.name = "x_" + std::to_string(d + 1);
      f.kind = FeatureKind::Numeric;
      f.missing_rate = 0.3;
    }
    c.features.push_back(std::move(f));
  }
  return c;
}

SynthConfig staleness_synth_config(double missing_rate, double stale_mult) {
  SynthConfig c = default_synth_config(4, 2, 3.0);
  for (SynthFeature& f : c.features)
    if (f.kind == FeatureKind::Numeric) f.missing_rate = missing_rate;
  c.dropout.enabled = true;
  c.dropout.feature = 2;
  c.dropout.subject_prob = 0.5;
  c.dropout.onset_min = 2;
  c.dropout.onset_max = 20;
  c.dropout.hazard_mult.assign(c.causes(), stale_mult);
  return c;
}

Array true_hazards(const SynthConfig& config, const std::vector<double>& path, bool dropped, std::size_t onset) {
  const std::size_t J = config.intervals, K = config.causes(), D = config.features.size();
  if (path.size() != J * D) throw std::invalid_argument("true_hazards: path must be J x D");
  const double cap = event_cap(config.censor_hazard);
  Array h({J, K});
  for (std::size_t j = 0; j < J; ++j) {
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      double lam = config.base_hazard[k];
      for (std::size_t d = 0; d < D; ++d) lam *= std::pow(config.features[d].effect[k], path[j * D + d]);
      if (dropped && j + 1 >= onset) lam *= config.dropout.hazard_mult[k];
      h[j * K + k] = lam;
      total += lam;
    }
    if (total > cap)
      for (std::size_t k = 0; k < K; ++k) h[j * K + k] *= cap / total;
  }
  return h;
}

Array true_survival(const Array& hazards) {
  const std::size_t J = hazards.dim(0), K = hazards.dim(1);
  Array s({J});
  double surv = 1.0;
  for (std::size_t j = 0; j < J; ++j) {
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += hazards[j * K + k];
    surv *= 1.0 - total;
    s[j] = surv;
  }
  return s;
}

Array true_cif(const Array& hazards) {
  const std::size_t J = hazards.dim(0), K = hazards.dim(1);
  Array f({J, K});
  double prev_surv = 1.0;
  std::vector<double> acc(K, 0.0);
  for (std::size_t j = 0; j < J; ++j) {
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      acc[k] += hazards[j * K + k] * prev_surv;
      f[j * K + k] = acc[k];
      total += hazards[j * K + k];
    }
    prev_surv *= 1.0 - total;
  }
  return f;
}

Array true_cif(const SynthConfig& config, const std::vector<double>& covariates) {
  const std::size_t J = config.intervals, D = config.features.size();
  if (covariates.size() != D) throw std::invalid_argument("true_cif: expected one value per feature");
  std::vector<double> path(J * D);
  for (std::size_t j = 0; j < J; ++j) std::copy(covariates.begin(), covariates.end(), path.begin() + j * D);
  return true_cif(true_hazards(config, path));
}

SynthOutput generate(const SynthConfig& config) {
  config.validate();
  const std::size_t N = config.subjects, J = config.intervals, K = config.causes(), D = config.features.size();
  SynthOutput out;
  std::vector<FeatureSpec> specs;
  for (const SynthFeature& f : config.features) {
    FeatureSpec s;
    s.name = f.name;
    s.kind = f.kind;
    s.cardinality = f.kind == FeatureKind::Categorical ? 2 : 0;
    specs.push_back(s);
  }
  out.cohort.schema = FeatureSchema(std::move(specs));
  out.cohort.grid = DiscretizationGrid(1.0, J);
  out.cohort.causes = K;

  for (std::size_t i = 0; i < N; ++i) {
    Rng rng = derive_rng(config.seed, i);
    SubjectTruth truth;
    std::vector<double> path(J * D);
    for (std::size_t d = 0; d < D; ++d) {
      const SynthFeature& f = config.features[d];
      double v = f.kind == FeatureKind::Categorical ? (bernoulli(rng, f.prevalence) ? 1.0 : 0.0) : standard_normal(rng);
      truth.covariates.push_back(v);
      for (std::size_t j = 0; j < J; ++j) {
        if (j > 0 && f.dynamic && f.kind == FeatureKind::Numeric) v += f.drift_sd * standard_normal(rng);
        path[j * D + d] = v;
      }
    }
    if (config.dropout.enabled) {
      truth.dropped = bernoulli(rng, config.dropout.subject_prob);
      const std::size_t span = config.dropout.onset_max - config.dropout.onset_min + 1;
      truth.dropout_onset = config.dropout.onset_min + uniform_index(rng, span);
    }
    truth.hazards = true_hazards(config, path, truth.dropped, truth.dropout_onset);
    truth.survival = true_survival(truth.hazards);
    truth.cif = true_cif(truth.hazards);

    // Outcome: one multinomial trial per interval.
    std::size_t T = J;
    int cause = 0;
    for (std::size_t j = 0; j < J; ++j) {
      const double u = uniform01(rng);
      double acc = 0.0;
      int hit = -1;
      for (std::size_t k = 0; k < K && hit < 0; ++k) {
        acc += truth.hazards[j * K + k];
        if (u < acc) hit = static_cast<int>(k) + 1;
      }
      if (hit < 0 && u < acc + config.censor_hazard) hit = 0;
      if (hit >= 0) {
        T = j + 1;
        cause = hit;
        break;
      }
    }

    SubjectRecord rec;
    rec.subject_id = "s" + std::to_string(i + 1);
    rec.cause = cause;
    rec.outcome = Outcome{T, cause};
    rec.event_time = static_cast<double>(T) - 0.5;
    for (std::size_t j = 1; j <= T; ++j) {
      for (std::size_t d = 0; d < D; ++d) {
        const SynthFeature& f = config.features[d];
        const bool lost = config.dropout.enabled && truth.dropped && d == config.dropout.feature &&
                          j >= truth.dropout_onset;
        const bool masked = bernoulli(rng, f.missing_rate);
        if (lost || masked) continue;
        rec.cells.push_back(ObservedCell{j, d, path[(j - 1) * D + d]});
      }
    }
    if (rec.cells.empty()) rec.cells.push_back(ObservedCell{1, 0, path[0]});
    out.cohort.subjects.push_back(std::move(rec));
    out.truth.subjects.push_back(std::move(truth));
  }
  return out;
}

void write_ground_truth(std::ostream& os, const Cohort& cohort, const GroundTruth& truth) {
  os << "subject_id,interval,cause,true_cif\n";
  for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
    const Array& f = truth.subjects[i].cif;
    const std::size_t J = f.dim(0), K = f.dim(1);
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t k = 0; k < K; ++k)
        os << cohort.subjects[i].subject_id << ',' << j + 1 << ',' << k + 1 << ',' << csv::format_double(f[j * K + k])
           << '\n';
  }
}

}  // namespace lsurv
