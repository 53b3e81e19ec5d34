// Censoring-aware evaluation on a discrete grid.
//
// All times are 1-based interval indices relative to the prediction origin
// (the landmark). Predictions are CIF grids F[j-1][k-1] for j = 1..H.
//
// A subject censored in interval T (e = 0) is event-free through T. IPCW
// weight of subject i at time j:
//   1 / G(T_i - 1)  if T_i <= j and e_i != 0
//   1 / G(j - 1)    if T_i > j, or T_i == j and e_i == 0
//   0               if T_i < j and e_i == 0
#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lsurv/datamodel.hpp"
#include "lsurv/diffcore.hpp"

namespace lsurv {

// Kaplan-Meier estimate of P(C > t) on t = 0, 1, 2, ...
class CensoringEstimate {
 public:
  CensoringEstimate() : g_{1.0} {}
  explicit CensoringEstimate(std::vector<double> g) : g_(std::move(g)) {}
  // G(t); constant after the last tabulated time.
  double at(std::size_t t) const { return t < g_.size() ? g_[t] : g_.back(); }
  // G(t-), i.e. G(t - 1) on the discrete grid.
  double before(std::size_t t) const { return t == 0 ? 1.0 : at(t - 1); }
  const std::vector<double>& table() const { return g_; }

 private:
  std::vector<double> g_;
};

// Product-limit over censorings. At a tied time true events are taken to
// occur first, so the censoring risk set at t is #{T >= t} minus the events
// at t.
CensoringEstimate km_censoring(std::span<const Outcome> outcomes);

struct MetricValue {
  std::optional<double> value;  // empty when there is no weight mass / no pair
  std::size_t dropped = 0;      // subjects removed because G was 0
};

// Cause k (1-based) at time j (1-based).
MetricValue brier_k(std::span<const Array> predictions, std::span<const Outcome> outcomes, const CensoringEstimate& G,
                    std::size_t j, int k);
// Uniform mean of brier_k over j = 1..horizon, skipping undefined points.
MetricValue ibs_k(std::span<const Array> predictions, std::span<const Outcome> outcomes, const CensoringEstimate& G,
                  std::size_t horizon, int k);

enum class CtdConvention {
  EarlierTime,  // both members scored at T_a
  OwnTimes,     // a scored at T_a, b at min(T_b, H)
};

struct Concordance {
  std::optional<double> value;
  std::size_t pairs = 0;
  std::size_t concordant = 0;
  std::size_t ties = 0;
};

// Pairs with T_a < T_b, e_a = k and T_a within the prediction horizon.
Concordance ctd_k(std::span<const Array> predictions, std::span<const Outcome> outcomes, int k,
                  CtdConvention convention = CtdConvention::EarlierTime);

struct CalibrationBin {
  std::size_t count = 0;
  double mean_pred = 0.0;
  std::optional<double> obs_rate;
  double se = 0.0;      // sqrt(p (1 - p) / n_kish), n_kish = (sum W)^2 / sum W^2
  double n_eff = 0.0;   // sum of IPCW weights
};

struct CalibrationTable {
  int cause = 0;
  std::size_t time = 0;
  std::vector<CalibrationBin> bins;
  std::size_t dropped = 0;
};

// Equal-frequency bins over F_j^k; bin edges never split tied predictions,
// so fewer than `bins` bins can come back.
CalibrationTable calibration_curve(std::span<const Array> predictions, std::span<const Outcome> outcomes,
                                   const CensoringEstimate& G, std::size_t j, int k, std::size_t bins = 10);

struct EvalOptions {
  std::size_t horizon = 0;           // 0: the prediction grid length
  std::size_t calibration_time = 0;  // 0: the horizon
  std::size_t bins = 10;
  CtdConvention ctd = CtdConvention::EarlierTime;
};

struct CauseReport {
  int cause = 0;
  MetricValue ibs;
  Concordance ctd;
  MetricValue brier_at_horizon;
  CalibrationTable calibration;
};

struct EvalReport {
  std::size_t horizon = 0;
  std::size_t subjects = 0;
  std::vector<CauseReport> causes;
};

EvalReport evaluate(std::span<const Array> predictions, std::span<const Outcome> outcomes, const EvalOptions& opts);

// metrics.csv: cause,metric,value
void write_metrics_csv(std::ostream& os, const EvalReport& report);
// calibration_<cause>.csv: bin,mean_pred,obs_rate,se,n_eff
void write_calibration_csv(std::ostream& os, const CalibrationTable& table);
void write_report(const std::string& dir, const EvalReport& report);

}  // namespace lsurv
