#include "lsurv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "lsurv/csv.hpp"

namespace lsurv {

CensoringEstimate km_censoring(std::span<const Outcome> outcomes) {
  std::size_t tmax = 0;
  for (const Outcome& o : outcomes) tmax = std::max(tmax, o.interval);
  std::vector<std::size_t> at_or_after(tmax + 2, 0), events(tmax + 1, 0), censored(tmax + 1, 0);
  for (const Outcome& o : outcomes) {
    ++at_or_after[o.interval];
    (o.cause == 0 ? censored : events)[o.interval] += 1;
  }
  for (std::size_t t = tmax; t-- > 0;) at_or_after[t] += at_or_after[t + 1];
  std::vector<double> g(tmax + 1, 1.0);
  double acc = 1.0;
  for (std::size_t t = 1; t <= tmax; ++t) {
    const std::size_t risk = at_or_after[t] - events[t];
    if (risk > 0 && censored[t] > 0) acc *= 1.0 - static_cast<double>(censored[t]) / static_cast<double>(risk);
    g[t] = acc;
  }
  return CensoringEstimate(std::move(g));
}

namespace {

void check_inputs(std::span<const Array> predictions, std::span<const Outcome> outcomes, std::size_t j, int k) {
  if (predictions.size() != outcomes.size()) throw std::invalid_argument("metrics: predictions and outcomes differ in length");
  for (const Array& p : predictions) {
    if (p.rank() != 2) throw std::invalid_argument("metrics: predictions must be H x K grids");
    if (j < 1 || j > p.dim(0)) throw std::invalid_argument("metrics: time " + std::to_string(j) + " outside prediction grid");
    if (k < 1 || static_cast<std::size_t>(k) > p.dim(1)) throw std::invalid_argument("metrics: cause " + std::to_string(k) + " out of range");
  }
}

double cif_at(const Array& p, std::size_t j, int k) { return p[(j - 1) * p.dim(1) + static_cast<std::size_t>(k - 1)]; }

// IPCW weight; nullopt when the needed G value is zero. A subject censored
// in interval T is event-free through T, so its status at j = T is known.
std::optional<double> ipcw_weight(const Outcome& o, const CensoringEstimate& G, std::size_t j) {
  if (o.cause == 0 && o.interval < j) return 0.0;
  const double g = G.before(o.cause != 0 && o.interval <= j ? o.interval : j);
  if (g <= 0.0) return std::nullopt;
  return 1.0 / g;
}

}  // namespace

MetricValue brier_k(std::span<const Array> predictions, std::span<const Outcome> outcomes, const CensoringEstimate& G,
                    std::size_t j, int k) {
  check_inputs(predictions, outcomes, j, k);
  MetricValue r;
  double total = 0.0, mass = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const Outcome& o = outcomes[i];
    const auto w = ipcw_weight(o, G, j);
    if (!w) {
      ++r.dropped;
      continue;
    }
    ++n;
    const double y = (o.interval <= j && o.cause == k) ? 1.0 : 0.0;
    const double d = y - cif_at(predictions[i], j, k);
    total += *w * d * d;
    mass += *w;
  }
  if (n > 0 && mass > 0.0) r.value = total / static_cast<double>(n);
  return r;
}

MetricValue ibs_k(std::span<const Array> predictions, std::span<const Outcome> outcomes, const CensoringEstimate& G,
                  std::size_t horizon, int k) {
  if (horizon < 1) throw std::invalid_argument("ibs: empty evaluation grid");
  MetricValue r;
  double total = 0.0;
  std::size_t points = 0;
  for (std::size_t j = 1; j <= horizon; ++j) {
    const MetricValue b = brier_k(predictions, outcomes, G, j, k);
    r.dropped = std::max(r.dropped, b.dropped);
    if (!b.value) continue;
    total += *b.value;
    ++points;
  }
  if (points > 0) r.value = total / static_cast<double>(points);
  return r;
}

Concordance ctd_k(std::span<const Array> predictions, std::span<const Outcome> outcomes, int k,
                  CtdConvention convention) {
  if (predictions.size() != outcomes.size()) throw std::invalid_argument("ctd: predictions and outcomes differ in length");
  Concordance c;
  for (std::size_t a = 0; a < outcomes.size(); ++a) {
    const Outcome& oa = outcomes[a];
    const std::size_t H = predictions[a].dim(0);
    if (oa.cause != k || oa.interval < 1 || oa.interval > H) continue;
    const double fa = cif_at(predictions[a], oa.interval, k);
    for (std::size_t b = 0; b < outcomes.size(); ++b) {
      const Outcome& ob = outcomes[b];
      if (ob.interval <= oa.interval) continue;
      const std::size_t tb = convention == CtdConvention::EarlierTime ? oa.interval
                                                                      : std::min(ob.interval, predictions[b].dim(0));
      const double fb = cif_at(predictions[b], tb, k);
      ++c.pairs;
      if (fa > fb) ++c.concordant;
      else if (fa == fb) ++c.ties;
    }
  }
  if (c.pairs > 0)
    c.value = static_cast<double>(2 * c.concordant + c.ties) / static_cast<double>(2 * c.pairs);
  return c;
}

CalibrationTable calibration_curve(std::span<const Array> predictions, std::span<const Outcome> outcomes,
                                   const CensoringEstimate& G, std::size_t j, int k, std::size_t bins) {
  if (bins < 2) throw std::invalid_argument("calibration: need at least two bins");
  check_inputs(predictions, outcomes, j, k);
  CalibrationTable table;
  table.cause = k;
  table.time = j;
  std::vector<double> pred, weight, hit;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto w = ipcw_weight(outcomes[i], G, j);
    if (!w) {
      ++table.dropped;
      continue;
    }
    pred.push_back(cif_at(predictions[i], j, k));
    weight.push_back(*w);
    hit.push_back((outcomes[i].interval <= j && outcomes[i].cause == k) ? 1.0 : 0.0);
  }
  const std::size_t n = pred.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pred[a] < pred[b]; });

  std::vector<std::size_t> edges{0};
  for (std::size_t b = 1; b < bins; ++b) {
    std::size_t e = std::max(b * n / bins, edges.back());
    while (e > 0 && e < n && pred[order[e - 1]] == pred[order[e]]) ++e;
    if (e > edges.back() && e < n) edges.push_back(e);
  }
  edges.push_back(n);

  for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
    CalibrationBin bin;
    double sp = 0.0, sw = 0.0, sw2 = 0.0, swy = 0.0;
    for (std::size_t r = edges[b]; r < edges[b + 1]; ++r) {
      const std::size_t i = order[r];
      sp += pred[i];
      sw += weight[i];
      sw2 += weight[i] * weight[i];
      swy += weight[i] * hit[i];
    }
    bin.count = edges[b + 1] - edges[b];
    if (bin.count == 0) continue;
    bin.mean_pred = sp / static_cast<double>(bin.count);
    bin.n_eff = sw;
    if (sw > 0.0) {
      const double p = swy / sw;
      bin.obs_rate = p;
      bin.se = std::sqrt(p * (1.0 - p) * sw2 / (sw * sw));
    }
    table.bins.push_back(bin);
  }
  return table;
}

EvalReport evaluate(std::span<const Array> predictions, std::span<const Outcome> outcomes, const EvalOptions& opts) {
  if (predictions.empty()) throw std::invalid_argument("evaluate: no predictions");
  const std::size_t grid = predictions[0].dim(0), K = predictions[0].dim(1);
  for (const Array& p : predictions)
    if (p.rank() != 2 || p.dim(0) != grid || p.dim(1) != K)
      throw std::invalid_argument("evaluate: all prediction grids must share one shape");
  EvalReport report;
  report.horizon = opts.horizon ? opts.horizon : grid;
  if (report.horizon > grid) throw std::invalid_argument("evaluate: horizon beyond prediction grid");
  report.subjects = predictions.size();
  const std::size_t tcal = opts.calibration_time ? opts.calibration_time : report.horizon;
  const CensoringEstimate G = km_censoring(outcomes);
  for (int k = 1; k <= static_cast<int>(K); ++k) {
    CauseReport c;
    c.cause = k;
    c.ibs = ibs_k(predictions, outcomes, G, report.horizon, k);
    c.ctd = ctd_k(predictions, outcomes, k, opts.ctd);
    c.brier_at_horizon = brier_k(predictions, outcomes, G, report.horizon, k);
    c.calibration = calibration_curve(predictions, outcomes, G, tcal, k, opts.bins);
    report.causes.push_back(std::move(c));
  }
  return report;
}

namespace {

std::string opt_text(const std::optional<double>& v) { return v ? csv::format_double(*v) : "NA"; }

}  // namespace

void write_metrics_csv(std::ostream& os, const EvalReport& report) {
  os << "cause,metric,value\n";
  for (const CauseReport& c : report.causes) {
    os << c.cause << ",ibs," << opt_text(c.ibs.value) << '\n';
    os << c.cause << ",ctd," << opt_text(c.ctd.value) << '\n';
    os << c.cause << ",brier_horizon," << opt_text(c.brier_at_horizon.value) << '\n';
    os << c.cause << ",ctd_pairs," << c.ctd.pairs << '\n';
    os << c.cause << ",dropped," << c.ibs.dropped << '\n';
  }
}

void write_calibration_csv(std::ostream& os, const CalibrationTable& table) {
  os << "bin,mean_pred,obs_rate,se,n_eff\n";
  for (std::size_t b = 0; b < table.bins.size(); ++b) {
    const CalibrationBin& bin = table.bins[b];
    os << b + 1 << ',' << csv::format_double(bin.mean_pred) << ',' << opt_text(bin.obs_rate) << ','
       << csv::format_double(bin.se) << ',' << csv::format_double(bin.n_eff) << '\n';
  }
}

void write_report(const std::string& dir, const EvalReport& report) {
  std::filesystem::create_directories(dir);
  auto open = [](const std::filesystem::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    return os;
  };
  {
    auto os = open(std::filesystem::path(dir) / "metrics.csv");
    write_metrics_csv(os, report);
  }
  for (const CauseReport& c : report.causes) {
    auto os = open(std::filesystem::path(dir) / ("calibration_" + std::to_string(c.cause) + ".csv"));
    write_calibration_csv(os, c.calibration);
  }
}

}  // namespace lsurv
