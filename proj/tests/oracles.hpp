// Independent reference implementations used by the tests. They favour the
// most literal reading of each formula over speed.
#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "lsurv/diffcore.hpp"
#include "lsurv/rng.hpp"

namespace oracle {

inline lsurv::Array uniform(lsurv::Shape shape, double lo, double hi, lsurv::Rng& rng) {
  lsurv::Array a(std::move(shape));
  for (double& v : a.values()) v = lo + (hi - lo) * lsurv::uniform01(rng);
  return a;
}

// Direct evaluation of exp(f_k) / (1 + sum_m exp(f_m)) for one row.
inline std::vector<double> hazard_row(const std::vector<double>& f) {
  double den = 1.0;
  for (double v : f) den += std::exp(v);
  std::vector<double> out;
  for (double v : f) out.push_back(std::exp(v) / den);
  return out;
}

struct Event {
  std::size_t t;
  int e;
};

// Kaplan-Meier of the censoring time, walked subject by subject.
inline double km_censoring_at(const std::vector<Event>& ev, std::size_t t) {
  double g = 1.0;
  for (std::size_t s = 1; s <= t; ++s) {
    double at_risk = 0, cens = 0;
    for (const Event& x : ev) {
      if (x.t > s || (x.t == s && x.e == 0)) at_risk += 1;
      if (x.t == s && x.e == 0) cens += 1;
    }
    if (at_risk > 0) g *= 1.0 - cens / at_risk;
  }
  return g;
}

// Pair enumeration in plain O(n^2) with doubles.
inline double ctd_bruteforce(const std::vector<std::vector<double>>& cif_by_time, const std::vector<Event>& ev, int k) {
  double num = 0, den = 0;
  for (std::size_t a = 0; a < ev.size(); ++a)
    for (std::size_t b = 0; b < ev.size(); ++b) {
      if (a == b || ev[a].e != k || !(ev[a].t < ev[b].t)) continue;
      if (ev[a].t > cif_by_time[a].size()) continue;
      const double fa = cif_by_time[a][ev[a].t - 1], fb = cif_by_time[b][ev[a].t - 1];
      den += 1;
      num += fa > fb ? 1.0 : (fa == fb ? 0.5 : 0.0);
    }
  return num / den;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("lsurv_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace oracle
