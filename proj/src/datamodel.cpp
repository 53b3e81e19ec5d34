#include "lsurv/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <unordered_map>

#include "lsurv/csv.hpp"

namespace lsurv {

// ---- schema ---------------------------------------------------------------

FeatureSchema::FeatureSchema(std::vector<FeatureSpec> features) : features_(std::move(features)) {
  for (std::size_t i = 0; i < features_.size(); ++i) {
    const FeatureSpec& f = features_[i];
    if (f.name.empty()) throw std::invalid_argument("schema: empty feature name");
    for (std::size_t j = 0; j < i; ++j)
      if (features_[j].name == f.name) throw std::invalid_argument("schema: duplicate feature '" + f.name + "'");
    if (f.kind == FeatureKind::Categorical && f.cardinality < 2)
      throw std::invalid_argument("schema: categorical feature '" + f.name + "' needs cardinality >= 2");
    if (f.kind == FeatureKind::Numeric && !(f.stddev > 0.0))
      throw std::invalid_argument("schema: numeric feature '" + f.name + "' needs std > 0");
  }
}

std::optional<std::size_t> FeatureSchema::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < features_.size(); ++i)
    if (features_[i].name == name) return i;
  return std::nullopt;
}

FeatureSchema FeatureSchema::parse(const std::vector<std::string>& lines) {
  std::vector<FeatureSpec> specs;
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const std::string_view line = csv::trim(lines[ln]);
    if (line.empty() || line.front() == '#') continue;
    const auto fields = csv::split(line);
    const std::string where = "schema line " + std::to_string(ln + 1);
    if (fields.size() < 2 || fields.size() > 3) throw std::invalid_argument(where + ": expected name,kind[,cardinality]");
    FeatureSpec f;
    f.name = std::string(csv::trim(fields[0]));
    const std::string_view kind = csv::trim(fields[1]);
    if (kind == "numeric") {
      f.kind = FeatureKind::Numeric;
      if (fields.size() == 3) throw std::invalid_argument(where + ": numeric feature takes no cardinality");
    } else if (kind == "categorical") {
      f.kind = FeatureKind::Categorical;
      if (fields.size() != 3) throw std::invalid_argument(where + ": categorical feature needs a cardinality");
      const auto card = csv::parse_int(fields[2]);
      if (!card || *card < 2) throw std::invalid_argument(where + ": bad cardinality");
      f.cardinality = static_cast<std::size_t>(*card);
    } else {
      throw std::invalid_argument(where + ": unknown kind '" + std::string(kind) + "'");
    }
    specs.push_back(std::move(f));
  }
  if (specs.empty()) throw std::invalid_argument("schema: no features");
  return FeatureSchema(std::move(specs));
}

FeatureSchema FeatureSchema::read(const std::string& path) { return parse(csv::read_lines(path)); }

void FeatureSchema::write(std::ostream& os) const {
  for (const FeatureSpec& f : features_) {
    if (f.kind == FeatureKind::Numeric)
      os << f.name << ",numeric\n";
    else
      os << f.name << ",categorical," << f.cardinality << '\n';
  }
}

bool FeatureSchema::same_layout(const FeatureSchema& other) const {
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    const FeatureSpec& a = features_[i];
    const FeatureSpec& b = other.features_[i];
    if (a.name != b.name || a.kind != b.kind || a.cardinality != b.cardinality) return false;
  }
  return true;
}

// ---- grid -----------------------------------------------------------------

DiscretizationGrid::DiscretizationGrid(double w, std::size_t j) : width(w), intervals(j) {
  if (!(w > 0.0)) throw std::invalid_argument("grid: interval width must be positive");
  if (j < 1) throw std::invalid_argument("grid: need at least one interval");
}

std::size_t DiscretizationGrid::interval_of(double time) const {
  if (!(time >= 0.0)) throw std::out_of_range("time " + csv::format_double(time) + " is negative");
  const double pos = std::floor(time / width);
  if (pos >= static_cast<double>(intervals))
    throw std::out_of_range("time " + csv::format_double(time) + " is beyond the grid end " +
                            csv::format_double(width * static_cast<double>(intervals)));
  return static_cast<std::size_t>(pos) + 1;
}

// ---- discretisation -------------------------------------------------------

std::vector<SubjectObservations> discretize(std::span<const RawObservation> observations,
                                            const FeatureSchema& schema, const DiscretizationGrid& grid) {
  struct Pick {
    double time;
    double value;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, std::map<std::pair<std::size_t, std::size_t>, Pick>> per_subject;
  for (const RawObservation& o : observations) {
    const auto d = schema.index_of(o.feature);
    if (!d) throw std::invalid_argument("subject " + o.subject_id + ": unknown feature '" + o.feature + "'");
    std::size_t j = 0;
    try {
      j = grid.interval_of(o.time);
    } catch (const std::out_of_range& e) {
      throw std::out_of_range("subject " + o.subject_id + ": " + e.what());
    }
    auto [it, inserted] = per_subject.try_emplace(o.subject_id);
    if (inserted) order.push_back(o.subject_id);
    auto& cells = it->second;
    const auto key = std::make_pair(j, *d);
    auto cell = cells.find(key);
    if (cell == cells.end())
      cells.emplace(key, Pick{o.time, o.value});
    else if (o.time >= cell->second.time)
      cell->second = Pick{o.time, o.value};
  }
  std::vector<SubjectObservations> out;
  out.reserve(order.size());
  for (const std::string& id : order) {
    SubjectObservations s{id, {}};
    for (const auto& [key, pick] : per_subject[id]) s.cells.push_back({key.first, key.second, pick.value});
    out.push_back(std::move(s));
  }
  return out;
}

// ---- trajectories ---------------------------------------------------------

std::size_t SubjectTrajectory::max_landmark() const {
  if (outcome.interval < 2) return 0;
  return std::min(outcome.interval - 1, std::min(last_observed, length));
}

SubjectTrajectory SubjectTrajectory::truncated(std::size_t rows) const {
  if (rows > length) throw std::out_of_range("truncate: " + std::to_string(rows) + " rows > length " +
                                             std::to_string(length));
  SubjectTrajectory t = *this;
  t.length = rows;
  t.x.resize(rows * n_features);
  t.m.resize(rows * n_features);
  t.delta.resize(rows * n_features);
  t.last_observed = std::min(last_observed, rows);
  return t;
}

SubjectTrajectory build_trajectory(const SubjectObservations& obs, const FeatureSchema& schema,
                                   const DiscretizationGrid& grid, Outcome outcome) {
  if (obs.cells.empty()) throw std::invalid_argument("subject " + obs.subject_id + " has no observations");
  const std::size_t D = schema.size();
  std::size_t last = 0;
  for (const ObservedCell& c : obs.cells) {
    if (c.feature >= D) throw std::out_of_range("subject " + obs.subject_id + ": feature index out of range");
    if (c.interval < 1 || c.interval > grid.intervals)
      throw std::out_of_range("subject " + obs.subject_id + ": interval out of range");
    last = std::max(last, c.interval);
  }
  SubjectTrajectory t;
  t.subject_id = obs.subject_id;
  t.length = last;
  t.n_features = D;
  t.outcome = outcome;
  t.last_observed = last;
  t.x.assign(last * D, 0.0);
  t.m.assign(last * D, 1);
  t.delta.assign(last * D, 0.0);

  for (const ObservedCell& c : obs.cells) {
    const FeatureSpec& f = schema[c.feature];
    double v = c.value;
    if (f.kind == FeatureKind::Numeric) {
      v = (v - f.mean) / f.stddev;
    } else if (v < 0.0 || v >= static_cast<double>(f.cardinality) || v != std::floor(v)) {
      throw std::out_of_range("subject " + obs.subject_id + ": category " + csv::format_double(v) + " invalid for '" +
                              f.name + "'");
    }
    const std::size_t cell = (c.interval - 1) * D + c.feature;
    t.x[cell] = v;
    t.m[cell] = 0;
  }
  for (std::size_t d = 0; d < D; ++d) {
    std::size_t last_seen = 0;
    double carried = 0.0;
    for (std::size_t r = 0; r < last; ++r) {
      const std::size_t cell = r * D + d;
      const std::size_t j = r + 1;
      if (!t.m[cell]) {
        last_seen = j;
        carried = t.x[cell];
        continue;
      }
      t.x[cell] = carried;
      t.delta[cell] = static_cast<double>(last_seen ? j - last_seen : j - 1);
    }
  }
  return t;
}

// ---- landmarks ------------------------------------------------------------

LandmarkSample landmark_at(const SubjectTrajectory& traj, std::size_t landmark, std::size_t horizon,
                           std::size_t causes) {
  if (horizon < 1) throw std::invalid_argument("landmark: horizon must be >= 1");
  if (landmark < 1 || landmark > traj.max_landmark())
    throw std::out_of_range("subject " + traj.subject_id + ": landmark " + std::to_string(landmark) +
                            " outside [1, " + std::to_string(traj.max_landmark()) + "]");
  if (traj.outcome.cause < 0 || static_cast<std::size_t>(traj.outcome.cause) > causes)
    throw std::out_of_range("subject " + traj.subject_id + ": cause " + std::to_string(traj.outcome.cause) +
                            " exceeds K=" + std::to_string(causes));
  LandmarkSample s;
  s.history = traj.truncated(landmark);
  s.landmark = landmark;
  s.admissible = traj.max_landmark();
  s.horizon = horizon;
  s.causes = causes;
  s.labels.assign(horizon * causes, 0.0);
  s.loss_mask.assign(horizon, 0);
  const std::size_t T = traj.outcome.interval;
  for (std::size_t h = 1; h <= horizon; ++h) {
    const std::size_t j = landmark + h;
    if (j > T) break;
    s.loss_mask[h - 1] = 1;
    if (j == T && traj.outcome.cause > 0) s.labels[(h - 1) * causes + (traj.outcome.cause - 1)] = 1.0;
  }
  return s;
}

std::optional<LandmarkSample> sample_landmark(const SubjectTrajectory& traj, std::size_t horizon, std::size_t causes,
                                              Rng& rng) {
  const std::size_t hi = traj.max_landmark();
  if (hi < 1) return std::nullopt;
  const std::size_t tau = 1 + static_cast<std::size_t>(uniform_index(rng, hi));
  return landmark_at(traj, tau, horizon, causes);
}

// ---- batches --------------------------------------------------------------

Batch make_batch(std::span<const LandmarkSample> samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: no samples");
  Batch b;
  b.batch = samples.size();
  b.features = samples[0].history.n_features;
  b.horizon = samples[0].horizon;
  b.causes = samples[0].causes;
  for (const LandmarkSample& s : samples) {
    if (s.history.n_features != b.features) throw std::invalid_argument("make_batch: mixed feature schemas");
    if (s.horizon != b.horizon || s.causes != b.causes)
      throw std::invalid_argument("make_batch: mixed horizon or cause count");
    b.steps = std::max(b.steps, s.history.length);
  }
  const std::size_t B = b.batch, S = b.steps, D = b.features, H = b.horizon, K = b.causes;
  b.x = Array({B, S, D});
  b.delta = Array({B, S, D});
  b.missing = Mask({B, S, D}, true);
  b.valid.assign(B * S, 0);
  b.labels = Array({B, H, K});
  b.loss_mask = Array({B, H});
  for (std::size_t i = 0; i < B; ++i) {
    const LandmarkSample& s = samples[i];
    const SubjectTrajectory& h = s.history;
    b.subject_ids.push_back(h.subject_id);
    b.lengths.push_back(h.length);
    b.landmarks.push_back(s.landmark);
    for (std::size_t r = 0; r < h.length; ++r) {
      b.valid[i * S + r] = 1;
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t cell = (i * S + r) * D + d;
        b.x[cell] = h.x_at(r, d);
        b.delta[cell] = h.delta_at(r, d);
        b.missing.keep[cell] = h.m_at(r, d);
      }
    }
    std::copy(s.labels.begin(), s.labels.end(), b.labels.data() + i * H * K);
    for (std::size_t k = 0; k < H; ++k) b.loss_mask[i * H + k] = s.loss_mask[k];
  }
  return b;
}

// ---- cohort io ------------------------------------------------------------

namespace {

[[noreturn]] void fail_at(const std::string& path, std::size_t line, const std::string& msg) {
  throw std::runtime_error(path + ":" + std::to_string(line) + ": " + msg);
}

void expect_header(const std::vector<std::string>& lines, const std::string& path, std::string_view header) {
  if (lines.empty()) throw std::runtime_error(path + ": empty file");
  if (csv::trim(lines[0]) != header) fail_at(path, 1, "expected header '" + std::string(header) + "'");
}

}  // namespace

Cohort ingest_csv(const std::string& observations_path, const std::string& outcomes_path,
                  const std::string& schema_path, const DiscretizationGrid& grid) {
  return ingest_csv(observations_path, outcomes_path, FeatureSchema::read(schema_path), grid);
}

Cohort ingest_csv(const std::string& observations_path, const std::string& outcomes_path,
                  const FeatureSchema& schema, const DiscretizationGrid& grid) {
  Cohort cohort;
  cohort.schema = schema;
  cohort.grid = grid;

  const auto out_lines = csv::read_lines(outcomes_path);
  expect_header(out_lines, outcomes_path, "subject_id,event_time,event_cause");
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::size_t> outcome_line;
  for (std::size_t ln = 1; ln < out_lines.size(); ++ln) {
    if (csv::trim(out_lines[ln]).empty()) continue;
    const auto f = csv::split(out_lines[ln]);
    if (f.size() != 3) fail_at(outcomes_path, ln + 1, "expected 3 fields");
    SubjectRecord s;
    s.subject_id = std::string(csv::trim(f[0]));
    const auto t = csv::parse_double(f[1]);
    const auto c = csv::parse_int(f[2]);
    if (s.subject_id.empty() || !t || !c || *c < 0) fail_at(outcomes_path, ln + 1, "malformed row");
    s.event_time = *t;
    s.cause = static_cast<int>(*c);
    try {
      s.outcome = Outcome{grid.interval_of(*t), s.cause};
    } catch (const std::out_of_range& e) {
      fail_at(outcomes_path, ln + 1, "subject " + s.subject_id + ": " + e.what());
    }
    if (!index.emplace(s.subject_id, cohort.subjects.size()).second)
      fail_at(outcomes_path, ln + 1, "duplicate subject " + s.subject_id);
    cohort.causes = std::max(cohort.causes, static_cast<std::size_t>(s.cause));
    cohort.subjects.push_back(std::move(s));
    outcome_line.push_back(ln + 1);
  }
  if (cohort.subjects.empty()) throw std::runtime_error(outcomes_path + ": no outcome rows");

  const auto obs_lines = csv::read_lines(observations_path);
  expect_header(obs_lines, observations_path, "subject_id,time,feature,value");
  std::vector<std::vector<RawObservation>> raw(cohort.subjects.size());
  for (std::size_t ln = 1; ln < obs_lines.size(); ++ln) {
    if (csv::trim(obs_lines[ln]).empty()) continue;
    const auto f = csv::split(obs_lines[ln]);
    if (f.size() != 4) fail_at(observations_path, ln + 1, "expected 4 fields");
    RawObservation o;
    o.subject_id = std::string(csv::trim(f[0]));
    o.feature = std::string(csv::trim(f[2]));
    const auto t = csv::parse_double(f[1]);
    const auto v = csv::parse_double(f[3]);
    if (o.subject_id.empty() || !t || !v) fail_at(observations_path, ln + 1, "malformed row");
    o.time = *t;
    o.value = *v;
    const auto d = schema.index_of(o.feature);
    if (!d) fail_at(observations_path, ln + 1, "unknown feature '" + o.feature + "'");
    if (schema[*d].kind == FeatureKind::Categorical &&
        (o.value < 0.0 || o.value >= static_cast<double>(schema[*d].cardinality) || o.value != std::floor(o.value)))
      fail_at(observations_path, ln + 1, "category out of range for '" + o.feature + "'");
    const auto it = index.find(o.subject_id);
    if (it == index.end()) fail_at(observations_path, ln + 1, "no outcome row for subject " + o.subject_id);
    try {
      grid.interval_of(o.time);
    } catch (const std::out_of_range& e) {
      fail_at(observations_path, ln + 1, "subject " + o.subject_id + ": " + e.what());
    }
    raw[it->second].push_back(std::move(o));
  }
  for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
    if (raw[i].empty())
      fail_at(outcomes_path, outcome_line[i], "subject " + cohort.subjects[i].subject_id + " has no observations");
    auto resolved = discretize(raw[i], schema, grid);
    cohort.subjects[i].cells = std::move(resolved.front().cells);
  }
  return cohort;
}

void emit_csv(const Cohort& cohort, const std::string& observations_path, const std::string& outcomes_path,
              const std::string& schema_path) {
  {
    std::ofstream os(schema_path);
    if (!os) throw std::runtime_error("cannot write " + schema_path);
    cohort.schema.write(os);
  }
  {
    std::ofstream os(outcomes_path);
    if (!os) throw std::runtime_error("cannot write " + outcomes_path);
    os << "subject_id,event_time,event_cause\n";
    for (const SubjectRecord& s : cohort.subjects)
      os << s.subject_id << ',' << csv::format_double(s.event_time) << ',' << s.cause << '\n';
  }
  std::ofstream os(observations_path);
  if (!os) throw std::runtime_error("cannot write " + observations_path);
  os << "subject_id,time,feature,value\n";
  const double w = cohort.grid.width;
  for (const SubjectRecord& s : cohort.subjects)
    for (const ObservedCell& c : s.cells)
      os << s.subject_id << ',' << csv::format_double((static_cast<double>(c.interval) - 0.5) * w) << ','
         << cohort.schema[c.feature].name << ',' << csv::format_double(c.value) << '\n';
}

FeatureSchema fit_standardization(const Cohort& cohort, std::span<const std::size_t> subjects) {
  FeatureSchema schema = cohort.schema;
  const std::size_t D = schema.size();
  std::vector<double> sum(D, 0.0), sq(D, 0.0);
  std::vector<std::size_t> n(D, 0);
  for (std::size_t i : subjects) {
    for (const ObservedCell& c : cohort.subjects.at(i).cells) {
      sum[c.feature] += c.value;
      ++n[c.feature];
    }
  }
  for (std::size_t d = 0; d < D; ++d)
    if (n[d]) sum[d] /= static_cast<double>(n[d]);
  for (std::size_t i : subjects)
    for (const ObservedCell& c : cohort.subjects[i].cells) sq[c.feature] += (c.value - sum[c.feature]) * (c.value - sum[c.feature]);
  for (std::size_t d = 0; d < D; ++d) {
    if (schema[d].kind != FeatureKind::Numeric) continue;
    schema[d].mean = n[d] ? sum[d] : 0.0;
    const double sd = n[d] > 1 ? std::sqrt(sq[d] / static_cast<double>(n[d] - 1)) : 0.0;
    // Constant or unseen features keep unit scale.
    schema[d].stddev = sd > 1e-12 ? sd : 1.0;
  }
  return schema;
}

std::vector<SubjectTrajectory> build_trajectories(const Cohort& cohort, const FeatureSchema& schema,
                                                  std::span<const std::size_t> subjects) {
  std::vector<SubjectTrajectory> out;
  out.reserve(subjects.size());
  for (std::size_t i : subjects) {
    const SubjectRecord& s = cohort.subjects.at(i);
    out.push_back(build_trajectory(SubjectObservations{s.subject_id, s.cells}, schema, cohort.grid, s.outcome));
  }
  return out;
}

}  // namespace lsurv
