#include "lsurv/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "lsurv/csv.hpp"

namespace lsurv {

namespace fs = std::filesystem;

namespace {

int log_level() {
  const char* v = std::getenv("LSURV_LOG");
  if (!v) return 1;
  const std::string s(v);
  if (s == "quiet" || s == "0") return 0;
  if (s == "debug" || s == "2") return 2;
  return 1;
}

void info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[lsurv] " << msg << '\n';
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw std::invalid_argument("missing required option: " + what);
  if (!fs::exists(path)) throw std::invalid_argument(what + " not found: " + path);
}

Cohort load_cohort(const RunConfig& c) {
  require_file(c.observations, "--observations");
  require_file(c.outcomes, "--outcomes");
  require_file(c.schema, "--schema");
  return ingest_csv(c.observations, c.outcomes, c.schema, DiscretizationGrid(c.width, c.intervals));
}

std::vector<std::size_t> all_subjects(const Cohort& cohort) {
  std::vector<std::size_t> v(cohort.subjects.size());
  std::iota(v.begin(), v.end(), 0);
  return v;
}

EpochCallback epoch_logger(const std::string& tag) {
  return [tag](const EpochLog& e) {
    info(tag + "epoch " + std::to_string(e.epoch) + " train " + csv::format_double(e.train_loss) + " val " +
         csv::format_double(e.val_loss));
  };
}

void check_conservation(const PredictionRow& r) {
  const HazardGrid& g = r.grid;
  const std::size_t H = g.horizon(), K = g.causes();
  double total = g.surv[H - 1];
  for (std::size_t k = 0; k < K; ++k) total += g.F[(H - 1) * K + k];
  if (std::abs(total - 1.0) > 1e-9)
    throw std::runtime_error("prediction for " + r.subject_id + " violates sum_k F + S = 1 (got " +
                             csv::format_double(total) + ")");
}

}  // namespace

SynthConfig RunConfig::synth_config() const {
  SynthConfig s;
  if (preset == "default") {
    s = default_synth_config(features, causes, driver_mult);
    for (SynthFeature& f : s.features)
      if (f.kind == FeatureKind::Numeric) f.missing_rate = missing_rate;
  } else if (preset == "staleness") {
    s = staleness_synth_config(missing_rate, stale_mult);
  } else {
    throw std::invalid_argument("unknown synth preset '" + preset + "'");
  }
  s.subjects = subjects;
  s.intervals = intervals;
  s.censor_hazard = censor_hazard;
  s.seed = train.seed;
  return s;
}

EvalOptions RunConfig::eval_options() const {
  EvalOptions o;
  o.horizon = eval_horizon;
  o.calibration_time = calibration_time;
  o.bins = bins;
  if (ctd == "earlier") o.ctd = CtdConvention::EarlierTime;
  else if (ctd == "own") o.ctd = CtdConvention::OwnTimes;
  else throw std::invalid_argument("unknown C-index convention '" + ctd + "'");
  return o;
}

void write_predictions(std::ostream& os, const std::vector<PredictionRow>& rows) {
  os << "subject_id,interval_offset,cause,hazard,cif,survival\n";
  for (const PredictionRow& r : rows) {
    const HazardGrid& g = r.grid;
    const std::size_t H = g.horizon(), K = g.causes();
    for (std::size_t j = 0; j < H; ++j)
      for (std::size_t k = 0; k < K; ++k)
        os << r.subject_id << ',' << j + 1 << ',' << k + 1 << ',' << csv::format_double(g.lambda[j * K + k]) << ','
           << csv::format_double(g.F[j * K + k]) << ',' << csv::format_double(g.surv[j]) << '\n';
  }
}

std::vector<PredictionRow> read_predictions(const std::string& path) {
  const auto lines = csv::read_lines(path);
  if (lines.empty()) throw std::runtime_error(path + ": empty prediction file");
  if (csv::trim(lines[0]) != "subject_id,interval_offset,cause,hazard,cif,survival")
    throw std::runtime_error(path + ":1: unexpected header");
  struct Cell {
    std::size_t j;
    std::size_t k;
    double hazard, cif, surv;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<Cell>> cells;
  std::size_t H = 0, K = 0;
  for (std::size_t n = 1; n < lines.size(); ++n) {
    if (csv::trim(lines[n]).empty()) continue;
    const auto f = csv::split(lines[n]);
    const auto where = path + ":" + std::to_string(n + 1);
    if (f.size() != 6) throw std::runtime_error(where + ": expected 6 fields");
    const auto j = csv::parse_int(f[1]), k = csv::parse_int(f[2]);
    const auto h = csv::parse_double(f[3]), c = csv::parse_double(f[4]), s = csv::parse_double(f[5]);
    if (!j || !k || !h || !c || !s || *j < 1 || *k < 1) throw std::runtime_error(where + ": malformed row");
    const std::string id(csv::trim(f[0]));
    auto [it, fresh] = cells.try_emplace(id);
    if (fresh) order.push_back(id);
    it->second.push_back({static_cast<std::size_t>(*j), static_cast<std::size_t>(*k), *h, *c, *s});
    H = std::max<std::size_t>(H, *j);
    K = std::max<std::size_t>(K, *k);
  }
  if (order.empty()) throw std::runtime_error(path + ": no prediction rows");
  std::vector<PredictionRow> rows;
  for (const std::string& id : order) {
    const auto& cs = cells[id];
    if (cs.size() != H * K) throw std::runtime_error(path + ": subject " + id + " does not have H x K rows");
    PredictionRow r;
    r.subject_id = id;
    r.grid.lambda = Array({H, K});
    r.grid.F = Array({H, K});
    r.grid.surv = Array({H});
    for (const Cell& c : cs) {
      r.grid.lambda[(c.j - 1) * K + c.k - 1] = c.hazard;
      r.grid.F[(c.j - 1) * K + c.k - 1] = c.cif;
      r.grid.surv[c.j - 1] = c.surv;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_outcomes(std::ostream& os, const std::vector<LabeledOutcome>& rows) {
  os << "subject_id,event_interval,event_cause\n";
  for (const LabeledOutcome& r : rows) os << r.subject_id << ',' << r.outcome.interval << ',' << r.outcome.cause << '\n';
}

std::vector<LabeledOutcome> read_outcomes(const std::string& path, double width) {
  const auto lines = csv::read_lines(path);
  if (lines.empty()) throw std::runtime_error(path + ": empty outcome file");
  const std::string header(csv::trim(lines[0]));
  bool by_time = false;
  if (header == "subject_id,event_time,event_cause") by_time = true;
  else if (header != "subject_id,event_interval,event_cause") throw std::runtime_error(path + ":1: unexpected header");
  std::vector<LabeledOutcome> out;
  for (std::size_t n = 1; n < lines.size(); ++n) {
    if (csv::trim(lines[n]).empty()) continue;
    const auto f = csv::split(lines[n]);
    const auto where = path + ":" + std::to_string(n + 1);
    if (f.size() != 3) throw std::runtime_error(where + ": expected 3 fields");
    const auto t = csv::parse_double(f[1]);
    const auto e = csv::parse_int(f[2]);
    if (!t || !e || *t < 0 || *e < 0) throw std::runtime_error(where + ": malformed row");
    LabeledOutcome o;
    o.subject_id = std::string(csv::trim(f[0]));
    o.outcome.cause = static_cast<int>(*e);
    o.outcome.interval = by_time ? static_cast<std::size_t>(std::floor(*t / width)) + 1 : static_cast<std::size_t>(*t);
    if (o.outcome.interval < 1) throw std::runtime_error(where + ": event interval must be >= 1");
    out.push_back(std::move(o));
  }
  return out;
}

LandmarkPredictions predict_cohort(const SurvivalModel& model, const Cohort& cohort,
                                   const std::vector<std::size_t>& subjects, const std::string& landmark_policy,
                                   std::uint64_t seed) {
  const ModelConfig& mc = model.config();
  const auto trajs = build_trajectories(cohort, model.schema(), subjects);
  std::size_t fixed = 0;
  if (landmark_policy.rfind("fixed:", 0) == 0) {
    const auto v = csv::parse_int(landmark_policy.substr(6));
    if (!v || *v < 1) throw std::invalid_argument("landmark policy fixed:<k> needs k >= 1");
    fixed = static_cast<std::size_t>(*v);
  } else if (landmark_policy != "random") {
    throw std::invalid_argument("unknown landmark policy '" + landmark_policy + "'");
  }
  std::vector<LandmarkSample> samples;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const SubjectTrajectory& t = trajs[i];
    if (fixed) {
      if (t.max_landmark() >= fixed) samples.push_back(landmark_at(t, fixed, mc.horizon, mc.causes));
    } else {
      Rng rng = derive_rng(seed, 0x9e3779b9ULL + subjects[i]);
      if (auto s = sample_landmark(t, mc.horizon, mc.causes, rng)) samples.push_back(std::move(*s));
    }
  }
  LandmarkPredictions out;
  const std::size_t chunk = 256;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t n = std::min(chunk, samples.size() - start);
    const Batch batch = make_batch(std::span<const LandmarkSample>(samples).subspan(start, n));
    auto grids = model.predict(batch);
    for (std::size_t b = 0; b < n; ++b) {
      const LandmarkSample& s = samples[start + b];
      PredictionRow row{s.history.subject_id, std::move(grids[b])};
      check_conservation(row);
      out.rows.push_back(std::move(row));
      const Outcome& o = s.history.outcome;
      out.outcomes.push_back({s.history.subject_id, Outcome{o.interval - s.landmark, o.cause}});
    }
  }
  return out;
}

EvalReport evaluate_predictions(const std::vector<PredictionRow>& rows, const std::vector<LabeledOutcome>& outcomes,
                                const EvalOptions& opts) {
  if (rows.empty()) throw std::invalid_argument("evaluate: no predictions");
  std::unordered_map<std::string, Outcome> by_id;
  for (const LabeledOutcome& o : outcomes) by_id[o.subject_id] = o.outcome;
  std::vector<Array> preds;
  std::vector<Outcome> outs;
  for (const PredictionRow& r : rows) {
    check_conservation(r);
    auto it = by_id.find(r.subject_id);
    if (it == by_id.end()) throw std::runtime_error("evaluate: no outcome for subject " + r.subject_id);
    preds.push_back(r.grid.F);
    outs.push_back(it->second);
  }
  return evaluate(preds, outs, opts);
}

void split_indices(std::size_t n, double val_fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& val) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw std::invalid_argument("validation fraction must be in [0,1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = derive_rng(seed, 0x5b1);
  shuffle(idx, rng);
  const std::size_t nv = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nv));
  train.assign(idx.begin() + static_cast<std::ptrdiff_t>(nv), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
}

int cmd_synth(const RunConfig& config) {
  const SynthConfig sc = config.synth_config();
  const SynthOutput out = generate(sc);
  const fs::path dir(config.out_dir);
  fs::create_directories(dir);
  emit_csv(out.cohort, (dir / "observations.csv").string(), (dir / "outcomes.csv").string(),
           (dir / "schema.txt").string());
  {
    auto os = open_out(dir / "ground_truth.csv");
    write_ground_truth(os, out.cohort, out.truth);
  }
  std::vector<PredictionRow> rows;
  std::vector<LabeledOutcome> outcomes;
  for (std::size_t i = 0; i < out.cohort.subjects.size(); ++i) {
    const SubjectRecord& s = out.cohort.subjects[i];
    rows.push_back({s.subject_id, HazardGrid::from_hazards(out.truth.subjects[i].hazards)});
    outcomes.push_back({s.subject_id, s.outcome});
  }
  {
    auto os = open_out(dir / "truth_predictions.csv");
    write_predictions(os, rows);
  }
  {
    auto os = open_out(dir / "truth_outcomes.csv");
    write_outcomes(os, outcomes);
  }
  info("synth: " + std::to_string(sc.subjects) + " subjects written to " + dir.string());
  return 0;
}

int cmd_train(const RunConfig& config) {
  const Cohort cohort = load_cohort(config);
  std::vector<std::size_t> tr, va;
  split_indices(cohort.subjects.size(), config.val_fraction, config.train.seed, tr, va);
  info("train: " + std::to_string(tr.size()) + " training / " + std::to_string(va.size()) + " validation subjects");
  TrainResult r = train(cohort, tr, va, config.train, epoch_logger(""));
  info("train: " + std::to_string(r.model.parameters().size()) + " tensors, " +
       std::to_string(r.model.parameters().scalar_count()) + " scalars, best epoch " + std::to_string(r.best_epoch));
  const fs::path dir(config.out_dir);
  fs::create_directories(dir);
  r.model.save((dir / "checkpoint.txt").string());
  auto os = open_out(dir / "train_log.csv");
  write_train_log(os, r.log);
  return 0;
}

int cmd_predict(const RunConfig& config) {
  require_file(config.checkpoint, "--checkpoint");
  const SurvivalModel model = SurvivalModel::load(config.checkpoint);
  require_file(config.observations, "--observations");
  require_file(config.outcomes, "--outcomes");
  const Cohort cohort = ingest_csv(config.observations, config.outcomes, model.schema(), model.grid());
  const auto pred = predict_cohort(model, cohort, all_subjects(cohort), config.landmark, config.train.seed);
  const fs::path dir(config.out_dir);
  fs::create_directories(dir);
  {
    auto os = open_out(dir / "predictions.csv");
    write_predictions(os, pred.rows);
  }
  auto os = open_out(dir / "landmark_outcomes.csv");
  write_outcomes(os, pred.outcomes);
  info("predict: " + std::to_string(pred.rows.size()) + " subjects with an admissible landmark");
  return 0;
}

int cmd_evaluate(const RunConfig& config) {
  require_file(config.predictions, "--predictions");
  require_file(config.outcomes, "--outcomes");
  const auto rows = read_predictions(config.predictions);
  const auto outcomes = read_outcomes(config.outcomes, config.width);
  const EvalReport report = evaluate_predictions(rows, outcomes, config.eval_options());
  write_report(config.out_dir, report);
  for (const CauseReport& c : report.causes)
    info("evaluate: cause " + std::to_string(c.cause) + " IBS " +
         (c.ibs.value ? csv::format_double(*c.ibs.value) : "NA") + " C_td " +
         (c.ctd.value ? csv::format_double(*c.ctd.value) : "NA"));
  return 0;
}

int cmd_crossval(const RunConfig& config) {
  if (config.folds < 2) throw std::invalid_argument("crossval: need at least two folds");
  const Cohort cohort = load_cohort(config);
  std::vector<std::size_t> pool, test;
  split_indices(cohort.subjects.size(), config.test_fraction, config.train.seed, pool, test);
  if (test.empty()) throw std::invalid_argument("crossval: empty held-out test set");
  Rng rng = derive_rng(config.train.seed, 0xf01d);
  shuffle(pool, rng);
  std::vector<std::vector<std::size_t>> folds(config.folds);
  for (std::size_t i = 0; i < pool.size(); ++i) folds[i % config.folds].push_back(pool[i]);

  const fs::path dir(config.out_dir);
  fs::create_directories(dir);
  auto os = open_out(dir / "crossval_metrics.csv");
  os << "fold,cause,metric,value\n";
  std::map<std::pair<int, std::string>, std::vector<double>> values;
  const EvalOptions opts = config.eval_options();
  for (std::size_t f = 0; f < config.folds; ++f) {
    std::vector<std::size_t> tr, va = folds[f];
    for (std::size_t g = 0; g < config.folds; ++g)
      if (g != f) tr.insert(tr.end(), folds[g].begin(), folds[g].end());
    std::sort(tr.begin(), tr.end());
    std::sort(va.begin(), va.end());
    info("crossval: fold " + std::to_string(f + 1) + " of " + std::to_string(config.folds));
    TrainConfig tc = config.train;
    const TrainResult r = train(cohort, tr, va, tc, epoch_logger("fold " + std::to_string(f + 1) + ": "));
    {
      auto log = open_out(dir / ("train_log_fold" + std::to_string(f + 1) + ".csv"));
      write_train_log(log, r.log);
    }
    const auto pred = predict_cohort(r.model, cohort, test, config.landmark, config.train.seed);
    const EvalReport rep = evaluate_predictions(pred.rows, pred.outcomes, opts);
    for (const CauseReport& c : rep.causes) {
      const std::pair<const char*, std::optional<double>> ms[] = {{"ibs", c.ibs.value}, {"ctd", c.ctd.value}};
      for (const auto& [name, v] : ms) {
        os << f + 1 << ',' << c.cause << ',' << name << ',' << (v ? csv::format_double(*v) : "NA") << '\n';
        if (v) values[{c.cause, name}].push_back(*v);
      }
    }
  }
  auto sum = open_out(dir / "crossval_summary.csv");
  sum << "cause,metric,mean,sd,folds\n";
  for (const auto& [key, v] : values) {
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    sum << key.first << ',' << key.second << ',' << csv::format_double(mean) << ',' << csv::format_double(sd) << ','
        << v.size() << '\n';
  }
  return 0;
}

}  // namespace lsurv
