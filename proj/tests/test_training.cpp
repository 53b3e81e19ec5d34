#include <cmath>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "lsurv/synthgen.hpp"
#include "lsurv/training.hpp"
#include "oracles.hpp"

using namespace lsurv;

namespace {

std::vector<Outcome> outcomes_with(std::size_t n, std::size_t n1, std::size_t n2) {
  std::vector<Outcome> o(n, Outcome{5, 0});
  for (std::size_t i = 0; i < n1; ++i) o[i].cause = 1;
  for (std::size_t i = n1; i < n1 + n2; ++i) o[i].cause = 2;
  return o;
}

double loss_of(const Array& lambda, const Array& y, const Array& mask, const std::vector<double>& w) {
  Tape t;
  return nll_loss(t.constant(lambda), y, mask, w).value()[0];
}

// Small cohort with three features and at least three observed intervals.
Cohort tiny_cohort() {
  SynthConfig c = default_synth_config(3, 2, 3.0);
  c.subjects = 40;
  c.base_hazard = {0.03, 0.03};
  c.censor_hazard = 0.0;
  return generate(c).cohort;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

TEST_CASE("class weight examples") {
  const auto w = class_weights(outcomes_with(1000, 500, 50), 2);
  CHECK(w[0] == 1.0);
  CHECK(w[1] == doctest::Approx(std::log(21.0) / std::log(3.0)).epsilon(1e-14));
  CHECK(w[1] == doctest::Approx(2.77).epsilon(0.002));
  const auto even = class_weights(outcomes_with(100, 30, 30), 2);
  CHECK(even == std::vector<double>{1.0, 1.0});
  CHECK(class_weights(outcomes_with(10, 3, 0), 1) == std::vector<double>{1.0});
  CHECK_THROWS_WITH(class_weights(outcomes_with(10, 3, 0), 2), doctest::Contains("cause 2"));
}

TEST_CASE("likelihood examples") {
  const std::vector<double> w1{1.0};
  CHECK(loss_of(Array({1, 1, 1}, {0.5}), Array({1, 1, 1}, {1.0}), Array({1, 1}, {1.0}), w1) ==
        doctest::Approx(0.6931).epsilon(1e-4));
  CHECK(loss_of(Array({1, 1, 1}, {0.5}), Array({1, 1, 1}, {0.0}), Array({1, 1}, {1.0}), w1) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(loss_of(Array({1, 1, 1}, {1e-14}), Array({1, 1, 1}, {0.0}), Array({1, 1}, {1.0}), w1) < 1e-12);
  // event terms carry the cause weight, survival terms do not
  CHECK(loss_of(Array({1, 1, 1}, {0.5}), Array({1, 1, 1}, {1.0}), Array({1, 1}, {1.0}), {3.0}) ==
        doctest::Approx(3 * std::log(2.0)));
  CHECK(loss_of(Array({1, 1, 1}, {0.5}), Array({1, 1, 1}, {0.0}), Array({1, 1}, {1.0}), {3.0}) ==
        doctest::Approx(std::log(2.0)));
  Tape t;
  CHECK_THROWS(nll_loss(t.constant(Array({1, 1, 1}, {NAN})), Array({1, 1, 1}), Array({1, 1}, {1.0}), w1));
}

TEST_CASE("property: loss is non-negative and positive whenever an event is labelled") {
  Rng rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t B = 1 + uniform_index(rng, 4), H = 1 + uniform_index(rng, 6), K = 1 + uniform_index(rng, 3);
    const Array lambda = hazards(oracle::uniform({B, H, K}, -6, 2, rng));
    Array y({B, H, K}), mask({B, H});
    bool any_event = false;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t last = uniform_index(rng, H);
      for (std::size_t h = 0; h <= last; ++h) mask[b * H + h] = 1;
      if (bernoulli(rng, 0.5)) {
        y[(b * H + last) * K + uniform_index(rng, K)] = 1;
        any_event = true;
      }
    }
    std::vector<double> w(K);
    for (double& v : w) v = 1 + uniform01(rng);
    const double loss = loss_of(lambda, y, mask, w);
    CHECK(loss >= 0.0);
    if (any_event) CHECK(loss > 0.0);
  }
}

TEST_CASE("masked intervals carry no gradient") {
  Rng rng(2);
  Parameter lam("lambda", hazards(oracle::uniform({2, 4, 2}, -3, 0, rng)));
  Array y({2, 4, 2}), mask({2, 4});
  mask[0] = mask[1] = 1;
  y[1 * 2 + 0] = 1;
  mask[4] = mask[5] = mask[6] = 1;
  Tape t;
  t.backward(nll_loss(t.leaf(lam), y, mask, {1.0, 1.5}));
  for (std::size_t r : {2, 3, 7})
    for (std::size_t k = 0; k < 2; ++k) CHECK(lam.grad[r * 2 + k] == 0.0);
  CHECK(lam.grad[0] != 0.0);

  const double before = loss_of(lam.value, y, mask, {1.0, 1.5});
  Array perturbed = lam.value;
  perturbed[2 * 2] = 0.3;
  perturbed[7 * 2 + 1] = 0.01;
  CHECK(loss_of(perturbed, y, mask, {1.0, 1.5}) == before);
}

TEST_CASE("end-to-end loss gradient through heads, encoder and embedding") {
  const Cohort cohort = tiny_cohort();
  ModelConfig mc;
  mc.d_emb = 8;
  mc.heads = 2;
  mc.horizon = 4;
  mc.causes = 2;
  SurvivalModel model(mc, cohort.schema, cohort.grid);
  const auto traj = build_trajectories(cohort, cohort.schema, iota_n(cohort.subjects.size()));
  std::vector<LandmarkSample> samples;
  for (const SubjectTrajectory& tr : traj) {
    if (tr.max_landmark() >= 3 && samples.empty()) samples.push_back(landmark_at(tr, 3, 4, 2));
    else if (tr.max_landmark() >= 2 && samples.size() == 1) samples.push_back(landmark_at(tr, 2, 4, 2));
  }
  REQUIRE(samples.size() == 2);
  const Batch batch = make_batch(samples);
  CHECK(batch.steps == 3);
  for (Parameter* p : model.parameters().all())
    if (p->name.ends_with("raw_decay")) p->value[0] = 0.3;
  const auto params = model.parameters().all();
  const auto r = grad_check(
      [&](Tape& t) { return nll_loss(model.forward(t, batch), batch.labels, batch.loss_mask, {1.0, 1.3}); }, params);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("AdamW examples") {
  Parameter p("p", Array({3}, {1.0, -2.0, 0.5}));
  AdamW decay_only({&p}, AdamWConfig{0.1, 0.01});
  decay_only.step();
  CHECK(p.value[0] == doctest::Approx(1.0 * (1 - 0.1 * 0.01)).epsilon(1e-15));
  CHECK(p.value[1] == doctest::Approx(-2.0 * (1 - 0.1 * 0.01)).epsilon(1e-15));

  Parameter q("q", Array({2}, {0.3, 0.7}));
  AdamW still({&q}, AdamWConfig{0.1, 0.0});
  for (int i = 0; i < 5; ++i) still.step();
  CHECK(q.value == Array({2}, {0.3, 0.7}));
  CHECK(still.steps() == 5);

  Parameter r("r", Array({2}, {0.0, 0.0}));
  AdamW constant({&r}, AdamWConfig{1e-3, 0.0});
  for (int i = 0; i < 200; ++i) {
    r.grad = Array({2}, {2.5, -0.01});
    const Array before = r.value;
    constant.step();
    CHECK(before[0] - r.value[0] == doctest::Approx(1e-3).epsilon(1e-5));
    CHECK(r.value[1] - before[1] == doctest::Approx(1e-3).epsilon(1e-3));
  }
  CHECK(constant.first_moment(0).shape() == Shape{2});
}

TEST_CASE("training smoke run: finite, decreasing loss and seed determinism") {
  SynthConfig sc = default_synth_config();
  sc.subjects = 500;
  const Cohort cohort = generate(sc).cohort;
  std::vector<std::size_t> train_idx(iota_n(400)), val_idx;
  for (std::size_t i = 400; i < 500; ++i) val_idx.push_back(i);
  TrainConfig tc;
  tc.epochs = 5;
  tc.lr = 1e-3;
  tc.patience = 0;
  const TrainResult a = train(cohort, train_idx, val_idx, tc);
  REQUIRE(a.log.size() == 6);
  for (const EpochLog& e : a.log) {
    CHECK(std::isfinite(e.train_loss));
    CHECK(std::isfinite(e.val_loss));
  }
  CHECK(a.log[5].train_loss < a.log[1].train_loss);
  CHECK(a.log[5].train_loss < 0.7 * a.log[0].train_loss);

  const TrainResult b = train(cohort, train_idx, val_idx, tc);
  CHECK(a.model.snapshot() == b.model.snapshot());
  std::ostringstream sa, sb;
  a.model.save(sa);
  b.model.save(sb);
  CHECK(sa.str() == sb.str());

  std::ostringstream log;
  write_train_log(log, a.log);
  CHECK(log.str().rfind("epoch,train_loss,val_loss,lr,seconds\n0,", 0) == 0);
}

TEST_CASE("landmark weighting scales each sample by its admissible range") {
  const Cohort cohort = tiny_cohort();
  const auto traj = build_trajectories(cohort, cohort.schema, iota_n(cohort.subjects.size()));
  std::vector<LandmarkSample> s;
  Rng rng(3);
  for (const SubjectTrajectory& tr : traj)
    if (auto x = sample_landmark(tr, 4, 2, rng)) s.push_back(*x);
  const auto w = landmark_weights(s);
  double mean = 0;
  for (double v : w) mean += v;
  CHECK(mean / w.size() == doctest::Approx(1.0));
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(w[i] * s[0].admissible == doctest::Approx(w[0] * s[i].admissible));
}

TEST_CASE("ablation switches change the parameter inventory") {
  const Cohort cohort = tiny_cohort();
  auto count = [&](bool no_fa, bool no_cet) {
    TrainConfig tc;
    tc.no_fa = no_fa;
    tc.no_cet = no_cet;
    SurvivalModel m(tc.model_config(2), cohort.schema, cohort.grid);
    return std::pair(m.parameters().size(), m.parameters().scalar_count());
  };
  const auto full = count(false, false), no_cet = count(false, true), no_fa = count(true, false);
  CHECK(no_cet.first == full.first - 3);
  CHECK(no_cet.second == full.second - 3);
  CHECK(no_fa.first != full.first);
  CHECK(no_fa.second != full.second);
}

TEST_CASE("training configuration validation") {
  TrainConfig tc;
  tc.validate();
  tc.blocks = 7;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc.allow_out_of_range = true;
  tc.validate();
  tc = TrainConfig{};
  tc.d_emb = 24;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.heads = 3;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.lr = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}
