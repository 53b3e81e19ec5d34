#include "lsurv/training.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "lsurv/csv.hpp"
#include "lsurv/hazardheads.hpp"

namespace lsurv {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (horizon < 1) throw std::invalid_argument("train: horizon must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: weight decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("train: betas must be in [0,1)");
  if (blocks < 1) throw std::invalid_argument("train: need at least one block");
  if (heads < 1 || d_emb % heads != 0) throw std::invalid_argument("train: d_emb must be divisible by heads");
  if (!allow_out_of_range) {
    if (blocks > 6) throw std::invalid_argument("train: blocks must be in 1..6");
    if (d_emb != 16 && d_emb != 32 && d_emb != 64) throw std::invalid_argument("train: d_emb must be 16, 32 or 64");
    if (heads != 2 && heads != 4 && heads != 8) throw std::invalid_argument("train: heads must be 2, 4 or 8");
  }
}

ModelConfig TrainConfig::model_config(std::size_t causes) const {
  ModelConfig m;
  m.d_emb = d_emb;
  m.heads = heads;
  m.blocks = blocks;
  m.horizon = horizon;
  m.causes = causes;
  m.no_fa = no_fa;
  m.no_cet = no_cet;
  m.causal = causal;
  m.shared_query = shared_query;
  m.seed = seed;
  return m;
}

std::vector<double> class_weights(std::span<const Outcome> outcomes, std::size_t causes) {
  if (causes < 1) throw std::invalid_argument("class_weights: need at least one cause");
  std::vector<std::size_t> count(causes, 0);
  for (const Outcome& o : outcomes)
    if (o.cause > 0 && static_cast<std::size_t>(o.cause) <= causes) ++count[o.cause - 1];
  const double n = static_cast<double>(outcomes.size());
  std::vector<double> w(causes);
  for (std::size_t k = 0; k < causes; ++k) {
    if (count[k] == 0) throw std::invalid_argument("class_weights: cause " + std::to_string(k + 1) + " has no events");
    w[k] = std::log1p(n / static_cast<double>(count[k]));
  }
  double lo = w[0];
  for (double v : w) lo = std::min(lo, v);
  for (double& v : w) v /= lo;
  return w;
}

Var nll_loss(Var lambda, const Array& labels, const Array& mask, const std::vector<double>& weights) {
  const Shape& s = lambda.shape();
  if (s.size() != 3) throw std::invalid_argument("nll_loss: hazards must be [B x H x K]");
  const std::size_t B = s[0], H = s[1], K = s[2];
  if (labels.shape() != s) throw std::invalid_argument("nll_loss: labels " + shape_str(labels.shape()));
  if (mask.shape() != Shape{B, H}) throw std::invalid_argument("nll_loss: mask " + shape_str(mask.shape()));
  if (weights.size() != K) throw std::invalid_argument("nll_loss: need one weight per cause");
  if (!lambda.value().all_finite()) throw std::invalid_argument("nll_loss: non-finite hazards");

  Array event_coef(s), surv_coef({B, H});
  for (std::size_t r = 0; r < B * H; ++r) {
    double ysum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      event_coef[r * K + k] = mask[r] * weights[k] * labels[r * K + k];
      ysum += labels[r * K + k];
    }
    surv_coef[r] = mask[r] * (1.0 - ysum);
  }
  Var log_lam = log(clamp(lambda, kHazardFloor, 1.0 - kHazardFloor));
  Var log_surv = log(clamp(add_scalar(scale(sum_lastdim(lambda), -1.0), 1.0), kHazardFloor, 1.0 - kHazardFloor));
  Var ll = add(sum(mul_const(log_lam, event_coef)), sum(mul_const(log_surv, surv_coef)));
  return scale(ll, -1.0);
}

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void AdamW::step() {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = 1.0 - config_.lr * config_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    Array& m = m_[i];
    Array& v = v_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      p.value[j] = p.value[j] * decay - config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

void write_train_log(std::ostream& os, const std::vector<EpochLog>& log) {
  os << "epoch,train_loss,val_loss,lr,seconds\n";
  for (const EpochLog& e : log)
    os << e.epoch << ',' << csv::format_double(e.train_loss) << ',' << csv::format_double(e.val_loss) << ','
       << csv::format_double(e.lr) << ',' << csv::format_double(e.seconds) << '\n';
}

namespace {

std::vector<LandmarkSample> draw_landmarks(const std::vector<SubjectTrajectory>& trajs, std::size_t horizon,
                                           std::size_t causes, std::uint64_t seed, std::uint64_t stream) {
  std::vector<LandmarkSample> out;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    Rng rng = derive_rng(seed, stream * 1000003ULL + i);
    if (auto s = sample_landmark(trajs[i], horizon, causes, rng)) out.push_back(std::move(*s));
  }
  return out;
}

Batch weighted_batch(std::span<const LandmarkSample> samples, std::span<const double> sample_weights) {
  Batch batch = make_batch(samples);
  if (!sample_weights.empty())
    for (std::size_t b = 0; b < batch.batch; ++b)
      for (std::size_t h = 0; h < batch.horizon; ++h) batch.loss_mask[b * batch.horizon + h] *= sample_weights[b];
  return batch;
}

}  // namespace

std::vector<double> landmark_weights(std::span<const LandmarkSample> samples) {
  double mean = 0.0;
  for (const LandmarkSample& s : samples) mean += static_cast<double>(s.admissible);
  mean /= static_cast<double>(samples.size());
  std::vector<double> w;
  w.reserve(samples.size());
  for (const LandmarkSample& s : samples) w.push_back(static_cast<double>(s.admissible) / mean);
  return w;
}

double evaluate_loss(const SurvivalModel& model, std::span<const LandmarkSample> samples,
                     const std::vector<double>& weights, std::size_t batch_size, bool weight_landmarks) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::vector<double> sw = weight_landmarks ? landmark_weights(samples) : std::vector<double>{};
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, samples.size() - i);
    Tape tape;
    const Batch batch = weighted_batch(samples.subspan(i, n), sw.empty() ? std::span<const double>{}
                                                                          : std::span<const double>(sw).subspan(i, n));
    total += nll_loss(model.forward(tape, batch), batch.labels, batch.loss_mask, weights).value()[0];
  }
  return total / static_cast<double>(samples.size());
}

TrainResult train(const Cohort& cohort, std::span<const std::size_t> train_subjects,
                  std::span<const std::size_t> val_subjects, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (train_subjects.empty()) throw std::invalid_argument("train: no training subjects");
  const std::size_t K = cohort.causes;
  const FeatureSchema schema = fit_standardization(cohort, train_subjects);
  const auto train_traj = build_trajectories(cohort, schema, train_subjects);
  const auto val_traj = build_trajectories(cohort, schema, val_subjects);

  std::vector<Outcome> outcomes;
  for (std::size_t i : train_subjects) outcomes.push_back(cohort.subjects.at(i).outcome);
  TrainResult result{SurvivalModel(config.model_config(K), schema, cohort.grid), {}, 0, class_weights(outcomes, K)};
  SurvivalModel& model = result.model;
  const auto& w = result.weights;

  const auto val_samples = draw_landmarks(val_traj, config.horizon, K, config.seed, 1);
  const auto fixed_train = draw_landmarks(train_traj, config.horizon, K, config.seed, 2);
  if (fixed_train.empty()) throw std::invalid_argument("train: no training subject has an admissible landmark");

  AdamWConfig ac{config.lr, config.weight_decay, config.beta1, config.beta2, config.eps};
  AdamW opt(model.parameters().all(), ac);

  using Clock = std::chrono::steady_clock;
  auto t0 = Clock::now();
  auto selection_loss = [&](const EpochLog& e) { return val_samples.empty() ? e.train_loss : e.val_loss; };

  EpochLog e0;
  e0.train_loss = evaluate_loss(model, fixed_train, w, 256, config.weight_landmarks);
  e0.val_loss = evaluate_loss(model, val_samples, w, 256, config.weight_landmarks);
  e0.lr = config.lr;
  e0.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  if (!std::isfinite(e0.train_loss)) throw std::runtime_error("train: non-finite initial loss");
  result.log.push_back(e0);
  if (on_epoch) on_epoch(e0);
  double best = selection_loss(e0);
  std::vector<Array> best_params = model.snapshot();
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto t_epoch = Clock::now();
    auto samples = config.freeze_landmarks ? fixed_train : draw_landmarks(train_traj, config.horizon, K, config.seed, 100 + epoch);
    Rng order_rng = derive_rng(config.seed, 0x0deULL * 1000 + epoch);
    shuffle(samples, order_rng);
    const std::vector<double> sw = config.weight_landmarks ? landmark_weights(samples) : std::vector<double>{};
    double total = 0.0;
    for (std::size_t start = 0, b = 0; start < samples.size(); start += config.batch_size, ++b) {
      const std::size_t n = std::min(config.batch_size, samples.size() - start);
      const Batch batch = weighted_batch(std::span<const LandmarkSample>(samples).subspan(start, n),
                                         sw.empty() ? std::span<const double>{} : std::span<const double>(sw).subspan(start, n));
      Tape tape;
      Var loss_sum = nll_loss(model.forward(tape, batch), batch.labels, batch.loss_mask, w);
      const double value = loss_sum.value()[0];
      if (!std::isfinite(value))
        throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      total += value;
      Var loss = scale(loss_sum, 1.0 / static_cast<double>(n));
      model.parameters().zero_grad();
      tape.backward(loss);
      opt.step();
    }
    EpochLog e;
    e.epoch = epoch;
    e.train_loss = total / static_cast<double>(samples.size());
    e.val_loss = evaluate_loss(model, val_samples, w, 256, config.weight_landmarks);
    e.lr = config.lr;
    e.seconds = std::chrono::duration<double>(Clock::now() - t_epoch).count();
    result.log.push_back(e);
    if (on_epoch) on_epoch(e);
    const double sel = selection_loss(e);
    if (!std::isfinite(sel)) throw std::runtime_error("train: non-finite validation loss at epoch " + std::to_string(epoch));
    if (sel < best) {
      best = sel;
      best_params = model.snapshot();
      result.best_epoch = epoch;
      stale = 0;
    } else if (config.patience > 0 && ++stale >= config.patience) {
      break;
    }
  }
  model.restore(best_params);
  return result;
}

}  // namespace lsurv
