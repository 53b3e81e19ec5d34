// Weighted competing-risk likelihood, AdamW and the training loop.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "lsurv/datamodel.hpp"
#include "lsurv/diffcore.hpp"
#include "lsurv/model.hpp"

namespace lsurv {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::size_t horizon = 20;
  std::size_t blocks = 1;
  std::size_t d_emb = 16;
  std::size_t heads = 2;
  bool no_fa = false;
  bool no_cet = false;
  bool causal = true;
  bool shared_query = true;
  bool freeze_landmarks = false;
  // Scale each sample's loss by its number of admissible landmarks (divided
  // by the epoch mean), so the expected loss counts every at-risk landmark once.
  bool weight_landmarks = false;
  std::uint64_t seed = 1;
  std::size_t patience = 5;  // 0 disables early stopping
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Permit depth / width / heads outside {1..6}, {16,32,64}, {2,4,8}.
  bool allow_out_of_range = false;

  void validate() const;
  ModelConfig model_config(std::size_t causes) const;
};

// w_k = ln(1 + N / N_k), scaled so the smallest weight is 1.
std::vector<double> class_weights(std::span<const Outcome> outcomes, std::size_t causes);

// Summed negative log-likelihood; lambda [B x H x K], labels [B x H x K],
// mask [B x H]. Event terms carry w_k, survival terms are unweighted.
Var nll_loss(Var lambda, const Array& labels, const Array& mask, const std::vector<double>& weights);

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamWConfig config);
  // theta <- theta (1 - lr wd), then the bias-corrected Adam update.
  void step();
  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return config_; }
  const Array& first_moment(std::size_t i) const { return m_[i]; }
  const Array& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Parameter*> params_;
  AdamWConfig config_;
  std::vector<Array> m_, v_;
  std::size_t t_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // per-sample mean
  double val_loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

void write_train_log(std::ostream& os, const std::vector<EpochLog>& log);

struct TrainResult {
  SurvivalModel model;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  std::vector<double> weights;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Fits standardisation on the training subjects, trains with a landmark
// drawn per subject per epoch, and returns the parameters with the lowest
// validation loss (training loss when there are no validation subjects).
// Epoch 0 in the log is the untrained model.
TrainResult train(const Cohort& cohort, std::span<const std::size_t> train_subjects,
                  std::span<const std::size_t> val_subjects, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

// Mean loss per landmark sample of `model` over the given samples.
// With `weight_landmarks`, samples are weighted as in training.
double evaluate_loss(const SurvivalModel& model, std::span<const LandmarkSample> samples,
                     const std::vector<double>& weights, std::size_t batch_size = 256,
                     bool weight_landmarks = false);

// Per-sample loss weights: admissible / mean(admissible).
std::vector<double> landmark_weights(std::span<const LandmarkSample> samples);

}  // namespace lsurv
