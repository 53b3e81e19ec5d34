// lsurv: synthetic data, training, prediction, evaluation and cross-validation.
#include <exception>
#include <iostream>

#include "CLI11.hpp"
#include "lsurv/commands.hpp"

int main(int argc, char** argv) {
  lsurv::RunConfig c;
  lsurv::TrainConfig& t = c.train;

  CLI::App app{"Discrete-time competing-risk survival with factorized attention"};
  app.set_config("--config", "", "Flat key=value config file; flags override it");
  app.require_subcommand(1);
  app.fallthrough();

  app.add_option("--seed", t.seed, "Seed for every random draw")->capture_default_str();
  app.add_option("--out", c.out_dir, "Output directory")->capture_default_str();
  app.add_flag("--no-fa", t.no_fa, "Temporal-only attention over concatenated covariates");
  app.add_flag("--no-cet", t.no_cet, "Drop the staleness decay of missing embeddings");
  app.add_option("--horizon", t.horizon, "Prediction horizon H in intervals")->capture_default_str();
  app.add_option("--bins", c.bins, "Calibration bins")->capture_default_str();

  app.add_option("--observations", c.observations, "Long-format observations CSV");
  app.add_option("--outcomes", c.outcomes, "Outcomes CSV");
  app.add_option("--schema", c.schema, "Feature schema file");
  app.add_option("--width", c.width, "Interval width in time units")->capture_default_str();
  app.add_option("--intervals", c.intervals, "Number of grid intervals J")->capture_default_str();

  app.add_option("--epochs", t.epochs)->capture_default_str();
  app.add_option("--batch-size", t.batch_size)->capture_default_str();
  app.add_option("--blocks", t.blocks)->capture_default_str();
  app.add_option("--d-emb", t.d_emb)->capture_default_str();
  app.add_option("--heads", t.heads)->capture_default_str();
  app.add_option("--lr", t.lr)->capture_default_str();
  app.add_option("--weight-decay", t.weight_decay)->capture_default_str();
  app.add_option("--patience", t.patience, "Early-stopping patience; 0 disables")->capture_default_str();
  app.add_flag("!--no-causal", t.causal, "Let temporal attention see later steps");
  app.add_flag("!--per-covariate-query", t.shared_query, "One summary query per covariate");
  app.add_flag("--freeze-landmarks", t.freeze_landmarks, "Keep one landmark per subject for all epochs");
  app.add_flag("--weight-landmarks", t.weight_landmarks,
               "Weight each sample by its number of admissible landmarks");
  app.add_flag("--allow-out-of-range", t.allow_out_of_range, "Skip the hyperparameter range check");
  app.add_option("--val-fraction", c.val_fraction)->capture_default_str();

  app.add_option("--checkpoint", c.checkpoint);
  app.add_option("--predictions", c.predictions);
  app.add_option("--landmark", c.landmark, "random or fixed:<k>")->capture_default_str();
  app.add_option("--eval-horizon", c.eval_horizon, "Evaluation grid length; 0 = prediction horizon");
  app.add_option("--calibration-time", c.calibration_time, "Calibration interval; 0 = evaluation horizon");
  app.add_option("--ctd", c.ctd, "earlier or own")->capture_default_str();
  app.add_option("--folds", c.folds)->capture_default_str();
  app.add_option("--test-fraction", c.test_fraction)->capture_default_str();

  app.add_option("--preset", c.preset, "default or staleness")->capture_default_str();
  app.add_option("--subjects", c.subjects)->capture_default_str();
  app.add_option("--features", c.features)->capture_default_str();
  app.add_option("--causes", c.causes)->capture_default_str();
  app.add_option("--driver-mult", c.driver_mult)->capture_default_str();
  app.add_option("--censor-hazard", c.censor_hazard)->capture_default_str();
  app.add_option("--missing-rate", c.missing_rate)->capture_default_str();
  app.add_option("--stale-mult", c.stale_mult)->capture_default_str();

  int (*command)(const lsurv::RunConfig&) = nullptr;
  app.add_subcommand("synth", "Generate a synthetic cohort with ground truth")->callback([&] { command = lsurv::cmd_synth; });
  app.add_subcommand("train", "Train a model and write a checkpoint")->callback([&] { command = lsurv::cmd_train; });
  app.add_subcommand("predict", "Landmark predictions from a checkpoint")->callback([&] { command = lsurv::cmd_predict; });
  app.add_subcommand("evaluate", "IBS, C_td and calibration from predictions")->callback([&] { command = lsurv::cmd_evaluate; });
  app.add_subcommand("crossval", "k-fold training with a held-out test set")->callback([&] { command = lsurv::cmd_crossval; });

  CLI11_PARSE(app, argc, argv);
  try {
    return command(c);
  } catch (const std::invalid_argument& e) {
    std::cerr << "lsurv: " << e.what() << "\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "lsurv: " << e.what() << '\n';
    return 1;
  }
}
