// Cohorts, interval discretisation, masks/staleness, landmarks and batches.
//
// Conventions used throughout:
//   * intervals are 1-based; interval j covers [(j-1)*width, j*width)
//   * trajectory rows are 0-based, row r holds interval r+1
//   * cause 0 means censored, causes 1..K are competing events
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lsurv/diffcore.hpp"
#include "lsurv/rng.hpp"

namespace lsurv {

enum class FeatureKind { Numeric, Categorical };

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::Numeric;
  std::size_t cardinality = 0;  // categorical only
  double mean = 0.0;            // numeric standardisation
  double stddev = 1.0;

  bool operator==(const FeatureSpec&) const = default;
};

class FeatureSchema {
 public:
  FeatureSchema() = default;
  explicit FeatureSchema(std::vector<FeatureSpec> features);

  std::size_t size() const { return features_.size(); }
  const FeatureSpec& operator[](std::size_t d) const { return features_[d]; }
  FeatureSpec& operator[](std::size_t d) { return features_[d]; }
  const std::vector<FeatureSpec>& features() const { return features_; }
  std::optional<std::size_t> index_of(std::string_view name) const;

  // `name,kind[,cardinality]` lines; blank lines and '#' comments skipped.
  static FeatureSchema parse(const std::vector<std::string>& lines);
  static FeatureSchema read(const std::string& path);
  void write(std::ostream& os) const;

  // Same names, kinds and cardinalities (standardisation stats ignored).
  bool same_layout(const FeatureSchema& other) const;
  bool operator==(const FeatureSchema&) const = default;

 private:
  std::vector<FeatureSpec> features_;
};

struct DiscretizationGrid {
  double width = 1.0;
  std::size_t intervals = 1;

  DiscretizationGrid() = default;
  DiscretizationGrid(double w, std::size_t j);
  // floor(time / width) + 1; throws when time is negative or past the grid.
  std::size_t interval_of(double time) const;
  bool operator==(const DiscretizationGrid&) const = default;
};

struct RawObservation {
  std::string subject_id;
  double time = 0.0;
  std::string feature;
  double value = 0.0;
};

// One resolved (interval, feature) cell with its raw, unstandardised value.
struct ObservedCell {
  std::size_t interval = 0;
  std::size_t feature = 0;
  double value = 0.0;
  bool operator==(const ObservedCell&) const = default;
};

struct SubjectObservations {
  std::string subject_id;
  std::vector<ObservedCell> cells;  // sorted by (interval, feature)
  bool operator==(const SubjectObservations&) const = default;
};

// Assigns each observation to its interval. Repeated (subject, interval,
// feature) cells keep the value with the latest time; equal times keep the
// later input row. Subjects appear in order of first observation.
std::vector<SubjectObservations> discretize(std::span<const RawObservation> observations,
                                            const FeatureSchema& schema, const DiscretizationGrid& grid);

struct Outcome {
  std::size_t interval = 0;  // T
  int cause = 0;             // e
  bool operator==(const Outcome&) const = default;
};

struct SubjectTrajectory {
  std::string subject_id;
  std::size_t length = 0;      // rows; interval of the last row
  std::size_t n_features = 0;
  std::vector<double> x;       // length x D, standardised / category index
  std::vector<std::uint8_t> m; // 1 = no observation in that interval
  std::vector<double> delta;   // intervals since last actual observation
  Outcome outcome;
  std::size_t last_observed = 0;  // interval of the last real observation

  double x_at(std::size_t row, std::size_t d) const { return x[row * n_features + d]; }
  std::uint8_t m_at(std::size_t row, std::size_t d) const { return m[row * n_features + d]; }
  double delta_at(std::size_t row, std::size_t d) const { return delta[row * n_features + d]; }
  // Largest admissible landmark, min(T - 1, last observed); 0 when none.
  std::size_t max_landmark() const;
  // Copy keeping only the first `rows` intervals.
  SubjectTrajectory truncated(std::size_t rows) const;
};

// LOCF fill, mask and staleness for one subject. The trajectory spans
// intervals 1..last observed. Numeric values are standardised with the
// schema's statistics; never-observed features hold 0 (numeric) or
// category 0 with delta counted from the sequence start.
SubjectTrajectory build_trajectory(const SubjectObservations& obs, const FeatureSchema& schema,
                                   const DiscretizationGrid& grid, Outcome outcome);

struct LandmarkSample {
  SubjectTrajectory history;       // truncated to the landmark
  std::size_t landmark = 0;        // tau
  std::size_t admissible = 0;      // max_landmark() of the source trajectory
  std::size_t horizon = 0;         // H
  std::size_t causes = 0;          // K
  std::vector<double> labels;      // H x K, y for interval tau + h
  std::vector<std::uint8_t> loss_mask;  // H, 1 where tau + h <= min(T, tau + H)
};

LandmarkSample landmark_at(const SubjectTrajectory& traj, std::size_t landmark, std::size_t horizon,
                           std::size_t causes);
// Uniform landmark over [1, max_landmark()]; nullopt when no landmark exists.
std::optional<LandmarkSample> sample_landmark(const SubjectTrajectory& traj, std::size_t horizon,
                                              std::size_t causes, Rng& rng);

struct Batch {
  std::size_t batch = 0, steps = 0, features = 0, horizon = 0, causes = 0;
  std::vector<std::string> subject_ids;
  std::vector<std::size_t> lengths;   // valid steps per subject (tau)
  std::vector<std::size_t> landmarks;
  Array x;                            // B x S x D
  Mask missing;                       // B x S x D, keep=1 where missing/padded
  Array delta;                        // B x S x D
  std::vector<std::uint8_t> valid;    // B x S
  Array labels;                       // B x H x K
  Array loss_mask;                    // B x H
};

// Right-pads to the longest history. Padded cells are missing with delta 0
// and flagged invalid.
Batch make_batch(std::span<const LandmarkSample> samples);

// ---- cohorts --------------------------------------------------------------

struct SubjectRecord {
  std::string subject_id;
  double event_time = 0.0;
  int cause = 0;
  Outcome outcome;
  std::vector<ObservedCell> cells;
  bool operator==(const SubjectRecord&) const = default;
};

struct Cohort {
  FeatureSchema schema;
  DiscretizationGrid grid;
  std::size_t causes = 0;  // largest cause index seen (or configured)
  std::vector<SubjectRecord> subjects;  // outcomes-file order
  bool operator==(const Cohort&) const = default;
};

// Reads the long-format observations CSV, the outcomes CSV and the schema.
// Errors carry the file name and 1-based line number.
Cohort ingest_csv(const std::string& observations_path, const std::string& outcomes_path,
                  const std::string& schema_path, const DiscretizationGrid& grid);
Cohort ingest_csv(const std::string& observations_path, const std::string& outcomes_path,
                  const FeatureSchema& schema, const DiscretizationGrid& grid);
// Observation times are written at interval midpoints.
void emit_csv(const Cohort& cohort, const std::string& observations_path, const std::string& outcomes_path,
              const std::string& schema_path);

// Mean/std of observed numeric cells over the given subjects.
FeatureSchema fit_standardization(const Cohort& cohort, std::span<const std::size_t> subjects);

std::vector<SubjectTrajectory> build_trajectories(const Cohort& cohort, const FeatureSchema& schema,
                                                  std::span<const std::size_t> subjects);

}  // namespace lsurv
