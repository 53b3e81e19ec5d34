// Full survival network: embedding -> encoder -> summary -> cause heads.
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lsurv/datamodel.hpp"
#include "lsurv/diffcore.hpp"
#include "lsurv/embedding.hpp"
#include "lsurv/encoder.hpp"
#include "lsurv/hazardheads.hpp"

namespace lsurv {

struct ModelConfig {
  std::size_t d_emb = 16;
  std::size_t heads = 2;
  std::size_t blocks = 1;
  std::size_t horizon = 20;
  std::size_t causes = 2;
  bool no_fa = false;
  bool no_cet = false;
  bool causal = true;
  bool shared_query = true;
  std::uint64_t seed = 1;

  bool operator==(const ModelConfig&) const = default;
};

class SurvivalModel {
 public:
  // `schema` carries the standardisation statistics used at inference.
  SurvivalModel(const ModelConfig& config, FeatureSchema schema, DiscretizationGrid grid);
  SurvivalModel(SurvivalModel&&) = default;
  SurvivalModel& operator=(SurvivalModel&&) = default;

  const ModelConfig& config() const { return config_; }
  const FeatureSchema& schema() const { return schema_; }
  const DiscretizationGrid& grid() const { return grid_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const CovariateEmbedding& embedding() const { return embedding_; }
  const FactorizedEncoder& encoder() const { return encoder_; }
  const CauseHeads& heads() const { return heads_; }

  Var logits(Tape& tape, const Batch& batch, AttentionDump* dump = nullptr) const;
  // Hazards [B x H x K].
  Var forward(Tape& tape, const Batch& batch, AttentionDump* dump = nullptr) const;
  // One grid per batch row.
  std::vector<HazardGrid> predict(const Batch& batch) const;

  std::vector<Array> snapshot() const;
  void restore(const std::vector<Array>& values);

  // Text checkpoint, see README for the layout. Values are written as
  // hexadecimal floats so a reload is exact.
  void save(std::ostream& os) const;
  void save(const std::string& path) const;
  static SurvivalModel load(std::istream& is);
  static SurvivalModel load(const std::string& path);

 private:
  ModelConfig config_;
  FeatureSchema schema_;
  DiscretizationGrid grid_;
  ParameterStore store_;
  CovariateEmbedding embedding_;
  FactorizedEncoder encoder_;
  CauseHeads heads_;
};

}  // namespace lsurv
