// Time-aware covariate embedding.
//
// Observed cell (m = 0):  Embed_d(x), a two-layer GELU map for numeric
//                          features or a lookup row for categorical ones.
// Missing cell  (m = 1):  z_d * exp(-gamma_d * delta), gamma_d = softplus(rho_d).
//
// With time decay disabled the missing path is z_d unchanged and delta is
// ignored; rho_d is then not a parameter of the model.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lsurv/datamodel.hpp"
#include "lsurv/diffcore.hpp"

namespace lsurv {

class CovariateEmbedding {
 public:
  CovariateEmbedding() = default;
  // Registers parameters named `emb.<feature>.*` in `store`.
  CovariateEmbedding(const FeatureSchema& schema, std::size_t d_emb, bool time_decay, ParameterStore& store,
                     Rng& rng);

  std::size_t d_emb() const { return d_emb_; }
  std::size_t features() const { return features_.size(); }
  bool time_decay() const { return time_decay_; }

  // Cells of feature d: values, missing flags and staleness, all length n.
  // Returns [n x d_emb].
  Var embed_feature(Tape& tape, std::size_t d, std::span<const double> x, std::span<const std::uint8_t> missing,
                    std::span<const double> delta) const;
  Array embed_cell(double x, bool missing, double delta, std::size_t d) const;
  // [B x S x D x d_emb]
  Var forward(Tape& tape, const Batch& batch) const;

  // gamma_d; 0 when time decay is disabled.
  double decay_rate(std::size_t d) const;
  // Same parameters, decay factor forced to 1 (the "no time decay" ablation).
  CovariateEmbedding without_time_decay() const;

 private:
  struct Feature {
    FeatureKind kind = FeatureKind::Numeric;
    std::size_t cardinality = 0;
    Parameter* w1 = nullptr;
    Parameter* b1 = nullptr;
    Parameter* w2 = nullptr;
    Parameter* b2 = nullptr;
    Parameter* table = nullptr;
    Parameter* missing = nullptr;
    Parameter* raw_decay = nullptr;
  };
  std::vector<Feature> features_;
  std::size_t d_emb_ = 0;
  bool time_decay_ = true;
};

}  // namespace lsurv
