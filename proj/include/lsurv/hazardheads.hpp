// Cause-specific heads and the discrete hazard / survival / CIF layer.
//
//   lambda_jk = exp(f_jk) / (1 + sum_m exp(f_jm))
//   S_j       = prod_{l<=j} (1 - sum_k lambda_lk)
//   F_jk      = sum_{l<=j} lambda_lk * S_{l-1},  S_0 = 1
#pragma once

#include <cstddef>
#include <vector>

#include "lsurv/diffcore.hpp"

namespace lsurv {

constexpr double kHazardFloor = 1e-12;

class CauseHeads {
 public:
  CauseHeads() = default;
  // K heads, each context_dim -> context_dim/2 -> GELU -> 1.
  CauseHeads(std::size_t context_dim, std::size_t causes, ParameterStore& store, Rng& rng);

  std::size_t causes() const { return heads_.size(); }
  std::size_t context_dim() const { return context_dim_; }

  // c [B x C] -> logits [B x H x K]. Step h gets the positional row for
  // offset h+1 added before the heads.
  Var decode_logits(Var c, std::size_t horizon) const;
  // Test hook: replaces the decoder positional table with zeros.
  void set_zero_positions(bool zero) { zero_positions_ = zero; }

 private:
  struct Head {
    Parameter *w1 = nullptr, *b1 = nullptr, *w2 = nullptr, *b2 = nullptr;
  };
  std::vector<Head> heads_;
  std::size_t context_dim_ = 0;
  bool zero_positions_ = false;
};

// Differentiable hazard map over the last axis (stable shifted form).
Var hazards(Var logits);
// Same map on plain arrays.
Array hazards(const Array& logits);
// lambda [H x K] -> S [H]
Array survival(const Array& lambda);
// lambda [H x K], S [H] -> F [H x K]
Array cif(const Array& lambda, const Array& surv);

struct HazardGrid {
  Array lambda;  // H x K
  Array surv;    // H
  Array F;       // H x K

  static HazardGrid from_hazards(Array lambda);
  static HazardGrid from_logits(const Array& logits) { return from_hazards(hazards(logits)); }
  std::size_t horizon() const { return lambda.dim(0); }
  std::size_t causes() const { return lambda.dim(1); }
};

}  // namespace lsurv
