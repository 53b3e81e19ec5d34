// Factorized time x covariate attention encoder.
//
// Input and output layout is [B x S x D x e]. One block runs
//   temporal:   z_t = LN(z + MHA_time(z + P))      per (subject, covariate)
//   covariate:  z_c = LN(z_t + MHA_cov(z_t))       per (subject, step)
// and the summary cross-attends a learned query over the valid steps of each
// covariate, giving c of size D*e.
//
// With `factorized` off the covariate axis is folded into the model width
// (D*e per step) and only temporal attention runs; the summary is unchanged.
#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "lsurv/diffcore.hpp"

namespace lsurv {

// Sinusoidal table, rows = positions first..first+length-1, cols = dim.
Array sinusoidal_table(std::size_t length, std::size_t dim, std::size_t first = 0);

struct AttentionRecord {
  std::size_t layer = 0;
  std::string stage;  // "time", "cov" or "summary"
  std::size_t group = 0;
  std::size_t head = 0;
  std::size_t query = 0;
  std::size_t key = 0;
  double weight = 0.0;
};

// Collects attention weights of the first subject in the batch.
struct AttentionDump {
  std::vector<AttentionRecord> rows;
  void write_csv(std::ostream& os) const;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  // in -> inner (split over heads) -> in.
  MultiHeadAttention(const std::string& prefix, std::size_t model_dim, std::size_t inner_dim, std::size_t heads,
                     ParameterStore& store, Rng& rng);

  // q [G x Lq x model], kv [G x Lk x model], keep [G x Lq x Lk] or null.
  Var operator()(Var q, Var kv, const Mask* keep, AttentionDump* dump = nullptr, std::size_t layer = 0,
                 const std::string& stage = "", std::size_t groups_per_subject = 1) const;

  std::size_t heads() const { return heads_; }

 private:
  Parameter *wq_ = nullptr, *bq_ = nullptr, *wk_ = nullptr, *bk_ = nullptr;
  Parameter *wv_ = nullptr, *bv_ = nullptr, *wo_ = nullptr, *bo_ = nullptr;
  std::size_t model_ = 0, inner_ = 0, heads_ = 1;
};

struct LayerNormParams {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
  LayerNormParams() = default;
  LayerNormParams(const std::string& prefix, std::size_t dim, ParameterStore& store);
  Var operator()(Var x) const;
};

struct EncoderConfig {
  std::size_t d_emb = 16;
  std::size_t heads = 2;
  std::size_t blocks = 1;
  bool causal = true;
  bool factorized = true;
  bool shared_query = true;
};

class FactorizedEncoder {
 public:
  FactorizedEncoder() = default;
  FactorizedEncoder(const EncoderConfig& config, std::size_t features, ParameterStore& store, Rng& rng);

  const EncoderConfig& config() const { return config_; }
  std::size_t features() const { return features_; }
  std::size_t context_dim() const { return features_ * config_.d_emb; }

  // valid is B x S (1 = real step). Each subject needs at least one valid
  // step and valid steps must form a prefix.
  Var temporal_attention(Var z, std::size_t block, const std::vector<std::uint8_t>& valid,
                         AttentionDump* dump = nullptr) const;
  Var covariate_attention(Var z, std::size_t block, AttentionDump* dump = nullptr) const;
  Var encode(Var z, const std::vector<std::uint8_t>& valid, AttentionDump* dump = nullptr) const;
  // [B x S x D x e] -> [B x D*e]
  Var summarize(Var z, const std::vector<std::uint8_t>& valid, AttentionDump* dump = nullptr) const;
  Var forward(Var z, const std::vector<std::uint8_t>& valid, AttentionDump* dump = nullptr) const {
    return summarize(encode(z, valid, dump), valid, dump);
  }

 private:
  struct Block {
    MultiHeadAttention time, cov;
    LayerNormParams ln_time, ln_cov;
  };
  EncoderConfig config_;
  std::size_t features_ = 0;
  std::vector<Block> blocks_;
  MultiHeadAttention summary_;
  Parameter* query_ = nullptr;
};

}  // namespace lsurv
