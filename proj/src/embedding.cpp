#include "lsurv/embedding.hpp"

#include <cmath>
#include <stdexcept>

namespace lsurv {

namespace {

// rho such that softplus(rho) = 0.1
const double kInitialRawDecay = std::log(std::expm1(0.1));

}  // namespace

CovariateEmbedding::CovariateEmbedding(const FeatureSchema& schema, std::size_t d_emb, bool time_decay,
                                       ParameterStore& store, Rng& rng)
    : d_emb_(d_emb), time_decay_(time_decay) {
  if (d_emb < 1) throw std::invalid_argument("embedding: d_emb must be >= 1");
  const double sd = 1.0 / std::sqrt(static_cast<double>(d_emb));
  for (const FeatureSpec& spec : schema.features()) {
    Feature f;
    f.kind = spec.kind;
    f.cardinality = spec.cardinality;
    const std::string p = "emb." + spec.name + ".";
    if (spec.kind == FeatureKind::Numeric) {
      f.w1 = &store.add(p + "w1", random_normal({1, d_emb}, 1.0, rng));
      f.b1 = &store.add(p + "b1", Array({d_emb}));
      f.w2 = &store.add(p + "w2", random_normal({d_emb, d_emb}, sd, rng));
      f.b2 = &store.add(p + "b2", Array({d_emb}));
    } else {
      f.table = &store.add(p + "table", random_normal({spec.cardinality, d_emb}, sd, rng));
    }
    f.missing = &store.add(p + "missing", random_normal({d_emb}, sd, rng));
    if (time_decay) f.raw_decay = &store.add(p + "raw_decay", Array({1}, kInitialRawDecay));
    features_.push_back(f);
  }
}

Var CovariateEmbedding::embed_feature(Tape& tape, std::size_t d, std::span<const double> x,
                                      std::span<const std::uint8_t> missing, std::span<const double> delta) const {
  const Feature& f = features_.at(d);
  const std::size_t n = x.size();
  if (missing.size() != n || delta.size() != n) throw std::invalid_argument("embed_feature: length mismatch");

  Var value;
  if (f.kind == FeatureKind::Numeric) {
    Var in = tape.constant(Array({n, 1}, std::vector<double>(x.begin(), x.end())));
    Var h = gelu(linear(in, tape.leaf(*f.w1), tape.leaf(*f.b1)));
    value = linear(h, tape.leaf(*f.w2), tape.leaf(*f.b2));
  } else {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = x[i];
      if (v < 0.0 || v >= static_cast<double>(f.cardinality) || v != std::floor(v))
        throw std::out_of_range("embedding: category index " + std::to_string(v) + " out of range for feature " +
                                std::to_string(d));
      idx[i] = static_cast<std::size_t>(v);
    }
    value = gather_rows(tape.leaf(*f.table), idx);
  }

  Var z = tape.leaf(*f.missing);
  Var miss;
  if (time_decay_ && f.raw_decay) {
    for (double dl : delta)
      if (!(dl >= 0.0)) throw std::invalid_argument("embedding: staleness must be non-negative");
    Var gamma = softplus(tape.leaf(*f.raw_decay));
    Var neg_delta = tape.constant(Array({n}, std::vector<double>(delta.begin(), delta.end())));
    Var decay = exp(scale(reshape(outer(neg_delta, gamma), {n}), -1.0));
    miss = outer(decay, z);
  } else {
    miss = repeat(z, 0, n);
  }

  Mask keep({n, d_emb_}, false);
  for (std::size_t i = 0; i < n; ++i)
    if (missing[i])
      for (std::size_t j = 0; j < d_emb_; ++j) keep.keep[i * d_emb_ + j] = 1;
  return where(keep, miss, value);
}

Array CovariateEmbedding::embed_cell(double x, bool missing, double delta, std::size_t d) const {
  Tape tape;
  const double xs[] = {x};
  const std::uint8_t ms[] = {static_cast<std::uint8_t>(missing ? 1 : 0)};
  const double ds[] = {delta};
  return embed_feature(tape, d, xs, ms, ds).value().reshaped({d_emb_});
}

Var CovariateEmbedding::forward(Tape& tape, const Batch& batch) const {
  const std::size_t B = batch.batch, S = batch.steps, D = batch.features;
  if (D != features_.size())
    throw std::invalid_argument("embedding: batch has " + std::to_string(D) + " features, model expects " +
                                std::to_string(features_.size()));
  const std::size_t n = B * S;
  std::vector<Var> parts;
  std::vector<double> x(n), delta(n);
  std::vector<std::uint8_t> miss(n);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t c = 0; c < n; ++c) {
      x[c] = batch.x[c * D + d];
      delta[c] = batch.delta[c * D + d];
      miss[c] = batch.missing.keep[c * D + d];
    }
    parts.push_back(reshape(embed_feature(tape, d, x, miss, delta), {B, S, d_emb_}));
  }
  return stack(parts, 2);
}

double CovariateEmbedding::decay_rate(std::size_t d) const {
  const Feature& f = features_.at(d);
  if (!time_decay_ || !f.raw_decay) return 0.0;
  const double r = f.raw_decay->value[0];
  return r > 0 ? r + std::log1p(std::exp(-r)) : std::log1p(std::exp(r));
}

CovariateEmbedding CovariateEmbedding::without_time_decay() const {
  CovariateEmbedding copy = *this;
  copy.time_decay_ = false;
  return copy;
}

}  // namespace lsurv
