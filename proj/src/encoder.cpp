#include "lsurv/encoder.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

#include "lsurv/csv.hpp"

namespace lsurv {

Array sinusoidal_table(std::size_t length, std::size_t dim, std::size_t first) {
  Array p({length, dim});
  for (std::size_t r = 0; r < length; ++r) {
    const double pos = static_cast<double>(first + r);
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      p[r * dim + i] = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  }
  return p;
}

void AttentionDump::write_csv(std::ostream& os) const {
  os << "layer,stage,group,head,query,key,weight\n";
  for (const AttentionRecord& r : rows)
    os << r.layer << ',' << r.stage << ',' << r.group << ',' << r.head << ',' << r.query << ',' << r.key << ','
       << csv::format_double(r.weight) << '\n';
}

namespace {

Array tile_rows(const Array& table, std::size_t groups) {
  Array out(Shape{groups, table.dim(0), table.dim(1)});
  for (std::size_t g = 0; g < groups; ++g)
    std::copy(table.data(), table.data() + table.size(), out.data() + g * table.size());
  return out;
}

Parameter& weight(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  return store.add(name, random_normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
}

void check_valid(const std::vector<std::uint8_t>& valid, std::size_t B, std::size_t S) {
  if (valid.size() != B * S) throw std::invalid_argument("encoder: validity must be B x S");
  for (std::size_t b = 0; b < B; ++b) {
    if (S == 0 || !valid[b * S]) throw std::invalid_argument("encoder: subject " + std::to_string(b) + " has no valid step");
    for (std::size_t s = 1; s < S; ++s)
      if (valid[b * S + s] && !valid[b * S + s - 1])
        throw std::invalid_argument("encoder: valid steps of subject " + std::to_string(b) + " are not a prefix");
  }
}

}  // namespace

MultiHeadAttention::MultiHeadAttention(const std::string& prefix, std::size_t model_dim, std::size_t inner_dim,
                                       std::size_t heads, ParameterStore& store, Rng& rng)
    : model_(model_dim), inner_(inner_dim), heads_(heads) {
  if (heads == 0 || inner_dim % heads != 0)
    throw std::invalid_argument("attention: width " + std::to_string(inner_dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  wq_ = &weight(store, prefix + ".wq", model_dim, inner_dim, rng);
  bq_ = &store.add(prefix + ".bq", Array({inner_dim}));
  wk_ = &weight(store, prefix + ".wk", model_dim, inner_dim, rng);
  bk_ = &store.add(prefix + ".bk", Array({inner_dim}));
  wv_ = &weight(store, prefix + ".wv", model_dim, inner_dim, rng);
  bv_ = &store.add(prefix + ".bv", Array({inner_dim}));
  wo_ = &weight(store, prefix + ".wo", inner_dim, model_dim, rng);
  bo_ = &store.add(prefix + ".bo", Array({model_dim}));
}

Var MultiHeadAttention::operator()(Var q, Var kv, const Mask* keep, AttentionDump* dump, std::size_t layer,
                                   const std::string& stage, std::size_t groups_per_subject) const {
  Tape& t = q.tape();
  const std::size_t G = q.shape()[0], Lq = q.shape()[1], Lk = kv.shape()[1];
  const std::size_t h = heads_, dh = inner_ / heads_;
  auto split = [&](Var x, std::size_t L) {
    return reshape(permute(reshape(x, {G, L, h, dh}), {0, 2, 1, 3}), {G * h, L, dh});
  };
  Var Q = split(linear(q, t.leaf(*wq_), t.leaf(*bq_)), Lq);
  Var K = split(linear(kv, t.leaf(*wk_), t.leaf(*bk_)), Lk);
  Var V = split(linear(kv, t.leaf(*wv_), t.leaf(*bv_)), Lk);
  Var scores = scale(bmm(Q, K, true), 1.0 / std::sqrt(static_cast<double>(dh)));

  Mask expanded;
  if (keep) {
    if (keep->shape != Shape{G, Lq, Lk}) throw std::invalid_argument("attention: mask shape " + shape_str(keep->shape));
    expanded = Mask({G * h, Lq, Lk}, false);
    const std::size_t block = Lq * Lk;
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t i = 0; i < h; ++i)
        std::copy(keep->keep.begin() + g * block, keep->keep.begin() + (g + 1) * block,
                  expanded.keep.begin() + (g * h + i) * block);
  }
  Var weights = softmax_lastdim(scores, keep ? &expanded : nullptr);
  if (dump) {
    const Array& w = weights.value();
    for (std::size_t g = 0; g < std::min(groups_per_subject, G); ++g)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t a = 0; a < Lq; ++a)
          for (std::size_t b = 0; b < Lk; ++b)
            dump->rows.push_back({layer, stage, g, i, a, b, w[((g * h + i) * Lq + a) * Lk + b]});
  }
  Var ctx = reshape(permute(reshape(bmm(weights, V), {G, h, Lq, dh}), {0, 2, 1, 3}), {G, Lq, inner_});
  return linear(ctx, t.leaf(*wo_), t.leaf(*bo_));
}

LayerNormParams::LayerNormParams(const std::string& prefix, std::size_t dim, ParameterStore& store)
    : gain(&store.add(prefix + ".gain", Array({dim}, 1.0))), bias(&store.add(prefix + ".bias", Array({dim}))) {}

Var LayerNormParams::operator()(Var x) const {
  Tape& t = x.tape();
  return layer_norm(x, t.leaf(*gain), t.leaf(*bias));
}

FactorizedEncoder::FactorizedEncoder(const EncoderConfig& config, std::size_t features, ParameterStore& store,
                                     Rng& rng)
    : config_(config), features_(features) {
  const std::size_t e = config.d_emb;
  if (config.blocks < 1) throw std::invalid_argument("encoder: need at least one block");
  if (features < 1) throw std::invalid_argument("encoder: need at least one feature");
  if (config.heads == 0 || e % config.heads != 0)
    throw std::invalid_argument("encoder: d_emb " + std::to_string(e) + " not divisible by " +
                                std::to_string(config.heads) + " heads");
  for (std::size_t l = 0; l < config.blocks; ++l) {
    const std::string p = "enc.block" + std::to_string(l);
    Block b;
    if (config.factorized) {
      b.time = MultiHeadAttention(p + ".time", e, e, config.heads, store, rng);
      b.ln_time = LayerNormParams(p + ".ln_time", e, store);
      b.cov = MultiHeadAttention(p + ".cov", e, e, config.heads, store, rng);
      b.ln_cov = LayerNormParams(p + ".ln_cov", e, store);
    } else {
      b.time = MultiHeadAttention(p + ".time", features * e, e, config.heads, store, rng);
      b.ln_time = LayerNormParams(p + ".ln_time", features * e, store);
    }
    blocks_.push_back(b);
  }
  summary_ = MultiHeadAttention("enc.summary", e, e, config.heads, store, rng);
  const std::size_t rows = config.shared_query ? 1 : features;
  query_ = &store.add("enc.summary.query", random_normal({rows, e}, 1.0 / std::sqrt(static_cast<double>(e)), rng));
}

Var FactorizedEncoder::temporal_attention(Var z, std::size_t block, const std::vector<std::uint8_t>& valid,
                                          AttentionDump* dump) const {
  const Shape in = z.shape();
  if (in.size() != 4) throw std::invalid_argument("temporal_attention: expected [B x S x D x e], got " + shape_str(in));
  const std::size_t B = in[0], S = in[1];
  check_valid(valid, B, S);
  // Without factorization the covariate axis becomes part of the model width.
  const std::size_t Dg = config_.factorized ? in[2] : 1;
  const std::size_t E = config_.factorized ? in[3] : in[2] * in[3];
  const std::size_t G = B * Dg;

  Var x = reshape(permute(reshape(z, {B, S, Dg, E}), {0, 2, 1, 3}), {G, S, E});
  Mask keep({G, S, S}, false);
  for (std::size_t g = 0; g < G; ++g) {
    const std::size_t b = g / Dg;
    for (std::size_t q = 0; q < S; ++q)
      for (std::size_t k = 0; k < S; ++k)
        keep.keep[(g * S + q) * S + k] = valid[b * S + k] && (!config_.causal || k <= q);
  }
  const Block& blk = blocks_.at(block);
  Var xp = add_const(x, tile_rows(sinusoidal_table(S, E), G));
  Var y = blk.ln_time(add(x, blk.time(xp, xp, &keep, dump, block, "time", Dg)));
  return reshape(permute(reshape(y, {B, Dg, S, E}), {0, 2, 1, 3}), in);
}

Var FactorizedEncoder::covariate_attention(Var z, std::size_t block, AttentionDump* dump) const {
  const Shape in = z.shape();
  if (in.size() != 4) throw std::invalid_argument("covariate_attention: expected [B x S x D x e], got " + shape_str(in));
  if (!config_.factorized) throw std::logic_error("covariate_attention: encoder is not factorized");
  const std::size_t B = in[0], S = in[1], D = in[2], e = in[3];
  const Block& blk = blocks_.at(block);
  Var x = reshape(z, {B * S, D, e});
  Var y = blk.ln_cov(add(x, blk.cov(x, x, nullptr, dump, block, "cov", S)));
  return reshape(y, in);
}

Var FactorizedEncoder::encode(Var z, const std::vector<std::uint8_t>& valid, AttentionDump* dump) const {
  const Shape& s = z.shape();
  if (s.size() != 4 || s[2] != features_ || s[3] != config_.d_emb)
    throw std::invalid_argument("encode: input " + shape_str(s) + " does not match encoder");
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    z = temporal_attention(z, l, valid, dump);
    if (config_.factorized) z = covariate_attention(z, l, dump);
  }
  return z;
}

Var FactorizedEncoder::summarize(Var z, const std::vector<std::uint8_t>& valid, AttentionDump* dump) const {
  const Shape in = z.shape();
  if (in.size() != 4) throw std::invalid_argument("summarize: expected [B x S x D x e], got " + shape_str(in));
  const std::size_t B = in[0], S = in[1], D = in[2], e = in[3];
  check_valid(valid, B, S);
  Tape& t = z.tape();
  const std::size_t G = B * D;
  Var x = reshape(permute(z, {0, 2, 1, 3}), {G, S, e});
  Var q = t.leaf(*query_);
  Var queries = config_.shared_query ? repeat(reshape(q, {e}), 0, G) : repeat(q, 0, B);
  queries = reshape(queries, {G, 1, e});
  Mask keep({G, 1, S}, false);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t k = 0; k < S; ++k) keep.keep[g * S + k] = valid[(g / D) * S + k];
  Var c = summary_(queries, x, &keep, dump, blocks_.size(), "summary", D);
  return reshape(c, {B, D * e});
}

}  // namespace lsurv
