#include "lsurv/hazardheads.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "lsurv/encoder.hpp"

namespace lsurv {

CauseHeads::CauseHeads(std::size_t context_dim, std::size_t causes, ParameterStore& store, Rng& rng)
    : context_dim_(context_dim) {
  if (causes < 1) throw std::invalid_argument("heads: need at least one cause");
  const std::size_t hidden = std::max<std::size_t>(1, context_dim / 2);
  for (std::size_t k = 0; k < causes; ++k) {
    const std::string p = "head" + std::to_string(k + 1) + ".";
    Head h;
    h.w1 = &store.add(p + "w1", random_normal({context_dim, hidden}, 1.0 / std::sqrt(double(context_dim)), rng));
    h.b1 = &store.add(p + "b1", Array({hidden}));
    h.w2 = &store.add(p + "w2", random_normal({hidden, 1}, 1.0 / std::sqrt(double(hidden)), rng));
    h.b2 = &store.add(p + "b2", Array({1}));
    heads_.push_back(h);
  }
}

Var CauseHeads::decode_logits(Var c, std::size_t horizon) const {
  if (horizon < 1) throw std::invalid_argument("decode_logits: horizon must be >= 1");
  const Shape& cs = c.shape();
  if (cs.size() != 2 || cs[1] != context_dim_)
    throw std::invalid_argument("decode_logits: context " + shape_str(cs) + " does not match heads");
  Tape& t = c.tape();
  const std::size_t B = cs[0], C = context_dim_;
  Array pos({B, horizon, C});
  if (!zero_positions_) {
    const Array table = sinusoidal_table(horizon, C, 1);
    for (std::size_t b = 0; b < B; ++b) std::copy(table.data(), table.data() + table.size(), pos.data() + b * table.size());
  }
  Var x = add_const(repeat(c, 1, horizon), pos);
  std::vector<Var> logits;
  for (const Head& h : heads_) {
    Var hid = gelu(linear(x, t.leaf(*h.w1), t.leaf(*h.b1)));
    logits.push_back(reshape(linear(hid, t.leaf(*h.w2), t.leaf(*h.b2)), {B, horizon}));
  }
  return stack(logits, 2);
}

namespace {

void hazard_rows(const double* f, double* out, std::size_t K) {
  double m = 0.0;
  for (std::size_t k = 0; k < K; ++k) m = std::max(m, f[k]);
  double z = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    out[k] = std::exp(f[k] - m);
    z += out[k];
  }
  // keep the implicit no-event share representable so row sums stay below one
  z += std::max(std::exp(-m), 1e-14 * z);
  for (std::size_t k = 0; k < K; ++k) out[k] /= z;
}

}  // namespace

Array hazards(const Array& logits) {
  if (logits.rank() == 0) throw std::invalid_argument("hazards: scalar input");
  const std::size_t K = logits.shape().back();
  Array out(logits.shape());
  for (std::size_t r = 0; K > 0 && r < logits.size() / K; ++r) hazard_rows(logits.data() + r * K, out.data() + r * K, K);
  return out;
}

Var hazards(Var logits) {
  Array out = hazards(logits.value());
  if (!out.all_finite()) throw std::invalid_argument("hazards: non-finite logits");
  const std::size_t K = out.shape().back();
  const std::size_t rows = out.size() / K;
  Tape& t = logits.tape();
  const std::size_t ia = logits.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&logits, 1), [ia, io, K, rows](Tape& t) {
    const Array& g = t.grad(io);
    const Array& lam = t.value(io);
    Array& ga = t.grad_of(ia);
    // d lambda_k / d f_m = lambda_k (delta_km - lambda_m)
    for (std::size_t r = 0; r < rows; ++r) {
      const double* l = lam.data() + r * K;
      const double* gr = g.data() + r * K;
      double dot = 0.0;
      for (std::size_t k = 0; k < K; ++k) dot += l[k] * gr[k];
      for (std::size_t m = 0; m < K; ++m) ga[r * K + m] += l[m] * (gr[m] - dot);
    }
  });
}

Array survival(const Array& lambda) {
  if (lambda.rank() != 2) throw std::invalid_argument("survival: expected H x K hazards");
  const std::size_t H = lambda.dim(0), K = lambda.dim(1);
  Array s({H});
  double acc = 1.0;
  for (std::size_t j = 0; j < H; ++j) {
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += lambda[j * K + k];
    acc *= 1.0 - total;
    s[j] = acc;
  }
  return s;
}

Array cif(const Array& lambda, const Array& surv) {
  if (lambda.rank() != 2 || surv.shape() != Shape{lambda.dim(0)})
    throw std::invalid_argument("cif: expected H x K hazards and H survival");
  const std::size_t H = lambda.dim(0), K = lambda.dim(1);
  Array f({H, K});
  for (std::size_t j = 0; j < H; ++j) {
    const double prev = j == 0 ? 1.0 : surv[j - 1];
    for (std::size_t k = 0; k < K; ++k) f[j * K + k] = (j == 0 ? 0.0 : f[(j - 1) * K + k]) + lambda[j * K + k] * prev;
  }
  return f;
}

HazardGrid HazardGrid::from_hazards(Array lambda) {
  HazardGrid g;
  g.surv = survival(lambda);
  g.F = cif(lambda, g.surv);
  g.lambda = std::move(lambda);
  return g;
}

}  // namespace lsurv
