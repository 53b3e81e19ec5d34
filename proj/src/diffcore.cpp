#include "lsurv/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "lsurv/rng.hpp"

namespace lsurv {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_))
    throw std::invalid_argument("Array: data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
}

Array Array::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  return Array(std::move(shape), data_);
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Array random_normal(Shape shape, double stddev, Rng& rng) {
  Array a(std::move(shape));
  for (double& v : a.values()) v = stddev * standard_normal(rng);
  return a;
}

void write_csv(std::ostream& os, const Array& a) {
  os << "# shape=" << shape_str(a.shape()) << '\n';
  const std::size_t cols = a.rank() == 0 ? 1 : a.shape().back();
  if (cols == 0) return;
  const auto prec = os.precision(17);
  for (std::size_t i = 0; i < a.size(); ++i) {
    os << a[i] << ((i + 1) % cols == 0 ? '\n' : ',');
  }
  os.precision(prec);
}

// ---- parameters -----------------------------------------------------------

Parameter& ParameterStore::add(std::string name, Array init) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(init)));
  return *params_.back();
}

Parameter* ParameterStore::find(std::string_view name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

std::vector<Parameter*> ParameterStore::all() const {
  std::vector<Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

// ---- tape -----------------------------------------------------------------

Var Tape::constant(Array value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, {}, &p, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Array value, std::span<const Var> parents, BackwardFn backward) {
  bool needs = false;
  for (const Var& p : parents) {
    if (&p.tape() != this) throw std::logic_error("Tape::record: parent recorded on another tape");
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

Array& Tape::grad_of(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Array(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
  if (loss.value().size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  for (Node& n : nodes_) n.grad = Array();
  grad_of(loss.id()).fill(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.param) {
      Array& acc = n.param->grad;
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += n.grad[k];
    } else if (n.backward) {
      n.backward(*this);
    }
  }
}

// ---- helpers --------------------------------------------------------------

namespace {

void require_same_shape(const char* op, const Array& a, const Array& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  Tape& t = a.tape();
  const std::size_t ia = a.id(), ib = b.id(), io = t.next_id();
  const Var ps[] = {a, b};
  return t.record(std::move(out), ps, [ia, ib, io](Tape& t) {
    const Array& g = t.grad(io);
    for (std::size_t id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      Array& ga = t.grad_of(id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  Tape& t = a.tape();
  const std::size_t ia = a.id(), ib = b.id(), io = t.next_id();
  const Var ps[] = {a, b};
  return t.record(std::move(out), ps, [ia, ib, io](Tape& t) {
    const Array& g = t.grad(io);
    if (t.requires_grad(ia)) {
      Array& ga = t.grad_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Array& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  Tape& t = a.tape();
  const std::size_t ia = a.id(), ib = b.id(), io = t.next_id();
  const Var ps[] = {a, b};
  return t.record(std::move(out), ps, [ia, ib, io](Tape& t) {
    const Array& g = t.grad(io);
    const Array& av = t.value(ia);
    const Array& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Array& ga = t.grad_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Array& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Array out = a.value();
  for (double& v : out.values()) v *= s;
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&a, 1), [ia, io, s](Tape& t) {
    const Array& g = t.grad(io);
    Array& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_scalar(Var a, double c) {
  Array out = a.value();
  for (double& v : out.values()) v += c;
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&a, 1), [ia, io](Tape& t) {
    const Array& g = t.grad(io);
    Array& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var add_const(Var a, const Array& c) {
  require_same_shape("add_const", a.value(), c);
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&a, 1), [ia, io](Tape& t) {
    const Array& g = t.grad(io);
    Array& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var mul_const(Var a, const Array& c) {
  require_same_shape("mul_const", a.value(), c);
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&a, 1), [ia, io, c](Tape& t) {
    const Array& g = t.grad(io);
    Array& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[i];
  });
}

Var add_bias(Var a, Var bias) {
  const Array& av = a.value();
  const Array& bv = bias.value();
  if (av.rank() == 0 || bv.rank() != 1 || bv.dim(0) != av.shape().back())
    throw std::invalid_argument("add_bias: bias " + shape_str(bv.shape()) + " does not match last axis of " +
                                shape_str(av.shape()));
  const std::size_t n = bv.size();
  Array out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  Tape& t = a.tape();
  const std::size_t ia = a.id(), ib = bias.id(), io = t.next_id();
  const Var ps[] = {a, bias};
  return t.record(std::move(out), ps, [ia, ib, io, n](Tape& t) {
    const Array& g = t.grad(io);
    if (t.requires_grad(ia)) {
      Array& ga = t.grad_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Array& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
    }
  });
}

// ---- products -------------------------------------------------------------

namespace {

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b^T, b[n x k]
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// c[k x n] += a^T * b, a[m x k], b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Array out({m, n});
  gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  Tape& t = a.tape();
  const std::size_t ia = a.id(), ib = b.id(), io = t.next_id();
  const Var ps[] = {a, b};
  return t.record(std::move(out), ps, [ia, ib, io, m, k, n](Tape& t) {
    const Array& g = t.grad(io);
    if (t.requires_grad(ia)) gemm_nt(g.data(), t.value(ib).data(), t.grad_of(ia).data(), m, n, k);
    if (t.requires_grad(ib)) gemm_tn(t.value(ia).data(), g.data(), t.grad_of(ib).data(), m, k, n);
  });
}

Var bmm(Var a, Var b, bool transpose_b) {
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) ||
      av.dim(2) != (transpose_b ? bv.dim(2) : bv.dim(1)))
    throw std::invalid_argument(std::string("bmm: shape mismatch ") + shape_str(av.shape()) +
                                (transpose_b ? " x T" : " x ") + shape_str(bv.shape()));
  const std::size_t g = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  Array out({g, m, n});
  for (std::size_t s = 0; s < g; ++s) {
    if (transpose_b)
      gemm_nt(av.data() + s * m * k, bv.data() + s * n * k, out.data() + s * m * n, m, k, n);
    else
      gemm_nn(av.data() + s * m * k, bv.data() + s * k * n, out.data() + s * m * n, m, k, n);
  }
  Tape& t = a.tape();
  const std::size_t ia = a.id(), ib = b.id(), io = t.next_id();
  const Var ps[] = {a, b};
  return t.record(std::move(out), ps, [ia, ib, io, g, m, k, n, transpose_b](Tape& t) {
    const Array& go = t.grad(io);
    const Array& av = t.value(ia);
    const Array& bv = t.value(ib);
    const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
    double* ga = need_a ? t.grad_of(ia).data() : nullptr;
    double* gb = need_b ? t.grad_of(ib).data() : nullptr;
    for (std::size_t s = 0; s < g; ++s) {
      const double* gs = go.data() + s * m * n;
      const double* as = av.data() + s * m * k;
      if (transpose_b) {
        const double* bs = bv.data() + s * n * k;
        // out = a b^T: da = g b, db = g^T a
        if (need_a) gemm_nn(gs, bs, ga + s * m * k, m, n, k);
        if (need_b) gemm_tn(gs, as, gb + s * n * k, m, n, k);
      } else {
        const double* bs = bv.data() + s * k * n;
        if (need_a) gemm_nt(gs, bs, ga + s * m * k, m, n, k);
        if (need_b) gemm_tn(as, gs, gb + s * k * n, m, k, n);
      }
    }
  });
}

Var linear(Var x, Var w, Var b) {
  const Array& xv = x.value();
  const Array& wv = w.value();
  const Array& bv = b.value();
  if (xv.rank() == 0 || wv.rank() != 2 || xv.shape().back() != wv.dim(0) || bv.rank() != 1 || bv.dim(0) != wv.dim(1))
    throw std::invalid_argument("linear: shape mismatch x" + shape_str(xv.shape()) + " w" + shape_str(wv.shape()) +
                                " b" + shape_str(bv.shape()));
  const std::size_t in = wv.dim(0), outd = wv.dim(1), rows = xv.size() / in;
  Shape os = xv.shape();
  os.back() = outd;
  Array out(os);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(bv.data(), bv.data() + outd, out.data() + r * outd);
  gemm_nn(xv.data(), wv.data(), out.data(), rows, in, outd);
  Tape& t = x.tape();
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id(), io = t.next_id();
  const Var ps[] = {x, w, b};
  return t.record(std::move(out), ps, [ix, iw, ib, io, in, outd, rows](Tape& t) {
    const Array& g = t.grad(io);
    if (t.requires_grad(ix)) gemm_nt(g.data(), t.value(iw).data(), t.grad_of(ix).data(), rows, outd, in);
    if (t.requires_grad(iw)) gemm_tn(t.value(ix).data(), g.data(), t.grad_of(iw).data(), rows, in, outd);
    if (t.requires_grad(ib)) {
      Array& gb = t.grad_of(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < outd; ++j) gb[j] += g[r * outd + j];
    }
  });
}

// ---- layout ---------------------------------------------------------------

Var reshape(Var a, Shape shape) {
  Array out = a.value().reshaped(std::move(shape));
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&a, 1), [ia, io](Tape& t) {
    const Array& g = t.grad(io);
    Array& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

namespace {

// For each output flat index, the flat index of the input element.
std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& perm, Shape& out_shape) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t d = r; d-- > 1;) in_stride[d - 1] = in_stride[d] * in[d];
  out_shape.resize(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t d = 0; d < r; ++d) {
    out_shape[d] = in[perm[d]];
    stride[d] = in_stride[perm[d]];
  }
  const std::size_t n = shape_numel(in);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out_shape[d]) {
        src += stride[d];
        break;
      }
      src -= stride[d] * (out_shape[d] - 1);
      counter[d] = 0;
    }
  }
  return idx;
}

}  // namespace

Var permute(Var a, const std::vector<std::size_t>& perm) {
  const Array& av = a.value();
  const std::size_t r = av.rank();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) throw std::invalid_argument("permute: permutation rank mismatch");
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw std::invalid_argument("permute: not a permutation");
    seen[p] = true;
  }
  Shape os;
  auto idx = std::make_shared<std::vector<std::size_t>>(permute_index(av.shape(), perm, os));
  Array out(os);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[(*idx)[i]];
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&a, 1), [ia, io, idx](Tape& t) {
    const Array& g = t.grad(io);
    Array& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[(*idx)[i]] += g[i];
  });
}

Var repeat(Var a, std::size_t axis, std::size_t count) {
  const Array& av = a.value();
  if (axis > av.rank()) throw std::invalid_argument("repeat: axis out of range");
  Shape os = av.shape();
  os.insert(os.begin() + static_cast<std::ptrdiff_t>(axis), count);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= av.dim(d);
  for (std::size_t d = axis; d < av.rank(); ++d) inner *= av.dim(d);
  Array out(os);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < count; ++c)
      std::copy(av.data() + o * inner, av.data() + (o + 1) * inner, out.data() + (o * count + c) * inner);
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&a, 1), [ia, io, outer, inner, count](Tape& t) {
    const Array& g = t.grad(io);
    Array& ga = t.grad_of(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t c = 0; c < count; ++c)
        for (std::size_t i = 0; i < inner; ++i) ga[o * inner + i] += g[(o * count + c) * inner + i];
  });
}

Var stack(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("stack: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis > s0.size()) throw std::invalid_argument("stack: axis out of range");
  for (const Var& p : parts) require_same_shape("stack", parts[0].value(), p.value());
  const std::size_t count = parts.size();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis; d < s0.size(); ++d) inner *= s0[d];
  Shape os = s0;
  os.insert(os.begin() + static_cast<std::ptrdiff_t>(axis), count);
  Array out(os);
  for (std::size_t c = 0; c < count; ++c) {
    const Array& pv = parts[c].value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(pv.data() + o * inner, pv.data() + (o + 1) * inner, out.data() + (o * count + c) * inner);
  }
  Tape& t = parts[0].tape();
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  const std::size_t io = t.next_id();
  return t.record(std::move(out), parts, [ids, io, outer, inner, count](Tape& t) {
    const Array& g = t.grad(io);
    for (std::size_t c = 0; c < count; ++c) {
      if (!t.requires_grad(ids[c])) continue;
      Array& gp = t.grad_of(ids[c]);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) gp[o * inner + i] += g[(o * count + c) * inner + i];
    }
  });
}

Var concat_lastdim(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_lastdim: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.empty()) throw std::invalid_argument("concat_lastdim: scalar input");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size() || !std::equal(s.begin(), s.end() - 1, s0.begin()))
      throw std::invalid_argument("concat_lastdim: leading shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
    widths.push_back(s.back());
    total += s.back();
  }
  const std::size_t rows = shape_numel(s0) / s0.back();
  Shape os = s0;
  os.back() = total;
  Array out(os);
  std::size_t off = 0;
  for (std::size_t c = 0; c < parts.size(); ++c) {
    const Array& pv = parts[c].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(pv.data() + r * widths[c], pv.data() + (r + 1) * widths[c], out.data() + r * total + off);
    off += widths[c];
  }
  Tape& t = parts[0].tape();
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  const std::size_t io = t.next_id();
  return t.record(std::move(out), parts, [ids, widths, io, rows, total](Tape& t) {
    const Array& g = t.grad(io);
    std::size_t off = 0;
    for (std::size_t c = 0; c < ids.size(); ++c) {
      if (t.requires_grad(ids[c])) {
        Array& gp = t.grad_of(ids[c]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[c]; ++j) gp[r * widths[c] + j] += g[r * total + off + j];
      }
      off += widths[c];
    }
  });
}

Var gather_rows(Var table, const std::vector<std::size_t>& index) {
  const Array& tv = table.value();
  if (tv.rank() != 2) throw std::invalid_argument("gather_rows: table must be 2-D");
  const std::size_t rows = tv.dim(0), e = tv.dim(1);
  Array out({index.size(), e});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows)
      throw std::out_of_range("gather_rows: index " + std::to_string(index[i]) + " >= " + std::to_string(rows));
    std::copy(tv.data() + index[i] * e, tv.data() + (index[i] + 1) * e, out.data() + i * e);
  }
  Tape& t = table.tape();
  const std::size_t it = table.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&table, 1), [it, io, index, e](Tape& t) {
    const Array& g = t.grad(io);
    Array& gt = t.grad_of(it);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < e; ++j) gt[index[i] * e + j] += g[i * e + j];
  });
}

Var outer(Var a, Var b) {
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() != 1 || bv.rank() != 1)
    throw std::invalid_argument("outer: expects vectors, got " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  const std::size_t n = av.size(), e = bv.size();
  Array out({n, e});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < e; ++j) out[i * e + j] = av[i] * bv[j];
  Tape& t = a.tape();
  const std::size_t ia = a.id(), ib = b.id(), io = t.next_id();
  const Var ps[] = {a, b};
  return t.record(std::move(out), ps, [ia, ib, io, n, e](Tape& t) {
    const Array& g = t.grad(io);
    const Array& av = t.value(ia);
    const Array& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Array& ga = t.grad_of(ia);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < e; ++j) ga[i] += g[i * e + j] * bv[j];
    }
    if (t.requires_grad(ib)) {
      Array& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < e; ++j) gb[j] += g[i * e + j] * av[i];
    }
  });
}

Var where(const Mask& keep, Var a, Var b) {
  require_same_shape("where", a.value(), b.value());
  if (keep.shape != a.shape())
    throw std::invalid_argument("where: mask " + shape_str(keep.shape) + " vs " + shape_str(a.shape()));
  Array out = b.value();
  const Array& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (keep.keep[i]) out[i] = av[i];
  Tape& t = a.tape();
  auto m = std::make_shared<const std::vector<std::uint8_t>>(keep.keep);
  const std::size_t ia = a.id(), ib = b.id(), io = t.next_id();
  const Var ps[] = {a, b};
  return t.record(std::move(out), ps, [ia, ib, io, m](Tape& t) {
    const Array& g = t.grad(io);
    if (t.requires_grad(ia)) {
      Array& ga = t.grad_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i)
        if ((*m)[i]) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Array& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(*m)[i]) gb[i] += g[i];
    }
  });
}

// ---- nonlinearities -------------------------------------------------------

Var softmax_lastdim(Var a, const Mask* mask) {
  const Array& av = a.value();
  if (av.rank() == 0) throw std::invalid_argument("softmax_lastdim: scalar input");
  if (mask && mask->shape != av.shape())
    throw std::invalid_argument("softmax_lastdim: mask " + shape_str(mask->shape) + " vs " + shape_str(av.shape()));
  const std::size_t n = av.shape().back();
  const std::size_t rows = n == 0 ? 0 : av.size() / n;
  Array out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * n;
    double* y = out.data() + r * n;
    const std::uint8_t* k = mask ? mask->keep.data() + r * n : nullptr;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j)
      if (!k || k[j]) mx = std::max(mx, x[j]);
    if (mx == -INFINITY) throw std::invalid_argument("softmax_lastdim: row " + std::to_string(r) + " is fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = (!k || k[j]) ? std::exp(x[j] - mx) : 0.0;
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&a, 1), [ia, io, n, rows](Tape& t) {
    const Array& g = t.grad(io);
    const Array& y = t.value(io);
    Array& ga = t.grad_of(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      double* gar = ga.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) gar[j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var layer_norm(Var a, Var gain, Var bias, double eps) {
  const Array& av = a.value();
  if (av.rank() == 0) throw std::invalid_argument("layer_norm: scalar input");
  const std::size_t d = av.shape().back();
  if (d == 0) throw std::invalid_argument("layer_norm: empty last axis");
  if (gain.value().shape() != Shape{d} || bias.value().shape() != Shape{d})
    throw std::invalid_argument("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  const std::size_t rows = av.size() / d;
  const Array& gv = gain.value();
  const Array& bv = bias.value();
  auto xhat = std::make_shared<Array>(av.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Array out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (x[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  Tape& t = a.tape();
  const std::size_t ia = a.id(), ig = gain.id(), ib = bias.id(), io = t.next_id();
  const Var ps[] = {a, gain, bias};
  return t.record(std::move(out), ps, [ia, ig, ib, io, d, rows, xhat, inv_std](Tape& t) {
    const Array& g = t.grad(io);
    const Array& gv = t.value(ig);
    if (t.requires_grad(ig)) {
      Array& gg = t.grad_of(ig);
      for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * (*xhat)[i];
    }
    if (t.requires_grad(ib)) {
      Array& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
    }
    if (t.requires_grad(ia)) {
      Array& ga = t.grad_of(ia);
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double gh = g[r * d + j] * gv[j];
          s1 += gh;
          s2 += gh * (*xhat)[r * d + j];
        }
        const double is = (*inv_std)[r];
        for (std::size_t j = 0; j < d; ++j) {
          const double gh = g[r * d + j] * gv[j];
          ga[r * d + j] += is * (gh - inv_d * s1 - (*xhat)[r * d + j] * inv_d * s2);
        }
      }
    }
  });
}

namespace {

Var elementwise(Var a, double (*f)(double), double (*df)(double x, double y)) {
  Array out = a.value();
  for (double& v : out.values()) v = f(v);
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&a, 1), [ia, io, df](Tape& t) {
    const Array& g = t.grad(io);
    const Array& x = t.value(ia);
    const Array& y = t.value(io);
    Array& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_f(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_df(double x, double) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x); }
double exp_f(double x) { return std::exp(x); }
double exp_df(double, double y) { return y; }
double log_f(double x) { return std::log(x); }
double log_df(double x, double) { return 1.0 / x; }
double softplus_f(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double softplus_df(double x, double) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var gelu(Var a) { return elementwise(a, gelu_f, gelu_df); }
Var exp(Var a) { return elementwise(a, exp_f, exp_df); }
Var log(Var a) { return elementwise(a, log_f, log_df); }
Var softplus(Var a) { return elementwise(a, softplus_f, softplus_df); }

Var clamp(Var a, double lo, double hi) {
  Array out = a.value();
  for (double& v : out.values()) v = std::clamp(v, lo, hi);
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&a, 1), [ia, io, lo, hi](Tape& t) {
    const Array& g = t.grad(io);
    const Array& x = t.value(ia);
    Array& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > lo && x[i] < hi) ga[i] += g[i];
  });
}

// ---- reductions -----------------------------------------------------------

Var sum(Var a) {
  const Array& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(Array::scalar(s), std::span<const Var>(&a, 1), [ia, io](Tape& t) {
    const double g = t.grad(io)[0];
    Array& ga = t.grad_of(ia);
    for (double& v : ga.values()) v += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_lastdim(Var a) {
  const Array& av = a.value();
  if (av.rank() == 0) throw std::invalid_argument("sum_lastdim: scalar input");
  const std::size_t n = av.shape().back();
  Shape os(av.shape().begin(), av.shape().end() - 1);
  Array out(os);
  const std::size_t rows = out.size();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += av[r * n + j];
    out[r] = s;
  }
  Tape& t = a.tape();
  const std::size_t ia = a.id(), io = t.next_id();
  return t.record(std::move(out), std::span<const Var>(&a, 1), [ia, io, n, rows](Tape& t) {
    const Array& g = t.grad(io);
    Array& ga = t.grad_of(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r];
  });
}

// ---- gradient check -------------------------------------------------------

GradCheckResult grad_check(const ScalarLossFn& loss, std::span<Parameter* const> params, const GradCheckOptions& opts) {
  if (opts.step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  auto eval = [&]() {
    Tape t;
    const double v = loss(t).value()[0];
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: loss is not finite");
    return v;
  };
  for (Parameter* p : params) p->zero_grad();
  {
    Tape t;
    Var l = loss(t);
    if (!std::isfinite(l.value()[0])) throw std::runtime_error("grad_check: loss is not finite");
    t.backward(l);
  }
  GradCheckResult res;
  Rng rng(opts.seed);
  for (Parameter* p : params) {
    std::vector<std::size_t> coords(p->value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_param && coords.size() > opts.max_coords_per_param) {
      shuffle(coords, rng);
      coords.resize(opts.max_coords_per_param);
    }
    for (std::size_t i : coords) {
      const double orig = p->value[i];
      p->value[i] = orig + opts.step;
      const double up = eval();
      p->value[i] = orig - opts.step;
      const double down = eval();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = p->grad[i];
      const double err =
          std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
      ++res.coords_checked;
      if (err > res.max_rel_error || res.worst_param.empty()) {
        res.max_rel_error = std::max(err, res.max_rel_error);
        res.worst_param = p->name;
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace lsurv
