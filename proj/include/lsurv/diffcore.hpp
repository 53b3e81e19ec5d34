// Dense row-major arrays with a define-by-run reverse-mode tape.
//
// Every differentiable op takes and returns `Var` handles that live on a
// `Tape`. A tape is rebuilt for each forward pass. Calling `Tape::backward`
// seeds the scalar loss with 1, replays the recorded nodes in reverse order
// and adds the resulting leaf gradients into `Parameter::grad`. Parameter
// gradients are never cleared by the tape, so two backward passes without
// `zero_grad` accumulate twice.
//
// Broadcasting is limited to the documented cases: last-axis bias/affine
// (`add_bias`, `layer_norm`) and mask application (`softmax_lastdim`,
// `where`).
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lsurv/rng.hpp"

namespace lsurv {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> data);

  static Array scalar(double v) { return Array({}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Same data, new extents; the element count must match.
  Array reshaped(Shape shape) const;
  void fill(double v);
  bool all_finite() const;

  bool operator==(const Array& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Entries drawn i.i.d. from N(0, stddev^2).
Array random_normal(Shape shape, double stddev, Rng& rng);

// Debug dump: `# shape=AxBxC` header, then rows of the last axis.
void write_csv(std::ostream& os, const Array& a);

// Boolean keep-mask used by softmax_lastdim and where.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> keep;

  Mask() = default;
  Mask(Shape s, bool value) : shape(std::move(s)), keep(shape_numel(shape), value ? 1 : 0) {}
};

struct Parameter {
  std::string name;
  Array value;
  Array grad;

  Parameter(std::string n, Array v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(0.0); }
};

// Owns a model's parameters in registration order; addresses are stable.
class ParameterStore {
 public:
  Parameter& add(std::string name, Array init);
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  std::vector<Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Array& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value);
  // Leaf bound to a parameter; backward adds into p.grad. The parameter
  // must outlive the tape and must not be written while the tape is live.
  Var leaf(Parameter& p);
  // Records a new node. `backward` reads grad(out) and accumulates into its
  // parents through `grad_of`. It is only invoked when `out` requires a
  // gradient and received one.
  Var record(Array value, std::span<const Var> parents, BackwardFn backward);

  const Array& value(std::size_t id) const { return nodes_[id].value; }
  const Array& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient accumulator of a node, zero-initialised on first touch.
  Array& grad_of(std::size_t id);

  void backward(Var loss);
  std::size_t size() const { return nodes_.size(); }
  // Id the next recorded node will receive; ops capture it so their
  // backward closure can find its own output gradient.
  std::size_t next_id() const { return nodes_.size(); }

 private:
  struct Node {
    Array value;
    Array grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

inline const Array& Var::value() const { return tape_->value(id_); }

// ---- primitive ops --------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double c);
Var add_const(Var a, const Array& c);
Var mul_const(Var a, const Array& c);
// a[..., n] + bias[n]
Var add_bias(Var a, Var bias);

// Plain 2-D product a[m x k] * b[k x n].
Var matmul(Var a, Var b);
// Batched product over the leading axis: a[G x m x k] * b[G x k x n], or
// a * b^T with b[G x n x k] when transpose_b is set.
Var bmm(Var a, Var b, bool transpose_b = false);
// x[..., in] * w[in x out] + b[out]; leading axes are flattened into rows.
Var linear(Var x, Var w, Var b);

Var reshape(Var a, Shape shape);
Var permute(Var a, const std::vector<std::size_t>& perm);
// Inserts a new axis of length `count` at `axis`, copying the input.
Var repeat(Var a, std::size_t axis, std::size_t count);
// Stacks equally shaped inputs along a new axis.
Var stack(std::span<const Var> parts, std::size_t axis);
Var concat_lastdim(std::span<const Var> parts);
// table[c x e] rows picked by index; result [n x e].
Var gather_rows(Var table, const std::vector<std::size_t>& index);
// a[n] (outer) b[e] -> [n x e]
Var outer(Var a, Var b);
// keep ? a : b, elementwise; mask shape equals a's shape.
Var where(const Mask& keep, Var a, Var b);

Var softmax_lastdim(Var a, const Mask* mask = nullptr);
Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);
// Exact form: x * Phi(x) with Phi the standard normal CDF (erf based).
Var gelu(Var a);
Var exp(Var a);
Var log(Var a);
Var softplus(Var a);
// Gradient passes through strictly inside [lo, hi] and is zero outside.
Var clamp(Var a, double lo, double hi);

Var sum(Var a);
Var mean(Var a);
Var sum_lastdim(Var a);

// ---- gradient checking ----------------------------------------------------

struct GradCheckOptions {
  double step = 1e-5;
  // Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
};

// `loss` builds a scalar on the given tape from the parameters. Reports
// max |analytic - central difference| / max(1, |analytic|, |numeric|).
// Parameter gradients are zeroed before the analytic pass.
using ScalarLossFn = std::function<Var(Tape&)>;
GradCheckResult grad_check(const ScalarLossFn& loss, std::span<Parameter* const> params,
                           const GradCheckOptions& opts = {});

}  // namespace lsurv
