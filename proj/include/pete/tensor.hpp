#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pete/error.hpp"
#include "pete/rng.hpp"

namespace pete {

// Scalar type of every tensor. Float by default; defining PETE_REAL_DOUBLE
// switches the whole library to double, which is only intended for tightening
// gradient checks.
#ifdef PETE_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

// Dense row-major tensor of Real. Value-semantic handle to shared storage;
// the data buffer is treated as immutable once an op has consumed it, only
// the grad buffer is mutated afterwards.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<Real> values,
                            bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                             bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  int64_t size(int axis) const;

  std::span<Real> data() { return impl_->data; }
  std::span<const Real> data() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient buffer, allocated (zero-filled) on first access.
  std::span<Real> grad();
  std::span<const Real> grad() const;
  void zero_grad();

  // Value of a rank-0 or single-element tensor.
  Real item() const;
  // Convenience element access for tests; row-major multi-index.
  Real at(std::initializer_list<int64_t> idx) const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_tensor(Shape shape, bool requires_grad);
};

Tensor make_tensor(Shape shape, bool requires_grad);

// Ordered record of executed ops. backward() replays the record in exact
// reverse execution order, accumulating gradients additively into every
// tensor on the path that requires them. One tape belongs to one logical
// thread of control.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_step);

  // Seeds d(loss)/d(loss) = 1 and runs the recorded steps in reverse.
  // loss must be rank-0. Calling backward a second time without reset()
  // is an error, as is backward on an empty tape.
  void backward(const Tensor& loss);

  void reset();
  size_t size() const { return steps_.size(); }

  // Tape ops record to, if any (thread-local).
  static Tape* current();

  // RAII activation of a tape on the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

 private:
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Forward ops. Each records its backward step to the active tape when any
// input requires a gradient. Shapes broadcast over leading axes only: for
// binary ops the smaller operand's shape must equal a trailing suffix of the
// larger one's (a rank-0 tensor broadcasts against anything). Every op
// verifies its output is finite and throws NumericError otherwise.
// ---------------------------------------------------------------------------

// [m,k] x [k,n] or batched [b,m,k] x [b,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& x, Real c);

Tensor sin(const Tensor& x);
Tensor cos(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor rsqrt(const Tensor& x);
// tanh approximation of GELU.
Tensor gelu(const Tensor& x);

Tensor sum_axis(const Tensor& x, int axis, bool keepdim = false);
Tensor mean_axis(const Tensor& x, int axis, bool keepdim = false);
// Mean over all elements; returns rank-0.
Tensor mean_all(const Tensor& x);

Tensor softmax_lastdim(const Tensor& x);
Tensor transpose_last2(const Tensor& x);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
std::vector<Tensor> split_lastdim(const Tensor& x, int parts);
// Normalize the last axis to unit L2 norm; zero rows are an error.
Tensor l2_normalize_rows(const Tensor& x);
// x * rsqrt(mean(x^2, last axis) + eps); the gain-free core of RMSNorm.
Tensor rms_normalize(const Tensor& x, Real eps);
// Keeps x where keep != 0, writes fill_value where keep == 0. keep is not
// differentiated through.
Tensor masked_fill(const Tensor& x, const Tensor& keep, Real fill_value);
Tensor reshape(const Tensor& x, Shape new_shape);
// Rows of table selected by ids; gradient scatters into the selected rows
// only.
Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids);
// Main diagonal of a square matrix.
Tensor diagonal(const Tensor& x);
// Rotates consecutive (even, odd) pairs of the last axis by per-(position,
// pair) angles: out_even = a*cos - b*sin, out_odd = a*sin + b*cos.
// x is [..., S, hd]; cos_tab/sin_tab are [S, hd/2] and act as constants.
Tensor rotate_pairs(const Tensor& x, const Tensor& cos_tab,
                    const Tensor& sin_tab);
// Inverted dropout; identity when disabled or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool enabled);

// ---------------------------------------------------------------------------
// Verification harness: max over coordinates of
//   |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued fn of x. h must lie in [1e-4, 1e-2] at 32-bit
// precision.
// ---------------------------------------------------------------------------
double grad_check(const std::function<Tensor(const Tensor&)>& fn, Tensor x,
                  double h = 1e-2);

}  // namespace pete
