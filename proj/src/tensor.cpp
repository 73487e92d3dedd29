#include "pete/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <utility>

namespace pete {

namespace {

thread_local Tape* g_current_tape = nullptr;

void check_finite(const char* op, const std::vector<Real>& values) {
  for (const Real v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in output");
    }
  }
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                   " vs " + shape_str(b));
}

// True when `small` equals a trailing suffix of `big` (rank-0 matches
// everything). This is the only broadcast form the library supports.
bool trailing_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

void ensure_grad(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), Real(0));
}

bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (Tape::current() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Marks `out` as on the grad path and records the step.
void record(Tensor& out, std::function<void()> step) {
  out.set_requires_grad(true);
  Tape::current()->record(std::move(step));
}

using ImplPtr = std::shared_ptr<TensorImpl>;

struct BinaryArgs {
  const TensorImpl* big;    // operand carrying the output shape
  const TensorImpl* small;  // broadcast operand (may equal big's partner)
  bool a_is_big;
};

BinaryArgs resolve_binary(const char* op, const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (trailing_suffix(sa, sb)) return {a.impl().get(), b.impl().get(), true};
  if (trailing_suffix(sb, sa)) return {b.impl().get(), a.impl().get(), false};
  shape_fail(op, sa, sb);
}

int normalize_axis(const char* op, int axis, int64_t rank) {
  int ax = axis;
  if (ax < 0) ax += static_cast<int>(rank);
  if (ax < 0 || ax >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return ax;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out << ',';
    out << s[i];
  }
  out << ']';
  return out.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

// --------------------------------------------------------------------------
// Tensor
// --------------------------------------------------------------------------

Tensor make_tensor(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  const int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), Real(0));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return make_tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  Tensor t = make_tensor(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return full({}, value, requires_grad);
}

Tensor Tensor::from_vector(Shape shape, std::vector<Real> values,
                           bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("from_vector: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  }
  Tensor t = make_tensor(std::move(shape), requires_grad);
  t.impl_->data = std::move(values);
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = make_tensor(std::move(shape), requires_grad);
  for (auto& v : t.impl_->data) v = static_cast<Real>(rng.normal() * stddev);
  return t;
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                            bool requires_grad) {
  Tensor t = make_tensor(std::move(shape), requires_grad);
  for (auto& v : t.impl_->data) v = static_cast<Real>(rng.uniform(lo, hi));
  return t;
}

int64_t Tensor::size(int axis) const {
  const int ax = normalize_axis("size", axis, dim());
  return impl_->shape[static_cast<size_t>(ax)];
}

std::span<Real> Tensor::grad() {
  ensure_grad(*impl_);
  return impl_->grad;
}

std::span<const Real> Tensor::grad() const {
  ensure_grad(*impl_);
  return impl_->grad;
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), Real(0));
}

Real Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor has " + std::to_string(numel()) +
                     " elements");
  }
  return impl_->data[0];
}

Real Tensor::at(std::initializer_list<int64_t> idx) const {
  if (static_cast<int64_t>(idx.size()) != dim()) {
    throw ShapeError("at: rank mismatch");
  }
  int64_t flat = 0;
  size_t ax = 0;
  for (int64_t i : idx) {
    flat = flat * impl_->shape[ax] + i;
    ++ax;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

// --------------------------------------------------------------------------
// Tape
// --------------------------------------------------------------------------

Tape::Tape() = default;
Tape::~Tape() = default;

Tape* Tape::current() { return g_current_tape; }

Tape::Scope::Scope(Tape& tape) : prev_(g_current_tape) {
  g_current_tape = &tape;
}

Tape::Scope::~Scope() { g_current_tape = prev_; }

void Tape::record(std::function<void()> backward_step) {
  steps_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
  if (loss.dim() != 0) {
    throw ShapeError("backward: loss must be rank-0, got " +
                     shape_str(loss.shape()));
  }
  if (steps_.empty()) throw Error("backward: tape is empty");
  if (consumed_) throw Error("backward: tape already consumed; reset() first");
  consumed_ = true;
  loss.impl()->grad.assign(1, Real(1));
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void Tape::reset() {
  steps_.clear();
  consumed_ = false;
}

// --------------------------------------------------------------------------
// Binary elementwise ops
// --------------------------------------------------------------------------

namespace {

template <typename Fwd>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b,
                          Fwd fwd,
                          // d(out)/d(a) and d(out)/d(b) given both operands
                          Real (*da)(Real, Real), Real (*db)(Real, Real)) {
  const BinaryArgs args = resolve_binary(op, a, b);
  Tensor out = make_tensor(args.big->shape, false);
  const auto& bigv = args.big->data;
  const auto& smallv = args.small->data;
  const size_t sn = smallv.size();
  auto& ov = out.impl()->data;
  for (size_t i = 0; i < bigv.size(); ++i) {
    const Real x = args.a_is_big ? bigv[i] : smallv[i % sn];
    const Real y = args.a_is_big ? smallv[i % sn] : bigv[i];
    ov[i] = fwd(x, y);
  }
  check_finite(op, ov);
  if (tracing({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool a_is_big = args.a_is_big;
    record(out, [ai, bi, oi, a_is_big, da, db]() {
      if (oi->grad.empty()) return;
      TensorImpl& big = a_is_big ? *ai : *bi;
      TensorImpl& small = a_is_big ? *bi : *ai;
      const size_t sn = small.data.size();
      auto dbig = a_is_big ? da : db;
      auto dsmall = a_is_big ? db : da;
      if (big.requires_grad) {
        ensure_grad(big);
        for (size_t i = 0; i < oi->grad.size(); ++i) {
          const Real x = a_is_big ? big.data[i] : small.data[i % sn];
          const Real y = a_is_big ? small.data[i % sn] : big.data[i];
          big.grad[i] += oi->grad[i] * dbig(x, y);
        }
      }
      if (small.requires_grad) {
        ensure_grad(small);
        for (size_t i = 0; i < oi->grad.size(); ++i) {
          const Real x = a_is_big ? big.data[i] : small.data[i % sn];
          const Real y = a_is_big ? small.data[i % sn] : big.data[i];
          small.grad[i % sn] += oi->grad[i] * dsmall(x, y);
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](Real x, Real y) { return x + y; },
      +[](Real, Real) { return Real(1); }, +[](Real, Real) { return Real(1); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](Real x, Real y) { return x - y; },
      +[](Real, Real) { return Real(1); },
      +[](Real, Real) { return Real(-1); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](Real x, Real y) { return x * y; },
      +[](Real, Real y) { return y; }, +[](Real x, Real) { return x; });
}

Tensor scalar_mul(const Tensor& x, Real c) {
  Tensor out = make_tensor(x.shape(), false);
  auto& ov = out.impl()->data;
  const auto& xv = x.impl()->data;
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] * c;
  check_finite("scalar_mul", ov);
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record(out, [xi, oi, c]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      for (size_t i = 0; i < oi->grad.size(); ++i)
        xi->grad[i] += oi->grad[i] * c;
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// Unary elementwise ops
// --------------------------------------------------------------------------

namespace {

// dfn receives (x, y) where y = fn(x).
Tensor unary_elementwise(const char* op, const Tensor& x, Real (*fn)(Real),
                         Real (*dfn)(Real, Real)) {
  Tensor out = make_tensor(x.shape(), false);
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = fn(xv[i]);
  check_finite(op, ov);
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record(out, [xi, oi, dfn]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      for (size_t i = 0; i < oi->grad.size(); ++i)
        xi->grad[i] += oi->grad[i] * dfn(xi->data[i], oi->data[i]);
    });
  }
  return out;
}

constexpr double kGeluC = 0.044715;

Real gelu_fwd(Real x) {
  const double xd = x;
  const double u = std::numbers::inv_sqrtpi * std::numbers::sqrt2 *
                   (xd + kGeluC * xd * xd * xd);
  return static_cast<Real>(0.5 * xd * (1.0 + std::tanh(u)));
}

Real gelu_bwd(Real x, Real) {
  const double xd = x;
  const double k = std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  const double u = k * (xd + kGeluC * xd * xd * xd);
  const double t = std::tanh(u);
  const double sech2 = 1.0 - t * t;
  return static_cast<Real>(0.5 * (1.0 + t) +
                           0.5 * xd * sech2 * k * (1.0 + 3.0 * kGeluC * xd * xd));
}

}  // namespace

Tensor sin(const Tensor& x) {
  return unary_elementwise(
      "sin", x, +[](Real v) { return std::sin(v); },
      +[](Real v, Real) { return std::cos(v); });
}

Tensor cos(const Tensor& x) {
  return unary_elementwise(
      "cos", x, +[](Real v) { return std::cos(v); },
      +[](Real v, Real) { return -std::sin(v); });
}

Tensor exp(const Tensor& x) {
  return unary_elementwise(
      "exp", x, +[](Real v) { return std::exp(v); },
      +[](Real, Real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_elementwise(
      "log", x, +[](Real v) { return std::log(v); },
      +[](Real v, Real) { return Real(1) / v; });
}

Tensor rsqrt(const Tensor& x) {
  return unary_elementwise(
      "rsqrt", x, +[](Real v) { return Real(Real(1) / std::sqrt(v)); },
      +[](Real, Real y) { return Real(-0.5) * y * y * y; });
}

Tensor gelu(const Tensor& x) {
  return unary_elementwise("gelu", x, &gelu_fwd, &gelu_bwd);
}

// --------------------------------------------------------------------------
// matmul
// --------------------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n], optional transposes, raw buffers.
void gemm_acc(const Real* a, const Real* b, Real* c, int64_t m, int64_t k,
              int64_t n, bool trans_a, bool trans_b) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const Real av = trans_a ? a[p * m + i] : a[i * k + p];
      const Real* brow = trans_b ? nullptr : b + p * n;
      if (trans_b) {
        for (int64_t j = 0; j < n; ++j) c[i * n + j] += av * b[j * k + p];
      } else {
        for (int64_t j = 0; j < n; ++j) c[i * n + j] += av * brow[j];
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool batched = sa.size() == 3 && sb.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) || batched)) {
    shape_fail("matmul", sa, sb);
  }
  const int64_t nb = batched ? sa[0] : 1;
  const int64_t m = sa[sa.size() - 2];
  const int64_t k = sa[sa.size() - 1];
  const int64_t n = sb[sb.size() - 1];
  if (k != sb[sb.size() - 2] || (batched && sa[0] != sb[0])) {
    shape_fail("matmul", sa, sb);
  }
  Shape out_shape = batched ? Shape{nb, m, n} : Shape{m, n};
  Tensor out = make_tensor(std::move(out_shape), false);
  const Real* av = a.impl()->data.data();
  const Real* bv = b.impl()->data.data();
  Real* ov = out.impl()->data.data();
  for (int64_t batch = 0; batch < nb; ++batch) {
    gemm_acc(av + batch * m * k, bv + batch * k * n, ov + batch * m * n, m, k,
             n, false, false);
  }
  check_finite("matmul", out.impl()->data);
  if (tracing({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    record(out, [ai, bi, oi, nb, m, k, n]() {
      if (oi->grad.empty()) return;
      const Real* g = oi->grad.data();
      if (ai->requires_grad) {
        ensure_grad(*ai);
        // dA = G * B^T
        for (int64_t batch = 0; batch < nb; ++batch) {
          gemm_acc(g + batch * m * n, bi->data.data() + batch * k * n,
                   ai->grad.data() + batch * m * k, m, n, k, false, true);
        }
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        // dB = A^T * G
        for (int64_t batch = 0; batch < nb; ++batch) {
          gemm_acc(ai->data.data() + batch * m * k, g + batch * m * n,
                   bi->grad.data() + batch * k * n, k, m, n, true, false);
        }
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// Reductions
// --------------------------------------------------------------------------

namespace {

Tensor reduce_axis(const char* op, const Tensor& x, int axis, bool keepdim,
                   bool mean) {
  const int ax = normalize_axis(op, axis, x.dim());
  const auto& xs = x.shape();
  const int64_t axis_n = xs[static_cast<size_t>(ax)];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= xs[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(ax) + 1; i < xs.size(); ++i)
    inner *= xs[i];
  Shape out_shape;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (static_cast<int>(i) == ax) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(xs[i]);
    }
  }
  Tensor out = make_tensor(std::move(out_shape), false);
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  const Real scale = mean ? Real(1) / static_cast<Real>(axis_n) : Real(1);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      Real acc = 0;
      for (int64_t a = 0; a < axis_n; ++a) {
        acc += xv[static_cast<size_t>((o * axis_n + a) * inner + i)];
      }
      ov[static_cast<size_t>(o * inner + i)] = acc * scale;
    }
  }
  check_finite(op, ov);
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record(out, [xi, oi, outer, inner, axis_n, scale]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
          const Real g = oi->grad[static_cast<size_t>(o * inner + i)] * scale;
          for (int64_t a = 0; a < axis_n; ++a) {
            xi->grad[static_cast<size_t>((o * axis_n + a) * inner + i)] += g;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor sum_axis(const Tensor& x, int axis, bool keepdim) {
  return reduce_axis("sum_axis", x, axis, keepdim, false);
}

Tensor mean_axis(const Tensor& x, int axis, bool keepdim) {
  return reduce_axis("mean_axis", x, axis, keepdim, true);
}

Tensor mean_all(const Tensor& x) {
  const int64_t n = x.numel();
  Tensor out = make_tensor({}, false);
  Real acc = 0;
  for (const Real v : x.impl()->data) acc += v;
  out.impl()->data[0] = acc / static_cast<Real>(n);
  check_finite("mean_all", out.impl()->data);
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record(out, [xi, oi, n]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      const Real g = oi->grad[0] / static_cast<Real>(n);
      for (auto& gv : xi->grad) gv += g;
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// softmax / normalization
// --------------------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  if (x.dim() < 1) throw ShapeError("softmax: rank-0 input");
  const int64_t cols = x.shape().back();
  const int64_t rows = x.numel() / cols;
  Tensor out = make_tensor(x.shape(), false);
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  for (int64_t r = 0; r < rows; ++r) {
    const Real* row = xv.data() + r * cols;
    Real* orow = ov.data() + r * cols;
    Real m = row[0];
    for (int64_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
    Real sum = 0;
    for (int64_t c = 0; c < cols; ++c) {
      orow[c] = std::exp(row[c] - m);
      sum += orow[c];
    }
    const Real inv = Real(1) / sum;
    for (int64_t c = 0; c < cols; ++c) orow[c] *= inv;
  }
  check_finite("softmax", ov);
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record(out, [xi, oi, rows, cols]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      for (int64_t r = 0; r < rows; ++r) {
        const Real* y = oi->data.data() + r * cols;
        const Real* g = oi->grad.data() + r * cols;
        Real* dx = xi->grad.data() + r * cols;
        Real dot = 0;
        for (int64_t c = 0; c < cols; ++c) dot += g[c] * y[c];
        for (int64_t c = 0; c < cols; ++c) dx[c] += y[c] * (g[c] - dot);
      }
    });
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
  if (x.dim() < 1) throw ShapeError("l2_normalize: rank-0 input");
  const int64_t cols = x.shape().back();
  const int64_t rows = x.numel() / cols;
  Tensor out = make_tensor(x.shape(), false);
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  std::vector<Real> inv_norms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const Real* row = xv.data() + r * cols;
    double sq = 0;
    for (int64_t c = 0; c < cols; ++c) sq += double(row[c]) * row[c];
    if (sq == 0.0) {
      throw NumericError("l2_normalize: zero-norm row " + std::to_string(r));
    }
    const Real inv = static_cast<Real>(1.0 / std::sqrt(sq));
    inv_norms[static_cast<size_t>(r)] = inv;
    for (int64_t c = 0; c < cols; ++c) ov[r * cols + c] = row[c] * inv;
  }
  check_finite("l2_normalize", ov);
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record(out, [xi, oi, rows, cols, inv_norms = std::move(inv_norms)]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      // dx = (g - y * (g . y)) / ||x||
      for (int64_t r = 0; r < rows; ++r) {
        const Real* y = oi->data.data() + r * cols;
        const Real* g = oi->grad.data() + r * cols;
        Real* dx = xi->grad.data() + r * cols;
        Real dot = 0;
        for (int64_t c = 0; c < cols; ++c) dot += g[c] * y[c];
        const Real inv = inv_norms[static_cast<size_t>(r)];
        for (int64_t c = 0; c < cols; ++c) dx[c] += (g[c] - y[c] * dot) * inv;
      }
    });
  }
  return out;
}

Tensor rms_normalize(const Tensor& x, Real eps) {
  if (eps <= 0) throw ConfigError("rms_normalize: eps must be positive");
  if (x.dim() < 1) throw ShapeError("rms_normalize: rank-0 input");
  const int64_t cols = x.shape().back();
  const int64_t rows = x.numel() / cols;
  Tensor out = make_tensor(x.shape(), false);
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  std::vector<Real> rcache(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const Real* row = xv.data() + r * cols;
    double ms = 0;
    for (int64_t c = 0; c < cols; ++c) ms += double(row[c]) * row[c];
    ms = ms / static_cast<double>(cols) + double(eps);
    const Real rinv = static_cast<Real>(1.0 / std::sqrt(ms));
    rcache[static_cast<size_t>(r)] = rinv;
    for (int64_t c = 0; c < cols; ++c) ov[r * cols + c] = row[c] * rinv;
  }
  check_finite("rms_normalize", ov);
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record(out, [xi, oi, rows, cols, rcache = std::move(rcache)]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      // y = x*r with r = (mean(x^2)+eps)^(-1/2):
      //   dx_j = g_j*r - x_j * r^3/d * sum_i(g_i*x_i)
      for (int64_t r = 0; r < rows; ++r) {
        const Real* xrow = xi->data.data() + r * cols;
        const Real* g = oi->grad.data() + r * cols;
        Real* dx = xi->grad.data() + r * cols;
        const Real rinv = rcache[static_cast<size_t>(r)];
        Real dot = 0;
        for (int64_t c = 0; c < cols; ++c) dot += g[c] * xrow[c];
        const Real k = rinv * rinv * rinv * dot / static_cast<Real>(cols);
        for (int64_t c = 0; c < cols; ++c) dx[c] += g[c] * rinv - xrow[c] * k;
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// Layout ops
// --------------------------------------------------------------------------

Tensor transpose_last2(const Tensor& x) {
  if (x.dim() < 2) {
    throw ShapeError("transpose_last2: needs rank >= 2, got " +
                     shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  const size_t nd = out_shape.size();
  std::swap(out_shape[nd - 1], out_shape[nd - 2]);
  const int64_t rows = x.shape()[nd - 2];
  const int64_t cols = x.shape()[nd - 1];
  const int64_t outer = x.numel() / (rows * cols);
  Tensor out = make_tensor(std::move(out_shape), false);
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  for (int64_t o = 0; o < outer; ++o) {
    const Real* src = xv.data() + o * rows * cols;
    Real* dst = ov.data() + o * rows * cols;
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record(out, [xi, oi, outer, rows, cols]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      for (int64_t o = 0; o < outer; ++o) {
        const Real* g = oi->grad.data() + o * rows * cols;
        Real* dx = xi->grad.data() + o * rows * cols;
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < cols; ++j)
            dx[i * cols + j] += g[j * rows + i];
      }
    });
  }
  return out;
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no inputs");
  const Shape& first = parts[0].shape();
  if (first.empty()) throw ShapeError("concat_lastdim: rank-0 input");
  int64_t total_last = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() ||
        !std::equal(s.begin(), s.end() - 1, first.begin())) {
      shape_fail("concat_lastdim", first, s);
    }
    total_last += s.back();
  }
  Shape out_shape = first;
  out_shape.back() = total_last;
  const int64_t rows = shape_numel(first) / first.back();
  Tensor out = make_tensor(std::move(out_shape), false);
  auto& ov = out.impl()->data;
  int64_t col_off = 0;
  for (const Tensor& p : parts) {
    const int64_t c = p.shape().back();
    const auto& pv = p.impl()->data;
    for (int64_t r = 0; r < rows; ++r) {
      std::copy_n(pv.data() + r * c, c,
                  ov.data() + r * total_last + col_off);
    }
    col_off += c;
  }
  bool any_grad = false;
  for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
  if (Tape::current() != nullptr && any_grad) {
    std::vector<ImplPtr> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.impl());
    ImplPtr oi = out.impl();
    record(out, [impls = std::move(impls), oi, rows, total_last]() {
      if (oi->grad.empty()) return;
      int64_t col_off = 0;
      for (const auto& pi : impls) {
        const int64_t c = pi->shape.back();
        if (pi->requires_grad) {
          ensure_grad(*pi);
          for (int64_t r = 0; r < rows; ++r) {
            const Real* g = oi->grad.data() + r * total_last + col_off;
            Real* dst = pi->grad.data() + r * c;
            for (int64_t j = 0; j < c; ++j) dst[j] += g[j];
          }
        }
        col_off += c;
      }
    });
  }
  return out;
}

std::vector<Tensor> split_lastdim(const Tensor& x, int parts) {
  if (x.dim() < 1) throw ShapeError("split_lastdim: rank-0 input");
  const int64_t last = x.shape().back();
  if (parts <= 0 || last % parts != 0) {
    throw ShapeError("split_lastdim: cannot split last dim " +
                     std::to_string(last) + " into " + std::to_string(parts) +
                     " parts");
  }
  const int64_t c = last / parts;
  const int64_t rows = x.numel() / last;
  Shape part_shape = x.shape();
  part_shape.back() = c;
  const auto& xv = x.impl()->data;
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(parts));
  const bool trace = tracing({&x});
  for (int p = 0; p < parts; ++p) {
    Tensor out = make_tensor(part_shape, false);
    auto& ov = out.impl()->data;
    for (int64_t r = 0; r < rows; ++r) {
      std::copy_n(xv.data() + r * last + p * c, c, ov.data() + r * c);
    }
    if (trace) {
      ImplPtr xi = x.impl(), oi = out.impl();
      const int64_t off = p * c;
      record(out, [xi, oi, rows, last, c, off]() {
        if (oi->grad.empty() || !xi->requires_grad) return;
        ensure_grad(*xi);
        for (int64_t r = 0; r < rows; ++r) {
          const Real* g = oi->grad.data() + r * c;
          Real* dst = xi->grad.data() + r * last + off;
          for (int64_t j = 0; j < c; ++j) dst[j] += g[j];
        }
      });
    }
    outs.push_back(std::move(out));
  }
  return outs;
}

Tensor masked_fill(const Tensor& x, const Tensor& keep, Real fill_value) {
  if (!trailing_suffix(x.shape(), keep.shape())) {
    shape_fail("masked_fill", x.shape(), keep.shape());
  }
  Tensor out = make_tensor(x.shape(), false);
  const auto& xv = x.impl()->data;
  const auto& kv = keep.impl()->data;
  const size_t kn = kv.size();
  auto& ov = out.impl()->data;
  for (size_t i = 0; i < xv.size(); ++i) {
    ov[i] = kv[i % kn] != Real(0) ? xv[i] : fill_value;
  }
  check_finite("masked_fill", ov);
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), ki = keep.impl(), oi = out.impl();
    record(out, [xi, ki, oi]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      const size_t kn = ki->data.size();
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        if (ki->data[i % kn] != Real(0)) xi->grad[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    shape_fail("reshape", x.shape(), new_shape);
  }
  Tensor out = make_tensor(std::move(new_shape), false);
  out.impl()->data = x.impl()->data;
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record(out, [xi, oi]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids) {
  if (table.dim() != 2) {
    throw ShapeError("gather_rows: table must be rank-2, got " +
                     shape_str(table.shape()));
  }
  const int64_t v = table.shape()[0];
  const int64_t d = table.shape()[1];
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) +
                       " out of range [0," + std::to_string(v) +
                       ") at position " + std::to_string(i));
    }
  }
  Tensor out = make_tensor({static_cast<int64_t>(ids.size()), d}, false);
  const auto& tv = table.impl()->data;
  auto& ov = out.impl()->data;
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data() + ids[i] * d, d, ov.data() + static_cast<int64_t>(i) * d);
  }
  if (tracing({&table})) {
    ImplPtr ti = table.impl(), oi = out.impl();
    record(out, [ti, oi, ids, d]() {
      if (oi->grad.empty() || !ti->requires_grad) return;
      ensure_grad(*ti);
      for (size_t i = 0; i < ids.size(); ++i) {
        const Real* g = oi->grad.data() + static_cast<int64_t>(i) * d;
        Real* dst = ti->grad.data() + ids[i] * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

Tensor diagonal(const Tensor& x) {
  if (x.dim() != 2 || x.shape()[0] != x.shape()[1]) {
    throw ShapeError("diagonal: needs a square matrix, got " +
                     shape_str(x.shape()));
  }
  const int64_t n = x.shape()[0];
  Tensor out = make_tensor({n}, false);
  for (int64_t i = 0; i < n; ++i) {
    out.impl()->data[i] = x.impl()->data[i * n + i];
  }
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record(out, [xi, oi, n]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      for (int64_t i = 0; i < n; ++i) xi->grad[i * n + i] += oi->grad[i];
    });
  }
  return out;
}

Tensor rotate_pairs(const Tensor& x, const Tensor& cos_tab,
                    const Tensor& sin_tab) {
  if (x.dim() < 2) throw ShapeError("rotate_pairs: needs rank >= 2");
  const int64_t hd = x.shape().back();
  const int64_t s = x.shape()[x.shape().size() - 2];
  if (hd % 2 != 0) {
    throw ConfigError("rotate_pairs: last dim must be even, got " +
                      std::to_string(hd));
  }
  const Shape want{s, hd / 2};
  if (cos_tab.shape() != want || sin_tab.shape() != want) {
    shape_fail("rotate_pairs", cos_tab.shape(), want);
  }
  const int64_t outer = x.numel() / (s * hd);
  Tensor out = make_tensor(x.shape(), false);
  const auto& xv = x.impl()->data;
  const auto& cv = cos_tab.impl()->data;
  const auto& sv = sin_tab.impl()->data;
  auto& ov = out.impl()->data;
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t pos = 0; pos < s; ++pos) {
      const Real* row = xv.data() + (o * s + pos) * hd;
      Real* orow = ov.data() + (o * s + pos) * hd;
      const Real* crow = cv.data() + pos * (hd / 2);
      const Real* srow = sv.data() + pos * (hd / 2);
      for (int64_t j = 0; j < hd / 2; ++j) {
        const Real a = row[2 * j], b = row[2 * j + 1];
        orow[2 * j] = a * crow[j] - b * srow[j];
        orow[2 * j + 1] = a * srow[j] + b * crow[j];
      }
    }
  }
  check_finite("rotate_pairs", ov);
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    ImplPtr ci = cos_tab.impl(), si = sin_tab.impl();
    record(out, [xi, oi, ci, si, outer, s, hd]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      // Rotation is orthogonal: backward rotates the gradient by -theta.
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t pos = 0; pos < s; ++pos) {
          const Real* g = oi->grad.data() + (o * s + pos) * hd;
          Real* dx = xi->grad.data() + (o * s + pos) * hd;
          const Real* crow = ci->data.data() + pos * (hd / 2);
          const Real* srow = si->data.data() + pos * (hd / 2);
          for (int64_t j = 0; j < hd / 2; ++j) {
            const Real ga = g[2 * j], gb = g[2 * j + 1];
            dx[2 * j] += ga * crow[j] + gb * srow[j];
            dx[2 * j + 1] += -ga * srow[j] + gb * crow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool enabled) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout: p must be in [0,1), got " + std::to_string(p));
  }
  if (!enabled || p == 0.0) return x;
  Tensor out = make_tensor(x.shape(), false);
  const Real scale = static_cast<Real>(1.0 / (1.0 - p));
  std::vector<Real> mask(x.impl()->data.size());
  for (auto& m : mask) m = rng.uniform() < p ? Real(0) : scale;
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] * mask[i];
  if (tracing({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record(out, [xi, oi, mask = std::move(mask)]() {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      for (size_t i = 0; i < oi->grad.size(); ++i)
        xi->grad[i] += oi->grad[i] * mask[i];
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// grad_check
// --------------------------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& fn, Tensor x,
                  double h) {
  if (h < 1e-4 || h > 1e-2) {
    throw ConfigError("grad_check: h must be in [1e-4, 1e-2]");
  }
  x.set_requires_grad(true);
  x.grad();  // allocate
  x.zero_grad();
  std::vector<Real> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = fn(x);
    if (loss.dim() != 0) {
      throw ShapeError("grad_check: fn must be scalar-valued, got " +
                       shape_str(loss.shape()));
    }
    // A constant fn records nothing; its analytic gradient is exactly zero.
    if (tape.size() > 0) tape.backward(loss);
    const auto g = x.grad();
    analytic.assign(g.begin(), g.end());
  }
  x.set_requires_grad(false);
  double max_err = 0.0;
  auto data = x.data();
  for (size_t i = 0; i < data.size(); ++i) {
    const Real saved = data[i];
    data[i] = static_cast<Real>(double(saved) + h);
    const double fp = fn(x).item();
    data[i] = static_cast<Real>(double(saved) - h);
    const double fm = fn(x).item();
    data[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    max_err = std::max(max_err, err);
  }
  x.set_requires_grad(true);
  return max_err;
}

}  // namespace pete
