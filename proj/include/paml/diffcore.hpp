#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "paml/errors.hpp"

namespace paml {

// Flat model parameter vector. Both optimization loops act on this object;
// its length is fixed by the model configuration and never changes.
using ParamVector = std::vector<double>;

// ---------------------------------------------------------------------------
// ParamVector helpers
// ---------------------------------------------------------------------------

inline bool all_finite(const ParamVector& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// y += a * x
inline void axpy(double a, const ParamVector& x, ParamVector& y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

inline double global_norm(const ParamVector& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Dual numbers
// ---------------------------------------------------------------------------

// Value/tangent pair for forward-mode differentiation. Running a gradient
// computation on Dual scalars with the parameter tangents seeded to a vector
// v yields the exact Hessian-vector product H*v in the gradient's tangents
// (forward-over-reverse). This is how the second-order term of the
// meta-gradient is obtained without ever materializing H.
struct Dual {
  double val = 0.0;
  double tan = 0.0;

  Dual() = default;
  Dual(double v) : val(v) {}  // implicit: plain constants carry zero tangent
  Dual(double v, double t) : val(v), tan(t) {}
};

inline Dual operator+(Dual a, Dual b) { return {a.val + b.val, a.tan + b.tan}; }
inline Dual operator-(Dual a, Dual b) { return {a.val - b.val, a.tan - b.tan}; }
inline Dual operator-(Dual a) { return {-a.val, -a.tan}; }
inline Dual operator*(Dual a, Dual b) {
  return {a.val * b.val, a.tan * b.val + a.val * b.tan};
}
inline Dual operator/(Dual a, Dual b) {
  const double inv = 1.0 / b.val;
  const double q = a.val * inv;
  return {q, (a.tan - q * b.tan) * inv};
}
inline Dual& operator+=(Dual& a, Dual b) { a = a + b; return a; }
inline Dual& operator-=(Dual& a, Dual b) { a = a - b; return a; }
inline Dual& operator*=(Dual& a, Dual b) { a = a * b; return a; }
inline Dual& operator/=(Dual& a, Dual b) { a = a / b; return a; }

inline bool operator<(Dual a, Dual b) { return a.val < b.val; }
inline bool operator>(Dual a, Dual b) { return a.val > b.val; }

inline Dual sqrt(Dual a) {
  const double s = std::sqrt(a.val);
  return {s, 0.5 * a.tan / s};
}
inline Dual exp(Dual a) {
  const double e = std::exp(a.val);
  return {e, a.tan * e};
}
inline Dual log(Dual a) { return {std::log(a.val), a.tan / a.val}; }
inline Dual tanh(Dual a) {
  const double t = std::tanh(a.val);
  return {t, a.tan * (1.0 - t * t)};
}

// Scalar accessors so numeric code can be written once for double and Dual.
inline double value_of(double x) { return x; }
inline double value_of(Dual x) { return x.val; }

// ---------------------------------------------------------------------------
// Loss functions
// ---------------------------------------------------------------------------

// How the meta-gradient treats the inner gradient step. SecondOrder keeps
// the Hessian-vector correction; FirstOrder takes the step's Jacobian as
// identity (the standard MAML approximation, kept for ablation).
enum class GradMode { SecondOrder, FirstOrder };

// A differentiable scalar loss over a flat parameter vector, evaluated
// against a batch of data. Implementations must be pure: the same
// (theta, batch) always gives the same value. Besides plain evaluation they
// provide their exact reverse-mode gradient and an exact Hessian-vector
// product; fd_grad below is the independent check on both.
template <class Batch>
class LossFn {
 public:
  virtual ~LossFn() = default;

  virtual double value(const ParamVector& theta, const Batch& batch) const = 0;

  // Loss and dLoss/dtheta in one pass.
  virtual std::pair<double, ParamVector> value_and_gradient(
      const ParamVector& theta, const Batch& batch) const = 0;

  // H(theta) * v, exact.
  virtual ParamVector hessian_vector(const ParamVector& theta,
                                     const Batch& batch,
                                     const ParamVector& v) const = 0;
};

namespace detail {

// Batches may carry a human-readable label used in error messages.
template <class Batch>
std::string batch_label(const Batch& b) {
  if constexpr (requires { { b.describe() } -> std::convertible_to<std::string>; }) {
    return b.describe();
  } else {
    (void)b;
    return "batch";
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiation entry points
// ---------------------------------------------------------------------------

// Loss value and its exact gradient w.r.t. theta. Throws NonFiniteLoss,
// naming the offending batch, if the loss or any gradient element is not
// finite; the check runs once, after the computation.
template <class Batch>
std::pair<double, ParamVector> value_and_grad(const LossFn<Batch>& f,
                                              const ParamVector& theta,
                                              const Batch& batch) {
  auto [loss, grad] = f.value_and_gradient(theta, batch);
  if (!std::isfinite(loss) || !all_finite(grad)) {
    throw NonFiniteLoss("non-finite loss or gradient on " +
                        detail::batch_label(batch));
  }
  return {loss, std::move(grad)};
}

// Central-difference gradient, (f(theta+eps*e_i) - f(theta-eps*e_i)) / (2 eps)
// per coordinate. The verification oracle for value_and_grad; O(P) loss
// evaluations, so only usable on small models.
template <class Batch>
ParamVector fd_grad(const LossFn<Batch>& f, const ParamVector& theta,
                    const Batch& batch, double eps) {
  if (!(eps > 0.0)) throw InvalidHyperparameter("fd_grad: eps must be > 0");
  ParamVector g(theta.size());
  ParamVector t = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    t[i] = theta[i] + eps;
    const double hi = f.value(t, batch);
    t[i] = theta[i] - eps;
    const double lo = f.value(t, batch);
    t[i] = theta[i];
    g[i] = (hi - lo) / (2.0 * eps);
  }
  return g;
}

// Result of differentiating a validation loss through one gradient step on a
// training loss. Exposes the adapted parameters and the query loss so
// callers do not recompute them.
struct StepThroughResult {
  ParamVector grad;        // d query_loss / d theta
  ParamVector adapted;     // theta' = theta - alpha * grad_train(theta)
  double query_loss = 0.0; // f_valid(theta')
};

// d/dtheta [ f_valid(theta - alpha * grad f_train(theta)) ].
//
// SecondOrder applies the exact chain rule through the step,
//   (I - alpha * H_train(theta)) * grad f_valid(theta'),
// with the Hessian term computed as a single Hessian-vector product.
// FirstOrder returns grad f_valid(theta') unchanged (Jacobian taken as
// identity).
template <class TrainBatch, class ValidBatch>
StepThroughResult grad_through_step_ex(const LossFn<TrainBatch>& f_train,
                                       const LossFn<ValidBatch>& f_valid,
                                       const ParamVector& theta,
                                       const TrainBatch& train_batch,
                                       const ValidBatch& valid_batch,
                                       double alpha, GradMode mode) {
  if (alpha < 0.0) {
    throw InvalidHyperparameter("grad_through_step: alpha must be >= 0");
  }
  StepThroughResult out;
  if (alpha == 0.0) {
    // Identity step: plain gradient of the validation loss at theta.
    out.adapted = theta;
    auto [ql, qg] = value_and_grad(f_valid, theta, valid_batch);
    out.query_loss = ql;
    out.grad = std::move(qg);
    return out;
  }
  auto [train_loss, g_train] = value_and_grad(f_train, theta, train_batch);
  (void)train_loss;
  out.adapted = theta;
  axpy(-alpha, g_train, out.adapted);

  auto [ql, g_query] = value_and_grad(f_valid, out.adapted, valid_batch);
  out.query_loss = ql;
  if (mode == GradMode::FirstOrder) {
    out.grad = std::move(g_query);
    return out;
  }
  ParamVector hv = f_train.hessian_vector(theta, train_batch, g_query);
  if (!all_finite(hv)) {
    throw NonFiniteLoss("non-finite Hessian-vector product on " +
                        detail::batch_label(train_batch));
  }
  out.grad = std::move(g_query);
  axpy(-alpha, hv, out.grad);
  return out;
}

template <class TrainBatch, class ValidBatch>
ParamVector grad_through_step(const LossFn<TrainBatch>& f_train,
                              const LossFn<ValidBatch>& f_valid,
                              const ParamVector& theta,
                              const TrainBatch& train_batch,
                              const ValidBatch& valid_batch, double alpha,
                              GradMode mode) {
  return grad_through_step_ex(f_train, f_valid, theta, train_batch,
                              valid_batch, alpha, mode)
      .grad;
}

}  // namespace paml
