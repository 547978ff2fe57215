#pragma once

// Brute-force verification oracles. Everything in here is deliberately slow
// and simple: central differences and dense LU, used by the test suites and
// `verify` to police the analytic log-determinants and gradients of all the
// flow machinery. Run these in 64-bit mode; 32-bit conditioning is too poor
// for the stated tolerances.

#include <functional>
#include <utility>

#include "sdflow/core.hpp"

namespace sdflow {

template <class R>
struct GradReport {
  R max_rel_err = 0;
  long worst_param_index = -1;
  R analytic = 0;  // analytic gradient at the worst coordinate
  R numeric = 0;   // central-difference estimate at the worst coordinate
};

// Type-erased view of an invertible map used by the oracles and the verify
// suites: forward returns (y, per-sample logdet with shape (B,1,1,1)).
template <class R>
struct FlowFn {
  std::string name;
  std::function<std::pair<Tensor<R>, Tensor<R>>(const Tensor<R>&)> forward;
  std::function<Tensor<R>(const Tensor<R>&)> inverse;
};

// Central differences with per-coordinate step eps*max(1,|x_i|).
template <class R>
std::vector<R> finite_diff_grad(const std::function<R(const std::vector<R>&)>& f,
                                const std::vector<R>& x, R eps) {
  require(eps > R(0), ErrKind::parameter, "finite_diff_grad: eps must be positive");
  std::vector<R> g(x.size());
  std::vector<R> p = x;
  for (size_t i = 0; i < x.size(); ++i) {
    R h = eps * std::max(R(1), std::abs(x[i]));
    p[i] = x[i] + h;
    R fp = f(p);
    p[i] = x[i] - h;
    R fm = f(p);
    p[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      fail(ErrKind::oracle,
           "finite_diff_grad: non-finite value at coordinate " + std::to_string(i));
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

// log|det M| of a dense row-major d x d matrix via LU with partial pivoting.
template <class R>
R log_abs_det(std::vector<R> m, long d) {
  R logdet = 0;
  for (long col = 0; col < d; ++col) {
    long piv = col;
    for (long r = col + 1; r < d; ++r)
      if (std::abs(m[r * d + col]) > std::abs(m[piv * d + col])) piv = r;
    R pv = m[piv * d + col];
    if (pv == R(0)) fail(ErrKind::degenerate, "log_abs_det: exactly singular Jacobian");
    if (piv != col)
      for (long j = 0; j < d; ++j) std::swap(m[piv * d + j], m[col * d + j]);
    logdet += std::log(std::abs(m[col * d + col]));
    for (long r = col + 1; r < d; ++r) {
      R f = m[r * d + col] / m[col * d + col];
      if (f == R(0)) continue;
      for (long j = col; j < d; ++j) m[r * d + j] -= f * m[col * d + j];
    }
  }
  if (logdet < R(-690))  // |det| below ~1e-300
    fail(ErrKind::degenerate, "log_abs_det: Jacobian determinant underflows (degenerate layer)");
  return logdet;
}

// Assembles the full Jacobian of `layer.forward` column by column with
// central differences and returns log|det J|. Batch must be 1.
template <class R>
R logdet_bruteforce(const FlowFn<R>& layer, const Tensor<R>& x, R eps = R(1e-5)) {
  require(x.shape.n == 1, ErrKind::parameter, "logdet_bruteforce: batch must be 1");
  const long d = x.numel();
  Tensor<R> p = x;
  std::vector<R> J(size_t(d) * d);
  for (long i = 0; i < d; ++i) {
    R h = eps * std::max(R(1), std::abs(x.v[i]));
    p.v[i] = x.v[i] + h;
    Tensor<R> yp = layer.forward(p).first;
    p.v[i] = x.v[i] - h;
    Tensor<R> ym = layer.forward(p).first;
    p.v[i] = x.v[i];
    require(yp.numel() == d, ErrKind::shape, "logdet_bruteforce: map is not volume-square");
    for (long r = 0; r < d; ++r) {
      R der = (yp.v[r] - ym.v[r]) / (2 * h);
      if (!std::isfinite(der))
        fail(ErrKind::oracle, "logdet_bruteforce: non-finite derivative at column " +
                                  std::to_string(i));
      J[size_t(r) * d + i] = der;  // column i
    }
  }
  return log_abs_det(J, d);
}

// Compares an analytic gradient against central differences coordinate by
// coordinate. Relative error per coordinate: |ga-gn| / max(|ga|,|gn|,1e-8).
template <class R>
GradReport<R> grad_check(const std::function<R(const std::vector<R>&)>& loss,
                         const std::vector<R>& params, const std::vector<R>& analytic_grad,
                         R eps = R(1e-5)) {
  require(params.size() == analytic_grad.size(), ErrKind::parameter,
          "grad_check: gradient size mismatch");
  std::vector<R> numeric = finite_diff_grad(loss, params, eps);
  GradReport<R> rep;
  for (size_t i = 0; i < params.size(); ++i) {
    R ga = analytic_grad[i], gn = numeric[i];
    R rel = std::abs(ga - gn) / std::max({std::abs(ga), std::abs(gn), R(1e-8)});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_param_index = long(i);
      rep.analytic = ga;
      rep.numeric = gn;
    }
  }
  return rep;
}

}  // namespace sdflow
