#pragma once

// Base densities for the Gaussianized latents: a standard normal for the
// high-frequency latent and a uniform-weight mixture of diagonal Gaussians
// for the degradation latent. Temperature scales only the within-component
// noise, so the mixture stays multimodal at tau = 0.

#include <cmath>

#include "sdflow/graph.hpp"
#include "sdflow/rng.hpp"

namespace sdflow {

inline constexpr double kLog2Pi = 1.8378770664093454836;

template <class R>
struct StdNormalPrior {
  // per-sample log density: sum over elements of -(z^2 + log 2pi)/2
  static int logp(Graph<R>& g, int z) {
    int per_elem = g.scalar_add(g.scalar_mul(g.square(z), R(-0.5)), R(-0.5 * kLog2Pi));
    return g.sum_per_sample(per_elem);
  }

  static Tensor<R> sample(Shape4 shape, double tau, Rng& rng) {
    require(tau >= 0.0, ErrKind::parameter, "std_normal_sample: tau must be >= 0");
    Tensor<R> t(shape);
    if (tau == 0.0) return t;
    rng.fill_normal(t, 0.0, tau);
    return t;
  }
};

// Mixture of N diagonal Gaussians with fixed uniform weights 1/N. Parameters
// are stored per component with shape (1, C, ph, pw); ph/pw may be 1 for a
// spatially stationary prior (the model default, so sampling works at any
// resolution) or match the latent exactly for a fully per-element prior.
template <class R>
class MoGPrior {
public:
  MoGPrior() = default;

  MoGPrior(const std::string& prefix, long n_components, Shape4 param_shape, Rng& rng) {
    require(n_components >= 1, ErrKind::parameter, "MoGPrior: need at least one component");
    require(param_shape.n == 1, ErrKind::shape, "MoGPrior: parameter batch dim must be 1");
    for (long i = 0; i < n_components; ++i) {
      Tensor<R> mu(param_shape);
      rng.fill_normal(mu, 0.0, 0.1);
      means_.emplace_back(prefix + ".mu" + std::to_string(i), std::move(mu));
      log_scales_.emplace_back(prefix + ".log_scale" + std::to_string(i),
                               Tensor<R>::zeros(param_shape));
    }
  }

  // collapses the mixture to a single standard component (tests, ablations)
  static MoGPrior standard(const std::string& prefix, Shape4 param_shape) {
    Rng rng(0);
    MoGPrior p(prefix, 1, param_shape, rng);
    std::fill(p.means_[0].value.v.begin(), p.means_[0].value.v.end(), R(0));
    return p;
  }

  long components() const { return long(means_.size()); }
  Param<R>& mean(long i) { return means_[i]; }
  Param<R>& log_scale(long i) { return log_scales_[i]; }

  // per-sample log density (B,1,1,1): logsumexp over components of
  // log(1/N) + sum_elem log N(z | mu_i, sigma_i^2)
  int logp(Graph<R>& g, int z) {
    const auto& zs = g.val(z).shape;
    check_shape(zs);
    int comps = -1;
    for (size_t i = 0; i < means_.size(); ++i) {
      int mu = g.param(means_[i]);
      int ls = g.param(log_scales_[i]);
      int diff = g.sub(z, mu);
      int inv_var = g.exp_(g.scalar_mul(ls, R(-2)));
      int quad = g.scalar_mul(g.mul(g.square(diff), inv_var), R(-0.5));
      int per_elem = g.scalar_add(g.sub(quad, ls), R(-0.5 * kLog2Pi));
      int t = g.sum_per_sample(per_elem);
      comps = (comps < 0) ? t : g.concat_c(comps, t);
    }
    return g.scalar_add(g.logsumexp_c(comps), R(-std::log(double(means_.size()))));
  }

  // draw: component ~ Uniform{1..N}, z = mu_i + tau * sigma_i * eps
  Tensor<R> sample(Shape4 like, double tau, Rng& rng) const {
    require(tau >= 0.0, ErrKind::parameter, "mog_sample: tau must be >= 0");
    check_shape(like);
    long i = rng.uniform_int(components());
    const Tensor<R>& mu = means_[i].value;
    const Tensor<R>& ls = log_scales_[i].value;
    Tensor<R> out(like);
    const Shape4 ps = mu.shape;
    for (long n = 0; n < like.n; ++n)
      for (long c = 0; c < like.c; ++c)
        for (long h = 0; h < like.h; ++h)
          for (long w = 0; w < like.w; ++w) {
            long ph = std::min(h, ps.h - 1), pw = std::min(w, ps.w - 1);
            R m = mu.at(0, c, ph, pw);
            if (tau == 0.0) {
              out.at(n, c, h, w) = m;
            } else {
              R sd = std::exp(ls.at(0, c, ph, pw));
              out.at(n, c, h, w) = m + R(tau) * sd * R(rng.normal());
            }
          }
    return out;
  }

  void collect(ParamList<R>& out) {
    for (auto& p : means_) out.push_back(&p);
    for (auto& p : log_scales_) out.push_back(&p);
  }

private:
  void check_shape(const Shape4& zs) const {
    const Shape4 ps = means_[0].value.shape;
    require(ps.c == zs.c && (ps.h == 1 || ps.h == zs.h) && (ps.w == 1 || ps.w == zs.w),
            ErrKind::shape,
            "MoGPrior: parameter shape " + ps.str() + " incompatible with latent " + zs.str());
  }

  std::vector<Param<R>> means_, log_scales_;
};

}  // namespace sdflow
