#pragma once

// Invertible primitives. Every layer provides forward(g, x) -> (y, logdet)
// and inverse(g, y) -> x built from taped ops, so both directions are
// differentiable. Per-sample logdets have shape (B,1,1,1). Zero-initialized
// coupling/injector nets make every step an exact identity with logdet 0.

#include <memory>
#include <string>
#include <vector>

#include "sdflow/graph.hpp"
#include "sdflow/numerics.hpp"
#include "sdflow/rng.hpp"

namespace sdflow {

template <class R>
struct FlowOut {
  int y = -1;
  int logdet = -1;
};

inline constexpr double kScaleClamp = 5.0;  // h_s passes through 5*tanh(s/5) before exp

// He-style normal init for conv weights
template <class R>
void he_init(Tensor<R>& w, Rng& rng, double gain = 1.0) {
  double fan_in = double(w.shape.c * w.shape.h * w.shape.w);
  rng.fill_normal(w, 0.0, gain * std::sqrt(2.0 / fan_in));
}

// ---------------------------------------------------------------------------
// ActNorm: y = s * (x + b) channel-wise. First forward in init mode sets
// (s, b) so the post-init batch has per-channel mean 0 and variance 1.
// ---------------------------------------------------------------------------
template <class R>
class ActNorm {
public:
  ActNorm() = default;
  ActNorm(const std::string& prefix, long channels, bool start_initialized = true)
      : scale_(prefix + ".scale", Tensor<R>::full({1, channels, 1, 1}, R(1))),
        bias_(prefix + ".bias", Tensor<R>::zeros({1, channels, 1, 1})),
        initialized_(start_initialized) {}

  FlowOut<R> forward(Graph<R>& g, int x, bool init_mode = false) {
    if (!initialized_ && init_mode) data_init(g.val(x));
    for (R s : scale_.value.v)
      if (s == R(0)) fail(ErrKind::degenerate, scale_.name + ": zero channel scale");
    const Shape4 xs = g.shape(x);
    int sv = g.param(scale_);
    int bv = g.param(bias_);
    int y = g.mul(g.add(x, bv), sv);
    int ld = g.broadcast_n(
        g.scalar_mul(g.sum_all(g.log_(g.abs_(sv))), R(xs.h * xs.w)), xs.n);
    return {y, ld};
  }

  int inverse(Graph<R>& g, int y) {
    for (R s : scale_.value.v)
      if (s == R(0)) fail(ErrKind::degenerate, scale_.name + ": zero channel scale");
    int sv = g.param(scale_);
    int bv = g.param(bias_);
    return g.sub(g.div(y, sv), bv);
  }

  void collect(ParamList<R>& out) {
    out.push_back(&scale_);
    out.push_back(&bias_);
  }
  bool initialized() const { return initialized_; }
  void randomize(Rng& rng) {
    for (auto& s : scale_.value.v) s = R(std::exp(rng.normal() * 0.2));
    rng.fill_normal(bias_.value, 0.0, 0.2);
    initialized_ = true;
  }

private:
  void data_init(const Tensor<R>& x) {
    long C = x.shape.c, per = x.shape.n * x.shape.h * x.shape.w;
    for (long c = 0; c < C; ++c) {
      double mean = 0, var = 0;
      for (long n = 0; n < x.shape.n; ++n)
        for (long h = 0; h < x.shape.h; ++h)
          for (long w = 0; w < x.shape.w; ++w) mean += x.at(n, c, h, w);
      mean /= double(per);
      for (long n = 0; n < x.shape.n; ++n)
        for (long h = 0; h < x.shape.h; ++h)
          for (long w = 0; w < x.shape.w; ++w) {
            double d = x.at(n, c, h, w) - mean;
            var += d * d;
          }
      var /= double(per);
      bias_.value.v[c] = R(-mean);
      scale_.value.v[c] = R(1.0 / std::sqrt(std::max(var, 1e-12)));
    }
    initialized_ = true;
  }

  Param<R> scale_, bias_;
  bool initialized_ = true;
};

// ---------------------------------------------------------------------------
// Invertible 1x1 convolution, LU-parameterized: W = P (L + I) (U + diag(s))
// with a fixed permutation P, learnable strictly-lower L and strictly-upper U,
// and s = sign ⊙ exp(log_s) with fixed signs. Invertible by construction;
// logdet = H*W*Σ log_s per sample.
// ---------------------------------------------------------------------------
template <class R>
class Inv1x1 {
public:
  Inv1x1() = default;
  Inv1x1(const std::string& prefix, long channels, Rng* rng = nullptr)
      : c_(channels),
        lower_(prefix + ".lower", Tensor<R>::zeros({1, 1, channels, channels})),
        upper_(prefix + ".upper", Tensor<R>::zeros({1, 1, channels, channels})),
        log_s_(prefix + ".log_s", Tensor<R>::zeros({1, channels, 1, 1})) {
    perm_t_ = Tensor<R>::zeros({1, 1, c_, c_});
    sign_ = Tensor<R>::full({1, c_, 1, 1}, R(1));
    for (long i = 0; i < c_; ++i) perm_t_.v[i * c_ + i] = R(1);  // identity default
    mask_l_ = Tensor<R>::zeros({1, 1, c_, c_});
    mask_u_ = Tensor<R>::zeros({1, 1, c_, c_});
    eye_ = Tensor<R>::zeros({1, 1, c_, c_});
    for (long i = 0; i < c_; ++i) {
      eye_.v[i * c_ + i] = R(1);
      for (long j = 0; j < i; ++j) mask_l_.v[i * c_ + j] = R(1);
      for (long j = i + 1; j < c_; ++j) mask_u_.v[i * c_ + j] = R(1);
    }
    if (rng) randomize(*rng);
  }

  // random rotation -> LU factors; keeps the layer exactly equal to the
  // sampled rotation at initialization
  void randomize(Rng& rng) {
    std::vector<double> a(c_ * c_);
    for (auto& x : a) x = rng.normal();
    // Gram-Schmidt orthonormalization
    for (long i = 0; i < c_; ++i) {
      for (long j = 0; j < i; ++j) {
        double dot = 0;
        for (long k = 0; k < c_; ++k) dot += a[i * c_ + k] * a[j * c_ + k];
        for (long k = 0; k < c_; ++k) a[i * c_ + k] -= dot * a[j * c_ + k];
      }
      double nrm = 0;
      for (long k = 0; k < c_; ++k) nrm += a[i * c_ + k] * a[i * c_ + k];
      nrm = std::sqrt(std::max(nrm, 1e-12));
      for (long k = 0; k < c_; ++k) a[i * c_ + k] /= nrm;
    }
    // LU with partial pivoting: P A = L U  =>  A = P^T L U
    std::vector<long> p(c_);
    for (long i = 0; i < c_; ++i) p[i] = i;
    std::vector<double> m = a;
    for (long col = 0; col < c_; ++col) {
      long piv = col;
      for (long r = col + 1; r < c_; ++r)
        if (std::abs(m[r * c_ + col]) > std::abs(m[piv * c_ + col])) piv = r;
      if (piv != col) {
        std::swap(p[piv], p[col]);
        for (long j = 0; j < c_; ++j) std::swap(m[piv * c_ + j], m[col * c_ + j]);
      }
      for (long r = col + 1; r < c_; ++r) {
        double f = m[r * c_ + col] / m[col * c_ + col];
        m[r * c_ + col] = f;
        for (long j = col + 1; j < c_; ++j) m[r * c_ + j] -= f * m[col * c_ + j];
      }
    }
    std::fill(perm_t_.v.begin(), perm_t_.v.end(), R(0));
    for (long i = 0; i < c_; ++i) perm_t_.v[p[i] * c_ + i] = R(1);  // P^T
    for (long i = 0; i < c_; ++i)
      for (long j = 0; j < c_; ++j) {
        double x = m[i * c_ + j];
        if (j < i) lower_.value.v[i * c_ + j] = R(x);
        else if (j > i) upper_.value.v[i * c_ + j] = R(x);
        else {
          sign_.v[i] = x >= 0 ? R(1) : R(-1);
          log_s_.value.v[i] = R(std::log(std::max(std::abs(x), 1e-12)));
        }
      }
  }

  FlowOut<R> forward(Graph<R>& g, int x) {
    check_degenerate();
    const Shape4 xs = g.shape(x);
    int w = build_weight(g);
    int y = g.conv2d(x, g.reshape(w, {c_, c_, 1, 1}), -1, 1, 0);
    int ld = g.broadcast_n(
        g.scalar_mul(g.sum_all(g.param(log_s_)), R(xs.h * xs.w)), xs.n);
    return {y, ld};
  }

  int inverse(Graph<R>& g, int y) {
    check_degenerate();
    int w = build_weight(g);
    int winv = g.mat_inverse(w);
    return g.conv2d(y, g.reshape(winv, {c_, c_, 1, 1}), -1, 1, 0);
  }

  void collect(ParamList<R>& out) {
    out.push_back(&lower_);
    out.push_back(&upper_);
    out.push_back(&log_s_);
  }

private:
  void check_degenerate() const {
    for (R ls : log_s_.value.v)
      if (std::exp(double(ls)) < 1e-12)
        fail(ErrKind::degenerate, log_s_.name + ": U diagonal entry below 1e-12");
  }

  int build_weight(Graph<R>& g) {
    int l = g.add(g.mul(g.param(lower_), g.constant(mask_l_)), g.constant(eye_));
    int s = g.mul(g.constant(sign_), g.exp_(g.param(log_s_)));
    int u = g.add(g.mul(g.param(upper_), g.constant(mask_u_)), g.diag_embed(s));
    return g.matmul(g.constant(perm_t_), g.matmul(l, u));
  }

  long c_ = 0;
  Param<R> lower_, upper_, log_s_;
  Tensor<R> perm_t_, sign_, mask_l_, mask_u_, eye_;
};

// ---------------------------------------------------------------------------
// CouplingNet: conv3x3(in->width) ReLU, conv3x3(width->width) ReLU,
// zero-initialized conv3x3(width->out). Zero output => identity coupling.
// ---------------------------------------------------------------------------
template <class R>
class CouplingNet {
public:
  CouplingNet() = default;
  CouplingNet(const std::string& prefix, long in_ch, long out_ch, long width, Rng& rng)
      : w1_(prefix + ".w1", Tensor<R>({width, in_ch, 3, 3})),
        b1_(prefix + ".b1", Tensor<R>::zeros({1, width, 1, 1})),
        w2_(prefix + ".w2", Tensor<R>({width, width, 3, 3})),
        b2_(prefix + ".b2", Tensor<R>::zeros({1, width, 1, 1})),
        w3_(prefix + ".w3", Tensor<R>::zeros({out_ch, width, 3, 3})),
        b3_(prefix + ".b3", Tensor<R>::zeros({1, out_ch, 1, 1})) {
    he_init(w1_.value, rng);
    he_init(w2_.value, rng);
  }

  int forward(Graph<R>& g, int x) {
    int h1 = g.relu(g.conv2d(x, g.param(w1_), g.param(b1_), 1, 1));
    int h2 = g.relu(g.conv2d(h1, g.param(w2_), g.param(b2_), 1, 1));
    return g.conv2d(h2, g.param(w3_), g.param(b3_), 1, 1);
  }

  void collect(ParamList<R>& out) {
    for (auto* p : {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}) out.push_back(p);
  }

  // small random output weights; used by tests to leave the identity point
  void randomize_output(Rng& rng, double sigma = 0.05) {
    rng.fill_normal(w3_.value, 0.0, sigma);
    rng.fill_normal(b3_.value, 0.0, sigma);
  }

private:
  Param<R> w1_, b1_, w2_, b2_, w3_, b3_;
};

namespace detail {
// split point: z_a keeps the first ceil(C/2) channels
inline long coupling_split(long c) { return (c + 1) / 2; }
}  // namespace detail

// ---------------------------------------------------------------------------
// Affine coupling (optionally conditional): z_a unchanged; z_b scaled and
// shifted by nets of z_a (and cond). Scales are soft-clamped before exp.
// ---------------------------------------------------------------------------
template <class R>
class AffineCoupling {
public:
  AffineCoupling() = default;
  AffineCoupling(const std::string& prefix, long channels, long cond_ch, long width, Rng& rng)
      : ca_(detail::coupling_split(channels)), cb_(channels - ca_), cond_ch_(cond_ch),
        net_(prefix + ".net", ca_ + cond_ch, 2 * cb_, width, rng) {
    require(channels >= 2, ErrKind::shape, prefix + ": coupling needs at least 2 channels");
  }

  FlowOut<R> forward(Graph<R>& g, int x, int cond = -1) {
    const Shape4 xs = g.shape(x);
    auto [s, t] = scale_shift(g, g.slice_c(x, 0, ca_), cond, xs);
    int zb = g.slice_c(x, ca_, ca_ + cb_);
    int yb = g.add(g.mul(g.exp_(s), zb), t);
    return {g.concat_c(g.slice_c(x, 0, ca_), yb), g.sum_per_sample(s)};
  }

  int inverse(Graph<R>& g, int y, int cond = -1) {
    const Shape4 ys = g.shape(y);
    auto [s, t] = scale_shift(g, g.slice_c(y, 0, ca_), cond, ys);
    int zb = g.mul(g.sub(g.slice_c(y, ca_, ca_ + cb_), t), g.exp_(g.neg(s)));
    return g.concat_c(g.slice_c(y, 0, ca_), zb);
  }

  void collect(ParamList<R>& out) { net_.collect(out); }
  void randomize_output(Rng& rng, double sigma = 0.05) { net_.randomize_output(rng, sigma); }

private:
  std::pair<int, int> scale_shift(Graph<R>& g, int za, int cond, Shape4 xs) {
    int in = za;
    if (cond_ch_ > 0) {
      require(cond >= 0, ErrKind::parameter, "conditional coupling called without cond");
      const Shape4 cs = g.shape(cond);
      require(cs.h == xs.h && cs.w == xs.w, ErrKind::shape,
              "conditional coupling: cond spatial dims " + cs.str() + " != input " + xs.str());
      in = g.concat_c(za, cond);
    }
    int st = net_.forward(g, in);
    int s = g.soft_clamp(g.slice_c(st, 0, cb_), R(kScaleClamp));
    int t = g.slice_c(st, cb_, 2 * cb_);
    return {s, t};
  }

  long ca_ = 0, cb_ = 0, cond_ch_ = 0;
  CouplingNet<R> net_;
};

// ---------------------------------------------------------------------------
// Affine injector: scale and shift every channel of x from cond features.
// ---------------------------------------------------------------------------
template <class R>
class AffineInjector {
public:
  AffineInjector() = default;
  AffineInjector(const std::string& prefix, long channels, long cond_ch, long width, Rng& rng)
      : c_(channels), net_(prefix + ".net", cond_ch, 2 * channels, width, rng) {}

  FlowOut<R> forward(Graph<R>& g, int x, int cond) {
    const Shape4 xs = g.shape(x);
    auto [s, t] = scale_shift(g, cond, xs);
    return {g.add(g.mul(g.exp_(s), x), t), g.sum_per_sample(s)};
  }

  int inverse(Graph<R>& g, int y, int cond) {
    const Shape4 ys = g.shape(y);
    auto [s, t] = scale_shift(g, cond, ys);
    return g.mul(g.sub(y, t), g.exp_(g.neg(s)));
  }

  void collect(ParamList<R>& out) { net_.collect(out); }
  void randomize_output(Rng& rng, double sigma = 0.05) { net_.randomize_output(rng, sigma); }

private:
  std::pair<int, int> scale_shift(Graph<R>& g, int cond, Shape4 xs) {
    const Shape4 cs = g.shape(cond);
    require(cs.h == xs.h && cs.w == xs.w, ErrKind::shape,
            "affine injector: cond spatial dims " + cs.str() + " != input " + xs.str());
    int st = net_.forward(g, cond);
    int s = g.soft_clamp(g.slice_c(st, 0, c_), R(kScaleClamp));
    int t = g.slice_c(st, c_, 2 * c_);
    return {s, t};
  }

  long c_ = 0;
  CouplingNet<R> net_;
};

// ---------------------------------------------------------------------------
// split_channels / concat: z_first keeps the FIRST n_keep channels.
// ---------------------------------------------------------------------------
template <class R>
std::pair<int, int> split_channels(Graph<R>& g, int x, long n_keep) {
  long c = g.val(x).shape.c;
  require(0 < n_keep && n_keep < c, ErrKind::shape,
          "split_channels: n_keep must be in (0, C), got " + std::to_string(n_keep) + " of " +
              std::to_string(c));
  return {g.slice_c(x, 0, n_keep), g.slice_c(x, n_keep, c)};
}

// ---------------------------------------------------------------------------
// Composed steps. Logdets add; inverses apply sublayer inverses in reverse.
// ---------------------------------------------------------------------------
template <class R>
int add_logdet(Graph<R>& g, int a, int b) {
  if (a < 0) return b;
  if (b < 0) return a;
  return g.add(a, b);
}

template <class R>
class TransitionStep {
public:
  TransitionStep() = default;
  TransitionStep(const std::string& prefix, long channels, bool identity = false, Rng* rng = nullptr)
      : actnorm_(prefix + ".actnorm", channels, identity),
        conv_(prefix + ".inv1x1", channels, identity ? nullptr : rng) {}

  FlowOut<R> forward(Graph<R>& g, int x, bool init_mode = false) {
    auto a = actnorm_.forward(g, x, init_mode);
    auto c = conv_.forward(g, a.y);
    return {c.y, add_logdet(g, a.logdet, c.logdet)};
  }
  int inverse(Graph<R>& g, int y) { return actnorm_.inverse(g, conv_.inverse(g, y)); }
  void collect(ParamList<R>& out) {
    actnorm_.collect(out);
    conv_.collect(out);
  }
  ActNorm<R>& actnorm() { return actnorm_; }
  Inv1x1<R>& conv() { return conv_; }

private:
  ActNorm<R> actnorm_;
  Inv1x1<R> conv_;
};

template <class R>
class FlowStep {
public:
  FlowStep() = default;
  FlowStep(const std::string& prefix, long channels, long width, Rng& rng, bool identity = false)
      : transition_(prefix, channels, identity, &rng),
        coupling_(prefix + ".coupling", channels, 0, width, rng) {}

  FlowOut<R> forward(Graph<R>& g, int x, bool init_mode = false) {
    auto t = transition_.forward(g, x, init_mode);
    auto c = coupling_.forward(g, t.y);
    return {c.y, add_logdet(g, t.logdet, c.logdet)};
  }
  int inverse(Graph<R>& g, int y) { return transition_.inverse(g, coupling_.inverse(g, y)); }
  void collect(ParamList<R>& out) {
    transition_.collect(out);
    coupling_.collect(out);
  }
  TransitionStep<R>& transition() { return transition_; }
  AffineCoupling<R>& coupling() { return coupling_; }

private:
  TransitionStep<R> transition_;  // actnorm + inv1x1
  AffineCoupling<R> coupling_;
};

template <class R>
class CondFlowStep {
public:
  CondFlowStep() = default;
  CondFlowStep(const std::string& prefix, long channels, long cond_ch, long width, Rng& rng,
               bool identity = false)
      : transition_(prefix, channels, identity, &rng),
        coupling_(prefix + ".cond_coupling", channels, cond_ch, width, rng),
        injector_(prefix + ".injector", channels, cond_ch, width, rng) {}

  FlowOut<R> forward(Graph<R>& g, int x, int cond, bool init_mode = false) {
    auto t = transition_.forward(g, x, init_mode);
    auto c = coupling_.forward(g, t.y, cond);
    auto i = injector_.forward(g, c.y, cond);
    return {i.y, add_logdet(g, add_logdet(g, t.logdet, c.logdet), i.logdet)};
  }
  int inverse(Graph<R>& g, int y, int cond) {
    return transition_.inverse(g, coupling_.inverse(g, injector_.inverse(g, y, cond), cond));
  }
  void collect(ParamList<R>& out) {
    transition_.collect(out);
    coupling_.collect(out);
    injector_.collect(out);
  }
  TransitionStep<R>& transition() { return transition_; }
  AffineCoupling<R>& coupling() { return coupling_; }
  AffineInjector<R>& injector() { return injector_; }

private:
  TransitionStep<R> transition_;
  AffineCoupling<R> coupling_;
  AffineInjector<R> injector_;
};

// ---------------------------------------------------------------------------
// FlowFn adapters for the brute-force oracles (no-grad evaluation).
// ---------------------------------------------------------------------------
template <class R, class L>
FlowFn<R> make_flow_fn(L& layer, std::string name) {
  return FlowFn<R>{std::move(name),
                   [&layer](const Tensor<R>& x) {
                     Graph<R> g;
                     auto out = layer.forward(g, g.leaf(x));
                     return std::pair{g.val(out.y), g.val(out.logdet)};
                   },
                   [&layer](const Tensor<R>& y) {
                     Graph<R> g;
                     return g.val(layer.inverse(g, g.leaf(y)));
                   }};
}

template <class R, class L>
FlowFn<R> make_cond_flow_fn(L& layer, Tensor<R> cond, std::string name) {
  auto c = std::make_shared<Tensor<R>>(std::move(cond));
  return FlowFn<R>{std::move(name),
                   [&layer, c](const Tensor<R>& x) {
                     Graph<R> g;
                     auto out = layer.forward(g, g.leaf(x), g.leaf(*c));
                     return std::pair{g.val(out.y), g.val(out.logdet)};
                   },
                   [&layer, c](const Tensor<R>& y) {
                     Graph<R> g;
                     return g.val(layer.inverse(g, g.leaf(y), g.leaf(*c)));
                   }};
}

}  // namespace sdflow
