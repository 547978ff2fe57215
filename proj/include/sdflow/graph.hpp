#pragma once

// Reverse-accumulation tape over a fixed set of tensor operations. Every op
// records an analytic backward closure; gradients for the whole repository
// flow through this file and are policed by the finite-difference oracles in
// numerics.hpp. The graph is rebuilt per evaluation (define-by-run); layer
// parameters live outside the graph as Param objects and receive accumulated
// gradients after backward().

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "sdflow/core.hpp"

namespace sdflow {

template <class R>
struct Param {
  std::string name;
  Tensor<R> value;
  Tensor<R> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Tensor<R> v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor<R>::zeros(value.shape);
  }
  void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), R(0)); }
  long numel() const { return value.numel(); }
};

template <class R>
using ParamList = std::vector<Param<R>*>;

template <class R>
std::vector<R> flatten_values(const ParamList<R>& ps) {
  std::vector<R> out;
  for (auto* p : ps) out.insert(out.end(), p->value.v.begin(), p->value.v.end());
  return out;
}

template <class R>
std::vector<R> flatten_grads(const ParamList<R>& ps) {
  std::vector<R> out;
  for (auto* p : ps) out.insert(out.end(), p->grad.v.begin(), p->grad.v.end());
  return out;
}

template <class R>
void unflatten_values(const std::vector<R>& v, ParamList<R>& ps) {
  size_t k = 0;
  for (auto* p : ps) {
    std::copy(v.begin() + k, v.begin() + k + p->value.v.size(), p->value.v.begin());
    k += p->value.v.size();
  }
}

template <class R>
void zero_grads(ParamList<R>& ps) {
  for (auto* p : ps) p->zero_grad();
}

// Precomputed 1-D linear resampling plan (bicubic up/down, see data.hpp).
struct ResamplePlan {
  long in_len = 0, out_len = 0;
  int taps = 0;
  std::vector<int> index;      // out_len * taps source indices (boundary-mapped)
  std::vector<double> weight;  // out_len * taps weights, each row sums to 1
};

template <class R>
class Graph {
public:
  using Var = int;

  // ---- graph construction -------------------------------------------------

  Var leaf(Tensor<R> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, nullptr, {}, {});
  }

  Var constant(Tensor<R> value) { return leaf(std::move(value), false); }

  Var param(Param<R>& p) {
    return push(p.value, true, &p, {}, {});
  }

  // NOTE: the returned reference is invalidated by the next op (node storage
  // may reallocate); copy values/shapes out before building further ops.
  const Tensor<R>& val(Var v) const { return nodes_[v].value; }

  Shape4 shape(Var v) const { return nodes_[v].value.shape; }
  Tensor<R>& grad(Var v) { return nodes_[v].grad; }
  bool has_grad(Var v) const { return !nodes_[v].grad.empty(); }
  size_t size() const { return nodes_.size(); }

  // Runs reverse accumulation from a scalar (1,1,1,1) variable and adds the
  // resulting parameter gradients into their bound Param::grad buffers,
  // scaled by `scale` (gradient accumulation across microbatches).
  void backward(Var loss, R scale = R(1)) {
    require(val(loss).numel() == 1, ErrKind::parameter, "backward: loss must be scalar");
    ensure_grad(loss);
    nodes_[loss].grad.v[0] = R(1);
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.grad.empty() && n.backward) n.backward(*this, i);
    }
    for (auto& n : nodes_) {
      if (n.bound && !n.grad.empty()) {
        for (size_t k = 0; k < n.grad.v.size(); ++k) n.bound->grad.v[k] += scale * n.grad.v[k];
      }
    }
  }

  // ---- broadcastable elementwise binary ops -------------------------------

  Var add(Var a, Var b) { return binary(a, b, BinOp::add); }
  Var sub(Var a, Var b) { return binary(a, b, BinOp::sub); }
  Var mul(Var a, Var b) { return binary(a, b, BinOp::mul); }
  Var div(Var a, Var b) { return binary(a, b, BinOp::div); }

  // ---- elementwise unary ops ----------------------------------------------

  Var neg(Var a) { return scalar_mul(a, R(-1)); }

  Var scalar_mul(Var a, R k) {
    Tensor<R> out = val(a);
    for (auto& x : out.v) x *= k;
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [k](Graph& g, int self) {
                  auto& ps = g.nodes_[self].parents;
                  if (!g.wants(ps[0])) return;
                  auto& ga = g.acc(ps[0]);
                  const auto& go = g.nodes_[self].grad;
                  for (size_t i = 0; i < go.v.size(); ++i) ga.v[i] += k * go.v[i];
                });
  }

  Var scalar_add(Var a, R k) {
    Tensor<R> out = val(a);
    for (auto& x : out.v) x += k;
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a}, passthrough());
  }

  // scalar transcendental loops: Eigen's vectorized exp/tanh peel by runtime
  // pointer alignment, which breaks bit-level run-to-run determinism
  Var exp_(Var a) {
    Tensor<R> out = val(a);
    for (auto& x : out.v) x = std::exp(x);
    return unary_with_out(a, std::move(out), [](R y, R) { return y; }, UseWhich::out);
  }

  Var log_(Var a) {
    Tensor<R> out = val(a);
    for (auto& x : out.v) x = std::log(x);
    return unary_with_out(a, std::move(out), [](R, R x) { return R(1) / x; }, UseWhich::in);
  }

  Var recip(Var a) {
    Tensor<R> out = val(a);
    for (auto& x : out.v) x = R(1) / x;
    return unary_with_out(a, std::move(out), [](R y, R) { return -y * y; }, UseWhich::out);
  }

  Var tanh_(Var a) {
    Tensor<R> out = val(a);
    for (auto& x : out.v) x = std::tanh(x);
    return unary_with_out(a, std::move(out), [](R y, R) { return R(1) - y * y; }, UseWhich::out);
  }

  Var square(Var a) {
    Tensor<R> out = val(a);
    for (auto& x : out.v) x = x * x;
    return unary_with_out(a, std::move(out), [](R, R x) { return R(2) * x; }, UseWhich::in);
  }

  Var abs_(Var a) {
    Tensor<R> out = val(a);
    for (auto& x : out.v) x = std::abs(x);
    return unary_with_out(a, std::move(out),
                          [](R, R x) { return x > R(0) ? R(1) : (x < R(0) ? R(-1) : R(0)); },
                          UseWhich::in);
  }

  Var relu(Var a) {
    Tensor<R> out = val(a);
    for (auto& x : out.v) x = x > R(0) ? x : R(0);
    return unary_with_out(a, std::move(out), [](R, R x) { return x > R(0) ? R(1) : R(0); },
                          UseWhich::in);
  }

  Var leaky_relu(Var a, R slope) {
    Tensor<R> out = val(a);
    for (auto& x : out.v) x = x > R(0) ? x : slope * x;
    return unary_with_out(a, std::move(out),
                          [slope](R, R x) { return x > R(0) ? R(1) : slope; }, UseWhich::in);
  }

  // sigma * tanh(s / sigma): bounded scale used before exp in couplings
  Var soft_clamp(Var a, R sigma) { return scalar_mul(tanh_(scalar_mul(a, R(1) / sigma)), sigma); }

  Var stop_grad(Var a) { return push(val(a), false, nullptr, {}, {}); }

  // ---- reductions ----------------------------------------------------------

  Var sum_all(Var a) {
    Tensor<R> out({1, 1, 1, 1});
    R s = 0;
    for (R x : val(a).v) s += x;
    out.v[0] = s;
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  R go = g.nodes_[self].grad.v[0];
                  auto& ga = g.acc(p);
                  for (auto& x : ga.v) x += go;
                });
  }

  Var mean_all(Var a) { return scalar_mul(sum_all(a), R(1) / R(val(a).numel())); }

  Var sum_per_sample(Var a) {
    const auto& x = val(a);
    long per = x.shape.c * x.shape.h * x.shape.w;
    Tensor<R> out({x.shape.n, 1, 1, 1});
    for (long n = 0; n < x.shape.n; ++n) {
      R s = 0;
      const R* px = x.data() + n * per;
      for (long i = 0; i < per; ++i) s += px[i];
      out.v[n] = s;
    }
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [per](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  const auto& go = g.nodes_[self].grad;
                  auto& ga = g.acc(p);
                  for (long n = 0; n < go.shape.n; ++n) {
                    R gn = go.v[n];
                    R* pg = ga.data() + n * per;
                    for (long i = 0; i < per; ++i) pg[i] += gn;
                  }
                });
  }

  Var global_avg(Var a) {
    const auto& x = val(a);
    long hw = x.shape.h * x.shape.w;
    Tensor<R> out({x.shape.n, x.shape.c, 1, 1});
    for (long n = 0; n < x.shape.n; ++n)
      for (long c = 0; c < x.shape.c; ++c) {
        R s = 0;
        for (long h = 0; h < x.shape.h; ++h)
          for (long w = 0; w < x.shape.w; ++w) s += x.at(n, c, h, w);
        out.at(n, c, 0, 0) = s / R(hw);
      }
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  const auto& go = g.nodes_[self].grad;
                  auto& ga = g.acc(p);
                  R inv = R(1) / R(ga.shape.h * ga.shape.w);
                  for (long n = 0; n < ga.shape.n; ++n)
                    for (long c = 0; c < ga.shape.c; ++c) {
                      R gv = go.at(n, c, 0, 0) * inv;
                      for (long h = 0; h < ga.shape.h; ++h)
                        for (long w = 0; w < ga.shape.w; ++w) ga.at(n, c, h, w) += gv;
                    }
                });
  }

  // log-sum-exp over the channel dimension: (B,C,H,W) -> (B,1,H,W)
  Var logsumexp_c(Var a) {
    const auto& x = val(a);
    Tensor<R> out({x.shape.n, 1, x.shape.h, x.shape.w});
    for (long n = 0; n < x.shape.n; ++n)
      for (long h = 0; h < x.shape.h; ++h)
        for (long w = 0; w < x.shape.w; ++w) {
          R m = x.at(n, 0, h, w);
          for (long c = 1; c < x.shape.c; ++c) m = std::max(m, x.at(n, c, h, w));
          R s = 0;
          for (long c = 0; c < x.shape.c; ++c) s += std::exp(x.at(n, c, h, w) - m);
          out.at(n, 0, h, w) = m + std::log(s);
        }
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  const auto& go = g.nodes_[self].grad;
                  const auto& y = g.nodes_[self].value;
                  const auto& x = g.nodes_[p].value;
                  auto& ga = g.acc(p);
                  for (long n = 0; n < x.shape.n; ++n)
                    for (long h = 0; h < x.shape.h; ++h)
                      for (long w = 0; w < x.shape.w; ++w) {
                        R gy = go.at(n, 0, h, w), ly = y.at(n, 0, h, w);
                        for (long c = 0; c < x.shape.c; ++c)
                          ga.at(n, c, h, w) += gy * std::exp(x.at(n, c, h, w) - ly);
                      }
                });
  }

  // ---- structural ops -------------------------------------------------------

  Var reshape(Var a, Shape4 s) {
    require(s.numel() == val(a).numel(), ErrKind::shape,
            "reshape: numel mismatch " + val(a).shape.str() + " -> " + s.str());
    Tensor<R> out = val(a);
    out.shape = s;
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  const auto& go = g.nodes_[self].grad;
                  auto& ga = g.acc(p);
                  for (size_t i = 0; i < go.v.size(); ++i) ga.v[i] += go.v[i];
                });
  }

  Var slice_c(Var a, long c0, long c1) {
    const auto& x = val(a);
    require(0 <= c0 && c0 < c1 && c1 <= x.shape.c, ErrKind::shape, "slice_c: bad channel range");
    Tensor<R> out({x.shape.n, c1 - c0, x.shape.h, x.shape.w});
    copy_channels(x, out, c0, 0, c1 - c0);
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [c0](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  const auto& go = g.nodes_[self].grad;
                  auto& ga = g.acc(p);
                  add_channels(go, ga, 0, c0, go.shape.c);
                });
  }

  Var concat_c(Var a, Var b) {
    const auto& xa = val(a);
    const auto& xb = val(b);
    require(xa.shape.n == xb.shape.n && xa.shape.h == xb.shape.h && xa.shape.w == xb.shape.w,
            ErrKind::shape, "concat_c: incompatible shapes " + xa.shape.str() + " vs " + xb.shape.str());
    Tensor<R> out({xa.shape.n, xa.shape.c + xb.shape.c, xa.shape.h, xa.shape.w});
    copy_channels(xa, out, 0, 0, xa.shape.c);
    copy_channels(xb, out, 0, xa.shape.c, xb.shape.c);
    long ca = xa.shape.c;
    return push(std::move(out), nodes_[a].requires_grad || nodes_[b].requires_grad, nullptr,
                {a, b}, [ca](Graph& g, int self) {
                  auto& ps = g.nodes_[self].parents;
                  const auto& go = g.nodes_[self].grad;
                  if (g.wants(ps[0])) add_channels(go, g.acc(ps[0]), 0, 0, ca);
                  if (g.wants(ps[1])) add_channels(go, g.acc(ps[1]), ca, 0, go.shape.c - ca);
                });
  }

  // checkerboard squeeze: (B,C,H,W) -> (B,4C,H/2,W/2); offsets per output
  // block k: (0,0),(1,1),(0,1),(1,0); out[c + k*C] = in[c][2i+ro k][2j+co k]
  static constexpr int kSqueezeRow[4] = {0, 1, 0, 1};
  static constexpr int kSqueezeCol[4] = {0, 1, 1, 0};

  Var squeeze2(Var a) {
    const auto& x = val(a);
    require(x.shape.h % 2 == 0 && x.shape.w % 2 == 0, ErrKind::shape,
            "squeeze: H and W must be even, got " + x.shape.str());
    Tensor<R> out({x.shape.n, 4 * x.shape.c, x.shape.h / 2, x.shape.w / 2});
    squeeze_map<false, false>(x, out);
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  squeeze_map<true, true>(g.acc(p), g.nodes_[self].grad);
                });
  }

  Var unsqueeze2(Var a) {
    const auto& x = val(a);
    require(x.shape.c % 4 == 0, ErrKind::shape, "unsqueeze: channels must be divisible by 4");
    Tensor<R> out({x.shape.n, x.shape.c / 4, x.shape.h * 2, x.shape.w * 2});
    squeeze_map<true, false>(out, x);  // fill wide output from squeezed input
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  squeeze_map<false, true>(g.nodes_[self].grad, g.acc(p));
                });
  }

  // replicate (1,*) batch to n: used to lift per-model scalars to per-sample
  Var broadcast_n(Var a, long n) {
    const auto& x = val(a);
    require(x.shape.n == 1, ErrKind::shape, "broadcast_n: batch dim must be 1");
    Tensor<R> out({n, x.shape.c, x.shape.h, x.shape.w});
    long per = x.numel();
    for (long b = 0; b < n; ++b)
      std::copy(x.v.begin(), x.v.end(), out.v.begin() + b * per);
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [per](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  const auto& go = g.nodes_[self].grad;
                  auto& ga = g.acc(p);
                  for (long b = 0; b < go.shape.n; ++b)
                    for (long i = 0; i < per; ++i) ga.v[i] += go.v[b * per + i];
                });
  }

  // ---- padding / fixed-kernel filtering -------------------------------------

  // symmetric reflect padding (edge pixel included in the mirror)
  Var pad_reflect(Var a, int p) {
    const auto& x = val(a);
    require(p >= 0 && p <= x.shape.h && p <= x.shape.w, ErrKind::shape,
            "pad_reflect: pad exceeds image size");
    Tensor<R> out({x.shape.n, x.shape.c, x.shape.h + 2 * p, x.shape.w + 2 * p});
    auto mirror = [](long j, long len) { return j < 0 ? -j - 1 : (j >= len ? 2 * len - 1 - j : j); };
    for (long n = 0; n < x.shape.n; ++n)
      for (long c = 0; c < x.shape.c; ++c)
        for (long h = 0; h < out.shape.h; ++h)
          for (long w = 0; w < out.shape.w; ++w)
            out.at(n, c, h, w) = x.at(n, c, mirror(h - p, x.shape.h), mirror(w - p, x.shape.w));
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [p, mirror](Graph& g, int self) {
                  int par = g.nodes_[self].parents[0];
                  if (!g.wants(par)) return;
                  const auto& go = g.nodes_[self].grad;
                  auto& ga = g.acc(par);
                  for (long n = 0; n < ga.shape.n; ++n)
                    for (long c = 0; c < ga.shape.c; ++c)
                      for (long h = 0; h < go.shape.h; ++h)
                        for (long w = 0; w < go.shape.w; ++w)
                          ga.at(n, c, mirror(h - p, ga.shape.h), mirror(w - p, ga.shape.w)) +=
                              go.at(n, c, h, w);
                });
  }

  // depthwise valid correlation with a fixed 1-D kernel along H or W
  Var sconv1d(Var a, std::vector<R> k, bool along_h) {
    const auto& x = val(a);
    long T = (long)k.size();
    long oh = along_h ? x.shape.h - T + 1 : x.shape.h;
    long ow = along_h ? x.shape.w : x.shape.w - T + 1;
    require(oh >= 1 && ow >= 1, ErrKind::shape, "sconv1d: kernel larger than input");
    Tensor<R> out({x.shape.n, x.shape.c, oh, ow});
    for (long n = 0; n < x.shape.n; ++n)
      for (long c = 0; c < x.shape.c; ++c)
        for (long h = 0; h < oh; ++h)
          for (long w = 0; w < ow; ++w) {
            R s = 0;
            for (long t = 0; t < T; ++t)
              s += k[t] * (along_h ? x.at(n, c, h + t, w) : x.at(n, c, h, w + t));
            out.at(n, c, h, w) = s;
          }
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [k, along_h](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  const auto& go = g.nodes_[self].grad;
                  auto& ga = g.acc(p);
                  long T = (long)k.size();
                  for (long n = 0; n < go.shape.n; ++n)
                    for (long c = 0; c < go.shape.c; ++c)
                      for (long h = 0; h < go.shape.h; ++h)
                        for (long w = 0; w < go.shape.w; ++w) {
                          R gv = go.at(n, c, h, w);
                          for (long t = 0; t < T; ++t) {
                            if (along_h)
                              ga.at(n, c, h + t, w) += k[t] * gv;
                            else
                              ga.at(n, c, h, w + t) += k[t] * gv;
                          }
                        }
                });
  }

  // fixed linear resampling along one axis (plan rows are adjoint-exact)
  Var resample1d(Var a, std::shared_ptr<const ResamplePlan> plan, bool along_h) {
    const auto& x = val(a);
    long len = along_h ? x.shape.h : x.shape.w;
    require(len == plan->in_len, ErrKind::shape, "resample1d: plan length mismatch");
    Shape4 os = x.shape;
    (along_h ? os.h : os.w) = plan->out_len;
    Tensor<R> out(os);
    for (long n = 0; n < x.shape.n; ++n)
      for (long c = 0; c < x.shape.c; ++c)
        for (long h = 0; h < os.h; ++h)
          for (long w = 0; w < os.w; ++w) {
            long o = along_h ? h : w;
            R s = 0;
            for (int t = 0; t < plan->taps; ++t) {
              long src = plan->index[o * plan->taps + t];
              R wt = R(plan->weight[o * plan->taps + t]);
              s += wt * (along_h ? x.at(n, c, src, w) : x.at(n, c, h, src));
            }
            out.at(n, c, h, w) = s;
          }
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [plan, along_h](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  const auto& go = g.nodes_[self].grad;
                  auto& ga = g.acc(p);
                  for (long n = 0; n < go.shape.n; ++n)
                    for (long c = 0; c < go.shape.c; ++c)
                      for (long h = 0; h < go.shape.h; ++h)
                        for (long w = 0; w < go.shape.w; ++w) {
                          long o = along_h ? h : w;
                          R gv = go.at(n, c, h, w);
                          for (int t = 0; t < plan->taps; ++t) {
                            long src = plan->index[o * plan->taps + t];
                            R wt = R(plan->weight[o * plan->taps + t]);
                            if (along_h)
                              ga.at(n, c, src, w) += wt * gv;
                            else
                              ga.at(n, c, h, src) += wt * gv;
                          }
                        }
                });
  }

  // ---- small dense matrix ops (1,1,m,n) -------------------------------------

  Var matmul(Var a, Var b) {
    const auto& A = val(a);
    const auto& B = val(b);
    require(A.shape.n == 1 && A.shape.c == 1 && B.shape.n == 1 && B.shape.c == 1 &&
                A.shape.w == B.shape.h,
            ErrKind::shape, "matmul: need (1,1,m,k)x(1,1,k,n)");
    long m = A.shape.h, k = A.shape.w, n = B.shape.w;
    Tensor<R> out({1, 1, m, n});
    for (long i = 0; i < m; ++i)
      for (long j = 0; j < n; ++j) {
        R s = 0;
        for (long t = 0; t < k; ++t) s += A.v[i * k + t] * B.v[t * n + j];
        out.v[i * n + j] = s;
      }
    return push(std::move(out), nodes_[a].requires_grad || nodes_[b].requires_grad, nullptr,
                {a, b}, [m, k, n](Graph& g, int self) {
                  auto& ps = g.nodes_[self].parents;
                  const auto& go = g.nodes_[self].grad;
                  const auto& A = g.nodes_[ps[0]].value;
                  const auto& B = g.nodes_[ps[1]].value;
                  if (g.wants(ps[0])) {  // dA = G B^T
                    auto& ga = g.acc(ps[0]);
                    for (long i = 0; i < m; ++i)
                      for (long t = 0; t < k; ++t) {
                        R s = 0;
                        for (long j = 0; j < n; ++j) s += go.v[i * n + j] * B.v[t * n + j];
                        ga.v[i * k + t] += s;
                      }
                  }
                  if (g.wants(ps[1])) {  // dB = A^T G
                    auto& gb = g.acc(ps[1]);
                    for (long t = 0; t < k; ++t)
                      for (long j = 0; j < n; ++j) {
                        R s = 0;
                        for (long i = 0; i < m; ++i) s += A.v[i * k + t] * go.v[i * n + j];
                        gb.v[t * n + j] += s;
                      }
                  }
                });
  }

  // (1,C,1,1) vector -> (1,1,C,C) diagonal matrix
  Var diag_embed(Var a) {
    const auto& x = val(a);
    long c = x.numel();
    Tensor<R> out({1, 1, c, c});
    for (long i = 0; i < c; ++i) out.v[i * c + i] = x.v[i];
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [c](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  const auto& go = g.nodes_[self].grad;
                  auto& ga = g.acc(p);
                  for (long i = 0; i < c; ++i) ga.v[i] += go.v[i * c + i];
                });
  }

  // Gauss-Jordan inverse of a small (1,1,C,C) matrix; dA = -Y^T G Y^T
  Var mat_inverse(Var a) {
    const auto& A = val(a);
    require(A.shape.h == A.shape.w && A.shape.n == 1 && A.shape.c == 1, ErrKind::shape,
            "mat_inverse: need square (1,1,C,C)");
    long c = A.shape.h;
    Tensor<R> Y({1, 1, c, c});
    invert_dense(A.v.data(), Y.v.data(), c);
    return push(std::move(Y), nodes_[a].requires_grad, nullptr, {a},
                [c](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  const auto& go = g.nodes_[self].grad;
                  const auto& Y = g.nodes_[self].value;
                  auto& ga = g.acc(p);
                  std::vector<R> tmp(c * c);  // tmp = Y^T G
                  for (long i = 0; i < c; ++i)
                    for (long j = 0; j < c; ++j) {
                      R s = 0;
                      for (long t = 0; t < c; ++t) s += Y.v[t * c + i] * go.v[t * c + j];
                      tmp[i * c + j] = s;
                    }
                  for (long i = 0; i < c; ++i)  // dA -= tmp Y^T
                    for (long j = 0; j < c; ++j) {
                      R s = 0;
                      for (long t = 0; t < c; ++t) s += tmp[i * c + t] * Y.v[j * c + t];
                      ga.v[i * c + j] -= s;
                    }
                });
  }

  // ---- convolution -----------------------------------------------------------

  // x:(B,Ci,H,W) w:(Co,Ci,kh,kw) bias:(1,Co,1,1) or -1; zero padding
  Var conv2d(Var x, Var w, Var b, int stride, int pad);

  // ---- helpers used by op closures (public for the closures) ----------------

  bool wants(Var v) const { return nodes_[v].requires_grad; }

  Tensor<R>& acc(Var v) {
    ensure_grad(v);
    return nodes_[v].grad;
  }

  struct Node {
    Tensor<R> value;
    Tensor<R> grad;  // allocated lazily
    bool requires_grad = false;
    Param<R>* bound = nullptr;
    std::vector<int> parents;
    std::function<void(Graph&, int)> backward;
  };
  std::vector<Node> nodes_;

private:
  enum class BinOp { add, sub, mul, div };
  enum class UseWhich { out, in };

  void ensure_grad(Var v) {
    if (nodes_[v].grad.empty()) nodes_[v].grad = Tensor<R>::zeros(nodes_[v].value.shape);
  }

  Var push(Tensor<R> value, bool rg, Param<R>* bound, std::vector<int> parents,
           std::function<void(Graph&, int)> bw) {
    if (nodes_.capacity() == nodes_.size()) nodes_.reserve(std::max<size_t>(1024, nodes_.size() * 2));
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.bound = bound;
    n.parents = std::move(parents);
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return (Var)nodes_.size() - 1;
  }

  std::function<void(Graph&, int)> passthrough() {
    return [](Graph& g, int self) {
      int p = g.nodes_[self].parents[0];
      if (!g.wants(p)) return;
      const auto& go = g.nodes_[self].grad;
      auto& ga = g.acc(p);
      for (size_t i = 0; i < go.v.size(); ++i) ga.v[i] += go.v[i];
    };
  }

  template <class F>
  Var unary_with_out(Var a, Tensor<R> out, F dfn, UseWhich use) {
    return push(std::move(out), nodes_[a].requires_grad, nullptr, {a},
                [dfn, use](Graph& g, int self) {
                  int p = g.nodes_[self].parents[0];
                  if (!g.wants(p)) return;
                  const auto& go = g.nodes_[self].grad;
                  const auto& y = g.nodes_[self].value;
                  const auto& x = g.nodes_[p].value;
                  auto& ga = g.acc(p);
                  for (size_t i = 0; i < go.v.size(); ++i)
                    ga.v[i] += go.v[i] * (use == UseWhich::out ? dfn(y.v[i], R(0)) : dfn(R(0), x.v[i]));
                });
  }

  static bool bcast_ok(long a, long b) { return a == b || a == 1 || b == 1; }

  Var binary(Var a, Var b, BinOp op) {
    const auto& xa = val(a);
    const auto& xb = val(b);
    const Shape4 sa = xa.shape, sb = xb.shape;
    require(bcast_ok(sa.n, sb.n) && bcast_ok(sa.c, sb.c) && bcast_ok(sa.h, sb.h) &&
                bcast_ok(sa.w, sb.w),
            ErrKind::shape, "binary op: incompatible shapes " + sa.str() + " vs " + sb.str());
    Shape4 so{std::max(sa.n, sb.n), std::max(sa.c, sb.c), std::max(sa.h, sb.h),
              std::max(sa.w, sb.w)};
    Tensor<R> out(so);
    apply_bin(xa, xb, out, op);
    return push(std::move(out), nodes_[a].requires_grad || nodes_[b].requires_grad, nullptr,
                {a, b}, [op](Graph& g, int self) {
                  auto& ps = g.nodes_[self].parents;
                  const auto& go = g.nodes_[self].grad;
                  const auto& xa = g.nodes_[ps[0]].value;
                  const auto& xb = g.nodes_[ps[1]].value;
                  if (g.wants(ps[0])) bin_back(go, xa, xb, g.acc(ps[0]), op, true);
                  if (g.wants(ps[1])) bin_back(go, xa, xb, g.acc(ps[1]), op, false);
                });
  }

  static bool is_cparam(const Shape4& s, const Shape4& full) {
    return s.n == 1 && s.c == full.c && s.h == 1 && s.w == 1;
  }

  static void apply_bin(const Tensor<R>& a, const Tensor<R>& b, Tensor<R>& o, BinOp op) {
    const Shape4 so = o.shape;
    if (a.shape == b.shape) {  // fast path
      switch (op) {
        case BinOp::add: for (long i = 0; i < o.numel(); ++i) o.v[i] = a.v[i] + b.v[i]; return;
        case BinOp::sub: for (long i = 0; i < o.numel(); ++i) o.v[i] = a.v[i] - b.v[i]; return;
        case BinOp::mul: for (long i = 0; i < o.numel(); ++i) o.v[i] = a.v[i] * b.v[i]; return;
        case BinOp::div: for (long i = 0; i < o.numel(); ++i) o.v[i] = a.v[i] / b.v[i]; return;
      }
    }
    if (a.shape == so && is_cparam(b.shape, so)) {  // x (op) per-channel parameter
      long hw = so.h * so.w;
      for (long n = 0; n < so.n; ++n)
        for (long c = 0; c < so.c; ++c) {
          const R* pa = a.data() + (n * so.c + c) * hw;
          R* po = o.data() + (n * so.c + c) * hw;
          R pb = b.v[c];
          switch (op) {
            case BinOp::add: for (long i = 0; i < hw; ++i) po[i] = pa[i] + pb; break;
            case BinOp::sub: for (long i = 0; i < hw; ++i) po[i] = pa[i] - pb; break;
            case BinOp::mul: for (long i = 0; i < hw; ++i) po[i] = pa[i] * pb; break;
            case BinOp::div: for (long i = 0; i < hw; ++i) po[i] = pa[i] / pb; break;
          }
        }
      return;
    }
    // broadcast dims are 1, so min() picks index 0 there and the true index elsewhere
    for (long n = 0; n < so.n; ++n)
      for (long c = 0; c < so.c; ++c)
        for (long h = 0; h < so.h; ++h)
          for (long w = 0; w < so.w; ++w) {
            R va = a.at(std::min(n, a.shape.n - 1), std::min(c, a.shape.c - 1),
                        std::min(h, a.shape.h - 1), std::min(w, a.shape.w - 1));
            R vb = b.at(std::min(n, b.shape.n - 1), std::min(c, b.shape.c - 1),
                        std::min(h, b.shape.h - 1), std::min(w, b.shape.w - 1));
            R r = 0;
            switch (op) {
              case BinOp::add: r = va + vb; break;
              case BinOp::sub: r = va - vb; break;
              case BinOp::mul: r = va * vb; break;
              case BinOp::div: r = va / vb; break;
            }
            o.at(n, c, h, w) = r;
          }
  }

  static void bin_back(const Tensor<R>& go, const Tensor<R>& xa, const Tensor<R>& xb,
                       Tensor<R>& gt, BinOp op, bool wrt_a) {
    const Shape4 so = go.shape;
    // fast paths for x (op) per-channel-parameter
    if (xa.shape == so && is_cparam(xb.shape, so)) {
      long hw = so.h * so.w;
      if (wrt_a) {  // gt shaped like x
        for (long n = 0; n < so.n; ++n)
          for (long c = 0; c < so.c; ++c) {
            const R* pg = go.data() + (n * so.c + c) * hw;
            R* pt = gt.data() + (n * so.c + c) * hw;
            R pb = xb.v[c];
            switch (op) {
              case BinOp::add: for (long i = 0; i < hw; ++i) pt[i] += pg[i]; break;
              case BinOp::sub: for (long i = 0; i < hw; ++i) pt[i] += pg[i]; break;
              case BinOp::mul: for (long i = 0; i < hw; ++i) pt[i] += pg[i] * pb; break;
              case BinOp::div: for (long i = 0; i < hw; ++i) pt[i] += pg[i] / pb; break;
            }
          }
      } else {  // gt is the (1,C,1,1) parameter
        for (long n = 0; n < so.n; ++n)
          for (long c = 0; c < so.c; ++c) {
            const R* pg = go.data() + (n * so.c + c) * hw;
            const R* pa = xa.data() + (n * so.c + c) * hw;
            R pb = xb.v[c];
            R s = 0;
            switch (op) {
              case BinOp::add: for (long i = 0; i < hw; ++i) s += pg[i]; break;
              case BinOp::sub: for (long i = 0; i < hw; ++i) s -= pg[i]; break;
              case BinOp::mul: for (long i = 0; i < hw; ++i) s += pg[i] * pa[i]; break;
              case BinOp::div: for (long i = 0; i < hw; ++i) s += -pg[i] * pa[i] / (pb * pb); break;
            }
            gt.v[c] += s;
          }
      }
      return;
    }
    for (long n = 0; n < so.n; ++n)
      for (long c = 0; c < so.c; ++c)
        for (long h = 0; h < so.h; ++h)
          for (long w = 0; w < so.w; ++w) {
            R g = go.at(n, c, h, w);
            R va = xa.at(std::min(n, xa.shape.n - 1), std::min(c, xa.shape.c - 1),
                         std::min(h, xa.shape.h - 1), std::min(w, xa.shape.w - 1));
            R vb = xb.at(std::min(n, xb.shape.n - 1), std::min(c, xb.shape.c - 1),
                         std::min(h, xb.shape.h - 1), std::min(w, xb.shape.w - 1));
            R d = 0;
            switch (op) {
              case BinOp::add: d = g; break;
              case BinOp::sub: d = wrt_a ? g : -g; break;
              case BinOp::mul: d = wrt_a ? g * vb : g * va; break;
              case BinOp::div: d = wrt_a ? g / vb : -g * va / (vb * vb); break;
            }
            gt.at(std::min(n, gt.shape.n - 1), std::min(c, gt.shape.c - 1),
                  std::min(h, gt.shape.h - 1), std::min(w, gt.shape.w - 1)) += d;
          }
  }

  static void copy_channels(const Tensor<R>& src, Tensor<R>& dst, long c_src, long c_dst,
                            long count) {
    long hw = src.shape.h * src.shape.w;
    for (long n = 0; n < src.shape.n; ++n)
      for (long c = 0; c < count; ++c)
        std::copy_n(src.data() + (n * src.shape.c + c_src + c) * hw, hw,
                    dst.data() + (n * dst.shape.c + c_dst + c) * hw);
  }

  static void add_channels(const Tensor<R>& src, Tensor<R>& dst, long c_src, long c_dst,
                           long count) {
    long hw = src.shape.h * src.shape.w;
    for (long n = 0; n < src.shape.n; ++n)
      for (long c = 0; c < count; ++c) {
        const R* ps = src.data() + (n * src.shape.c + c_src + c) * hw;
        R* pd = dst.data() + (n * dst.shape.c + c_dst + c) * hw;
        for (long i = 0; i < hw; ++i) pd[i] += ps[i];
      }
  }

  // wide = (B,C,H,W) layout, sq = (B,4C,H/2,W/2) layout
  template <bool ToWide, bool Accumulate, class TW, class TS>
  static void squeeze_map(TW& wide, TS& sq) {
    long C = wide.shape.c, Hs = sq.shape.h, Ws = sq.shape.w;
    for (long n = 0; n < wide.shape.n; ++n)
      for (int k = 0; k < 4; ++k)
        for (long c = 0; c < C; ++c)
          for (long i = 0; i < Hs; ++i)
            for (long j = 0; j < Ws; ++j) {
              long hh = 2 * i + kSqueezeRow[k], ww = 2 * j + kSqueezeCol[k];
              if constexpr (ToWide) {
                if constexpr (Accumulate)
                  wide.at(n, c, hh, ww) += sq.at(n, c + k * C, i, j);
                else
                  wide.at(n, c, hh, ww) = sq.at(n, c + k * C, i, j);
              } else {
                if constexpr (Accumulate)
                  sq.at(n, c + k * C, i, j) += wide.at(n, c, hh, ww);
                else
                  sq.at(n, c + k * C, i, j) = wide.at(n, c, hh, ww);
              }
            }
  }

  static void invert_dense(const R* A, R* Y, long c) {
    std::vector<R> M(A, A + c * c);
    std::vector<R> I(c * c, R(0));
    for (long i = 0; i < c; ++i) I[i * c + i] = R(1);
    for (long col = 0; col < c; ++col) {
      long piv = col;
      for (long r = col + 1; r < c; ++r)
        if (std::abs(M[r * c + col]) > std::abs(M[piv * c + col])) piv = r;
      if (M[piv * c + col] == R(0))
        fail(ErrKind::degenerate, "mat_inverse: singular matrix");
      if (piv != col) {
        for (long j = 0; j < c; ++j) {
          std::swap(M[piv * c + j], M[col * c + j]);
          std::swap(I[piv * c + j], I[col * c + j]);
        }
      }
      R d = M[col * c + col];
      for (long j = 0; j < c; ++j) {
        M[col * c + j] /= d;
        I[col * c + j] /= d;
      }
      for (long r = 0; r < c; ++r) {
        if (r == col) continue;
        R f = M[r * c + col];
        if (f == R(0)) continue;
        for (long j = 0; j < c; ++j) {
          M[r * c + j] -= f * M[col * c + j];
          I[r * c + j] -= f * I[col * c + j];
        }
      }
    }
    std::copy(I.begin(), I.end(), Y);
  }
};

}  // namespace sdflow

#include "sdflow/conv.hpp"
