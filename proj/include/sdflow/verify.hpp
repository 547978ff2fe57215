#pragma once

// Built-in oracle suites (64-bit): invertibility round-trips, brute-force
// log-determinant comparisons, and gradient checks on toy configurations.
// Used by the `verify` command, the test suite, and acceptance.

#include "sdflow/objectives.hpp"

namespace sdflow {

struct CheckResult {
  std::string name;
  bool pass = false;
  double value = 0;  // measured error
  double tolerance = 0;
  std::string detail;
};

namespace verify_detail {

using R = double;

inline Tensor<R> rand_input(Shape4 s, uint64_t seed, double mean = 0.2, double sigma = 0.6) {
  Tensor<R> t(s);
  Rng(seed).fill_normal(t, mean, sigma);
  return t;
}

inline double linf(const Tensor<R>& a, const Tensor<R>& b) {
  double m = 0;
  for (long i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.v[i] - b.v[i])));
  return m;
}

// the standard layer collection at toy sizes, freshly randomized
struct LayerSuite {
  Rng rng{424242};
  ActNorm<R> actnorm{"v.actnorm", 4, true};
  Inv1x1<R> inv1x1{"v.inv1x1", 4, &rng};
  AffineCoupling<R> coupling{"v.coupling", 4, 0, 8, rng};
  AffineCoupling<R> cond_coupling{"v.cond_coupling", 4, 3, 8, rng};
  AffineInjector<R> injector{"v.injector", 4, 3, 8, rng};
  TransitionStep<R> transition{"v.transition", 4, false, &rng};
  FlowStep<R> flow_step{"v.flow_step", 4, 8, rng};
  CondFlowStep<R> cond_flow_step{"v.cond_flow_step", 4, 3, 8, rng};
  Tensor<R> cond = rand_input({1, 3, 4, 4}, 777);

  LayerSuite() {
    actnorm.randomize(rng);
    coupling.randomize_output(rng, 0.2);
    cond_coupling.randomize_output(rng, 0.2);
    injector.randomize_output(rng, 0.2);
    transition.actnorm().randomize(rng);
    flow_step.transition().actnorm().randomize(rng);
    flow_step.coupling().randomize_output(rng, 0.2);
    cond_flow_step.transition().actnorm().randomize(rng);
    cond_flow_step.coupling().randomize_output(rng, 0.2);
    cond_flow_step.injector().randomize_output(rng, 0.2);
  }

  std::vector<FlowFn<R>> layers() {
    std::vector<FlowFn<R>> fns;
    fns.push_back(make_flow_fn<R>(actnorm, "actnorm"));
    fns.push_back(make_flow_fn<R>(inv1x1, "inv1x1"));
    fns.push_back(make_flow_fn<R>(coupling, "affine_coupling"));
    fns.push_back(make_cond_flow_fn<R>(cond_coupling, cond, "cond_affine_coupling"));
    fns.push_back(make_cond_flow_fn<R>(injector, cond, "affine_injector"));
    fns.push_back(make_flow_fn<R>(transition, "transition_step"));
    fns.push_back(make_flow_fn<R>(flow_step, "flow_step"));
    fns.push_back(make_cond_flow_fn<R>(cond_flow_step, cond, "cond_flow_step"));
    return fns;
  }
};

inline ModelConfig toy_model_config(long scale = 2) {
  ModelConfig c;
  c.scale = scale;
  c.flow_steps = 2;
  c.cond_flow_steps = 1;
  c.rrdb_hf = 1;
  c.rrdb_deg = 1;
  c.coupling_width = 4;
  c.rrdb_growth = 4;
  c.extractor_width = 4;
  c.est_layers = 1;
  c.dm_blocks = 1;
  c.mog_components = 2;
  c.disc_base = 4;
  return c;
}

template <class M>
void jitter(M& m, uint64_t seed, double sigma = 0.03) {
  Rng rng(seed);
  for (auto* p : m.flow_params())
    for (auto& x : p->value.v) x += R(sigma * rng.normal());
}

}  // namespace verify_detail

// ---- invertibility: ||inverse(forward(x)) - x||_inf over `seeds` seeds ------

inline std::vector<CheckResult> check_invertibility(std::vector<FlowFn<double>> layers,
                                                    Shape4 input_shape, long seeds = 100,
                                                    double tol = 1e-5) {
  using namespace verify_detail;
  std::vector<CheckResult> out;
  for (auto& fn : layers) {
    CheckResult r{"invert/" + fn.name, true, 0, tol, ""};
    for (long s = 0; s < seeds; ++s) {
      auto x = rand_input(input_shape, 9000 + uint64_t(s));
      auto y = fn.forward(x).first;
      double err = linf(fn.inverse(y), x);
      r.value = std::max(r.value, err);
    }
    r.pass = r.value < tol;
    r.detail = "max round-trip error over " + std::to_string(seeds) + " seeds";
    out.push_back(std::move(r));
  }
  return out;
}

// ---- logdet: reported vs brute-force, plus composition additivity -----------

inline std::vector<CheckResult> check_logdet(std::vector<FlowFn<double>> layers,
                                             Shape4 input_shape, double tol = 1e-4) {
  using namespace verify_detail;
  std::vector<CheckResult> out;
  for (auto& fn : layers) {
    auto x = rand_input(input_shape, 31000 + out.size());
    auto [y, ld] = fn.forward(x);
    double oracle = logdet_bruteforce(fn, x);
    double rel = std::abs(ld.v[0] - oracle) / std::max(1.0, std::abs(ld.v[0]));
    out.push_back({"logdet/" + fn.name, rel < tol, rel, tol,
                   "reported " + std::to_string(ld.v[0]) + " oracle " + std::to_string(oracle)});
  }
  return out;
}

inline CheckResult check_logdet_composition(double tol = 1e-3) {
  using namespace verify_detail;
  Rng rng(515);
  FlowStep<R> a("va", 3, 8, rng), b("vb", 3, 8, rng);
  a.transition().actnorm().randomize(rng);
  b.transition().actnorm().randomize(rng);
  a.coupling().randomize_output(rng, 0.2);
  b.coupling().randomize_output(rng, 0.2);
  auto fa = make_flow_fn<R>(a, "a");
  auto fb = make_flow_fn<R>(b, "b");
  FlowFn<R> comp{"b o a",
                 [&](const Tensor<R>& in) {
                   Graph<R> g;
                   auto oa = a.forward(g, g.leaf(in));
                   auto ob = b.forward(g, oa.y);
                   return std::pair{g.val(ob.y), g.val(g.add(oa.logdet, ob.logdet))};
                 },
                 {}};
  auto x = rand_input({1, 3, 4, 4}, 616);
  double parts = logdet_bruteforce(fa, x) + logdet_bruteforce(fb, fa.forward(x).first);
  double whole = logdet_bruteforce(comp, x);
  double err = std::abs(whole - parts);
  return {"logdet/composition", err < tol, err, tol, "|whole - sum of parts|"};
}

// ---- gradient checks on toy configs -----------------------------------------

template <class BuildLoss>
CheckResult check_gradient(const std::string& name, SDFlowModel<double>& m, BuildLoss build,
                           ParamList<double> ps, double tol = 1e-3, double eps = 1e-4) {
  using namespace verify_detail;
  auto theta0 = flatten_values(ps);
  auto loss_at = [&](const std::vector<R>& v) {
    unflatten_values(v, ps);
    Graph<R> g;
    return g.val(build(g)).v[0];
  };
  unflatten_values(theta0, ps);
  zero_grads(ps);
  Graph<R> g;
  g.backward(build(g));
  auto analytic = flatten_grads(ps);
  unflatten_values(theta0, ps);
  auto rep = grad_check<R>(loss_at, theta0, analytic, eps);
  return {"grad/" + name, rep.max_rel_err < tol, double(rep.max_rel_err), tol,
          "worst index " + std::to_string(rep.worst_param_index)};
}

inline std::vector<CheckResult> verify_gradients() {
  using namespace verify_detail;
  std::vector<CheckResult> out;
  LossWeights w;

  SDFlowModel<R> m(toy_model_config());
  jitter(m, 41);
  auto x = rand_input({1, 3, 4, 4}, 42, 0.5, 0.25);
  auto y = rand_input({1, 3, 8, 8}, 43, 0.5, 0.25);

  // NLLs are checked at the per-dimension scale the trainer optimizes;
  // keeping the loss O(1) keeps the finite-difference noise floor far below
  // the relative-error denominator floor
  const R ny = R(1) / R(y.numel());
  const R nx = R(1) / R(x.numel());
  out.push_back(check_gradient(
      "nll_y", m,
      [&](Graph<R>& g) { return g.scalar_mul(g.mean_all(m.sr.nll_y(g, g.leaf(y))), ny); },
      m.flow_params()));
  out.push_back(check_gradient(
      "nll_x", m,
      [&](Graph<R>& g) { return g.scalar_mul(g.mean_all(m.ds.nll_x(g, g.leaf(x))), nx); },
      m.flow_params()));
  out.push_back(check_gradient(
      "content_loss", m,
      [&](Graph<R>& g) {
        int xv = g.leaf(x), yv = g.leaf(y);
        auto hr = m.sr.hr_forward(g, yv);
        auto lr = m.ds.lr_forward(g, xv);
        return content_loss(g, m, hr.z_c, lr.z_c, xv, yv, w);
      },
      m.flow_params()));
  out.push_back(check_gradient(
      "domain_gen", m,
      [&](Graph<R>& g) {
        int xv = g.leaf(x), yv = g.leaf(y);
        auto hr = m.sr.hr_forward(g, yv);
        auto lr = m.ds.lr_forward(g, xv);
        return domain_loss_gen(g, m, hr.z_c, lr.z_c, w);
      },
      m.flow_params()));
  out.push_back(check_gradient(
      "domain_disc", m,
      [&](Graph<R>& g) {
        int xv = g.leaf(x), yv = g.leaf(y);
        auto hr = m.sr.hr_forward(g, yv);
        auto lr = m.ds.lr_forward(g, xv);
        return domain_loss_disc(g, m, hr.z_c, lr.z_c, lr.z_lr, w);
      },
      m.disc_params()));
  {
    // consistency term: restricted to parameters outside the stopped branch
    ParamList<R> inn_ps;
    for (auto* p : m.flow_params())
      if (p->name.rfind("lr.content", 0) != 0) inn_ps.push_back(p);
    out.push_back(check_gradient(
        "consistency", m,
        [&](Graph<R>& g) {
          auto lr = m.ds.lr_forward(g, g.leaf(x));
          return content_consistency(g, lr.z_lr, lr.z_c, w);
        },
        inn_ps));
  }
  {
    Rng draw(99);
    auto smp = BackwardSamples<R>::draw(m, x.shape, y.shape, w, draw);
    out.push_back(check_gradient(
        "backward_losses", m,
        [&](Graph<R>& g) {
          auto t = backward_losses(g, m, g.leaf(x), g.leaf(y), w, smp);
          return g.add(t.ds_total, t.sr_total);
        },
        m.flow_params()));
  }
  {
    // stop-gradient sensitivity of the beta2 term: exactly zero
    Graph<R> g;
    int zl = g.leaf(rand_input({1, 3, 4, 4}, 44), true);
    int zi = g.leaf(rand_input({1, 3, 4, 4}, 45), true);
    g.backward(content_consistency(g, zi, zl, w));
    double leak = 0;
    if (g.has_grad(zl))
      for (R v : g.grad(zl).v) leak = std::max(leak, std::abs(double(v)));
    out.push_back({"grad/stop_gradient_zero", leak == 0.0, leak, 0.0,
                   "beta2 sensitivity to the content latent"});
  }
  return out;
}

inline std::vector<CheckResult> verify_invertibility_suite(long seeds = 100) {
  using namespace verify_detail;
  LayerSuite suite;
  auto out = check_invertibility(suite.layers(), {1, 4, 4, 4}, seeds);
  // composed flows at toy sizes
  SDFlowModel<R> m(toy_model_config(4));
  jitter(m, 77);
  auto add = [&](const std::string& name, auto fwd, auto inv) {
    CheckResult r{"invert/" + name, true, 0, 1e-5, ""};
    for (long s = 0; s < seeds; ++s) {
      auto in = rand_input({1, 3, 8, 8}, 5000 + uint64_t(s), 0.5, 0.25);
      auto mid = fwd(in);
      r.value = std::max(r.value, linf(inv(mid), in));
    }
    r.pass = r.value < r.tolerance;
    out.push_back(r);
  };
  add(
      "hr_flow",
      [&](const Tensor<R>& in) {
        Graph<R> g;
        auto l = m.sr.hr_forward(g, g.leaf(in));
        return std::pair{g.val(l.z_c), g.val(l.z_h)};
      },
      [&](const std::pair<Tensor<R>, Tensor<R>>& z) {
        Graph<R> g;
        return g.val(m.sr.hr_inverse(g, g.leaf(z.first), g.leaf(z.second)));
      });
  add(
      "lr_flow",
      [&](const Tensor<R>& in) {
        Graph<R> g;
        auto l = m.ds.lr_forward(g, g.leaf(in));
        return std::pair{g.val(l.z_c), g.val(l.z_d)};
      },
      [&](const std::pair<Tensor<R>, Tensor<R>>& z) {
        Graph<R> g;
        return g.val(m.ds.lr_inverse(g, g.leaf(z.first), g.leaf(z.second)));
      });
  {
    CheckResult r{"invert/hf_flow", true, 0, 1e-5, ""};
    for (long s = 0; s < seeds; ++s) {
      auto in = rand_input({1, 3, 8, 8}, 6000 + uint64_t(s), 0.5, 0.25);
      Graph<R> g;
      auto l = m.sr.hr_forward(g, g.leaf(in));
      auto hf = m.sr.hf_forward(g, l.z_h, l.z_c);
      int back = m.sr.hf_inverse(g, hf.y, l.z_c);
      r.value = std::max(r.value, linf(g.val(back), g.val(l.z_h)));
    }
    r.pass = r.value < r.tolerance;
    out.push_back(r);
  }
  {
    CheckResult r{"invert/deg_flow", true, 0, 1e-5, ""};
    for (long s = 0; s < seeds; ++s) {
      auto zd = rand_input({1, 3, 4, 4}, 7000 + uint64_t(s));
      auto zc = rand_input({1, 3, 4, 4}, 8000 + uint64_t(s));
      Graph<R> g;
      auto zdv = g.leaf(zd);
      auto zcv = g.leaf(zc);
      auto d = m.ds.deg_forward(g, zdv, zcv);
      r.value = std::max(r.value, linf(g.val(m.ds.deg_inverse(g, d.y, zcv)), zd));
    }
    r.pass = r.value < r.tolerance;
    out.push_back(r);
  }
  return out;
}

inline std::vector<CheckResult> verify_logdet_suite() {
  using namespace verify_detail;
  LayerSuite suite;
  auto out = check_logdet(suite.layers(), {1, 4, 4, 4});
  out.push_back(check_logdet_composition());
  return out;
}

}  // namespace sdflow
