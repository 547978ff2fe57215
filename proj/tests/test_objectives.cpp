// Loss structure: content loss zero/weighting cases with a scalar-loop
// oracle, LSGAN domain losses with the stop-gradient law, and the backward
// generation losses.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "sdflow/objectives.hpp"

using namespace sdflow;
using R = double;

namespace {

ModelConfig toy_config(long scale = 4) {
  ModelConfig c;
  c.scale = scale;
  c.flow_steps = 1;
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

Tensor<R> random_image(Shape4 s, uint64_t seed) {
  Tensor<R> t(s);
  Rng r(seed);
  r.fill_uniform(t, 0.0, 1.0);
  return t;
}

void jitter_params(ParamList<R> ps, uint64_t seed, double sigma = 0.03) {
  Rng rng(seed);
  for (auto* p : ps)
    for (auto& x : p->value.v) x += R(sigma * rng.normal());
}

void zero_params(ParamList<R> ps) {
  for (auto* p : ps) std::fill(p->value.v.begin(), p->value.v.end(), R(0));
}

// ---- scalar-loop oracle pieces (independent evaluation path) ----------------

Tensor<R> blur_ref(const Tensor<R>& x, long s) {
  auto k = gaussian_kernel_1d<double>(double(s) / 2.0, 4);
  auto mirror = [&](long j, long len) { return j < 0 ? -j - 1 : (j >= len ? 2 * len - 1 - j : j); };
  Tensor<R> tmp(x.shape), out(x.shape);
  for (long n = 0; n < x.shape.n; ++n)
    for (long c = 0; c < x.shape.c; ++c) {
      for (long h = 0; h < x.shape.h; ++h)
        for (long w = 0; w < x.shape.w; ++w) {
          double acc = 0;
          for (long t = -4; t <= 4; ++t) acc += k[t + 4] * x.at(n, c, mirror(h + t, x.shape.h), w);
          tmp.at(n, c, h, w) = R(acc);
        }
      for (long h = 0; h < x.shape.h; ++h)
        for (long w = 0; w < x.shape.w; ++w) {
          double acc = 0;
          for (long t = -4; t <= 4; ++t) acc += k[t + 4] * tmp.at(n, c, h, mirror(w + t, x.shape.w));
          out.at(n, c, h, w) = R(acc);
        }
    }
  return out;
}

Tensor<R> downscale_ref(const Tensor<R>& x, long s) {
  auto ph = bicubic_down_plan(x.shape.h, s);
  auto pw = bicubic_down_plan(x.shape.w, s);
  Tensor<R> tmp({x.shape.n, x.shape.c, ph->out_len, x.shape.w});
  for (long n = 0; n < x.shape.n; ++n)
    for (long c = 0; c < x.shape.c; ++c)
      for (long o = 0; o < ph->out_len; ++o)
        for (long w = 0; w < x.shape.w; ++w) {
          double acc = 0;
          for (int t = 0; t < ph->taps; ++t)
            acc += ph->weight[o * ph->taps + t] * x.at(n, c, ph->index[o * ph->taps + t], w);
          tmp.at(n, c, o, w) = R(acc);
        }
  Tensor<R> out({x.shape.n, x.shape.c, ph->out_len, pw->out_len});
  for (long n = 0; n < x.shape.n; ++n)
    for (long c = 0; c < x.shape.c; ++c)
      for (long h = 0; h < ph->out_len; ++h)
        for (long o = 0; o < pw->out_len; ++o) {
          double acc = 0;
          for (int t = 0; t < pw->taps; ++t)
            acc += pw->weight[o * pw->taps + t] * tmp.at(n, c, h, pw->index[o * pw->taps + t]);
          out.at(n, c, h, o) = R(acc);
        }
  return out;
}

Tensor<R> proxy_ref(const FeatureProxy<R>& proxy, const Tensor<R>& x0) {
  Tensor<R> x = x0;
  const auto& ws = proxy.weights();
  for (size_t l = 0; l < ws.size(); ++l) {
    const auto& w = ws[l];
    long ho = (x.shape.h + 2 - 3) / 2 + 1, wo = (x.shape.w + 2 - 3) / 2 + 1;
    Tensor<R> y({x.shape.n, w.shape.n, ho, wo});
    for (long n = 0; n < x.shape.n; ++n)
      for (long co = 0; co < w.shape.n; ++co)
        for (long i = 0; i < ho; ++i)
          for (long j = 0; j < wo; ++j) {
            double acc = 0;
            for (long ci = 0; ci < x.shape.c; ++ci)
              for (long u = 0; u < 3; ++u)
                for (long v = 0; v < 3; ++v) {
                  long hh = 2 * i + u - 1, ww2 = 2 * j + v - 1;
                  if (hh < 0 || hh >= x.shape.h || ww2 < 0 || ww2 >= x.shape.w) continue;
                  acc += double(w.at(co, ci, u, v)) * x.at(n, ci, hh, ww2);
                }
            y.at(n, co, i, j) = R(acc);
          }
    if (l + 1 < ws.size())
      for (auto& v : y.v) v = v > 0 ? v : R(0.2) * v;
    x = std::move(y);
  }
  return x;
}

double l1_ref(const Tensor<R>& a, const Tensor<R>& b) {
  double acc = 0;
  for (long i = 0; i < a.numel(); ++i) acc += std::abs(double(a.v[i]) - double(b.v[i]));
  return acc / double(a.numel());
}

}  // namespace

TEST_CASE("content loss: zero on exact decodes, alpha gating, scripted oracle") {
  auto cfg = toy_config();
  SDFlowModel<R> m(cfg, /*identity=*/true);
  LossWeights w;

  auto y = random_image({1, 3, 16, 16}, 1);
  auto x = random_image({1, 3, 4, 4}, 2);

  SECTION("identity model with z_c chosen as the INN image gives exactly zero") {
    Graph<R> g;
    int xv = g.leaf(x), yv = g.leaf(y);
    // identity INN decode is the identity map, so z_c := target decodes exactly
    int z_c_lr = xv;
    int z_c_hr = bicubic_downscale_var(g, yv, cfg.scale);
    int loss = content_loss(g, m, z_c_hr, z_c_lr, xv, yv, w);
    REQUIRE(g.val(loss).v[0] == 0.0);
  }
  SECTION("alpha = 0 drops the feature terms") {
    Graph<R> g;
    int xv = g.leaf(x), yv = g.leaf(y);
    int z_c_lr = g.leaf(random_image({1, 3, 4, 4}, 3));
    int z_c_hr = g.leaf(random_image({1, 3, 4, 4}, 4));
    LossWeights w0 = w;
    w0.alpha = 0.0;
    int pixel_only = content_loss(g, m, z_c_hr, z_c_lr, xv, yv, w0);
    int with_feat = content_loss(g, m, z_c_hr, z_c_lr, xv, yv, w);
    REQUIRE(g.val(with_feat).v[0] > g.val(pixel_only).v[0]);
    // manual pixel terms
    int dec_hr = m.ds.content_decode(g, z_c_hr);
    int dec_lr = m.ds.content_decode(g, z_c_lr);
    int bd = bicubic_downscale_var(g, yv, cfg.scale);
    int manual = g.add(l1_mean(g, lpf_var(g, dec_hr, 4), lpf_var(g, bd, 4)),
                       l1_mean(g, lpf_var(g, dec_lr, 4), lpf_var(g, xv, 4)));
    REQUIRE(g.val(pixel_only).v[0] == Catch::Approx(g.val(manual).v[0]).epsilon(1e-12));
  }
  SECTION("value matches a scalar-loop evaluation of the four-term sum") {
    // identity model decode == z_c, so the oracle can evaluate everything
    Graph<R> g;
    auto z_lr_t = random_image({1, 3, 4, 4}, 5);
    auto z_hr_t = random_image({1, 3, 4, 4}, 6);
    int loss = content_loss(g, m, g.leaf(z_hr_t), g.leaf(z_lr_t), g.leaf(x), g.leaf(y), w);

    Tensor<R> bd = downscale_ref(y, 4);
    double expect = l1_ref(blur_ref(z_hr_t, 4), blur_ref(bd, 4)) +
                    l1_ref(blur_ref(z_lr_t, 4), blur_ref(x, 4)) +
                    w.alpha * (l1_ref(proxy_ref(m.proxy, z_hr_t), proxy_ref(m.proxy, bd)) +
                               l1_ref(proxy_ref(m.proxy, z_lr_t), proxy_ref(m.proxy, x)));
    REQUIRE(g.val(loss).v[0] == Catch::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("domain losses: LSGAN values and stop-gradient law") {
  auto cfg = toy_config();
  SDFlowModel<R> m(cfg);
  auto z_hr = random_image({2, 3, 4, 4}, 7);
  auto z_lr = random_image({2, 3, 4, 4}, 8);
  auto z_inn = random_image({2, 3, 4, 4}, 9);

  SECTION("D == 0 with beta1=beta2=0 gives disc loss 1.0") {
    zero_params(m.disc_params());
    LossWeights w;
    w.beta1 = w.beta2 = 0.0;
    Graph<R> g;
    int loss = domain_loss_disc(g, m, g.leaf(z_hr), g.leaf(z_lr), g.leaf(z_inn), w);
    REQUIRE(g.val(loss).v[0] == Catch::Approx(1.0).epsilon(1e-12));
  }
  SECTION("D == 0.5 gives 0.5 and generator equals discriminator") {
    zero_params(m.disc_params());
    ParamList<R> ps;
    m.d_content.collect(ps);
    ps.back()->value.v[0] = R(0.5);  // final conv bias
    LossWeights w;
    w.beta1 = w.beta2 = 0.0;
    Graph<R> g;
    int dl = domain_loss_disc(g, m, g.leaf(z_hr), g.leaf(z_lr), g.leaf(z_inn), w);
    int gl = domain_loss_gen(g, m, g.leaf(z_hr), g.leaf(z_lr), w);
    REQUIRE(g.val(dl).v[0] == Catch::Approx(0.5).epsilon(1e-12));
    REQUIRE(g.val(gl).v[0] == Catch::Approx(0.5).epsilon(1e-12));
  }
  SECTION("beta2 consistency: gradient wrt z_c is exactly zero, wrt z_LR nonzero") {
    LossWeights w;
    Graph<R> g;
    int zl = g.leaf(z_lr, /*grad=*/true);
    int zi = g.leaf(z_inn, /*grad=*/true);
    int loss = content_consistency(g, zi, zl, w);
    g.backward(loss);
    REQUIRE(g.has_grad(zi));
    double gnorm = 0;
    for (R v : g.grad(zi).v) gnorm += std::abs(double(v));
    REQUIRE(gnorm > 0.0);
    if (g.has_grad(zl))
      for (R v : g.grad(zl).v) REQUIRE(v == 0.0);
  }
  SECTION("disc loss detaches latents: no gradient reaches them") {
    LossWeights w;
    Graph<R> g;
    int zh = g.leaf(z_hr, true);
    int zl = g.leaf(z_lr, true);
    int zi = g.leaf(z_inn, true);
    int loss = domain_loss_disc(g, m, zh, zl, zi, w);
    g.backward(loss);
    for (int v : {zh, zl, zi})
      if (g.has_grad(v))
        for (R x : g.grad(v).v) REQUIRE(x == 0.0);
  }
}

TEST_CASE("backward losses: lambda gating, perfect cycle, weighted-sum oracle") {
  auto cfg = toy_config();
  SDFlowModel<R> m(cfg);
  jitter_params(m.flow_params(), 10, 0.02);
  auto x = random_image({2, 3, 4, 4}, 11);
  auto y = random_image({2, 3, 16, 16}, 12);

  SECTION("all lambda = 0 gives (0, 0)") {
    LossWeights w;
    w.lambda1 = w.lambda2 = w.lambda3 = w.lambda4 = w.lambda5 = w.lambda6 = 0.0;
    Graph<R> g;
    Rng rng(13);
    auto t = backward_losses(g, m, g.leaf(x), g.leaf(y), w, rng);
    REQUIRE(g.val(t.ds_total).v[0] == 0.0);
    REQUIRE(g.val(t.sr_total).v[0] == 0.0);
  }
  SECTION("perfect cycle: pixel term vanishes when BD of the output is the input") {
    Graph<R> g;
    auto y_hat = random_image({1, 3, 16, 16}, 14);
    int yv = g.leaf(y_hat);
    int bd = bicubic_downscale_var(g, yv, 4);
    int term = l1_mean(g, lpf_var(g, bd, 4), lpf_var(g, g.leaf(g.val(bd)), 4));
    REQUIRE(g.val(term).v[0] == 0.0);
  }
  SECTION("totals equal the lambda-weighted sums of the reported terms") {
    LossWeights w;
    Graph<R> g;
    Rng rng(15);
    auto t = backward_losses(g, m, g.leaf(x), g.leaf(y), w, rng);
    double ds = w.lambda1 * g.val(t.ds_pix).v[0] + w.lambda2 * g.val(t.ds_per).v[0] +
                w.lambda3 * g.val(t.ds_gan).v[0];
    double sr = w.lambda4 * g.val(t.sr_pix).v[0] + w.lambda5 * g.val(t.sr_per).v[0] +
                w.lambda6 * g.val(t.sr_gan).v[0];
    REQUIRE(g.val(t.ds_total).v[0] == Catch::Approx(ds).epsilon(1e-12));
    REQUIRE(g.val(t.sr_total).v[0] == Catch::Approx(sr).epsilon(1e-12));
    // and the SR pixel term itself against the scalar-loop oracle
    Tensor<R> yp = g.val(t.y_hat_pix);
    double expect = l1_ref(blur_ref(downscale_ref(yp, 4), 4), blur_ref(x, 4));
    REQUIRE(g.val(t.sr_pix).v[0] == Catch::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("loss gradients pass grad_check on the toy config") {
  auto cfg = toy_config(2);
  cfg.coupling_width = 4;
  SDFlowModel<R> m(cfg);
  jitter_params(m.flow_params(), 16, 0.03);
  auto x = random_image({1, 3, 4, 4}, 17);
  auto y = random_image({1, 3, 8, 8}, 18);
  LossWeights w;

  auto ps = m.flow_params();
  auto theta0 = flatten_values(ps);

  SECTION("content + domain-gen gradient") {
    // the beta2 consistency term is checked separately: finite differences
    // cannot hold its stop-gradient branch fixed
    auto build = [&](Graph<R>& g) {
      int xv = g.leaf(x), yv = g.leaf(y);
      auto hr = m.sr.hr_forward(g, yv);
      auto lr = m.ds.lr_forward(g, xv);
      int loss = content_loss(g, m, hr.z_c, lr.z_c, xv, yv, w);
      return g.add(loss, domain_loss_gen(g, m, hr.z_c, lr.z_c, w));
    };
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
    auto rep = grad_check<R>(loss_at, theta0, analytic, 1e-4);
    INFO("params " << theta0.size() << " worst " << rep.worst_param_index << " a=" << rep.analytic
                   << " n=" << rep.numeric);
    REQUIRE(rep.max_rel_err < 1e-3);
  }
  SECTION("backward losses gradient (fixed latent draws)") {
    // freeze the latent draws so the loss is a deterministic function of params
    Rng draw_rng(19);
    auto smp = BackwardSamples<R>::draw(m, x.shape, y.shape, w, draw_rng);
    auto build = [&](Graph<R>& g) {
      auto t = backward_losses(g, m, g.leaf(x), g.leaf(y), w, smp);
      return g.add(t.ds_total, t.sr_total);
    };
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
    auto rep = grad_check<R>(loss_at, theta0, analytic, 1e-4);
    INFO("params " << theta0.size() << " worst " << rep.worst_param_index << " a=" << rep.analytic
                   << " n=" << rep.numeric);
    REQUIRE(rep.max_rel_err < 1e-3);
  }
  SECTION("consistency gradient on the INN path (content params excluded)") {
    // restrict to parameters that do not feed the stopped branch: everything
    // outside the content extractor
    ParamList<R> inn_ps;
    for (auto* p : ps)
      if (p->name.rfind("lr.content", 0) != 0) inn_ps.push_back(p);
    auto itheta0 = flatten_values(inn_ps);
    auto build = [&](Graph<R>& g) {
      int xv = g.leaf(x);
      auto lr = m.ds.lr_forward(g, xv);
      return content_consistency(g, lr.z_lr, lr.z_c, w);
    };
    auto loss_at = [&](const std::vector<R>& v) {
      unflatten_values(v, inn_ps);
      Graph<R> g;
      return g.val(build(g)).v[0];
    };
    unflatten_values(itheta0, inn_ps);
    zero_grads(inn_ps);
    Graph<R> g;
    g.backward(build(g));
    auto analytic = flatten_grads(inn_ps);
    unflatten_values(itheta0, inn_ps);
    auto rep = grad_check<R>(loss_at, itheta0, analytic, 1e-4);
    INFO("worst " << rep.worst_param_index << " a=" << rep.analytic << " n=" << rep.numeric);
    REQUIRE(rep.max_rel_err < 1e-3);
  }
  SECTION("discriminator gradient through the domain disc loss") {
    auto dps = m.disc_params();
    auto dtheta0 = flatten_values(dps);
    auto build = [&](Graph<R>& g) {
      int xv = g.leaf(x), yv = g.leaf(y);
      auto hr = m.sr.hr_forward(g, yv);
      auto lr = m.ds.lr_forward(g, xv);
      return domain_loss_disc(g, m, hr.z_c, lr.z_c, lr.z_lr, w);
    };
    auto loss_at = [&](const std::vector<R>& v) {
      unflatten_values(v, dps);
      Graph<R> g;
      return g.val(build(g)).v[0];
    };
    unflatten_values(dtheta0, dps);
    zero_grads(dps);
    Graph<R> g;
    g.backward(build(g));
    auto analytic = flatten_grads(dps);
    unflatten_values(dtheta0, dps);
    auto rep = grad_check<R>(loss_at, dtheta0, analytic, 1e-4);
    REQUIRE(rep.max_rel_err < 1e-3);
  }
}
