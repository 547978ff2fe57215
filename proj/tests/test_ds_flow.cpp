// Downscaling flow: subtraction factor-out, INN round-trips, Deg flow
// contracts, generation shapes, and the NLL_x gradient.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "sdflow/ds_flow.hpp"

using namespace sdflow;
using R = double;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.scale = 4;
  c.flow_steps = 2;
  c.cond_flow_steps = 1;
  c.rrdb_hf = 1;
  c.rrdb_deg = 1;
  c.coupling_width = 6;
  c.rrdb_growth = 4;
  c.extractor_width = 6;
  c.est_layers = 1;
  c.dm_blocks = 1;
  c.mog_components = 2;
  return c;
}

Tensor<R> random_image(Shape4 s, uint64_t seed) {
  Tensor<R> t(s);
  Rng r(seed);
  r.fill_uniform(t, 0.0, 1.0);
  return t;
}

double max_abs_diff(const Tensor<R>& a, const Tensor<R>& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0;
  for (long i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.v[i] - b.v[i])));
  return m;
}

void jitter_params(ParamList<R>& ps, uint64_t seed, double sigma = 0.05) {
  Rng rng(seed);
  for (auto* p : ps)
    for (auto& x : p->value.v) x += R(sigma * rng.normal());
}

}  // namespace

TEST_CASE("lr INN DB shape: (1,3,48,48) squeezes to (1,12,24,24)") {
  // the INN's downscale block is exactly the checkerboard squeeze
  Graph<R> g;
  auto x = random_image({1, 3, 48, 48}, 1);
  auto db = g.squeeze2(g.leaf(x));
  REQUIRE(g.val(db).shape == Shape4{1, 12, 24, 24});
  // and the Deg flow keeps that squeezed shape end to end
  Rng rng(2);
  DSFlow<R> flow(toy_config(), rng, /*identity=*/true);
  auto zd = random_image({1, 3, 48, 48}, 3);
  auto zc = random_image({1, 3, 48, 48}, 4);
  Graph<R> g2;
  auto out = flow.deg_forward(g2, g2.leaf(zd), g2.leaf(zc));
  REQUIRE(g2.val(out.y).shape == Shape4{1, 12, 24, 24});
}

TEST_CASE("zero content gives z_d = z_LR (subtraction identity)") {
  Rng rng(5);
  DSFlow<R> flow(toy_config(), rng);
  auto x = random_image({1, 3, 8, 8}, 6);
  Graph<R> g;
  auto inn = flow.inn_forward(g, g.leaf(x));
  auto zeros = g.leaf(Tensor<R>::zeros({1, 3, 8, 8}));
  auto zd = g.sub(inn.y, zeros);
  REQUIRE(max_abs_diff(g.val(zd), g.val(inn.y)) == 0.0);
  // and lr_forward maintains z_c + z_d = z_LR (to the last rounding bit)
  auto l = flow.lr_forward(g, g.leaf(x));
  auto sum = g.add(l.z_c, l.z_d);
  REQUIRE(max_abs_diff(g.val(sum), g.val(l.z_lr)) < 1e-14);
}

TEST_CASE("lr_inverse reconstructs x; odd dims rejected") {
  Rng rng(7);
  DSFlow<R> flow(toy_config(), rng);
  ParamList<R> ps;
  flow.collect(ps);
  jitter_params(ps, 8);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto x = random_image({1, 3, 8, 8}, 100 + seed);
    Graph<R> g;
    auto l = flow.lr_forward(g, g.leaf(x));
    auto back = flow.lr_inverse(g, l.z_c, l.z_d);
    REQUIRE(max_abs_diff(g.val(back), x) < 1e-5);
  }
  Graph<R> g;
  auto bad = random_image({1, 3, 7, 8}, 9);
  auto bv = g.leaf(bad);
  REQUIRE_THROWS_AS(flow.lr_forward(g, bv), Error);
}

TEST_CASE("identity INN: z_LR = x and decode is additive") {
  Rng rng(10);
  DSFlow<R> flow(toy_config(), rng, /*identity=*/true);
  auto x = random_image({1, 3, 8, 8}, 11);
  Graph<R> g;
  auto l = flow.lr_forward(g, g.leaf(x));
  REQUIRE(max_abs_diff(g.val(l.z_lr), x) == 0.0);  // unsqueeze(squeeze(x)) exact
  auto back = flow.lr_inverse(g, l.z_c, l.z_d);
  REQUIRE(max_abs_diff(g.val(back), x) == 0.0);
}

TEST_CASE("content decode matches lr_inverse with z_d = 0") {
  Rng rng(12);
  DSFlow<R> flow(toy_config(), rng);
  ParamList<R> ps;
  flow.collect(ps);
  jitter_params(ps, 13);
  auto x = random_image({1, 3, 8, 8}, 14);
  Graph<R> g;
  auto l = flow.lr_forward(g, g.leaf(x));
  auto zeros = g.leaf(Tensor<R>::zeros({1, 3, 8, 8}));
  auto a = flow.lr_inverse(g, l.z_c, zeros);
  auto b = flow.content_decode(g, l.z_c);
  REQUIRE(max_abs_diff(g.val(a), g.val(b)) == 0.0);
}

TEST_CASE("deg flow: zero-init squeeze passthrough, oracle, round-trip") {
  Rng rng(15);
  SECTION("zero-init conditional steps: z'_d = squeeze(z_d), logdet 0") {
    DSFlow<R> flow(toy_config(), rng, /*identity=*/true);
    auto zd = random_image({1, 3, 8, 8}, 16);
    auto zc = random_image({1, 3, 8, 8}, 17);
    Graph<R> g;
    auto out = flow.deg_forward(g, g.leaf(zd), g.leaf(zc));
    auto expect = g.squeeze2(g.leaf(zd));
    REQUIRE(max_abs_diff(g.val(out.y), g.val(expect)) == 0.0);
    REQUIRE(g.val(out.logdet).v[0] == 0.0);
  }
  SECTION("oracle logdet on (1,3,4,4)") {
    DSFlow<R> flow(toy_config(), rng);
    ParamList<R> ps;
    flow.collect(ps);
    jitter_params(ps, 18, 0.03);
    auto zc = random_image({1, 3, 4, 4}, 19);
    FlowFn<R> fn{"deg_forward",
                 [&](const Tensor<R>& in) {
                   Graph<R> g;
                   auto out = flow.deg_forward(g, g.leaf(in), g.leaf(zc));
                   return std::pair{g.val(out.y), g.val(out.logdet)};
                 },
                 [&](const Tensor<R>& z) {
                   Graph<R> g;
                   return g.val(flow.deg_inverse(g, g.leaf(z), g.leaf(zc)));
                 }};
    auto zd = random_image({1, 3, 4, 4}, 20);
    auto [y, ld] = fn.forward(zd);
    REQUIRE(std::abs(ld.v[0] - logdet_bruteforce(fn, zd)) /
                std::max(1.0, std::abs(ld.v[0])) < 1e-4);
    REQUIRE(max_abs_diff(fn.inverse(y), zd) < 1e-5);
  }
  SECTION("shape mismatch raises") {
    DSFlow<R> flow(toy_config(), rng);
    Graph<R> g;
    auto zd = g.leaf(random_image({1, 3, 8, 8}, 21));
    auto zc = g.leaf(random_image({1, 3, 4, 4}, 22));
    REQUIRE_THROWS_AS(flow.deg_forward(g, zd, zc), Error);
  }
}

TEST_CASE("downscale_generate: shapes and tau=0 determinism per component draw") {
  Rng rng(23);
  DSFlow<R> flow(toy_config(), rng);
  ParamList<R> ps;
  flow.collect(ps);
  jitter_params(ps, 24, 0.02);
  Tensor<R> z_c({2, 3, 8, 8});
  Rng(25).fill_normal(z_c, 0.3, 0.2);
  SECTION("output has the content latent's spatial size") {
    Rng r(26);
    auto x = flow.downscale_generate(z_c, 0.8, r);
    REQUIRE(x.shape == Shape4{2, 3, 8, 8});
  }
  SECTION("tau=0 with the same component draw repeats exactly") {
    Rng r1(27), r2(27);
    auto a = flow.downscale_generate(z_c, 0.0, r1);
    auto b = flow.downscale_generate(z_c, 0.0, r2);
    REQUIRE(max_abs_diff(a, b) == 0.0);
  }
}

TEST_CASE("nll_x at identity with a single standard component") {
  Rng rng(28);
  DSFlow<R> flow(toy_config(), rng, /*identity=*/true);
  flow.mog() = MoGPrior<R>::standard("m", {1, 12, 1, 1});
  auto x = random_image({1, 3, 8, 8}, 29);
  Graph<R> g;
  int nll = flow.nll_x(g, g.leaf(x));
  // identity INN: z_LR = x, z_c = x (global skip, zero tail) so z_d = 0;
  // squeeze is a permutation, so logp(squeeze(z_d)) = logp(z_d)
  auto l = flow.lr_forward(g, g.leaf(x));
  auto expect = g.neg(StdNormalPrior<R>::logp(g, l.z_d));
  REQUIRE(g.val(nll).v[0] == Catch::Approx(g.val(expect).v[0]).epsilon(1e-12));
  // z_c = x exactly at init
  REQUIRE(max_abs_diff(g.val(l.z_c), x) == 0.0);
}

TEST_CASE("mog collapsed to one zero-mean unit component equals the normal variant") {
  Rng rng(30);
  DSFlow<R> flow(toy_config(), rng);
  ParamList<R> ps;
  flow.collect(ps);
  jitter_params(ps, 31, 0.03);
  flow.mog() = MoGPrior<R>::standard("m", {1, 12, 1, 1});
  auto x = random_image({1, 3, 8, 8}, 32);
  Graph<R> g;
  int nll = flow.nll_x(g, g.leaf(x));
  auto l = flow.lr_forward(g, g.leaf(x));
  auto dg = flow.deg_forward(g, l.z_d, l.z_c);
  auto manual =
      g.neg(g.add(StdNormalPrior<R>::logp(g, dg.y), g.add(l.logdet, dg.logdet)));
  REQUIRE(std::abs(g.val(nll).v[0] - g.val(manual).v[0]) < 1e-9);
}

TEST_CASE("nll_x gradient matches finite differences on the toy config") {
  Rng rng(33);
  ModelConfig cfg = toy_config();
  cfg.scale = 2;
  cfg.coupling_width = 4;
  cfg.extractor_width = 4;
  DSFlow<R> flow(cfg, rng);
  ParamList<R> ps;
  flow.collect(ps);
  jitter_params(ps, 34, 0.03);
  auto x = random_image({1, 3, 8, 8}, 35);

  auto theta0 = flatten_values(ps);
  auto loss_at = [&](const std::vector<R>& v) {
    unflatten_values(v, ps);
    Graph<R> g;
    return g.val(g.mean_all(flow.nll_x(g, g.leaf(x)))).v[0];
  };

  unflatten_values(theta0, ps);
  zero_grads(ps);
  Graph<R> g;
  g.backward(g.mean_all(flow.nll_x(g, g.leaf(x))));
  auto analytic = flatten_grads(ps);
  unflatten_values(theta0, ps);

  auto rep = grad_check<R>(loss_at, theta0, analytic, 1e-4);
  INFO("params " << theta0.size() << " worst " << rep.worst_param_index << " a=" << rep.analytic
                 << " n=" << rep.numeric);
  REQUIRE(rep.max_rel_err < 1e-3);
}
