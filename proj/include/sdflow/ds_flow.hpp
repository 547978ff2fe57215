#pragma once

// Downscaling flow: the LR content extractor with degradation modulation, the
// LR INN (squeeze to 12 channels, K flow steps, unsqueeze back) with the
// subtract-based factor-out z_d = z_LR - z_c, and the conditional Deg flow
// whose base density is a mixture of Gaussians. The Deg latent stays in the
// squeezed shape (B, 12, H'/2, W'/2); mixture parameters are per channel so
// sampling works at any resolution.

#include "sdflow/sr_flow.hpp"

namespace sdflow {

template <class R>
struct LRLatentsVar {
  int z_c = -1;     // (B,3,H',W')
  int z_d = -1;     // (B,3,H',W')
  int z_lr = -1;    // INN image of x; z_lr = z_c + z_d exactly
  int logdet = -1;  // (B,1,1,1), the INN's only (subtraction contributes 0)
};

template <class R>
class DSFlow {
public:
  DSFlow() = default;

  DSFlow(const ModelConfig& cfg, Rng& rng, bool identity = false) : cfg_(cfg) {
    long ch = 4 * cfg.img_channels;  // post-squeeze channels (12 for RGB)
    content_ = LRContentExtractor<R>("lr.content", cfg.img_channels, cfg.extractor_width,
                                     cfg.est_layers, cfg.dm_blocks, rng);
    t1_ = TransitionStep<R>("lr.inn.t0", ch, identity, &rng);
    t2_ = TransitionStep<R>("lr.inn.t1", ch, identity, &rng);
    for (long k = 0; k < cfg.flow_steps; ++k)
      steps_.emplace_back("lr.inn.k" + std::to_string(k), ch, cfg.coupling_width, rng, identity);

    d1_ = TransitionStep<R>("deg.db.t0", ch, identity, &rng);
    d2_ = TransitionStep<R>("deg.db.t1", ch, identity, &rng);
    deg_cond_ = CondExtractor<R>("deg.cond", ch, cfg.extractor_width, cfg.rrdb_growth,
                                 cfg.rrdb_deg, rng);
    for (long p = 0; p < cfg.cond_flow_steps; ++p)
      deg_steps_.emplace_back("deg.p" + std::to_string(p), ch, cfg.extractor_width,
                              cfg.coupling_width, rng, identity);
    mog_ = MoGPrior<R>("deg.mog", cfg.mog_components, {1, ch, 1, 1}, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  MoGPrior<R>& mog() { return mog_; }

  // the invertible image of x under the LR INN (square map, oracle-friendly)
  FlowOut<R> inn_forward(Graph<R>& g, int x, bool init_mode = false) {
    Shape4 s = g.shape(x);
    require(s.h % 2 == 0 && s.w % 2 == 0, ErrKind::shape,
            "lr_forward: H' and W' must be even, got " + s.str());
    int h = g.squeeze2(x);
    auto o1 = t1_.forward(g, h, init_mode);
    auto o2 = t2_.forward(g, o1.y, init_mode);
    h = o2.y;
    int logdet = add_logdet(g, o1.logdet, o2.logdet);
    for (auto& st : steps_) {
      auto o = st.forward(g, h, init_mode);
      h = o.y;
      logdet = add_logdet(g, logdet, o.logdet);
    }
    return {g.unsqueeze2(h), logdet};
  }

  int inn_inverse(Graph<R>& g, int z) {
    int h = g.squeeze2(z);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) h = it->inverse(g, h);
    h = t1_.inverse(g, t2_.inverse(g, h));
    return g.unsqueeze2(h);
  }

  int content(Graph<R>& g, int x) { return content_.forward(g, x); }

  LRLatentsVar<R> lr_forward(Graph<R>& g, int x, bool init_mode = false) {
    auto inn = inn_forward(g, x, init_mode);
    int zc = content_.forward(g, x);
    int zd = g.sub(inn.y, zc);
    return {zc, zd, inn.y, inn.logdet};
  }

  int lr_inverse(Graph<R>& g, int z_c, int z_d) {
    require(g.shape(z_c) == g.shape(z_d), ErrKind::shape,
            "lr_inverse: z_c and z_d shapes must match");
    return inn_inverse(g, g.add(z_c, z_d));
  }

  // decode of the content latent alone: f_LR^{-1}(z_c, 0)
  int content_decode(Graph<R>& g, int z_c) { return inn_inverse(g, z_c); }

  // Deg flow: squeeze + 2 transitions, then P conditional steps; the output
  // keeps the squeezed shape.
  FlowOut<R> deg_forward(Graph<R>& g, int z_d, int z_c, bool init_mode = false) {
    require(g.shape(z_d) == g.shape(z_c), ErrKind::shape,
            "deg_forward: z_d and z_c must have equal shapes");
    int cond = deg_cond(g, z_c);
    int h = g.squeeze2(z_d);
    auto o1 = d1_.forward(g, h, init_mode);
    auto o2 = d2_.forward(g, o1.y, init_mode);
    h = o2.y;
    int logdet = add_logdet(g, o1.logdet, o2.logdet);
    for (auto& st : deg_steps_) {
      auto o = st.forward(g, h, cond, init_mode);
      h = o.y;
      logdet = add_logdet(g, logdet, o.logdet);
    }
    return {h, logdet};
  }

  int deg_inverse(Graph<R>& g, int z_d_prime, int z_c) {
    int cond = deg_cond(g, z_c);
    int h = z_d_prime;
    for (auto it = deg_steps_.rbegin(); it != deg_steps_.rend(); ++it) h = it->inverse(g, h, cond);
    h = d1_.inverse(g, d2_.inverse(g, h));
    return g.unsqueeze2(h);
  }

  // NLL_x: -log p(z'_d) - logdet f_LR - logdet f_Deg, per sample.
  int nll_x(Graph<R>& g, int x, bool init_mode = false) {
    auto lr = lr_forward(g, x, init_mode);
    auto dg = deg_forward(g, lr.z_d, lr.z_c, init_mode);
    int lp = mog_.logp(g, dg.y);
    int nll = g.neg(g.add(lp, g.add(lr.logdet, dg.logdet)));
    if (!g.val(nll).all_finite())
      fail(ErrKind::divergence, "nll_x: non-finite value");
    return nll;
  }

  // draw a downscaled image from an HR content latent
  Tensor<R> downscale_generate(const Tensor<R>& z_c, double tau, Rng& rng) {
    require(tau >= 0, ErrKind::parameter, "downscale_generate: tau must be >= 0");
    Graph<R> g;
    int zc = g.leaf(z_c);
    Shape4 zs = z_c.shape;
    Tensor<R> zpd =
        mog_.sample({zs.n, 4 * cfg_.img_channels, zs.h / 2, zs.w / 2}, tau, rng);
    int x = downscale_generate_var(g, zc, g.leaf(zpd));
    return g.val(x);
  }

  // taped generation given a sampled z'_d leaf
  int downscale_generate_var(Graph<R>& g, int z_c, int z_d_prime) {
    int z_d = deg_inverse(g, z_d_prime, z_c);
    return lr_inverse(g, z_c, z_d);
  }

  void collect(ParamList<R>& out) {
    content_.collect(out);
    t1_.collect(out);
    t2_.collect(out);
    for (auto& st : steps_) st.collect(out);
    d1_.collect(out);
    d2_.collect(out);
    deg_cond_.collect(out);
    for (auto& st : deg_steps_) st.collect(out);
    mog_.collect(out);
  }

private:
  int deg_cond(Graph<R>& g, int z_c) { return deg_cond_.forward(g, g.squeeze2(z_c)); }

  ModelConfig cfg_;
  LRContentExtractor<R> content_;
  TransitionStep<R> t1_, t2_;
  std::vector<FlowStep<R>> steps_;
  TransitionStep<R> d1_, d2_;
  CondExtractor<R> deg_cond_;
  std::vector<CondFlowStep<R>> deg_steps_;
  MoGPrior<R> mog_;
};

}  // namespace sdflow
