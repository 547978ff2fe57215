#pragma once

// Super-resolution flow: the HR flow (L levels of checkerboard squeeze, two
// transition steps and K flow steps each, terminal channel split into content
// and high-frequency latents) plus the HF flow (conditional Gaussianization
// of z_h given features extracted from z_c).

#include "sdflow/nets.hpp"
#include "sdflow/priors.hpp"

namespace sdflow {

struct ModelConfig {
  long scale = 4;            // SR factor s, power of two in {2,4,8}
  long flow_steps = 8;       // K flow steps per level (16 in the full-size setup)
  long cond_flow_steps = 4;  // P conditional flow steps (8 full-size)
  long rrdb_hf = 4;          // HF conditional extractor blocks (8 full-size)
  long rrdb_deg = 2;         // Deg conditional extractor blocks (4 full-size)
  long coupling_width = 48;  // coupling/injector hidden width (64 default full-size)
  long rrdb_growth = 16;
  long extractor_width = 48;
  long est_layers = 4;       // degradation estimator convs (8 full-size)
  long dm_blocks = 8;        // DM ResBlocks in the content extractor (16 full-size)
  long mog_components = 16;  // mixture components N
  long disc_base = 32;       // discriminator width
  long img_channels = 3;
  uint64_t init_seed = 7;    // weight-init stream
  uint64_t proxy_seed = 2024;

  long levels() const {
    require(scale == 2 || scale == 4 || scale == 8, ErrKind::parameter,
            "scale must be one of {2,4,8}");
    return scale == 2 ? 1 : (scale == 4 ? 2 : 3);
  }
  long hr_latent_channels() const {  // channels after L squeezes
    long c = img_channels;
    for (long l = 0; l < levels(); ++l) c *= 4;
    return c;
  }
  long hf_channels() const { return hr_latent_channels() - img_channels; }
};

template <class R>
struct HRLatentsVar {
  int z_c = -1;     // (B, 3, H/2^L, W/2^L)
  int z_h = -1;     // (B, 3*4^L - 3, H/2^L, W/2^L)
  int logdet = -1;  // (B,1,1,1)
};

template <class R>
class SRFlow {
public:
  SRFlow() = default;

  SRFlow(const ModelConfig& cfg, Rng& rng, bool identity = false) : cfg_(cfg) {
    long ch = cfg.img_channels;
    for (long l = 0; l < cfg.levels(); ++l) {
      ch *= 4;
      Level lv;
      std::string p = "hr.l" + std::to_string(l);
      lv.t1 = TransitionStep<R>(p + ".t0", ch, identity, &rng);
      lv.t2 = TransitionStep<R>(p + ".t1", ch, identity, &rng);
      for (long k = 0; k < cfg.flow_steps; ++k)
        lv.steps.emplace_back(p + ".k" + std::to_string(k), ch, cfg.coupling_width, rng, identity);
      levels_.push_back(std::move(lv));
    }
    hf_cond_ = CondExtractor<R>("hf.cond", cfg.img_channels, cfg.extractor_width, cfg.rrdb_growth,
                                cfg.rrdb_hf, rng);
    for (long p = 0; p < cfg.cond_flow_steps; ++p)
      hf_steps_.emplace_back("hf.p" + std::to_string(p), cfg.hf_channels(), cfg.extractor_width,
                             cfg.coupling_width, rng, identity);
  }

  const ModelConfig& config() const { return cfg_; }

  // full invertible map of the HR flow without the terminal split; exposed so
  // the brute-force logdet oracle can treat it as a square map
  FlowOut<R> inn_forward(Graph<R>& g, int y, bool init_mode = false) {
    Shape4 s = g.shape(y);
    require(s.c == cfg_.img_channels, ErrKind::shape, "hr_forward: wrong channel count");
    long div = 1;
    for (long l = 0; l < cfg_.levels(); ++l) div *= 2;
    require(s.h % div == 0 && s.w % div == 0, ErrKind::shape,
            "hr_forward: spatial dims " + s.str() + " not divisible by 2^L");
    int h = y;
    int logdet = -1;
    for (auto& lv : levels_) {
      h = g.squeeze2(h);
      auto o1 = lv.t1.forward(g, h, init_mode);
      auto o2 = lv.t2.forward(g, o1.y, init_mode);
      h = o2.y;
      logdet = add_logdet(g, logdet, add_logdet(g, o1.logdet, o2.logdet));
      for (auto& st : lv.steps) {
        auto o = st.forward(g, h, init_mode);
        h = o.y;
        logdet = add_logdet(g, logdet, o.logdet);
      }
    }
    return {h, logdet};
  }

  int inn_inverse(Graph<R>& g, int z) {
    int h = z;
    for (auto it = levels_.rbegin(); it != levels_.rend(); ++it) {
      for (auto st = it->steps.rbegin(); st != it->steps.rend(); ++st) h = st->inverse(g, h);
      h = it->t1.inverse(g, it->t2.inverse(g, h));
      h = g.unsqueeze2(h);
    }
    return h;
  }

  HRLatentsVar<R> hr_forward(Graph<R>& g, int y, bool init_mode = false) {
    auto inn = inn_forward(g, y, init_mode);
    auto [zc, zh] = split_channels(g, inn.y, cfg_.img_channels);
    return {zc, zh, inn.logdet};
  }

  int hr_inverse(Graph<R>& g, int z_c, int z_h) { return inn_inverse(g, g.concat_c(z_c, z_h)); }

  // conditional Gaussianization of z_h given z_c
  FlowOut<R> hf_forward(Graph<R>& g, int z_h, int z_c, bool init_mode = false) {
    Shape4 sh = g.shape(z_h), sc = g.shape(z_c);
    require(sh.h == sc.h && sh.w == sc.w, ErrKind::shape,
            "hf_forward: z_h " + sh.str() + " and z_c " + sc.str() + " must align spatially");
    int cond = hf_cond_.forward(g, z_c);
    int h = z_h;
    int logdet = -1;
    for (auto& st : hf_steps_) {
      auto o = st.forward(g, h, cond, init_mode);
      h = o.y;
      logdet = add_logdet(g, logdet, o.logdet);
    }
    return {h, logdet};
  }

  int hf_inverse(Graph<R>& g, int z_h_prime, int z_c) {
    int cond = hf_cond_.forward(g, z_c);
    int h = z_h_prime;
    for (auto it = hf_steps_.rbegin(); it != hf_steps_.rend(); ++it) h = it->inverse(g, h, cond);
    return h;
  }

  // NLL_y: -log p(z'_h) - logdet f_HR - logdet f_HF, per sample. The content
  // latent carries a uniform prior and contributes no density term.
  int nll_y(Graph<R>& g, int y, bool init_mode = false) {
    auto hr = hr_forward(g, y, init_mode);
    auto hf = hf_forward(g, hr.z_h, hr.z_c, init_mode);
    int lp = StdNormalPrior<R>::logp(g, hf.y);
    int nll = g.neg(g.add(lp, g.add(hr.logdet, hf.logdet)));
    if (!g.val(nll).all_finite())
      fail(ErrKind::divergence, "nll_y: non-finite value");
    return nll;
  }

  // draw an SR image from a content latent (no tape; wraps the taped path)
  Tensor<R> sr_generate(const Tensor<R>& z_c, double tau, Rng& rng) {
    require(tau >= 0, ErrKind::parameter, "sr_generate: tau must be >= 0");
    Graph<R> g;
    int zc = g.leaf(z_c);
    Shape4 zs = z_c.shape;
    Tensor<R> eps = StdNormalPrior<R>::sample({zs.n, cfg_.hf_channels(), zs.h, zs.w}, tau, rng);
    int y = sr_generate_var(g, zc, g.leaf(eps));
    return g.val(y);
  }

  // taped generation given a sampled z'_h leaf (used by the backward losses)
  int sr_generate_var(Graph<R>& g, int z_c, int z_h_prime) {
    int z_h = hf_inverse(g, z_h_prime, z_c);
    return hr_inverse(g, z_c, z_h);
  }

  void collect(ParamList<R>& out) {
    for (auto& lv : levels_) {
      lv.t1.collect(out);
      lv.t2.collect(out);
      for (auto& st : lv.steps) st.collect(out);
    }
    hf_cond_.collect(out);
    for (auto& st : hf_steps_) st.collect(out);
  }

private:
  struct Level {
    TransitionStep<R> t1, t2;
    std::vector<FlowStep<R>> steps;
  };

  ModelConfig cfg_;
  std::vector<Level> levels_;
  CondExtractor<R> hf_cond_;
  std::vector<CondFlowStep<R>> hf_steps_;
};

}  // namespace sdflow
