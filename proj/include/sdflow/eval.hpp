#pragma once

// Evaluation protocol: SR against HR ground truth and downscaling against the
// true LR images, with bicubic baselines, multi-sample diversity, and the
// feature-statistics distance between generated and true LR sets. Inputs are
// evaluated without dequantization noise. At tau = 0 every sample of an image
// shares one RNG stream (the component draw included), so tau = 0 generation
// is deterministic end to end.

#include "sdflow/metrics.hpp"
#include "sdflow/model.hpp"

namespace sdflow {

template <class R>
Tensor<R> clamp01(Tensor<R> t) {
  for (auto& v : t.v) v = std::min(R(1), std::max(R(0), v));
  return t;
}

// LR image -> one SR sample
template <class R>
Tensor<R> sr_from_lr(SDFlowModel<R>& m, const Tensor<R>& x, double tau, Rng& rng) {
  Graph<R> g;
  int zc = m.ds.content(g, g.leaf(x));
  Shape4 zs = g.shape(zc);
  Tensor<R> eps = StdNormalPrior<R>::sample({zs.n, m.cfg.hf_channels(), zs.h, zs.w}, tau, rng);
  return g.val(m.sr.sr_generate_var(g, zc, g.leaf(eps)));
}

// HR image -> one downscaled sample
template <class R>
Tensor<R> ds_from_hr(SDFlowModel<R>& m, const Tensor<R>& y, double tau, Rng& rng) {
  Graph<R> g;
  int zc = m.sr.hr_forward(g, g.leaf(y)).z_c;
  Shape4 zs = g.shape(zc);
  Tensor<R> zpd =
      m.ds.mog().sample({zs.n, 4 * m.cfg.img_channels, zs.h / 2, zs.w / 2}, tau, rng);
  return g.val(m.ds.downscale_generate_var(g, zc, g.leaf(zpd)));
}

template <class R>
std::vector<Tensor<R>> sample_set(SDFlowModel<R>& m, const Tensor<R>& input, bool sr_direction,
                                  double tau, long n_samples, uint64_t seed) {
  std::vector<Tensor<R>> out;
  for (long k = 0; k < n_samples; ++k) {
    Rng rng = Rng::derive(seed, 37, tau == 0.0 ? 0 : uint64_t(k));
    out.push_back(clamp01(sr_direction ? sr_from_lr(m, input, tau, rng)
                                       : ds_from_hr(m, input, tau, rng)));
  }
  return out;
}

struct EvalRow {
  long id = 0;
  std::string metric;
  double value = 0;
};

struct EvalSummary {
  double sr_psnr_tau0 = 0, sr_ssim_tau0 = 0;
  double sr_psnr_tau08 = 0, sr_ssim_tau08 = 0;
  double sr_psnr_bicubic = 0, sr_ssim_bicubic = 0;
  double ds_psnr_tau0 = 0, ds_ssim_tau0 = 0;
  double ds_psnr_bicubic = 0, ds_ssim_bicubic = 0;
  double sr_div_tau0 = 0, sr_div_tau08 = 0;
  double ds_div_tau0 = 0, ds_div_tau08 = 0;
  double fd_generated = 0, fd_bicubic = 0;
  long n_images = 0;
};

template <class R>
struct EvalResult {
  EvalSummary summary;
  std::vector<EvalRow> rows;
};

// full evaluation over a list of corpus ids
template <class R>
EvalResult<R> evaluate_model(SDFlowModel<R>& m, const Corpus& corpus,
                             const std::vector<long>& ids, uint64_t seed,
                             long diversity_images = 4, long diversity_samples = 10) {
  EvalResult<R> res;
  auto& s = res.summary;
  s.n_images = long(ids.size());
  const long scale = m.cfg.scale;

  std::vector<Tensor<R>> gen_lr_set, bic_lr_set, true_lr_set;
  long done = 0;
  for (long id : ids) {
    Tensor<R> x = to_tensor<R>(corpus.lr[id]);
    Tensor<R> y = to_tensor<R>(corpus.hr[id]);

    Rng r0 = Rng::derive(seed, 11, uint64_t(id));
    Tensor<R> sr0 = clamp01(sr_from_lr(m, x, 0.0, r0));
    Rng r8 = Rng::derive(seed, 12, uint64_t(id));
    Tensor<R> sr8 = clamp01(sr_from_lr(m, x, 0.8, r8));
    Tensor<R> bic_up = clamp01(bicubic_upscale(x, scale));

    double p0 = psnr_y(sr0, y), p8 = psnr_y(sr8, y), pb = psnr_y(bic_up, y);
    double s0 = ssim_y(sr0, y), s8 = ssim_y(sr8, y), sb = ssim_y(bic_up, y);
    s.sr_psnr_tau0 += p0;
    s.sr_psnr_tau08 += p8;
    s.sr_psnr_bicubic += pb;
    s.sr_ssim_tau0 += s0;
    s.sr_ssim_tau08 += s8;
    s.sr_ssim_bicubic += sb;
    res.rows.push_back({id, "sr_psnr_tau0", p0});
    res.rows.push_back({id, "sr_psnr_tau0.8", p8});
    res.rows.push_back({id, "sr_psnr_bicubic", pb});
    res.rows.push_back({id, "sr_ssim_tau0", s0});
    res.rows.push_back({id, "sr_ssim_tau0.8", s8});
    res.rows.push_back({id, "sr_ssim_bicubic", sb});

    Rng d0 = Rng::derive(seed, 13, uint64_t(id));
    Tensor<R> ds0 = clamp01(ds_from_hr(m, y, 0.0, d0));
    Rng d8 = Rng::derive(seed, 14, uint64_t(id));
    Tensor<R> ds8 = clamp01(ds_from_hr(m, y, 0.8, d8));
    Tensor<R> bic_dn = clamp01(bicubic_downscale(y, scale));
    double dp0 = psnr_y(ds0, x), dpb = psnr_y(bic_dn, x);
    s.ds_psnr_tau0 += dp0;
    s.ds_psnr_bicubic += dpb;
    s.ds_ssim_tau0 += ssim_y(ds0, x);
    s.ds_ssim_bicubic += ssim_y(bic_dn, x);
    res.rows.push_back({id, "ds_psnr_tau0", dp0});
    res.rows.push_back({id, "ds_psnr_bicubic", dpb});

    gen_lr_set.push_back(ds8);
    bic_lr_set.push_back(bic_dn);
    true_lr_set.push_back(x);

    if (done < diversity_images) {
      auto sr_set0 = sample_set(m, x, true, 0.0, diversity_samples, seed + uint64_t(id));
      auto sr_set8 = sample_set(m, x, true, 0.8, diversity_samples, seed + uint64_t(id));
      auto ds_set0 = sample_set(m, y, false, 0.0, diversity_samples, seed + uint64_t(id));
      auto ds_set8 = sample_set(m, y, false, 0.8, diversity_samples, seed + uint64_t(id));
      s.sr_div_tau0 += diversity(sr_set0);
      s.sr_div_tau08 += diversity(sr_set8);
      s.ds_div_tau0 += diversity(ds_set0);
      s.ds_div_tau08 += diversity(ds_set8);
    }
    ++done;
  }
  double n = double(ids.size());
  for (double* v : {&s.sr_psnr_tau0, &s.sr_psnr_tau08, &s.sr_psnr_bicubic, &s.sr_ssim_tau0,
                    &s.sr_ssim_tau08, &s.sr_ssim_bicubic, &s.ds_psnr_tau0, &s.ds_psnr_bicubic,
                    &s.ds_ssim_tau0, &s.ds_ssim_bicubic})
    *v /= n;
  double dn = double(std::min<long>(diversity_images, long(ids.size())));
  for (double* v : {&s.sr_div_tau0, &s.sr_div_tau08, &s.ds_div_tau0, &s.ds_div_tau08}) *v /= dn;

  if (ids.size() >= 16) {
    s.fd_generated = fd_proxy(m.proxy, gen_lr_set, true_lr_set);
    s.fd_bicubic = fd_proxy(m.proxy, bic_lr_set, true_lr_set);
  }
  return res;
}

struct TauSweepRow {
  double tau = 0;
  double psnr = 0;
  double ssim = 0;
  double div = 0;
};

// SR quality/diversity trade-off over temperatures
template <class R>
std::vector<TauSweepRow> tau_sweep(SDFlowModel<R>& m, const Corpus& corpus,
                                   const std::vector<long>& ids, const std::vector<double>& taus,
                                   uint64_t seed, long diversity_images = 4,
                                   long diversity_samples = 10) {
  std::vector<TauSweepRow> rows;
  for (double tau : taus) {
    TauSweepRow row;
    row.tau = tau;
    long done = 0;
    for (long id : ids) {
      Tensor<R> x = to_tensor<R>(corpus.lr[id]);
      Tensor<R> y = to_tensor<R>(corpus.hr[id]);
      Rng rng = Rng::derive(seed, 21, uint64_t(id) * 131 + uint64_t(tau * 4096));
      Tensor<R> sr = clamp01(sr_from_lr(m, x, tau, rng));
      row.psnr += psnr_y(sr, y);
      row.ssim += ssim_y(sr, y);
      if (done < diversity_images)
        row.div += diversity(sample_set(m, x, true, tau, diversity_samples, seed + uint64_t(id)));
      ++done;
    }
    row.psnr /= double(ids.size());
    row.ssim /= double(ids.size());
    row.div /= double(std::min<long>(diversity_images, long(ids.size())));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace sdflow
