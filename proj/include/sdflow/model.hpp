#pragma once

// One bundle of shared parameters: both flows, the three patch
// discriminators, and the frozen feature proxy.

#include "sdflow/ds_flow.hpp"

namespace sdflow {

template <class R>
struct SDFlowModel {
  ModelConfig cfg;
  SRFlow<R> sr;
  DSFlow<R> ds;
  PatchDiscriminator<R> d_content, d_sr, d_lr;
  FeatureProxy<R> proxy;

  explicit SDFlowModel(const ModelConfig& c, bool identity = false)
      : cfg(c), proxy(c.proxy_seed, c.img_channels) {
    Rng rng(c.init_seed);
    sr = SRFlow<R>(c, rng, identity);
    ds = DSFlow<R>(c, rng, identity);
    d_content = PatchDiscriminator<R>("disc.content", c.img_channels, c.disc_base, rng);
    d_sr = PatchDiscriminator<R>("disc.sr", c.img_channels, c.disc_base, rng);
    d_lr = PatchDiscriminator<R>("disc.lr", c.img_channels, c.disc_base, rng);
  }

  ParamList<R> flow_params() {
    ParamList<R> out;
    sr.collect(out);
    ds.collect(out);
    return out;
  }

  ParamList<R> disc_params() {
    ParamList<R> out;
    d_content.collect(out);
    d_sr.collect(out);
    d_lr.collect(out);
    return out;
  }

  ParamList<R> all_params() {
    ParamList<R> out = flow_params();
    for (auto* p : disc_params()) out.push_back(p);
    return out;
  }

  // one data-dependent initialization pass over a batch (actnorm statistics)
  void init_actnorms(const Tensor<R>& x_batch, const Tensor<R>& y_batch) {
    Graph<R> g;
    int y = g.leaf(y_batch);
    auto hr = sr.hr_forward(g, y, /*init=*/true);
    sr.hf_forward(g, hr.z_h, hr.z_c, /*init=*/true);
    int x = g.leaf(x_batch);
    auto lr = ds.lr_forward(g, x, /*init=*/true);
    ds.deg_forward(g, lr.z_d, lr.z_c, /*init=*/true);
  }
};

}  // namespace sdflow
