#pragma once

// Non-invertible conv networks: the conditional feature extractor (RRDB-lite),
// the LR content extractor with degradation modulation, patch discriminators,
// and the frozen random feature stack standing in for a pretrained perceptual
// network.

#include "sdflow/layers.hpp"

namespace sdflow {

// conv3x3/1x1 + bias with stride/pad; thin Param holder
template <class R>
class Conv {
public:
  Conv() = default;
  Conv(const std::string& prefix, long in_ch, long out_ch, long k, int stride, Rng& rng,
       double gain = 1.0, bool zero_init = false)
      : w_(prefix + ".w", Tensor<R>({out_ch, in_ch, k, k})),
        b_(prefix + ".b", Tensor<R>::zeros({1, out_ch, 1, 1})),
        stride_(stride), pad_(int(k / 2)) {
    if (!zero_init) he_init(w_.value, rng, gain);
  }

  int forward(Graph<R>& g, int x) { return g.conv2d(x, g.param(w_), g.param(b_), stride_, pad_); }

  void collect(ParamList<R>& out) {
    out.push_back(&w_);
    out.push_back(&b_);
  }

private:
  Param<R> w_, b_;
  int stride_ = 1, pad_ = 1;
};

// ---------------------------------------------------------------------------
// RRDB-lite: dense block of 4 conv3x3 + LeakyReLU(0.2) with growth channels,
// residual-scaled by 0.2. Extractor = head conv, R blocks, tail conv.
// ---------------------------------------------------------------------------
inline constexpr double kLeakySlope = 0.2;
inline constexpr double kResidualScale = 0.2;

template <class R>
class DenseBlock {
public:
  DenseBlock() = default;
  DenseBlock(const std::string& prefix, long width, long growth, Rng& rng)
      : c1_(prefix + ".c1", width, growth, 3, 1, rng, 0.1),
        c2_(prefix + ".c2", width + growth, growth, 3, 1, rng, 0.1),
        c3_(prefix + ".c3", width + 2 * growth, growth, 3, 1, rng, 0.1),
        c4_(prefix + ".c4", width + 3 * growth, width, 3, 1, rng, 0.1) {}

  int forward(Graph<R>& g, int x) {
    int d1 = g.leaky_relu(c1_.forward(g, x), R(kLeakySlope));
    int d2 = g.leaky_relu(c2_.forward(g, g.concat_c(x, d1)), R(kLeakySlope));
    int d3 = g.leaky_relu(c3_.forward(g, g.concat_c(g.concat_c(x, d1), d2)), R(kLeakySlope));
    int d4 = c4_.forward(g, g.concat_c(g.concat_c(g.concat_c(x, d1), d2), d3));
    return g.add(x, g.scalar_mul(d4, R(kResidualScale)));
  }

  void collect(ParamList<R>& out) {
    c1_.collect(out);
    c2_.collect(out);
    c3_.collect(out);
    c4_.collect(out);
  }

private:
  Conv<R> c1_, c2_, c3_, c4_;
};

template <class R>
class CondExtractor {
public:
  CondExtractor() = default;
  CondExtractor(const std::string& prefix, long in_ch, long width, long growth, long n_blocks,
                Rng& rng)
      : head_(prefix + ".head", in_ch, width, 3, 1, rng) {
    for (long i = 0; i < n_blocks; ++i)
      blocks_.emplace_back(prefix + ".rrdb" + std::to_string(i), width, growth, rng);
    tail_ = Conv<R>(prefix + ".tail", width, width, 3, 1, rng);
  }

  int forward(Graph<R>& g, int x) {
    int h = head_.forward(g, x);
    int f = h;
    for (auto& b : blocks_) f = b.forward(g, f);
    return tail_.forward(g, g.add(h, f));
  }

  void collect(ParamList<R>& out) {
    head_.collect(out);
    for (auto& b : blocks_) b.collect(out);
    tail_.collect(out);
  }

private:
  Conv<R> head_;
  std::vector<DenseBlock<R>> blocks_;
  Conv<R> tail_;
};

// ---------------------------------------------------------------------------
// Degradation estimator + DM ResBlocks -> LR content extractor. A DM layer
// computes per-position (scale, shift) from estimator features through two
// 1x1 convs; modulated = (1 + scale) * feat + shift, identity at zero init.
// The extractor carries a global skip from the input image, so z_c equals
// the LR input exactly at initialization.
// ---------------------------------------------------------------------------
template <class R>
class DegradationModulation {
public:
  DegradationModulation() = default;
  DegradationModulation(const std::string& prefix, long feat_ch, long deg_ch, Rng& rng)
      : a_(prefix + ".a", deg_ch, deg_ch, 1, 1, rng),
        b_(prefix + ".b", deg_ch, 2 * feat_ch, 1, 1, rng, 1.0, /*zero_init=*/true),
        feat_ch_(feat_ch) {}

  int forward(Graph<R>& g, int feat, int deg) {
    int h = g.leaky_relu(a_.forward(g, deg), R(kLeakySlope));
    int st = b_.forward(g, h);
    int scale = g.slice_c(st, 0, feat_ch_);
    int shift = g.slice_c(st, feat_ch_, 2 * feat_ch_);
    return g.add(g.mul(g.scalar_add(scale, R(1)), feat), shift);
  }

  void collect(ParamList<R>& out) {
    a_.collect(out);
    b_.collect(out);
  }

private:
  Conv<R> a_, b_;
  long feat_ch_ = 0;
};

template <class R>
class DMResBlock {
public:
  DMResBlock() = default;
  DMResBlock(const std::string& prefix, long width, long deg_ch, Rng& rng)
      : dm1_(prefix + ".dm1", width, deg_ch, rng), dm2_(prefix + ".dm2", width, deg_ch, rng),
        c1_(prefix + ".c1", width, width, 3, 1, rng, 0.5),
        c2_(prefix + ".c2", width, width, 3, 1, rng, 0.5) {}

  int forward(Graph<R>& g, int x, int deg) {
    int h = dm1_.forward(g, x, deg);
    h = g.leaky_relu(c1_.forward(g, h), R(kLeakySlope));
    h = dm2_.forward(g, h, deg);
    h = c2_.forward(g, h);
    return g.add(x, g.scalar_mul(h, R(kResidualScale)));
  }

  void collect(ParamList<R>& out) {
    dm1_.collect(out);
    dm2_.collect(out);
    c1_.collect(out);
    c2_.collect(out);
  }

private:
  DegradationModulation<R> dm1_, dm2_;
  Conv<R> c1_, c2_;
};

template <class R>
class LRContentExtractor {
public:
  LRContentExtractor() = default;
  LRContentExtractor(const std::string& prefix, long img_ch, long width, long est_layers,
                     long n_blocks, Rng& rng)
      : head_(prefix + ".head", img_ch, width, 3, 1, rng) {
    for (long i = 0; i < est_layers; ++i)
      est_.emplace_back(prefix + ".est" + std::to_string(i), i == 0 ? img_ch : width, width, 3, 1,
                        rng);
    for (long i = 0; i < n_blocks; ++i)
      blocks_.emplace_back(prefix + ".dmres" + std::to_string(i), width, width, rng);
    tail_ = Conv<R>(prefix + ".tail", width, img_ch, 3, 1, rng, 1.0, /*zero_init=*/true);
  }

  int forward(Graph<R>& g, int x) {
    int deg = x;
    for (auto& e : est_) deg = g.leaky_relu(e.forward(g, deg), R(kLeakySlope));
    int f = head_.forward(g, x);
    for (auto& b : blocks_) f = b.forward(g, f, deg);
    return g.add(x, tail_.forward(g, f));  // z_c = x exactly at zero-init tail
  }

  void collect(ParamList<R>& out) {
    for (auto& e : est_) e.collect(out);
    head_.collect(out);
    for (auto& b : blocks_) b.collect(out);
    tail_.collect(out);
  }

private:
  std::vector<Conv<R>> est_;
  Conv<R> head_;
  std::vector<DMResBlock<R>> blocks_;
  Conv<R> tail_;
};

// ---------------------------------------------------------------------------
// 4-layer patch discriminator (LSGAN), per-patch scalar outputs.
// ---------------------------------------------------------------------------
template <class R>
class PatchDiscriminator {
public:
  PatchDiscriminator() = default;
  PatchDiscriminator(const std::string& prefix, long in_ch, long base, Rng& rng)
      : c1_(prefix + ".c1", in_ch, base, 3, 2, rng),
        c2_(prefix + ".c2", base, 2 * base, 3, 2, rng),
        c3_(prefix + ".c3", 2 * base, 2 * base, 3, 1, rng),
        c4_(prefix + ".c4", 2 * base, 1, 3, 1, rng) {}

  // (B,C,H,W) -> (B,1,h',w') patch scores
  int forward(Graph<R>& g, int x) {
    int h = g.leaky_relu(c1_.forward(g, x), R(kLeakySlope));
    h = g.leaky_relu(c2_.forward(g, h), R(kLeakySlope));
    h = g.leaky_relu(c3_.forward(g, h), R(kLeakySlope));
    return c4_.forward(g, h);
  }

  void collect(ParamList<R>& out) {
    c1_.collect(out);
    c2_.collect(out);
    c3_.collect(out);
    c4_.collect(out);
  }

private:
  Conv<R> c1_, c2_, c3_, c4_;
};

// ---------------------------------------------------------------------------
// FeatureProxy: five frozen stride-2 conv levels with unit-norm random
// filters (LeakyReLU between). Stands in for a pretrained feature extractor:
// same seed, same features, gradients flow to the input only.
// ---------------------------------------------------------------------------
template <class R>
class FeatureProxy {
public:
  static constexpr long kDepth = 5;

  explicit FeatureProxy(uint64_t seed = 2024, long in_ch = 3) {
    Rng rng(seed);
    const long widths[kDepth] = {16, 32, 48, 64, 64};
    long ci = in_ch;
    for (long l = 0; l < kDepth; ++l) {
      Tensor<R> w({widths[l], ci, 3, 3});
      rng.fill_normal(w);
      // unit-norm rows scaled by sqrt(2): keeps feature magnitudes stable
      for (long o = 0; o < widths[l]; ++o) {
        double n2 = 0;
        long per = ci * 9;
        for (long i = 0; i < per; ++i) n2 += double(w.v[o * per + i]) * w.v[o * per + i];
        double s = std::sqrt(2.0 / std::max(n2, 1e-12));
        for (long i = 0; i < per; ++i) w.v[o * per + i] = R(w.v[o * per + i] * s);
      }
      weights_.push_back(std::move(w));
      ci = widths[l];
    }
  }

  // final feature map (B,64,ceil(H/32),ceil(W/32)); taped, weights constant
  int forward(Graph<R>& g, int x) const {
    int h = x;
    for (long l = 0; l < kDepth; ++l) {
      h = g.conv2d(h, g.constant(weights_[l]), -1, 2, 1);
      if (l + 1 < kDepth) h = g.leaky_relu(h, R(kLeakySlope));
    }
    return h;
  }

  // plain-tensor evaluation for metrics
  Tensor<R> features(const Tensor<R>& x) const {
    Graph<R> g;
    return g.val(forward(g, g.leaf(x)));
  }

  const std::vector<Tensor<R>>& weights() const { return weights_; }

  // global-average descriptor per image, used by the feature-statistics proxy
  std::vector<double> descriptor(const Tensor<R>& img) const {
    Tensor<R> f = features(img);
    std::vector<double> d(f.shape.c, 0.0);
    long hw = f.shape.h * f.shape.w;
    for (long c = 0; c < f.shape.c; ++c) {
      double s = 0;
      for (long h = 0; h < f.shape.h; ++h)
        for (long w = 0; w < f.shape.w; ++w) s += f.at(0, c, h, w);
      d[c] = s / double(hw);
    }
    return d;
  }

private:
  std::vector<Tensor<R>> weights_;
};

}  // namespace sdflow
