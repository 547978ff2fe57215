#pragma once

// conv2d for the tape: im2col + GEMM (Eigen, single-threaded per sample;
// batch samples run in parallel). Gradient reductions are summed in fixed
// sample order so results are bit-reproducible for a given thread cap.

#include <Eigen/Core>

#include "sdflow/graph.hpp"

namespace sdflow {
namespace detail {

template <class R>
using EMat = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class R>
using EMap = Eigen::Map<EMat<R>>;
template <class R>
using ECMap = Eigen::Map<const EMat<R>>;

// col buffer layout: (Ci*kh*kw) x (Ho*Wo), row-major
template <class R>
void im2col(const R* x, long Ci, long H, long W, long kh, long kw, long st, long pad, long Ho,
            long Wo, R* col) {
  if (st == 1) {  // contiguous row copies with explicit border fills
    for (long c = 0; c < Ci; ++c)
      for (long u = 0; u < kh; ++u)
        for (long v = 0; v < kw; ++v) {
          R* dst = col + ((c * kh + u) * kw + v) * (Ho * Wo);
          const R* src = x + c * H * W;
          long i0 = std::max(0L, pad - u), i1 = std::min(Ho, H + pad - u);
          long j0 = std::max(0L, pad - v), j1 = std::min(Wo, W + pad - v);
          if (i1 < i0) i1 = i0;
          if (j1 < j0) j1 = j0;
          std::fill(dst, dst + i0 * Wo, R(0));
          for (long i = i0; i < i1; ++i) {
            R* d = dst + i * Wo;
            const R* sp = src + (i + u - pad) * W + (j0 + v - pad);
            std::fill(d, d + j0, R(0));
            std::copy(sp, sp + (j1 - j0), d + j0);
            std::fill(d + j1, d + Wo, R(0));
          }
          std::fill(dst + i1 * Wo, dst + Ho * Wo, R(0));
        }
    return;
  }
  for (long c = 0; c < Ci; ++c)
    for (long u = 0; u < kh; ++u)
      for (long v = 0; v < kw; ++v) {
        R* dst = col + ((c * kh + u) * kw + v) * (Ho * Wo);
        const R* src = x + c * H * W;
        for (long i = 0; i < Ho; ++i) {
          long hi = i * st + u - pad;
          if (hi < 0 || hi >= H) {
            for (long j = 0; j < Wo; ++j) dst[i * Wo + j] = R(0);
            continue;
          }
          for (long j = 0; j < Wo; ++j) {
            long wj = j * st + v - pad;
            dst[i * Wo + j] = (wj < 0 || wj >= W) ? R(0) : src[hi * W + wj];
          }
        }
      }
}

template <class R>
void col2im_add(const R* col, long Ci, long H, long W, long kh, long kw, long st, long pad,
                long Ho, long Wo, R* x) {
  if (st == 1) {
    for (long c = 0; c < Ci; ++c)
      for (long u = 0; u < kh; ++u)
        for (long v = 0; v < kw; ++v) {
          const R* src = col + ((c * kh + u) * kw + v) * (Ho * Wo);
          R* dst = x + c * H * W;
          long i0 = std::max(0L, pad - u), i1 = std::min(Ho, H + pad - u);
          long j0 = std::max(0L, pad - v), j1 = std::min(Wo, W + pad - v);
          for (long i = i0; i < i1; ++i) {
            const R* sp = src + i * Wo + j0;
            R* d = dst + (i + u - pad) * W + (j0 + v - pad);
            for (long j = 0; j < j1 - j0; ++j) d[j] += sp[j];
          }
        }
    return;
  }
  for (long c = 0; c < Ci; ++c)
    for (long u = 0; u < kh; ++u)
      for (long v = 0; v < kw; ++v) {
        const R* src = col + ((c * kh + u) * kw + v) * (Ho * Wo);
        R* dst = x + c * H * W;
        for (long i = 0; i < Ho; ++i) {
          long hi = i * st + u - pad;
          if (hi < 0 || hi >= H) continue;
          for (long j = 0; j < Wo; ++j) {
            long wj = j * st + v - pad;
            if (wj >= 0 && wj < W) dst[hi * W + wj] += src[i * Wo + j];
          }
        }
      }
}

template <class R>
std::vector<R>& scratch(size_t need) {
  thread_local std::vector<R> buf;
  if (buf.size() < need) buf.resize(need);
  return buf;
}

}  // namespace detail

template <class R>
typename Graph<R>::Var Graph<R>::conv2d(Var xv, Var wv, Var bv, int stride, int pad) {
  using namespace detail;
  const Tensor<R>& x = val(xv);
  const Tensor<R>& w = val(wv);
  const long B = x.shape.n, Ci = x.shape.c, H = x.shape.h, W = x.shape.w;
  const long Co = w.shape.n, kh = w.shape.h, kw = w.shape.w;
  require(w.shape.c == Ci, ErrKind::shape,
          "conv2d: weight expects " + std::to_string(w.shape.c) + " input channels, got " +
              std::to_string(Ci));
  const long Ho = (H + 2 * pad - kh) / stride + 1;
  const long Wo = (W + 2 * pad - kw) / stride + 1;
  require(Ho >= 1 && Wo >= 1, ErrKind::shape, "conv2d: empty output");
  const long K = Ci * kh * kw, HW = Ho * Wo;

  Tensor<R> out({B, Co, Ho, Wo});
  const bool has_bias = bv >= 0;
  const R* bias = has_bias ? val(bv).data() : nullptr;
  if (has_bias)
    require(val(bv).shape.c == Co && val(bv).numel() == Co, ErrKind::shape, "conv2d: bad bias shape");
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

  const int nt = std::min<long>(max_threads(), B);
#ifdef SDFLOW_HAS_OPENMP
#pragma omp parallel for num_threads(nt) schedule(static)
#endif
  for (long b = 0; b < B; ++b) {
    ECMap<R> Wm(w.data(), Co, K);
    EMap<R> Om(out.data() + b * Co * HW, Co, HW);
    if (pointwise) {
      ECMap<R> Xm(x.data() + b * Ci * H * W, Ci, HW);
      Om.noalias() = Wm * Xm;
    } else {
      auto& col = scratch<R>(size_t(K * HW));
      im2col(x.data() + b * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
      ECMap<R> Cm(col.data(), K, HW);
      Om.noalias() = Wm * Cm;
    }
    if (has_bias)
      for (long co = 0; co < Co; ++co) Om.row(co).array() += bias[co];
  }
  (void)nt;

  bool rg = nodes_[xv].requires_grad || nodes_[wv].requires_grad ||
            (has_bias && nodes_[bv].requires_grad);
  std::vector<int> parents = has_bias ? std::vector<int>{xv, wv, bv} : std::vector<int>{xv, wv};
  auto bw = [stride, pad, B, Ci, H, W, Co, kh, kw, Ho, Wo, K, HW, has_bias](Graph& g, int self) {
    using namespace detail;
    auto& ps = g.nodes_[self].parents;
    const Tensor<R>& go = g.nodes_[self].grad;
    const Tensor<R>& x = g.nodes_[ps[0]].value;
    const Tensor<R>& w = g.nodes_[ps[1]].value;
    const bool want_x = g.wants(ps[0]);
    const bool want_w = g.wants(ps[1]);
    const bool want_b = has_bias && g.wants(ps[2]);

    if (want_b) {
      auto& gb = g.acc(ps[2]);
      for (long b = 0; b < B; ++b)
        for (long co = 0; co < Co; ++co) {
          const R* p = go.data() + (b * Co + co) * HW;
          R s = 0;
          for (long i = 0; i < HW; ++i) s += p[i];
          gb.v[co] += s;
        }
    }

    const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    if (want_x) {
      auto& gx = g.acc(ps[0]);
      const int nt = std::min<long>(max_threads(), B);
#ifdef SDFLOW_HAS_OPENMP
#pragma omp parallel for num_threads(nt) schedule(static)
#endif
      for (long b = 0; b < B; ++b) {
        ECMap<R> Wm(w.data(), Co, K);
        ECMap<R> Gm(go.data() + b * Co * HW, Co, HW);
        if (pointwise) {
          EMap<R> Gx(gx.data() + b * Ci * H * W, Ci, HW);
          Gx.noalias() += Wm.transpose() * Gm;
        } else {
          auto& dcol = scratch<R>(size_t(K * HW));
          EMap<R> Dm(dcol.data(), K, HW);
          Dm.noalias() = Wm.transpose() * Gm;
          col2im_add(dcol.data(), Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                     gx.data() + b * Ci * H * W);
        }
      }
      (void)nt;
    }

    if (want_w) {
      // per-sample partial products summed in sample order
      auto& gw = g.acc(ps[1]);
      EMap<R> GW(gw.data(), Co, K);
      for (long b = 0; b < B; ++b) {
        ECMap<R> Gm(go.data() + b * Co * HW, Co, HW);
        if (pointwise) {
          ECMap<R> Xm(x.data() + b * Ci * H * W, Ci, HW);
          GW.noalias() += Gm * Xm.transpose();
        } else {
          auto& col = scratch<R>(size_t(K * HW));
          im2col(x.data() + b * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
          ECMap<R> Cm(col.data(), K, HW);
          GW.noalias() += Gm * Cm.transpose();
        }
      }
    }
  };
  return push(std::move(out), rg, nullptr, std::move(parents), std::move(bw));
}

}  // namespace sdflow
