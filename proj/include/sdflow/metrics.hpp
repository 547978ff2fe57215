#pragma once

// Evaluation metrics: PSNR and SSIM on the BT.601 Y channel, pixel-space
// sample diversity, and a Frechet distance over frozen-proxy feature
// statistics (diagonal covariance) standing in for a learned-feature FID.

#include <limits>

#include "sdflow/data.hpp"
#include "sdflow/nets.hpp"

namespace sdflow {

struct MetricReport {
  double psnr_y = 0;
  double ssim_y = 0;
  double diversity = 0;
  double fd_proxy = 0;
};

// 10*log10(1/MSE) on Y; identical inputs report +inf
template <class R>
double psnr_y(const Tensor<R>& a, const Tensor<R>& b) {
  require(a.shape == b.shape, ErrKind::shape, "psnr_y: shape mismatch");
  Tensor<R> ya = rgb_to_ycbcr_y(a), yb = rgb_to_ycbcr_y(b);
  double mse = 0;
  for (long i = 0; i < ya.numel(); ++i) {
    double d = double(ya.v[i]) - double(yb.v[i]);
    mse += d * d;
  }
  mse /= double(ya.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

// mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5), K1=0.01,
// K2=0.03, dynamic range 1
template <class R>
double ssim_y(const Tensor<R>& a, const Tensor<R>& b) {
  require(a.shape == b.shape, ErrKind::shape, "ssim_y: shape mismatch");
  constexpr long win = 11;
  require(a.shape.h >= win && a.shape.w >= win, ErrKind::shape,
          "ssim_y: image smaller than the 11x11 window");
  Tensor<R> ya = rgb_to_ycbcr_y(a), yb = rgb_to_ycbcr_y(b);
  auto k = gaussian_kernel_1d<double>(1.5, win / 2);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

  double total = 0;
  long count = 0;
  for (long n = 0; n < ya.shape.n; ++n)
    for (long i = 0; i + win <= ya.shape.h; ++i)
      for (long j = 0; j + win <= ya.shape.w; ++j) {
        double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
        for (long u = 0; u < win; ++u)
          for (long v = 0; v < win; ++v) {
            double w = k[u] * k[v];
            double xa = ya.at(n, 0, i + u, j + v), xb = yb.at(n, 0, i + u, j + v);
            ma += w * xa;
            mb += w * xb;
          }
        for (long u = 0; u < win; ++u)
          for (long v = 0; v < win; ++v) {
            double w = k[u] * k[v];
            double xa = ya.at(n, 0, i + u, j + v), xb = yb.at(n, 0, i + u, j + v);
            va += w * (xa - ma) * (xa - ma);
            vb += w * (xb - mb) * (xb - mb);
            cov += w * (xa - ma) * (xb - mb);
          }
        double s = ((2 * ma * mb + c1) * (2 * cov + c2)) /
                   ((ma * ma + mb * mb + c1) * (va + vb + c2));
        total += s;
        ++count;
      }
  return total / double(count);
}

// mean pairwise mean-absolute-difference over samples, scaled by 255
template <class R>
double diversity(const std::vector<Tensor<R>>& samples) {
  require(samples.size() >= 2, ErrKind::parameter, "diversity: need at least 2 samples");
  for (auto& s : samples)
    require(s.shape == samples[0].shape, ErrKind::shape, "diversity: shape mismatch");
  double acc = 0;
  long pairs = 0;
  for (size_t i = 0; i < samples.size(); ++i)
    for (size_t j = i + 1; j < samples.size(); ++j) {
      double d = 0;
      for (long k = 0; k < samples[i].numel(); ++k)
        d += std::abs(double(samples[i].v[k]) - double(samples[j].v[k]));
      acc += d / double(samples[i].numel());
      ++pairs;
    }
  return 255.0 * acc / double(pairs);
}

// Frechet distance over global-average proxy features with diagonal
// covariances: ||mu_a - mu_b||^2 + sum_d (sqrt(va_d) - sqrt(vb_d))^2
template <class R>
double fd_proxy(const FeatureProxy<R>& proxy, const std::vector<Tensor<R>>& set_a,
                const std::vector<Tensor<R>>& set_b) {
  require(set_a.size() >= 16 && set_b.size() >= 16, ErrKind::parameter,
          "fd_proxy: need at least 16 images per set");
  auto stats = [&](const std::vector<Tensor<R>>& set) {
    std::vector<std::vector<double>> d;
    for (auto& img : set) d.push_back(proxy.descriptor(img));
    size_t dim = d[0].size();
    std::vector<double> mu(dim, 0), var(dim, 0);
    for (auto& row : d)
      for (size_t i = 0; i < dim; ++i) mu[i] += row[i];
    for (auto& m : mu) m /= double(d.size());
    for (auto& row : d)
      for (size_t i = 0; i < dim; ++i) {
        double c = row[i] - mu[i];
        var[i] += c * c;
      }
    for (auto& v : var) v /= double(d.size());
    return std::pair{mu, var};
  };
  auto [mu_a, var_a] = stats(set_a);
  auto [mu_b, var_b] = stats(set_b);
  double fd = 0;
  for (size_t i = 0; i < mu_a.size(); ++i) {
    double dm = mu_a[i] - mu_b[i];
    double ds = std::sqrt(var_a[i]) - std::sqrt(var_b[i]);
    fd += dm * dm + ds * ds;
  }
  return fd;
}

}  // namespace sdflow
