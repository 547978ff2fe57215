// Metric oracles: PSNR-Y/SSIM-Y against independent scalar-loop
// implementations, diversity, and the feature-statistics distance.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "sdflow/metrics.hpp"

using namespace sdflow;
using R = double;

namespace {

Tensor<R> random_image(Shape4 s, uint64_t seed) {
  Tensor<R> t(s);
  Rng r(seed);
  r.fill_uniform(t, 0.0, 1.0);
  return t;
}

// fully independent scalar-loop PSNR on the Y channel
double psnr_ref(const Tensor<R>& a, const Tensor<R>& b) {
  double mse = 0;
  long n = 0;
  for (long bi = 0; bi < a.shape.n; ++bi)
    for (long h = 0; h < a.shape.h; ++h)
      for (long w = 0; w < a.shape.w; ++w) {
        double ya = 16.0 / 255.0 + (65.481 * a.at(bi, 0, h, w) + 128.553 * a.at(bi, 1, h, w) +
                                    24.966 * a.at(bi, 2, h, w)) /
                                       255.0;
        double yb = 16.0 / 255.0 + (65.481 * b.at(bi, 0, h, w) + 128.553 * b.at(bi, 1, h, w) +
                                    24.966 * b.at(bi, 2, h, w)) /
                                       255.0;
        mse += (ya - yb) * (ya - yb);
        ++n;
      }
  mse /= n;
  return 10.0 * std::log10(1.0 / mse);
}

// independent scalar-loop SSIM with explicit Gaussian weights
double ssim_ref(const Tensor<R>& a, const Tensor<R>& b) {
  const long win = 11;
  double k[11];
  double ksum = 0;
  for (long i = 0; i < win; ++i) {
    double d = double(i) - 5.0;
    k[i] = std::exp(-0.5 * d * d / (1.5 * 1.5));
    ksum += k[i];
  }
  for (auto& v : k) v /= ksum;
  auto luma = [&](const Tensor<R>& t, long n, long h, long w) {
    return 16.0 / 255.0 +
           (65.481 * t.at(n, 0, h, w) + 128.553 * t.at(n, 1, h, w) + 24.966 * t.at(n, 2, h, w)) /
               255.0;
  };
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  long cnt = 0;
  for (long n = 0; n < a.shape.n; ++n)
    for (long i = 0; i + win <= a.shape.h; ++i)
      for (long j = 0; j + win <= a.shape.w; ++j) {
        double ma = 0, mb = 0;
        for (long u = 0; u < win; ++u)
          for (long v = 0; v < win; ++v) {
            double w = k[u] * k[v];
            ma += w * luma(a, n, i + u, j + v);
            mb += w * luma(b, n, i + u, j + v);
          }
        double va = 0, vb = 0, cov = 0;
        for (long u = 0; u < win; ++u)
          for (long v = 0; v < win; ++v) {
            double w = k[u] * k[v];
            double xa = luma(a, n, i + u, j + v) - ma;
            double xb = luma(b, n, i + u, j + v) - mb;
            va += w * xa * xa;
            vb += w * xb * xb;
            cov += w * xa * xb;
          }
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++cnt;
      }
  return total / cnt;
}

}  // namespace

TEST_CASE("psnr_y") {
  SECTION("identical images report +inf") {
    auto a = random_image({1, 3, 8, 8}, 1);
    REQUIRE(std::isinf(psnr_y(a, a)));
  }
  SECTION("uniform 0.1 luma difference gives 20 dB") {
    Tensor<R> a({1, 3, 8, 8}, R(0.3));
    Tensor<R> b = a;
    // shift all channels so the Y difference is exactly 0.1:
    // Y is affine with slope (65.481+128.553+24.966)/255 = 0.859
    double slope = (65.481 + 128.553 + 24.966) / 255.0;
    for (auto& v : b.v) v += R(0.1 / slope);
    REQUIRE(psnr_y(a, b) == Catch::Approx(20.0).margin(1e-9));
  }
  SECTION("matches the scalar-loop oracle on 20 random pairs") {
    for (uint64_t s = 0; s < 20; ++s) {
      auto a = random_image({1, 3, 12, 12}, 100 + s);
      auto b = random_image({1, 3, 12, 12}, 200 + s);
      REQUIRE(std::abs(psnr_y(a, b) - psnr_ref(a, b)) < 1e-9);
    }
  }
  SECTION("shape mismatch raises") {
    auto a = random_image({1, 3, 8, 8}, 2);
    auto b = random_image({1, 3, 4, 4}, 3);
    REQUIRE_THROWS_AS(psnr_y(a, b), Error);
  }
}

TEST_CASE("ssim_y") {
  SECTION("identical images give exactly 1") {
    auto a = random_image({1, 3, 16, 16}, 4);
    REQUIRE(ssim_y(a, a) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("constant offset: luminance < 1, structure intact, oracle match") {
    auto a = random_image({1, 3, 16, 16}, 5);
    Tensor<R> b = a;
    for (auto& v : b.v) v += R(0.1);
    double s = ssim_y(a, b);
    REQUIRE(s < 1.0);
    REQUIRE(s > 0.0);
    REQUIRE(std::abs(s - ssim_ref(a, b)) < 1e-9);
  }
  SECTION("matches the scalar-loop oracle on 20 random pairs") {
    for (uint64_t s = 0; s < 20; ++s) {
      auto a = random_image({1, 3, 14, 14}, 300 + s);
      auto b = random_image({1, 3, 14, 14}, 400 + s);
      REQUIRE(std::abs(ssim_y(a, b) - ssim_ref(a, b)) < 1e-9);
    }
  }
  SECTION("independent white noise scores near zero") {
    double acc = 0;
    for (uint64_t t = 0; t < 20; ++t) {
      auto a = random_image({1, 3, 24, 24}, 500 + t);
      auto b = random_image({1, 3, 24, 24}, 600 + t);
      acc += ssim_y(a, b);
    }
    REQUIRE(std::abs(acc / 20) < 0.05);
  }
  SECTION("image smaller than the window raises") {
    auto a = random_image({1, 3, 8, 8}, 6);
    REQUIRE_THROWS_AS(ssim_y(a, a), Error);
  }
  SECTION("symmetric in its arguments") {
    auto a = random_image({1, 3, 16, 16}, 7);
    auto b = random_image({1, 3, 16, 16}, 8);
    REQUIRE(ssim_y(a, b) == Catch::Approx(ssim_y(b, a)).margin(1e-12));
    REQUIRE(psnr_y(a, b) == Catch::Approx(psnr_y(b, a)).margin(1e-12));
  }
}

TEST_CASE("diversity") {
  SECTION("identical samples give 0") {
    auto a = random_image({1, 3, 8, 8}, 9);
    REQUIRE(diversity<R>({a, a, a}) == 0.0);
  }
  SECTION("uniform 10/255 difference gives 10") {
    auto a = random_image({1, 3, 8, 8}, 10);
    Tensor<R> b = a;
    for (auto& v : b.v) v += R(10.0 / 255.0);
    REQUIRE(diversity<R>({a, b}) == Catch::Approx(10.0).margin(1e-9));
  }
  SECTION("permutation-invariant") {
    auto a = random_image({1, 3, 8, 8}, 11);
    auto b = random_image({1, 3, 8, 8}, 12);
    auto c = random_image({1, 3, 8, 8}, 13);
    REQUIRE(diversity<R>({a, b, c}) == Catch::Approx(diversity<R>({c, a, b})).margin(1e-12));
  }
  SECTION("fewer than two samples raises") {
    auto a = random_image({1, 3, 8, 8}, 14);
    REQUIRE_THROWS_AS(diversity<R>({a}), Error);
  }
}

TEST_CASE("fd_proxy") {
  FeatureProxy<R> proxy(2024);
  auto make_set = [&](uint64_t seed, double noise) {
    std::vector<Tensor<R>> set;
    for (int i = 0; i < 16; ++i) {
      auto img = random_image({1, 3, 16, 16}, seed + i);
      if (noise > 0) {
        Rng r(seed * 31 + i);
        for (auto& v : img.v) v = std::min(1.0, std::max(0.0, double(v) + noise * r.normal()));
      }
      set.push_back(img);
    }
    return set;
  };
  auto base = make_set(1000, 0.0);
  SECTION("identical sets give 0") {
    REQUIRE(fd_proxy(proxy, base, base) == Catch::Approx(0.0).margin(1e-9));
  }
  SECTION("heavier corruption is farther than lighter corruption") {
    auto light = make_set(1000, 0.02);
    auto heavy = make_set(1000, 0.2);
    double dl = fd_proxy(proxy, base, light);
    double dh = fd_proxy(proxy, base, heavy);
    REQUIRE(dl > 0.0);
    REQUIRE(dh > dl);
  }
  SECTION("symmetric and nonnegative") {
    auto other = make_set(2000, 0.0);
    double ab = fd_proxy(proxy, base, other);
    double ba = fd_proxy(proxy, other, base);
    REQUIRE(ab >= 0.0);
    REQUIRE(std::abs(ab - ba) < 1e-9);
  }
  SECTION("undersized sets raise") {
    std::vector<Tensor<R>> small(base.begin(), base.begin() + 8);
    REQUIRE_THROWS_AS(fd_proxy(proxy, small, base), Error);
  }
}
