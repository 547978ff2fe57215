// Corpus generation, bicubic resampling, dequantization, luma conversion,
// and the unpaired batcher.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>

#include "sdflow/data.hpp"
#include "sdflow/metrics.hpp"

using namespace sdflow;
using R = double;

namespace {

// asymptotic Kolmogorov-Smirnov p-value for the empirical CDF of v against
// Uniform[lo, hi]
double ks_uniform_p(std::vector<double> v, double lo, double hi) {
  std::sort(v.begin(), v.end());
  double n = double(v.size());
  double d = 0;
  for (size_t i = 0; i < v.size(); ++i) {
    double f = (v[i] - lo) / (hi - lo);
    d = std::max(d, std::abs(f - double(i) / n));
    d = std::max(d, std::abs(f - double(i + 1) / n));
  }
  double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0;
  for (int k = 1; k <= 100; ++k) p += 2.0 * std::pow(-1.0, k - 1) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::min(1.0, std::max(0.0, p));
}

}  // namespace

TEST_CASE("bicubic kernel weights at phase 0.5") {
  auto w = bicubic_weights(0.5);
  REQUIRE(w[0] == Catch::Approx(-0.0625).margin(1e-12));
  REQUIRE(w[1] == Catch::Approx(0.5625).margin(1e-12));
  REQUIRE(w[2] == Catch::Approx(0.5625).margin(1e-12));
  REQUIRE(w[3] == Catch::Approx(-0.0625).margin(1e-12));
}

TEST_CASE("bicubic plans: rows sum to one") {
  for (long len : {8L, 16L, 48L})
    for (long s : {2L, 4L}) {
      auto down = bicubic_down_plan(len, s);
      for (long o = 0; o < down->out_len; ++o) {
        double sum = 0;
        for (int t = 0; t < down->taps; ++t) sum += down->weight[o * down->taps + t];
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
      }
      auto up = bicubic_up_plan(len, s);
      for (long o = 0; o < up->out_len; ++o) {
        double sum = 0;
        for (int t = 0; t < up->taps; ++t) sum += up->weight[o * up->taps + t];
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
      }
    }
}

TEST_CASE("bicubic downscale: constants, ramps, divisibility") {
  SECTION("constant image stays constant") {
    Tensor<R> img({1, 3, 16, 16}, R(0.37));
    auto out = bicubic_downscale(img, 4);
    REQUIRE(out.shape == Shape4{1, 3, 4, 4});
    for (R v : out.v) REQUIRE(std::abs(v - 0.37) < 1e-6);
  }
  SECTION("2x downscale of a ramp doubles the slope") {
    Tensor<R> img({1, 1, 8, 32});
    for (long h = 0; h < 8; ++h)
      for (long w = 0; w < 32; ++w) img.at(0, 0, h, w) = R(0.01 * w);
    auto out = bicubic_downscale(img, 2);
    // interior columns follow value = 0.01*(2*o + 0.5)
    for (long o = 4; o < 12; ++o)
      REQUIRE(std::abs(out.at(0, 0, 2, o) - 0.01 * (2 * o + 0.5)) < 1e-5);
  }
  SECTION("indivisible length raises") {
    Tensor<R> img({1, 3, 15, 16});
    REQUIRE_THROWS_AS(bicubic_downscale(img, 4), Error);
  }
}

TEST_CASE("degenerate theta: LR equals pure bicubic downscale") {
  Tensor<R> hr({1, 3, 32, 32});
  Rng(1).fill_uniform(hr, 0.0, 1.0);
  DegradationParams th;
  th.blur_sigma = 0;
  th.noise_sigma = 0;
  Rng rng(2);
  auto lr = degrade_tensor(hr, th, 4, rng);
  auto pure = bicubic_downscale(hr, 4);
  for (long i = 0; i < lr.numel(); ++i) REQUIRE(std::abs(lr.v[i] - pure.v[i]) < 1e-6);
}

TEST_CASE("synth_corpus: determinism, theta coverage, PSNR floor") {
  CorpusConfig cfg;
  cfg.n_images = 48;
  cfg.size = 32;
  cfg.scale = 4;
  cfg.seed = 99;
  auto a = synth_corpus<R>(cfg);
  SECTION("fixed seed reproduces byte-identical images") {
    auto b = synth_corpus<R>(cfg);
    for (long i = 0; i < a.size(); ++i) {
      REQUIRE(a.hr[i].v == b.hr[i].v);
      REQUIRE(a.lr[i].v == b.lr[i].v);
    }
  }
  SECTION("recorded theta covers the configured ranges") {
    std::vector<double> blur, noise;
    for (auto& t : a.theta) {
      blur.push_back(t.blur_sigma);
      noise.push_back(t.noise_sigma);
      REQUIRE(t.blur_sigma >= cfg.blur_lo);
      REQUIRE(t.blur_sigma <= cfg.blur_hi);
      REQUIRE(t.noise_sigma >= cfg.noise_lo);
      REQUIRE(t.noise_sigma <= cfg.noise_hi);
    }
    REQUIRE(ks_uniform_p(blur, cfg.blur_lo, cfg.blur_hi) > 0.01);
    REQUIRE(ks_uniform_p(noise, cfg.noise_lo, cfg.noise_hi) > 0.01);
  }
  SECTION("bicubic upscale of LR vs HR clears the 15 dB sanity floor") {
    double acc = 0;
    for (long i = 0; i < a.size(); ++i) {
      auto up = bicubic_upscale(to_tensor<R>(a.lr[i]), 4);
      acc += psnr_y(up, to_tensor<R>(a.hr[i]));
    }
    REQUIRE(acc / a.size() > 15.0);
  }
  SECTION("save/load round-trip") {
    namespace fs = std::filesystem;
    std::string dir = (fs::temp_directory_path() / "sdflow_corpus_test").string();
    fs::remove_all(dir);
    save_corpus(a, dir);
    auto b = load_corpus(dir, 4);
    REQUIRE(b.size() == a.size());
    for (long i = 0; i < a.size(); ++i) REQUIRE(a.hr[i].v == b.hr[i].v);
    REQUIRE(fs::exists(dir + "/theta.csv"));
    fs::remove_all(dir);
  }
  SECTION("80/10/10 split is deterministic and disjoint") {
    auto tr = a.ids(Corpus::Split::train);
    auto va = a.ids(Corpus::Split::val);
    auto te = a.ids(Corpus::Split::test);
    REQUIRE(long(tr.size() + va.size() + te.size()) == a.size());
    REQUIRE(tr.size() >= va.size());
    REQUIRE(!va.empty());
    REQUIRE(!te.empty());
  }
}

TEST_CASE("dequantize") {
  ImageU8 img;
  img.h = img.w = 8;
  img.v.assign(8 * 8 * 3, 100);
  SECTION("values stay in [v/255, v/255 + 1/255)") {
    Rng rng(3);
    auto t = dequantize<R>(img, rng);
    for (R v : t.v) {
      REQUIRE(v >= 100.0 / 255.0);
      REQUIRE(v < 101.0 / 255.0);
    }
  }
  SECTION("expectation = v/255 + 1/510 within 1%") {
    Rng rng(4);
    double acc = 0;
    long n = 0;
    for (int rep = 0; rep < 300; ++rep) {
      auto t = dequantize<R>(img, rng);
      for (R v : t.v) {
        acc += v;
        ++n;
      }
    }
    double expect = 100.0 / 255.0 + 1.0 / 510.0;
    REQUIRE(std::abs(acc / n - expect) / expect < 0.01);
  }
  SECTION("exact mode returns v/255") {
    Rng rng(5);
    auto t = dequantize<R>(img, rng, /*exact=*/true);
    for (R v : t.v) REQUIRE(v == R(100) / R(255));
  }
}

TEST_CASE("rgb_to_ycbcr_y: BT.601 studio range") {
  Tensor<R> white({1, 3, 1, 1}, R(1));
  Tensor<R> black({1, 3, 1, 1}, R(0));
  Tensor<R> gray({1, 3, 1, 1}, R(0.5));
  double yw = rgb_to_ycbcr_y(white).v[0];
  double yb = rgb_to_ycbcr_y(black).v[0];
  double yg = rgb_to_ycbcr_y(gray).v[0];
  REQUIRE(yw == Catch::Approx(235.0 / 255.0).margin(1e-6));
  REQUIRE(yb == Catch::Approx(16.0 / 255.0).margin(1e-12));
  REQUIRE(yg == Catch::Approx((yw + yb) / 2).margin(1e-9));
  Tensor<R> wrong({1, 2, 1, 1});
  REQUIRE_THROWS_AS(rgb_to_ycbcr_y(wrong), Error);
}

TEST_CASE("unpaired batches: shapes, provenance disjointness, flip histogram") {
  CorpusConfig cfg;
  cfg.n_images = 24;
  cfg.size = 32;
  cfg.scale = 4;
  cfg.seed = 7;
  auto corpus = synth_corpus<R>(cfg);
  auto pool = corpus.ids(Corpus::Split::train);

  SECTION("HR patch p maps to LR patch p/s") {
    Rng rng(8);
    auto b = make_unpaired_batch<R>(corpus, pool, 16, 4, rng);
    REQUIRE(b.y.shape == Shape4{4, 3, 16, 16});
    REQUIRE(b.x.shape == Shape4{4, 3, 4, 4});
  }
  SECTION("provenance disjointness over 1000 batches") {
    Rng rng(9);
    for (int it = 0; it < 1000; ++it) {
      auto b = make_unpaired_batch<R>(corpus, pool, 8, 4, rng);
      for (long i : b.x_ids)
        for (long j : b.y_ids) REQUIRE(i != j);
    }
  }
  SECTION("corpus too small raises a configuration error") {
    Rng rng(10);
    std::vector<long> tiny{0, 1, 2};
    REQUIRE_THROWS_AS(make_unpaired_batch<R>(corpus, tiny, 8, 4, rng), Error);
  }
  SECTION("flips preserve the quantized patch histogram") {
    // a full-image patch is the whole image possibly flipped; recover the
    // byte values through the dequantization offset and compare multisets
    Rng rng(11);
    auto b = make_unpaired_batch<R>(corpus, pool, 32, 2, rng);
    for (long n = 0; n < 2; ++n) {
      std::vector<long> hist_patch(256, 0), hist_src(256, 0);
      const auto& src = corpus.hr[b.y_ids[n]];
      for (long c = 0; c < 3; ++c)
        for (long h = 0; h < 32; ++h)
          for (long w = 0; w < 32; ++w) {
            hist_patch[long(std::floor(b.y.at(n, c, h, w) * 255.0))]++;
            hist_src[src.at(h, w, c)]++;
          }
      REQUIRE(hist_patch == hist_src);
    }
  }
}
