#pragma once

// Synthetic degradation corpus and data plumbing: bit-exact separable bicubic
// resampling, Gaussian blur, dequantization, BT.601 luma, procedural HR
// images, and the unpaired patch batcher. LR = noise(bicubic_down(blur(HR))),
// with the blur/noise parameters drawn fresh per image and recorded.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

#include "sdflow/graph.hpp"
#include "sdflow/image_io.hpp"
#include "sdflow/rng.hpp"

namespace sdflow {

// ---- bicubic kernel (a = -0.5) ---------------------------------------------

inline double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
  if (x < 2.0) return a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a;
  return 0.0;
}

// the 4 unnormalized weights at a given sub-pixel phase (no antialias)
inline std::array<double, 4> bicubic_weights(double phase) {
  return {cubic_kernel(1.0 + phase), cubic_kernel(phase), cubic_kernel(1.0 - phase),
          cubic_kernel(2.0 - phase)};
}

inline long mirror_index(long j, long len) {
  while (j < 0 || j >= len) j = j < 0 ? -j - 1 : 2 * len - 1 - j;
  return j;
}

namespace detail {
// plans are immutable once built; cached per (length, scale, direction)
inline std::shared_ptr<const ResamplePlan> plan_cached(
    long in_len, long s, bool down, const std::function<std::shared_ptr<ResamplePlan>()>& build) {
  static std::mutex mu;
  static std::map<std::tuple<long, long, bool>, std::shared_ptr<const ResamplePlan>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[{in_len, s, down}];
  if (!slot) slot = build();
  return slot;
}
}  // namespace detail

// Downscale by integer factor s with kernel support widened by s (antialias);
// rows are normalized to sum exactly to 1.
inline std::shared_ptr<const ResamplePlan> bicubic_down_plan(long in_len, long s) {
  require(in_len % s == 0, ErrKind::shape, "bicubic_downscale: length not divisible by scale");
  return detail::plan_cached(in_len, s, true, [&] {
    auto plan = std::make_shared<ResamplePlan>();
    plan->in_len = in_len;
    plan->out_len = in_len / s;
    plan->taps = int(4 * s);
    for (long o = 0; o < plan->out_len; ++o) {
      double center = (o + 0.5) * double(s) - 0.5;
      long i0 = long(std::ceil(center - 2.0 * s));
      double sum = 0;
      std::vector<double> w(plan->taps);
      for (int t = 0; t < plan->taps; ++t) {
        w[t] = cubic_kernel((i0 + t - center) / double(s));
        sum += w[t];
      }
      for (int t = 0; t < plan->taps; ++t) {
        plan->index.push_back(int(mirror_index(i0 + t, in_len)));
        plan->weight.push_back(w[t] / sum);
      }
    }
    return plan;
  });
}

inline std::shared_ptr<const ResamplePlan> bicubic_up_plan(long in_len, long s) {
  return detail::plan_cached(in_len, s, false, [&] {
    auto plan = std::make_shared<ResamplePlan>();
    plan->in_len = in_len;
    plan->out_len = in_len * s;
    plan->taps = 4;
    for (long o = 0; o < plan->out_len; ++o) {
      double center = (o + 0.5) / double(s) - 0.5;
      long i0 = long(std::floor(center)) - 1;
      double sum = 0;
      std::vector<double> w(4);
      for (int t = 0; t < 4; ++t) {
        w[t] = cubic_kernel(i0 + t - center);
        sum += w[t];
      }
      for (int t = 0; t < 4; ++t) {
        plan->index.push_back(int(mirror_index(i0 + t, in_len)));
        plan->weight.push_back(w[t] / sum);
      }
    }
    return plan;
  });
}

// taped separable resampling (vertical then horizontal)
template <class R>
int bicubic_downscale_var(Graph<R>& g, int x, long s) {
  Shape4 sh = g.shape(x);
  return g.resample1d(g.resample1d(x, bicubic_down_plan(sh.h, s), true),
                      bicubic_down_plan(sh.w, s), false);
}

template <class R>
int bicubic_upscale_var(Graph<R>& g, int x, long s) {
  Shape4 sh = g.shape(x);
  return g.resample1d(g.resample1d(x, bicubic_up_plan(sh.h, s), true),
                      bicubic_up_plan(sh.w, s), false);
}

// tensor-level wrappers (same plans, identical numerics)
template <class R>
Tensor<R> bicubic_downscale(const Tensor<R>& x, long s) {
  Graph<R> g;
  return g.val(bicubic_downscale_var(g, g.leaf(x), s));
}

template <class R>
Tensor<R> bicubic_upscale(const Tensor<R>& x, long s) {
  Graph<R> g;
  return g.val(bicubic_upscale_var(g, g.leaf(x), s));
}

// ---- Gaussian filtering ------------------------------------------------------

template <class R>
std::vector<R> gaussian_kernel_1d(double sigma, long radius) {
  std::vector<R> k(2 * radius + 1);
  double sum = 0;
  for (long i = -radius; i <= radius; ++i) {
    double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[i + radius] = R(v);
    sum += v;
  }
  for (auto& v : k) v = R(double(v) / sum);
  return k;
}

// taped low-pass filter: 9x9 Gaussian with sigma = s/2, reflect padding
template <class R>
int lpf_var(Graph<R>& g, int x, long s) {
  auto k = gaussian_kernel_1d<R>(double(s) / 2.0, 4);
  int p = g.pad_reflect(x, 4);
  return g.sconv1d(g.sconv1d(p, k, true), k, false);
}

template <class R>
Tensor<R> gaussian_blur(const Tensor<R>& x, double sigma) {
  if (sigma <= 0) return x;
  long radius = std::max<long>(1, long(std::ceil(3.0 * sigma)));
  radius = std::min({radius, x.shape.h, x.shape.w});
  auto k = gaussian_kernel_1d<R>(sigma, radius);
  Graph<R> g;
  int p = g.pad_reflect(g.leaf(x), int(radius));
  return g.val(g.sconv1d(g.sconv1d(p, k, true), k, false));
}

// ---- dequantization and luma -------------------------------------------------

// value/255 + U[0, 1/255) per element; exact mode returns value/255
template <class R>
Tensor<R> dequantize(const ImageU8& img, Rng& rng, bool exact = false) {
  Tensor<R> t = to_tensor<R>(img);
  if (!exact)
    for (auto& x : t.v) x += R(rng.uniform() / 255.0);
  return t;
}

// ITU-R BT.601 studio-swing luma from [0,1] RGB
template <class R>
Tensor<R> rgb_to_ycbcr_y(const Tensor<R>& img) {
  require(img.shape.c == 3, ErrKind::shape, "rgb_to_ycbcr_y: need 3 channels");
  Tensor<R> y({img.shape.n, 1, img.shape.h, img.shape.w});
  for (long n = 0; n < img.shape.n; ++n)
    for (long h = 0; h < img.shape.h; ++h)
      for (long w = 0; w < img.shape.w; ++w) {
        double r = img.at(n, 0, h, w), g = img.at(n, 1, h, w), b = img.at(n, 2, h, w);
        y.at(n, 0, h, w) = R(16.0 / 255.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0);
      }
  return y;
}

// ---- synthetic corpus ----------------------------------------------------------

struct DegradationParams {
  double blur_sigma = 0;   // in [0.2, 3.0]
  double noise_sigma = 0;  // in [0, 0.04] of the [0,1] range
  uint64_t seed = 0;
};

struct CorpusConfig {
  long n_images = 256;
  long size = 64;  // HR side; must be divisible by scale and by 2^(L+1)
  long scale = 4;
  double blur_lo = 0.2, blur_hi = 3.0;
  double noise_lo = 0.0, noise_hi = 0.04;
  uint64_t seed = 1;
};

struct Corpus {
  CorpusConfig cfg;
  std::vector<ImageU8> hr, lr;
  std::vector<DegradationParams> theta;

  long size() const { return long(hr.size()); }

  // deterministic 80/10/10 split by index
  enum class Split { train, val, test };
  Split split_of(long id) const {
    long n = size();
    if (id < (n * 8) / 10) return Split::train;
    if (id < (n * 9) / 10) return Split::val;
    return Split::test;
  }
  std::vector<long> ids(Split s) const {
    std::vector<long> out;
    for (long i = 0; i < size(); ++i)
      if (split_of(i) == s) out.push_back(i);
    return out;
  }
};

namespace detail {

// procedural HR content: gradient background, random polygons, a band-limited
// noise texture patch, and thin strokes
template <class R>
Tensor<R> procedural_image(long size, Rng& rng) {
  Tensor<R> img({1, 3, size, size});
  // gradient background between two random colors
  double c0[3], c1[3], dir[2];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.05, 0.95);
    c1[c] = rng.uniform(0.05, 0.95);
  }
  double ang = rng.uniform(0, 6.2831853);
  dir[0] = std::cos(ang);
  dir[1] = std::sin(ang);
  for (long y = 0; y < size; ++y)
    for (long x = 0; x < size; ++x) {
      double t = ((x - size / 2.0) * dir[0] + (y - size / 2.0) * dir[1]) / double(size) + 0.5;
      t = std::min(1.0, std::max(0.0, t));
      for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = R(c0[c] * (1 - t) + c1[c] * t);
    }
  // random convex polygons (triangles/quads)
  long n_poly = 3 + rng.uniform_int(6);
  for (long pi = 0; pi < n_poly; ++pi) {
    long nv = 3 + rng.uniform_int(2);
    double cx = rng.uniform(0, size), cy = rng.uniform(0, size);
    double rad = rng.uniform(size * 0.08, size * 0.35);
    std::vector<double> vx(nv), vy(nv);
    double base = rng.uniform(0, 6.2831853);
    for (long k = 0; k < nv; ++k) {
      double a = base + 6.2831853 * k / nv + rng.uniform(-0.3, 0.3);
      double r = rad * rng.uniform(0.7, 1.0);
      vx[k] = cx + r * std::cos(a);
      vy[k] = cy + r * std::sin(a);
    }
    double col[3];
    for (int c = 0; c < 3; ++c) col[c] = rng.uniform(0, 1);
    double alpha = rng.uniform(0.6, 1.0);
    for (long y = 0; y < size; ++y)
      for (long x = 0; x < size; ++x) {
        bool inside = true;  // convex test via cross products
        for (long k = 0; k < nv; ++k) {
          long k2 = (k + 1) % nv;
          double cr = (vx[k2] - vx[k]) * (y - vy[k]) - (vy[k2] - vy[k]) * (x - vx[k]);
          if (cr < 0) {
            inside = false;
            break;
          }
        }
        if (inside)
          for (int c = 0; c < 3; ++c)
            img.at(0, c, y, x) = R((1 - alpha) * img.at(0, c, y, x) + alpha * col[c]);
      }
  }
  // band-limited noise texture in a random rectangle
  {
    long x0 = rng.uniform_int(size / 2), y0 = rng.uniform_int(size / 2);
    long tw = size / 4 + rng.uniform_int(size / 2), th = size / 4 + rng.uniform_int(size / 2);
    long x1 = std::min(size, x0 + tw), y1 = std::min(size, y0 + th);
    Tensor<R> noise({1, 1, size, size});
    rng.fill_normal(noise, 0.0, 1.0);
    Tensor<R> soft = gaussian_blur(noise, rng.uniform(0.8, 2.0));
    double amp = rng.uniform(0.05, 0.18);
    for (long y = y0; y < y1; ++y)
      for (long x = x0; x < x1; ++x)
        for (int c = 0; c < 3; ++c) img.at(0, c, y, x) += R(amp * soft.at(0, 0, y, x));
  }
  // text-like strokes: short dark or light segments
  long n_strokes = 5 + rng.uniform_int(14);
  for (long si = 0; si < n_strokes; ++si) {
    double x0 = rng.uniform(2, size - 2), y0 = rng.uniform(2, size - 2);
    double a = rng.uniform(0, 6.2831853), len = rng.uniform(size * 0.05, size * 0.25);
    double x1 = x0 + len * std::cos(a), y1 = y0 + len * std::sin(a);
    double col = rng.uniform() < 0.5 ? rng.uniform(0.0, 0.15) : rng.uniform(0.85, 1.0);
    double hw = rng.uniform(0.5, 1.1);  // half width
    long xa = long(std::max(0.0, std::min(x0, x1) - 2)), xb = long(std::min(double(size), std::max(x0, x1) + 2));
    long ya = long(std::max(0.0, std::min(y0, y1) - 2)), yb = long(std::min(double(size), std::max(y0, y1) + 2));
    double dx = x1 - x0, dy = y1 - y0, l2 = dx * dx + dy * dy;
    for (long y = ya; y < yb; ++y)
      for (long x = xa; x < xb; ++x) {
        double t = l2 > 0 ? ((x - x0) * dx + (y - y0) * dy) / l2 : 0.0;
        t = std::min(1.0, std::max(0.0, t));
        double px = x0 + t * dx, py = y0 + t * dy;
        double d = std::hypot(x - px, y - py);
        if (d < hw)
          for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = R(col);
      }
  }
  for (auto& v : img.v) v = std::min(R(1), std::max(R(0), v));
  return img;
}

}  // namespace detail

// continuous LR = noise(bicubic_down(blur(HR))) for a given theta
template <class R>
Tensor<R> degrade_tensor(const Tensor<R>& hr, const DegradationParams& th, long scale, Rng& rng) {
  Tensor<R> blurred = th.blur_sigma > 0 ? gaussian_blur(hr, th.blur_sigma) : hr;
  Tensor<R> lr = bicubic_downscale(blurred, scale);
  if (th.noise_sigma > 0)
    for (auto& v : lr.v) v += R(th.noise_sigma * rng.normal());
  return lr;
}

// quantized LR with theta drawn fresh from the configured ranges
template <class R>
std::pair<ImageU8, DegradationParams> degrade_image(const Tensor<R>& hr, const CorpusConfig& cfg,
                                                    uint64_t image_seed) {
  Rng rng(image_seed);
  DegradationParams th;
  th.blur_sigma = rng.uniform(cfg.blur_lo, cfg.blur_hi);
  th.noise_sigma = rng.uniform(cfg.noise_lo, cfg.noise_hi);
  th.seed = image_seed;
  return {to_image(degrade_tensor(hr, th, cfg.scale, rng)), th};
}

template <class R>
Corpus synth_corpus(const CorpusConfig& cfg) {
  require(cfg.size % cfg.scale == 0 && (cfg.size / cfg.scale) % 2 == 0, ErrKind::config,
          "corpus size must be divisible by scale with an even LR side");
  Corpus corpus;
  corpus.cfg = cfg;
  corpus.hr.resize(cfg.n_images);
  corpus.lr.resize(cfg.n_images);
  corpus.theta.resize(cfg.n_images);
  for (long i = 0; i < cfg.n_images; ++i) {
    Rng rng = Rng::derive(cfg.seed, 100, uint64_t(i));
    Tensor<R> hr = detail::procedural_image<R>(cfg.size, rng);
    corpus.hr[i] = to_image(hr);
    // degrade the quantized HR, matching what lands on disk
    uint64_t deg_seed = cfg.seed ^ (0xABCDULL + uint64_t(i));
    auto [lr, th] = degrade_image<R>(to_tensor<R>(corpus.hr[i]), cfg, splitmix64(deg_seed));
    corpus.lr[i] = std::move(lr);
    corpus.theta[i] = th;
  }
  return corpus;
}

inline void save_corpus(const Corpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir + "/hr", ec);
  fs::create_directories(dir + "/lr", ec);
  char name[32];
  for (long i = 0; i < corpus.size(); ++i) {
    std::snprintf(name, sizeof(name), "%06ld.png", i);
    write_png(dir + "/hr/" + name, corpus.hr[i]);
    write_png(dir + "/lr/" + name, corpus.lr[i]);
  }
  std::ofstream csv(dir + "/theta.csv");
  if (!csv) fail(ErrKind::io, "cannot write " + dir + "/theta.csv");
  csv << "id,blur_sigma,noise_sigma,seed\n";
  csv.precision(17);
  for (long i = 0; i < corpus.size(); ++i)
    csv << i << "," << corpus.theta[i].blur_sigma << "," << corpus.theta[i].noise_sigma << ","
        << corpus.theta[i].seed << "\n";
}

inline Corpus load_corpus(const std::string& dir, long scale) {
  namespace fs = std::filesystem;
  Corpus corpus;
  corpus.cfg.scale = scale;
  std::vector<std::string> names;
  if (!fs::exists(dir + "/hr")) fail(ErrKind::io, "corpus directory missing: " + dir + "/hr");
  for (const auto& e : fs::directory_iterator(dir + "/hr"))
    if (e.path().extension() == ".png") names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  for (const auto& n : names) {
    corpus.hr.push_back(read_png(dir + "/hr/" + n));
    corpus.lr.push_back(read_png(dir + "/lr/" + n));
    corpus.theta.push_back({});
  }
  corpus.cfg.n_images = corpus.size();
  if (corpus.size() > 0) corpus.cfg.size = corpus.hr[0].h;
  return corpus;
}

// ---- unpaired batching ---------------------------------------------------------

template <class R>
struct UnpairedBatch {
  Tensor<R> x;  // (B,3,p/s,p/s) dequantized LR patches
  Tensor<R> y;  // (B,3,p,p) dequantized HR patches
  std::vector<long> x_ids, y_ids;
};

// Random crops + flips with per-batch disjoint provenance: the HR source ids
// and LR source ids never overlap inside one batch.
template <class R>
UnpairedBatch<R> make_unpaired_batch(const Corpus& corpus, const std::vector<long>& pool,
                                     long patch_hr, long batch, Rng& rng) {
  require(patch_hr % corpus.cfg.scale == 0, ErrKind::config,
          "patch size must be divisible by the scale");
  require(long(pool.size()) >= 2 * batch, ErrKind::config,
          "corpus too small for disjoint unpaired batches: need at least " +
              std::to_string(2 * batch) + " images, have " + std::to_string(pool.size()));
  // sample 2B distinct ids; first B -> HR, last B -> LR
  std::vector<long> ids = pool;
  for (long i = 0; i < 2 * batch; ++i) {
    long j = i + rng.uniform_int(long(ids.size()) - i);
    std::swap(ids[i], ids[j]);
  }
  long s = corpus.cfg.scale;
  long patch_lr = patch_hr / s;
  UnpairedBatch<R> b;
  b.y = Tensor<R>({batch, 3, patch_hr, patch_hr});
  b.x = Tensor<R>({batch, 3, patch_lr, patch_lr});

  auto crop = [&](const ImageU8& img, Tensor<R>& dst, long n, long p) {
    long y0 = img.h > p ? rng.uniform_int(img.h - p + 1) : 0;
    long x0 = img.w > p ? rng.uniform_int(img.w - p + 1) : 0;
    bool fliph = rng.uniform() < 0.5, flipv = rng.uniform() < 0.5;
    for (long y = 0; y < p; ++y)
      for (long x = 0; x < p; ++x) {
        long sy = y0 + (flipv ? p - 1 - y : y);
        long sx = x0 + (fliph ? p - 1 - x : x);
        for (long c = 0; c < 3; ++c)
          dst.at(n, c, y, x) = R(img.at(sy, sx, c)) / R(255) + R(rng.uniform() / 255.0);
      }
  };

  for (long n = 0; n < batch; ++n) {
    b.y_ids.push_back(ids[n]);
    b.x_ids.push_back(ids[batch + n]);
    crop(corpus.hr[ids[n]], b.y, n, patch_hr);
    crop(corpus.lr[ids[batch + n]], b.x, n, patch_lr);
  }
  return b;
}

}  // namespace sdflow
