#pragma once

// Dense NCHW tensors with value semantics plus the error taxonomy shared by
// every module. Tensors are plain data: once constructed they are never
// mutated by library code, so sharing them across threads is safe.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef SDFLOW_HAS_OPENMP
#include <omp.h>
#endif

namespace sdflow {

enum class ErrKind {
  shape,        // dimension / divisibility violations
  parameter,    // invalid argument values (tau < 0, bad n_keep, ...)
  degenerate,   // singular scale / weight / Jacobian
  oracle,       // a verification oracle could not be evaluated
  io,           // file system failures
  format,       // malformed checkpoint / config / image files
  divergence,   // non-finite loss during training
  mismatch,     // checkpoint does not match the configured architecture
  config,       // unsatisfiable run configuration
};

class Error : public std::runtime_error {
public:
  Error(ErrKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
  ErrKind kind;
};

[[noreturn]] inline void fail(ErrKind k, const std::string& msg) { throw Error(k, msg); }

struct Shape4 {
  long n = 0, c = 0, h = 0, w = 0;

  long numel() const { return n * c * h * w; }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

template <class R>
struct Tensor {
  static_assert(std::is_floating_point_v<R>);

  Shape4 shape{0, 0, 0, 0};
  std::vector<R> v;

  Tensor() = default;
  explicit Tensor(Shape4 s) : shape(s), v(static_cast<size_t>(s.numel()), R(0)) {}
  Tensor(Shape4 s, R fill) : shape(s), v(static_cast<size_t>(s.numel()), fill) {}

  static Tensor zeros(Shape4 s) { return Tensor(s); }
  static Tensor full(Shape4 s, R x) { return Tensor(s, x); }

  long numel() const { return shape.numel(); }
  bool empty() const { return v.empty(); }

  R* data() { return v.data(); }
  const R* data() const { return v.data(); }

  // row-major (n, c, h, w) indexing
  long idx(long n, long c, long h, long w) const {
    return ((n * shape.c + c) * shape.h + h) * shape.w + w;
  }
  R& at(long n, long c, long h, long w) { return v[idx(n, c, h, w)]; }
  R at(long n, long c, long h, long w) const { return v[idx(n, c, h, w)]; }

  bool all_finite() const {
    for (R x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  template <class R2>
  Tensor<R2> cast() const {
    Tensor<R2> t(shape);
    for (size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<R2>(v[i]);
    return t;
  }
};

template <class R>
inline void require_finite(const Tensor<R>& t, const char* where) {
  if (!t.all_finite()) fail(ErrKind::parameter, std::string(where) + ": non-finite values in input tensor");
}

template <class R>
inline void require_shape(bool ok, const std::string& msg) {
  if (!ok) fail(ErrKind::shape, msg);
}

inline void require(bool ok, ErrKind k, const std::string& msg) {
  if (!ok) fail(k, msg);
}

// Worker-thread cap. SDFLOW_THREADS, when set, bounds every parallel region
// (OpenMP kernels, corpus generation, metric evaluation).
inline int max_threads() {
  static int cached = [] {
    int hw = 1;
#ifdef SDFLOW_HAS_OPENMP
    hw = omp_get_max_threads();
#endif
    if (const char* env = std::getenv("SDFLOW_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1) hw = std::min(hw, cap);
    }
    return std::max(1, hw);
  }();
  return cached;
}

}  // namespace sdflow
