#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adar/error.hpp"

namespace adar {

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

namespace detail {

// SplitMix64 finalizer; a bijection on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

}  // namespace detail

// Purpose tags folded into stream ids so that, e.g., negative sampling and
// diffusion noise never share draws even at the same (epoch, batch).
enum class StreamRole : std::uint64_t {
  init_encoder = 1,
  init_predictor = 2,
  shuffle = 3,
  diffusion_t = 4,
  diffusion_noise = 5,
  negative = 6,
  augment = 7,
  split = 8,
  synth = 9,
  verify = 10,
};

// Combines an arbitrary tuple of coordinates into one stream id.
inline std::uint64_t stream_id(std::initializer_list<std::uint64_t> coords) noexcept {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (std::uint64_t c : coords) h = detail::mix64(h ^ detail::mix64(c + detail::kGolden));
  return h;
}

inline std::uint64_t stream_id(std::uint64_t epoch, std::uint64_t batch, StreamRole role,
                               std::uint64_t row = 0) noexcept {
  return stream_id({epoch, batch, static_cast<std::uint64_t>(role), row});
}

// Counter-based generator: draw n of stream (seed, id) is a keyed bijective
// hash of n, so any stream can be reconstructed from its key alone and the
// output never depends on how other streams were consumed.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t id) noexcept
      : seed_(seed),
        id_(id),
        key_a_(detail::mix64(seed ^ 0x243f6a8885a308d3ULL)),
        key_b_(detail::mix64(id + detail::mix64(seed + detail::kGolden))) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t id() const noexcept { return id_; }
  std::uint64_t position() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t c = counter_++;
    return detail::mix64(detail::mix64(c * detail::kGolden + key_a_) ^ key_b_);
  }

  // Uniform on the open interval (0, 1).
  double next_uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Box-Muller; the second variate of each pair is cached.
  double next_gaussian() noexcept {
    if (spare_) {
      const double z = *spare_;
      spare_.reset();
      return z;
    }
    const double u1 = next_uniform();
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    return r * std::cos(theta);
  }

  // Uniform integer in [0, n), unbiased (Lemire's multiply-and-reject).
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("uniform_index: empty range");
    std::uint64_t x = next_u64();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        x = next_u64();
        m = static_cast<__uint128_t>(x) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * next_uniform(); }

 private:
  std::uint64_t seed_;
  std::uint64_t id_;
  std::uint64_t key_a_;
  std::uint64_t key_b_;
  std::uint64_t counter_ = 0;
  std::optional<double> spare_;
};

// Fisher-Yates with our own index draws; std::shuffle's algorithm is
// implementation-defined and would break cross-platform reproducibility.
template <typename T>
void shuffle(std::span<T> values, RngStream& rng) {
  for (std::size_t k = values.size(); k > 1; --k) {
    const std::size_t j = rng.uniform_index(k);
    std::swap(values[k - 1], values[j]);
  }
}

inline std::vector<double> gaussian_vec(RngStream& rng, std::size_t d) {
  if (d == 0) throw InvalidArgument("gaussian_vec: dimension must be at least 1");
  std::vector<double> out(d);
  for (double& x : out) x = rng.next_gaussian();
  return out;
}

// ---------------------------------------------------------------------------
// Dense vectors and matrices
// ---------------------------------------------------------------------------

inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": size mismatch (" + std::to_string(a) + " vs " +
                     std::to_string(b) + ")");
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline double squared_norm(std::span<const double> a) noexcept {
  double s = 0.0;
  for (double x : a) s += x * x;
  return s;
}

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require_same_size(x.size(), y.size(), "axpy");
  for (std::size_t k = 0; k < x.size(); ++k) y[k] += alpha * x[k];
}

inline bool all_finite(std::span<const double> a) noexcept {
  for (double x : a)
    if (!std::isfinite(x)) return false;
  return true;
}

// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  bool operator==(const Matrix&) const = default;
};

inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline void fill_uniform(std::span<double> values, double bound, RngStream& rng) {
  for (double& x : values) x = rng.uniform(-bound, bound);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 term folded into the gradient; off by default

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw InvalidArgument("adam: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw InvalidArgument("adam: eps must be positive");
    if (!(lr > 0.0)) throw InvalidArgument("adam: lr must be positive");
  }
};

// Moments for one parameter tensor.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(std::size_t size) : m_(size, 0.0), v_(size, 0.0) {}

  std::size_t size() const noexcept { return m_.size(); }
  std::uint64_t step_count() const noexcept { return steps_; }
  std::span<const double> first_moment() const noexcept { return m_; }
  std::span<const double> second_moment() const noexcept { return v_; }

  // Updates params[offset .. offset+len) from grads of the same length.
  // begin_step() must be called once before any update of a given step.
  void begin_step() noexcept { ++steps_; }

  void update_range(std::span<double> params, std::span<const double> grads, std::size_t offset,
                    const AdamConfig& cfg) {
    require_same_size(params.size(), grads.size(), "adam params/grads");
    if (offset + params.size() > m_.size()) throw ShapeError("adam: range exceeds moment shape");
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const double g = grads[k] + cfg.weight_decay * params[k];
      double& m = m_[offset + k];
      double& v = v_[offset + k];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m / c1;
      const double v_hat = v / c2;
      params[k] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }

 private:
  std::vector<double> m_;
  std::vector<double> v_;
  std::uint64_t steps_ = 0;
};

// Standard bias-corrected Adam step over a whole tensor.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      const AdamConfig& cfg) {
  cfg.validate();
  require_same_size(params.size(), grads.size(), "adam params/grads");
  require_same_size(params.size(), state.size(), "adam params/moments");
  state.begin_step();
  state.update_range(params, grads, 0, cfg);
}

// Lazy sparse Adam: only the listed rows of a row-major table move; the
// moments of untouched rows are left as they were.
inline void adam_step_rows(std::span<double> params, std::span<const double> grads,
                           std::size_t row_len, std::span<const std::uint32_t> rows,
                           AdamState& state, const AdamConfig& cfg) {
  cfg.validate();
  require_same_size(params.size(), grads.size(), "adam params/grads");
  require_same_size(params.size(), state.size(), "adam params/moments");
  state.begin_step();
  for (std::uint32_t r : rows) {
    const std::size_t off = static_cast<std::size_t>(r) * row_len;
    if (off + row_len > params.size()) throw ShapeError("adam: row index out of range");
    state.update_range(params.subspan(off, row_len), grads.subspan(off, row_len), off, cfg);
  }
}

// Numerically stable log(1 + exp(z)).
// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double softplus(double z) noexcept {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

inline double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace adar
