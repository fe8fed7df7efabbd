#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "adar/binary_io.hpp"
#include "adar/error.hpp"
#include "adar/numkit.hpp"

namespace adar {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

enum class ScheduleKind { linear, cosine };

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw InvalidArgument("unknown schedule '" + std::string(s) + "' (expected linear or cosine)");
}

inline std::string_view to_string(ScheduleKind k) noexcept {
  return k == ScheduleKind::linear ? "linear" : "cosine";
}

// Tables are indexed by timestep. Row 0 is the convention row:
// beta[0] = 0, alpha[0] = alpha_bar[0] = 1.
struct DiffusionSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  std::size_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  std::size_t steps() const noexcept { return T; }
};

inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.1;
inline constexpr std::size_t kDefaultSteps = 50;

// beta_end used when none is configured. At T = 50 this is 0.1; other step
// counts keep the same total noise budget (sum of betas) so that the last
// step stays close to pure noise.
inline double default_beta_end(std::size_t T) {
  if (T == 0) throw InvalidArgument("schedule: T must be at least 1");
  return std::min(0.999, kDefaultBetaEnd * static_cast<double>(kDefaultSteps) / static_cast<double>(T));
}

inline DiffusionSchedule build_schedule(ScheduleKind kind, std::size_t T, double beta_start,
                                        double beta_end) {
  if (T == 0) throw InvalidArgument("schedule: T must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw InvalidArgument("schedule: require 0 < beta_start <= beta_end < 1");

  DiffusionSchedule s;
  s.kind = kind;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  if (kind == ScheduleKind::linear) {
    for (std::size_t t = 1; t <= T; ++t) {
      const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
      s.beta[t] = beta_start + frac * (beta_end - beta_start);
    }
  } else {
    // Squared-cosine profile with offset 0.008; betas clipped to (0, 0.999].
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / static_cast<double>(T) + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    const double f0 = f(0.0);
    for (std::size_t t = 1; t <= T; ++t) {
      const double prev = f(static_cast<double>(t - 1)) / f0;
      const double cur = f(static_cast<double>(t)) / f0;
      s.beta[t] = std::clamp(1.0 - cur / prev, 1e-12, 0.999);
    }
  }
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  for (std::size_t t = 1; t <= T; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  return s;
}

inline DiffusionSchedule default_schedule(std::size_t T = kDefaultSteps) {
  return build_schedule(ScheduleKind::linear, T, kDefaultBetaStart, default_beta_end(T));
}

// The cosine profile has no beta bounds of its own.
inline DiffusionSchedule cosine_schedule(std::size_t T = kDefaultSteps) {
  return build_schedule(ScheduleKind::cosine, T, kDefaultBetaStart, default_beta_end(T));
}

// ---------------------------------------------------------------------------
// Forward process
// ---------------------------------------------------------------------------

struct NoisedSample {
  std::vector<double> x_t;
  std::size_t t = 0;
  std::vector<double> eps;
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps with the given eps.
inline NoisedSample forward_noise_with(std::span<const double> x0, std::size_t t,
                                       const DiffusionSchedule& sched, std::vector<double> eps) {
  if (t > sched.T) throw InvalidArgument("forward_noise: timestep " + std::to_string(t) + " out of range");
  require_same_size(x0.size(), eps.size(), "forward_noise eps");
  const double a = std::sqrt(sched.alpha_bar[t]);
  const double c = std::sqrt(1.0 - sched.alpha_bar[t]);
  NoisedSample s;
  s.t = t;
  s.x_t.resize(x0.size());
  for (std::size_t k = 0; k < x0.size(); ++k) s.x_t[k] = a * x0[k] + c * eps[k];
  s.eps = std::move(eps);
  return s;
}

inline NoisedSample forward_noise(std::span<const double> x0, std::size_t t,
                                  const DiffusionSchedule& sched, RngStream& rng) {
  if (t > sched.T) throw InvalidArgument("forward_noise: timestep " + std::to_string(t) + " out of range");
  return forward_noise_with(x0, t, sched, gaussian_vec(rng, x0.size()));
}

// ---------------------------------------------------------------------------
// Timestep embedding
// ---------------------------------------------------------------------------

enum class TimeEmbeddingKind {
  literal,  // per-index parity, exponent -2i/d_t for every index i
  paired,   // sin/cos pairs sharing one frequency per pair
};

inline TimeEmbeddingKind parse_time_embedding(std::string_view s) {
  if (s == "literal") return TimeEmbeddingKind::literal;
  if (s == "paired") return TimeEmbeddingKind::paired;
  throw InvalidArgument("unknown time embedding '" + std::string(s) + "' (expected literal or paired)");
}

inline std::string_view to_string(TimeEmbeddingKind k) noexcept {
  return k == TimeEmbeddingKind::literal ? "literal" : "paired";
}

inline std::vector<double> timestep_embedding(double t, std::size_t d_t,
                                              TimeEmbeddingKind kind = TimeEmbeddingKind::literal) {
  if (d_t == 0 || d_t % 2 != 0) throw InvalidArgument("timestep_embedding: d_t must be even and positive");
  std::vector<double> out(d_t);
  const double dt = static_cast<double>(d_t);
  if (kind == TimeEmbeddingKind::literal) {
    for (std::size_t i = 0; i < d_t; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / dt);
      out[i] = (i % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
    }
  } else {
    for (std::size_t j = 0; j < d_t / 2; ++j) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(j) / dt);
      out[2 * j] = std::sin(t * freq);
      out[2 * j + 1] = std::cos(t * freq);
    }
  }
  return out;
}

// PE(t) for t = 0..T, computed once.
class TimeEmbeddingTable {
 public:
  TimeEmbeddingTable() = default;
  TimeEmbeddingTable(std::size_t T, std::size_t d_t, TimeEmbeddingKind kind) : table_(T + 1, d_t) {
    for (std::size_t t = 0; t <= T; ++t) {
      const auto row = timestep_embedding(static_cast<double>(t), d_t, kind);
      std::copy(row.begin(), row.end(), table_.row(t).begin());
    }
  }

  std::span<const double> operator[](std::size_t t) const { return table_.row(t); }
  std::size_t steps() const noexcept { return table_.rows == 0 ? 0 : table_.rows - 1; }

 private:
  Matrix table_;
};

// ---------------------------------------------------------------------------
// FiLM noise predictor
// ---------------------------------------------------------------------------

struct DenseLayer {
  Matrix weight;  // out x in
  std::vector<double> bias;

  std::size_t in_dim() const noexcept { return weight.cols; }
  std::size_t out_dim() const noexcept { return weight.rows; }
};

// Activations of each layer, input first, output last.
struct MlpTrace {
  std::vector<std::vector<double>> activations;
};

// Fully connected stack: tanh on hidden layers, linear output.
struct Mlp {
  std::vector<DenseLayer> layers;

  static Mlp zeros(std::span<const std::size_t> widths) {
    Mlp m;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l)
      m.layers.push_back({Matrix(widths[l + 1], widths[l]), std::vector<double>(widths[l + 1], 0.0)});
    return m;
  }

  std::size_t in_dim() const noexcept { return layers.front().in_dim(); }
  std::size_t out_dim() const noexcept { return layers.back().out_dim(); }

  std::vector<double> forward(std::span<const double> x, MlpTrace* trace = nullptr) const {
    require_same_size(x.size(), in_dim(), "mlp input");
    std::vector<double> cur(x.begin(), x.end());
    if (trace) {
      trace->activations.clear();
      trace->activations.push_back(cur);
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const DenseLayer& layer = layers[l];
      std::vector<double> next(layer.out_dim());
      for (std::size_t r = 0; r < layer.out_dim(); ++r) {
        const double* w = layer.weight.data.data() + r * layer.in_dim();
        double s = layer.bias[r];
        for (std::size_t c = 0; c < layer.in_dim(); ++c) s += w[c] * cur[c];
        next[r] = (l + 1 < layers.size()) ? std::tanh(s) : s;
      }
      cur = std::move(next);
      if (trace) trace->activations.push_back(cur);
    }
    return cur;
  }

  // Accumulates scale * dL/dparams into `grads` (same shapes) given dL/dout.
  void backward(const MlpTrace& trace, std::span<const double> d_out, Mlp& grads, double scale = 1.0) const {
    std::vector<double> delta(d_out.begin(), d_out.end());
    for (std::size_t l = layers.size(); l-- > 0;) {
      const DenseLayer& layer = layers[l];
      if (l + 1 < layers.size()) {
        const auto& a = trace.activations[l + 1];
        for (std::size_t r = 0; r < delta.size(); ++r) delta[r] *= 1.0 - a[r] * a[r];
      }
      const auto& input = trace.activations[l];
      DenseLayer& g = grads.layers[l];
      for (std::size_t r = 0; r < layer.out_dim(); ++r) {
        const double dr = scale * delta[r];
        g.bias[r] += dr;
        double* gw = g.weight.data.data() + r * layer.in_dim();
        for (std::size_t c = 0; c < layer.in_dim(); ++c) gw[c] += dr * input[c];
      }
      if (l == 0) break;
      std::vector<double> prev(layer.in_dim(), 0.0);
      for (std::size_t r = 0; r < layer.out_dim(); ++r) {
        const double* w = layer.weight.data.data() + r * layer.in_dim();
        for (std::size_t c = 0; c < layer.in_dim(); ++c) prev[c] += w[c] * delta[r];
      }
      delta = std::move(prev);
    }
  }
};

// eps_hat = gamma(e_t, e_u) * x_t + eta(e_t, e_u); both nets read concat(e_t, e_u).
class FilmPredictor {
 public:
  FilmPredictor() = default;

  // All parameters zero. `width` 0 means 2 * d.
  FilmPredictor(std::size_t d, std::size_t d_t, std::size_t hidden_layers = 2, std::size_t width = 0)
      : d_(d), d_t_(d_t) {
    if (d == 0 || d_t == 0) throw InvalidArgument("FiLM predictor: dimensions must be positive");
    if (width == 0) width = 2 * d;
    std::vector<std::size_t> widths{d_t + d};
    for (std::size_t h = 0; h < hidden_layers; ++h) widths.push_back(width);
    widths.push_back(d);
    gamma = Mlp::zeros(widths);
    eta = Mlp::zeros(widths);
  }

  // Xavier-uniform weights, zero biases.
  static FilmPredictor xavier(std::size_t d, std::size_t d_t, RngStream& rng, std::size_t hidden_layers = 2,
                              std::size_t width = 0) {
    FilmPredictor p(d, d_t, hidden_layers, width);
    for (Mlp* net : {&p.gamma, &p.eta})
      for (DenseLayer& layer : net->layers)
        fill_uniform(layer.weight.data, xavier_bound(layer.in_dim(), layer.out_dim()), rng);
    return p;
  }

  std::size_t dim() const noexcept { return d_; }
  std::size_t time_dim() const noexcept { return d_t_; }
  std::size_t hidden_layers() const noexcept { return gamma.layers.size() - 1; }

  // Visits every parameter tensor with a stable name such as
  // "gamma.layer1.weight".
  template <typename F>
  void for_each_tensor(F&& fn) {
    visit(gamma, "gamma", fn);
    visit(eta, "eta", fn);
  }
  template <typename F>
  void for_each_tensor(F&& fn) const {
    const_cast<FilmPredictor*>(this)->for_each_tensor(
        [&](const std::string& name, std::span<double> v) { fn(name, std::span<const double>(v)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, std::span<const double> v) { n += v.size(); });
    return n;
  }

  void set_zero() {
    for_each_tensor([](const std::string&, std::span<double> v) { std::fill(v.begin(), v.end(), 0.0); });
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const std::string&, std::span<const double> v) { ok = ok && adar::all_finite(v); });
    return ok;
  }

  bool operator==(const FilmPredictor& other) const {
    if (d_ != other.d_ || d_t_ != other.d_t_) return false;
    auto same = [](const Mlp& a, const Mlp& b) {
      if (a.layers.size() != b.layers.size()) return false;
      for (std::size_t l = 0; l < a.layers.size(); ++l)
        if (a.layers[l].weight != b.layers[l].weight || a.layers[l].bias != b.layers[l].bias) return false;
      return true;
    };
    return same(gamma, other.gamma) && same(eta, other.eta);
  }

  Mlp gamma;
  Mlp eta;

 private:
  template <typename F>
  static void visit(Mlp& net, const std::string& prefix, F& fn) {
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      const std::string base = prefix + ".layer" + std::to_string(l);
      fn(base + ".weight", std::span<double>(net.layers[l].weight.data));
      fn(base + ".bias", std::span<double>(net.layers[l].bias));
    }
  }

  std::size_t d_ = 0;
  std::size_t d_t_ = 0;
};

struct FilmTrace {
  MlpTrace gamma;
  MlpTrace eta;
  std::vector<double> gamma_out;
  std::vector<double> eta_out;
};

inline std::vector<double> film_input(std::span<const double> e_t, std::span<const double> e_u) {
  std::vector<double> in(e_t.begin(), e_t.end());
  in.insert(in.end(), e_u.begin(), e_u.end());
  return in;
}

inline std::vector<double> predict_noise(const FilmPredictor& pred, std::span<const double> x_t,
                                         std::span<const double> e_t, std::span<const double> e_u,
                                         FilmTrace* trace = nullptr) {
  require_same_size(x_t.size(), pred.dim(), "predict_noise x_t");
  require_same_size(e_u.size(), pred.dim(), "predict_noise e_u");
  require_same_size(e_t.size(), pred.time_dim(), "predict_noise e_t");
  const auto in = film_input(e_t, e_u);
  auto g = pred.gamma.forward(in, trace ? &trace->gamma : nullptr);
  auto h = pred.eta.forward(in, trace ? &trace->eta : nullptr);
  std::vector<double> eps_hat(x_t.size());
  for (std::size_t k = 0; k < x_t.size(); ++k) eps_hat[k] = g[k] * x_t[k] + h[k];
  if (trace) {
    trace->gamma_out = std::move(g);
    trace->eta_out = std::move(h);
  }
  return eps_hat;
}

// Single-step estimate of x0 from x_t and a noise prediction.
inline std::vector<double> estimate_x0(std::span<const double> x_t, std::span<const double> eps_hat,
                                       double alpha_bar) {
  if (!(alpha_bar > 0.0)) throw InvalidArgument("estimate_x0: alpha_bar is zero (degenerate step)");
  const double a = std::sqrt(alpha_bar);
  const double c = std::sqrt(1.0 - alpha_bar);
  std::vector<double> out(x_t.size());
  for (std::size_t k = 0; k < x_t.size(); ++k) out[k] = (x_t[k] - c * eps_hat[k]) / a;
  return out;
}

// ||eps - eps_hat||^2 + ||x0 - x0_hat||^2 with x0_hat the single-step
// estimate. Accumulates scale * dL/dtheta into `grads`; x0, x_t and e_u are
// constants. Returns the (unscaled) loss.
inline double diffusion_loss_and_grads(const FilmPredictor& pred, std::span<const double> x0,
                                       const NoisedSample& sample, std::span<const double> e_t,
                                       std::span<const double> e_u, const DiffusionSchedule& sched,
                                       FilmPredictor& grads, double scale = 1.0) {
  if (sample.t > sched.T) throw InvalidArgument("diffusion loss: timestep out of range");
  require_same_size(x0.size(), sample.x_t.size(), "diffusion loss x0");
  const double alpha_bar = sched.alpha_bar[sample.t];
  if (!(alpha_bar > 0.0)) throw InvalidArgument("diffusion loss: alpha_bar is zero (degenerate step)");
  const double a = std::sqrt(alpha_bar);
  const double c = std::sqrt(1.0 - alpha_bar);

  FilmTrace trace;
  const auto eps_hat = predict_noise(pred, sample.x_t, e_t, e_u, &trace);
  const std::size_t d = x0.size();
  double loss = 0.0;
  std::vector<double> d_gamma(d), d_eta(d);
  for (std::size_t k = 0; k < d; ++k) {
    const double r_noise = sample.eps[k] - eps_hat[k];
    const double x0_hat = (sample.x_t[k] - c * eps_hat[k]) / a;
    const double r_recon = x0[k] - x0_hat;
    loss += r_noise * r_noise + r_recon * r_recon;
    const double d_eps_hat = -2.0 * r_noise + 2.0 * r_recon * (c / a);
    d_gamma[k] = d_eps_hat * sample.x_t[k];
    d_eta[k] = d_eps_hat;
  }
  pred.gamma.backward(trace.gamma, d_gamma, grads.gamma, scale);
  pred.eta.backward(trace.eta, d_eta, grads.eta, scale);
  return loss;
}

// Loss only, for finite-difference checks and monitoring.
inline double diffusion_loss(const FilmPredictor& pred, std::span<const double> x0, const NoisedSample& sample,
                             std::span<const double> e_t, std::span<const double> e_u,
                             const DiffusionSchedule& sched) {
  const double alpha_bar = sched.alpha_bar.at(sample.t);
  const auto eps_hat = predict_noise(pred, sample.x_t, e_t, e_u);
  const auto x0_hat = estimate_x0(sample.x_t, eps_hat, alpha_bar);
  double loss = 0.0;
  for (std::size_t k = 0; k < x0.size(); ++k) {
    const double r1 = sample.eps[k] - eps_hat[k];
    const double r2 = x0[k] - x0_hat[k];
    loss += r1 * r1 + r2 * r2;
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Reverse process
// ---------------------------------------------------------------------------

// x_{t-1} = x_t / sqrt(alpha_t) - (1 - alpha_t) / (sqrt(alpha_t) sqrt(1 - abar_t)) eps_hat
inline std::vector<double> reverse_update(std::span<const double> x_t, std::span<const double> eps_hat,
                                          double alpha, double alpha_bar) {
  require_same_size(x_t.size(), eps_hat.size(), "reverse step");
  if (!(alpha_bar < 1.0)) throw InvalidArgument("reverse step: alpha_bar = 1 (division by zero)");
  if (!(alpha > 0.0)) throw InvalidArgument("reverse step: alpha must be positive");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double coef = (1.0 - alpha) / (std::sqrt(alpha) * std::sqrt(1.0 - alpha_bar));
  std::vector<double> out(x_t.size());
  for (std::size_t k = 0; k < x_t.size(); ++k) out[k] = inv_sqrt_alpha * x_t[k] - coef * eps_hat[k];
  return out;
}

inline std::vector<double> reverse_step(std::span<const double> x_t, std::size_t t,
                                        std::span<const double> eps_hat, const DiffusionSchedule& sched) {
  if (t < 1 || t > sched.T) throw InvalidArgument("reverse step: timestep " + std::to_string(t) + " out of range");
  return reverse_update(x_t, eps_hat, sched.alpha[t], sched.alpha_bar[t]);
}

// Posterior mean written in the factored form (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t).
inline std::vector<double> posterior_mean(std::span<const double> x_t, std::size_t t,
                                          std::span<const double> eps_hat, const DiffusionSchedule& sched) {
  if (t < 1 || t > sched.T) throw InvalidArgument("posterior mean: timestep out of range");
  if (!(sched.alpha_bar[t] < 1.0)) throw InvalidArgument("posterior mean: alpha_bar = 1");
  const double k = sched.beta[t] / std::sqrt(1.0 - sched.alpha_bar[t]);
  std::vector<double> out(x_t.size());
  for (std::size_t j = 0; j < x_t.size(); ++j) out[j] = (x_t[j] - k * eps_hat[j]) / std::sqrt(sched.alpha[t]);
  return out;
}

struct ChainOptions {
  TimeEmbeddingKind embedding = TimeEmbeddingKind::literal;
  // Adds sqrt(beta_t) z after every step except the last; off by default,
  // in which case the chain is the plain deterministic update.
  bool stochastic = false;
};

namespace detail {

// Runs the chain from T down to the smallest requested stop and hands each
// visited state (including x_T) to `visit(t, x)`.
template <typename Visit>
void run_chain(const FilmPredictor& pred, std::span<const double> e_u, const DiffusionSchedule& sched,
               RngStream& rng, std::size_t stop_at, const TimeEmbeddingTable* table,
               const ChainOptions& opts, Visit&& visit) {
  if (stop_at > sched.T) throw InvalidArgument("reverse chain: stop_at exceeds T");
  require_same_size(e_u.size(), pred.dim(), "reverse chain e_u");
  std::vector<double> x = gaussian_vec(rng, pred.dim());
  visit(sched.T, x);
  for (std::size_t t = sched.T; t > stop_at; --t) {
    std::vector<double> e_t_local;
    std::span<const double> e_t;
    if (table) {
      e_t = (*table)[t];
    } else {
      e_t_local = timestep_embedding(static_cast<double>(t), pred.time_dim(), opts.embedding);
      e_t = e_t_local;
    }
    const auto eps_hat = predict_noise(pred, x, e_t, e_u);
    x = reverse_step(x, t, eps_hat, sched);
    if (opts.stochastic && t > 1) {
      const double sigma = std::sqrt(sched.beta[t]);
      for (double& v : x) v += sigma * rng.next_gaussian();
    }
    visit(t - 1, x);
  }
}

}  // namespace detail

// x_{d,T} ~ N(0, I), then the reverse update down to stop_at. Returns the
// states for t = T, T-1, ..., stop_at (T - stop_at + 1 entries).
inline std::vector<std::vector<double>> reverse_chain(const FilmPredictor& pred, std::span<const double> e_u,
                                                      const DiffusionSchedule& sched, RngStream& rng,
                                                      std::size_t stop_at, const ChainOptions& opts = {}) {
  std::vector<std::vector<double>> chain;
  chain.reserve(sched.T - std::min(stop_at, sched.T) + 1);
  detail::run_chain(pred, e_u, sched, rng, stop_at, nullptr, opts,
                    [&](std::size_t, const std::vector<double>& x) { chain.push_back(x); });
  return chain;
}

// Same chain, keeping only x_{d,stop_at}.
inline std::vector<double> reverse_sample(const FilmPredictor& pred, std::span<const double> e_u,
                                          const DiffusionSchedule& sched, RngStream& rng, std::size_t stop_at,
                                          const TimeEmbeddingTable* table = nullptr,
                                          const ChainOptions& opts = {}) {
  std::vector<double> last;
  detail::run_chain(pred, e_u, sched, rng, stop_at, table, opts,
                    [&](std::size_t t, const std::vector<double>& x) {
                      if (t == stop_at) last = x;
                    });
  return last;
}

// One chain, several read-out steps (any order, duplicates allowed).
inline std::vector<std::vector<double>> reverse_sample_at(const FilmPredictor& pred, std::span<const double> e_u,
                                                          const DiffusionSchedule& sched, RngStream& rng,
                                                          std::span<const std::size_t> steps,
                                                          const TimeEmbeddingTable* table = nullptr,
                                                          const ChainOptions& opts = {}) {
  if (steps.empty()) throw InvalidArgument("reverse_sample_at: no steps requested");
  const std::size_t lowest = *std::min_element(steps.begin(), steps.end());
  std::vector<std::vector<double>> out(steps.size());
  detail::run_chain(pred, e_u, sched, rng, lowest, table, opts, [&](std::size_t t, const std::vector<double>& x) {
    for (std::size_t k = 0; k < steps.size(); ++k)
      if (steps[k] == t) out[k] = x;
  });
  return out;
}

// Batched reverse sampling for a frozen predictor. The FiLM nets read only
// (PE(t), e_u), so the first layer splits into a per-step part, cached here
// for every t, and a per-user part computed once per chain. Agrees with
// reverse_sample up to floating-point summation order.
class FilmSampler {
 public:
  FilmSampler(const FilmPredictor& pred, const DiffusionSchedule& sched, const TimeEmbeddingTable& table,
              ChainOptions opts = {})
      : pred_(&pred), sched_(&sched), opts_(opts) {
    if (table.steps() < sched.T) throw InvalidArgument("FilmSampler: embedding table shorter than schedule");
    const std::size_t d_t = pred.time_dim();
    for (const Mlp* net : {&pred.gamma, &pred.eta}) {
      const DenseLayer& first = net->layers.front();
      Matrix cache(sched.T + 1, first.out_dim());
      for (std::size_t t = 0; t <= sched.T; ++t) {
        const auto e_t = table[t];
        for (std::size_t r = 0; r < first.out_dim(); ++r) {
          const double* w = first.weight.data.data() + r * first.in_dim();
          double s = first.bias[r];
          for (std::size_t c = 0; c < d_t; ++c) s += w[c] * e_t[c];
          cache(t, r) = s;
        }
      }
      time_part_.push_back(std::move(cache));
      // Deeper layers stored input-major so each input feeds a contiguous
      // run of outputs; every output still sums its inputs in index order.
      std::vector<Matrix> transposed;
      for (std::size_t l = 1; l < net->layers.size(); ++l) {
        const DenseLayer& layer = net->layers[l];
        Matrix wt(layer.in_dim(), layer.out_dim());
        for (std::size_t r = 0; r < layer.out_dim(); ++r)
          for (std::size_t c = 0; c < layer.in_dim(); ++c) wt(c, r) = layer.weight(r, c);
        transposed.push_back(std::move(wt));
      }
      deep_.push_back(std::move(transposed));
    }
  }

  // States of one chain at `steps`, written to `out` (resized as needed).
  void sample_at(std::span<const double> e_u, std::span<const std::size_t> steps, RngStream& rng,
                 std::vector<std::vector<double>>& out) {
    const std::size_t d = pred_->dim();
    require_same_size(e_u.size(), d, "FilmSampler e_u");
    if (steps.empty()) throw InvalidArgument("FilmSampler: no steps requested");
    const std::size_t lowest = *std::min_element(steps.begin(), steps.end());
    if (lowest > sched_->T) throw InvalidArgument("FilmSampler: step exceeds T");
    out.resize(steps.size());

    for (std::size_t n = 0; n < 2; ++n) user_part(n == 0 ? pred_->gamma : pred_->eta, e_u, user_[n]);
    x_.resize(d);
    for (double& v : x_) v = rng.next_gaussian();
    record(sched_->T, steps, out);
    for (std::size_t t = sched_->T; t > lowest; --t) {
      forward_rest(pred_->gamma, 0, t, gamma_out_);
      forward_rest(pred_->eta, 1, t, eta_out_);
      const double inv_sqrt_alpha = 1.0 / std::sqrt(sched_->alpha[t]);
      const double coef = (1.0 - sched_->alpha[t]) / (std::sqrt(sched_->alpha[t]) * std::sqrt(1.0 - sched_->alpha_bar[t]));
      for (std::size_t k = 0; k < d; ++k) {
        const double eps_hat = gamma_out_[k] * x_[k] + eta_out_[k];
        x_[k] = inv_sqrt_alpha * x_[k] - coef * eps_hat;
      }
      if (opts_.stochastic && t > 1) {
        const double sigma = std::sqrt(sched_->beta[t]);
        for (double& v : x_) v += sigma * rng.next_gaussian();
      }
      record(t - 1, steps, out);
    }
  }

  // x_{d,stop}; a list of steps is averaged into one vector.
  std::vector<double> sample_mean(std::span<const double> e_u, std::span<const std::size_t> steps, RngStream& rng) {
    sample_at(e_u, steps, rng, states_);
    if (steps.size() == 1) return states_[0];
    std::vector<double> mean(pred_->dim(), 0.0);
    for (const auto& s : states_) axpy(1.0 / static_cast<double>(states_.size()), s, mean);
    return mean;
  }

 private:
  void record(std::size_t t, std::span<const std::size_t> steps, std::vector<std::vector<double>>& out) const {
    for (std::size_t k = 0; k < steps.size(); ++k)
      if (steps[k] == t) out[k] = x_;
  }

  void user_part(const Mlp& net, std::span<const double> e_u, std::vector<double>& dst) const {
    const DenseLayer& first = net.layers.front();
    const std::size_t d_t = pred_->time_dim();
    dst.assign(first.out_dim(), 0.0);
    for (std::size_t r = 0; r < first.out_dim(); ++r) {
      const double* w = first.weight.data.data() + r * first.in_dim() + d_t;
      double s = 0.0;
      for (std::size_t c = 0; c < e_u.size(); ++c) s += w[c] * e_u[c];
      dst[r] = s;
    }
  }

  void forward_rest(const Mlp& net, std::size_t n, std::size_t t, std::vector<double>& out) {
    const std::size_t L = net.layers.size();
    auto tp = time_part_[n].row(t);
    a_.resize(tp.size());
    for (std::size_t r = 0; r < tp.size(); ++r) {
      const double s = tp[r] + user_[n][r];
      a_[r] = L > 1 ? std::tanh(s) : s;
    }
    for (std::size_t l = 1; l < L; ++l) {
      const DenseLayer& layer = net.layers[l];
      const Matrix& wt = deep_[n][l - 1];
      const std::size_t n_out = layer.out_dim();
      b_.assign(layer.bias.begin(), layer.bias.end());
      double* acc = b_.data();
      for (std::size_t c = 0; c < layer.in_dim(); ++c) {
        const double* w = wt.data.data() + c * n_out;
        const double x = a_[c];
        for (std::size_t r = 0; r < n_out; ++r) acc[r] += w[r] * x;
      }
      if (l + 1 < L)
        for (double& v : b_) v = std::tanh(v);
      std::swap(a_, b_);
    }
    out.assign(a_.begin(), a_.end());
  }

  const FilmPredictor* pred_;
  const DiffusionSchedule* sched_;
  ChainOptions opts_;
  std::vector<Matrix> time_part_;
  std::vector<std::vector<Matrix>> deep_;
  std::vector<double> user_[2];
  std::vector<double> x_, a_, b_, gamma_out_, eta_out_;
  std::vector<std::vector<double>> states_;
};

// ---------------------------------------------------------------------------
// Adam over all predictor tensors
// ---------------------------------------------------------------------------

class FilmOptimizer {
 public:
  FilmOptimizer() = default;
  explicit FilmOptimizer(const FilmPredictor& pred) {
    pred.for_each_tensor([&](const std::string&, std::span<const double> v) { states_.emplace_back(v.size()); });
  }

  void step(FilmPredictor& pred, const FilmPredictor& grads, const AdamConfig& cfg) {
    std::vector<std::span<const double>> g;
    grads.for_each_tensor([&](const std::string&, std::span<const double> v) { g.push_back(v); });
    std::size_t k = 0;
    pred.for_each_tensor([&](const std::string&, std::span<double> v) {
      adam_step(v, g.at(k), states_.at(k), cfg);
      ++k;
    });
  }

  std::uint64_t step_count() const noexcept { return states_.empty() ? 0 : states_.front().step_count(); }

 private:
  std::vector<AdamState> states_;
};

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

inline constexpr std::string_view kPredictorMagic = "ADFD";
inline constexpr std::uint32_t kPredictorVersion = 1;

// "ADFD", u32 version, u32 d, u32 d_t, u32 layer count L (per net; both nets
// share one architecture), L x (u32 rows, u32 cols), then for the gamma net
// and then the eta net, per layer: row-major f64 weights followed by f64
// biases. All little-endian.
inline void write_predictor(std::ostream& out, const FilmPredictor& pred) {
  io::write_magic(out, kPredictorMagic);
  io::write_le<std::uint32_t>(out, kPredictorVersion);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(pred.dim()));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(pred.time_dim()));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(pred.gamma.layers.size()));
  for (const auto& layer : pred.gamma.layers) {
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(layer.out_dim()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(layer.in_dim()));
  }
  pred.for_each_tensor([&](const std::string&, std::span<const double> v) {
    for (double x : v) io::write_le(out, x);
  });
}

inline FilmPredictor read_predictor(std::istream& in) {
  io::expect_magic(in, kPredictorMagic);
  const auto version = io::read_le<std::uint32_t>(in, "version");
  if (version != kPredictorVersion)
    throw FormatError("unsupported predictor checkpoint version " + std::to_string(version));
  const auto d = io::read_le<std::uint32_t>(in, "d");
  const auto d_t = io::read_le<std::uint32_t>(in, "d_t");
  const auto n_layers = io::read_le<std::uint32_t>(in, "layer count");
  if (d == 0 || d_t == 0 || n_layers < 1 || n_layers > 64) throw FormatError("implausible predictor header");
  std::vector<std::size_t> widths;
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    const auto rows = io::read_le<std::uint32_t>(in, "layer rows");
    const auto cols = io::read_le<std::uint32_t>(in, "layer cols");
    if (l == 0) widths.push_back(cols);
    if (cols != widths.back()) throw FormatError("predictor layer shapes do not chain");
    widths.push_back(rows);
  }
  if (widths.front() != std::size_t{d} + d_t || widths.back() != d)
    throw FormatError("predictor layer shapes disagree with d / d_t");
  const std::size_t hidden = n_layers - 1;
  FilmPredictor pred(d, d_t, hidden, hidden > 0 ? widths[1] : 0);
  pred.gamma = Mlp::zeros(widths);
  pred.eta = Mlp::zeros(widths);
  pred.for_each_tensor([&](const std::string& name, std::span<double> v) {
    for (double& x : v) x = io::read_le<double>(in, name);
  });
  return pred;
}

}  // namespace adar
