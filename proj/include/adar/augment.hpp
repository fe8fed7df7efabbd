#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "adar/data.hpp"
#include "adar/diffusion.hpp"
#include "adar/encoder.hpp"
#include "adar/error.hpp"
#include "adar/numkit.hpp"

namespace adar {

// ---------------------------------------------------------------------------
// Transition point
// ---------------------------------------------------------------------------

struct TransitionConfig {
  double omega = 1.0;
  double k = 1.0;
  std::size_t T = kDefaultSteps;

  void validate() const {
    if (!(omega > 0.0) || !std::isfinite(omega)) throw InvalidArgument("transition: omega must be positive");
    if (!(k > 0.0) || !std::isfinite(k)) throw InvalidArgument("transition: k must be positive");
    if (T < 1) throw InvalidArgument("transition: T must be at least 1");
  }
};

// sigmoid(omega * exp(k * p_s)) * T before rounding.
inline double raw_transition_point(double p_s, const TransitionConfig& cfg) {
  cfg.validate();
  if (!std::isfinite(p_s)) throw InvalidArgument("transition: positive score is not finite");
  return sigmoid(cfg.omega * std::exp(cfg.k * p_s)) * static_cast<double>(cfg.T);
}

// floor, then clamp to [1, T].
inline std::size_t transition_point(double p_s, const TransitionConfig& cfg) {
  const double raw = std::floor(raw_transition_point(p_s, cfg));
  return static_cast<std::size_t>(std::clamp(raw, 1.0, static_cast<double>(cfg.T)));
}

// Distances of the raw value from T/2 and from T, kept in log space so
// that they stay resolvable where the raw value itself rounds onto an
// endpoint. With z = omega * exp(k * p_s):
//   log_lower      = log(raw - T/2)        = log(T/2) + log(tanh(z/2))
//   log_neg_log_up = log(-log((T - raw)/T)) = log(softplus(z))
// Both are finite exactly when raw lies strictly inside (T/2, T).
struct TransitionMargins {
  double log_lower = 0.0;
  double log_neg_log_upper = 0.0;
};

inline TransitionMargins transition_margins(double p_s, const TransitionConfig& cfg) {
  cfg.validate();
  if (!std::isfinite(p_s)) throw InvalidArgument("transition: positive score is not finite");
  const double log_z = std::log(cfg.omega) + cfg.k * p_s;
  const double half_t = static_cast<double>(cfg.T) / 2.0;
  TransitionMargins m;
  if (log_z < -30.0) {
    // tanh(z/2) = z/2 to double precision here
    m.log_lower = std::log(half_t) + log_z - std::numbers::ln2;
  } else {
    m.log_lower = std::log(half_t) + std::log(std::tanh(std::exp(log_z) / 2.0));
  }
  if (log_z > 30.0) {
    // softplus(z) = z + log1p(exp(-z)); the correction is below 1e-13 relative
    m.log_neg_log_upper = log_z;
  } else {
    m.log_neg_log_upper = std::log(softplus(std::exp(log_z)));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Empirical transition (Monte-Carlo oracle for the linear-score argument)
// ---------------------------------------------------------------------------

// Target cumulative retention at the transition: (mu_minus / mu_plus)^2.
inline double transition_alpha_bar(double mu_plus, double mu_minus) {
  if (!(mu_plus > 0.0)) throw InvalidArgument("transition_alpha_bar: mu_plus must be positive");
  const double r = mu_minus / mu_plus;
  return r * r;
}

// First t at which the Monte-Carlo mean of f(u, x_t) drops below mu_minus.
inline std::size_t empirical_transition(std::span<const double> e_u, std::span<const double> x0, double mu_minus,
                                        const DiffusionSchedule& sched, std::size_t n_samples, RngStream& rng) {
  const double mu_plus = score(e_u, x0);
  if (!(mu_minus > 0.0 && mu_plus > mu_minus))
    throw InvalidArgument("empirical_transition: require mu_plus > mu_minus > 0");
  if (n_samples == 0) throw InvalidArgument("empirical_transition: n_samples must be positive");
  for (std::size_t t = 1; t <= sched.T; ++t) {
    double total = 0.0;
    for (std::size_t n = 0; n < n_samples; ++n) total += score(e_u, forward_noise(x0, t, sched, rng).x_t);
    if (total / static_cast<double>(n_samples) < mu_minus) return t;
  }
  throw NoTransitionError("expected score never fell below mu_minus within T steps");
}

// ---------------------------------------------------------------------------
// Sampler modes
// ---------------------------------------------------------------------------

enum class SamplerKind { uniform, dns, adar_adaptive, adar_random_t, adar_fixed_t, adar_mixed_t };

inline SamplerKind parse_sampler_kind(std::string_view s) {
  if (s == "uniform") return SamplerKind::uniform;
  if (s == "dns") return SamplerKind::dns;
  if (s == "adar_adaptive") return SamplerKind::adar_adaptive;
  if (s == "adar_random_t") return SamplerKind::adar_random_t;
  if (s == "adar_fixed_t") return SamplerKind::adar_fixed_t;
  if (s == "adar_mixed_t") return SamplerKind::adar_mixed_t;
  throw InvalidArgument("unknown sampler '" + std::string(s) + "'");
}

inline std::string_view to_string(SamplerKind k) noexcept {
  switch (k) {
    case SamplerKind::uniform: return "uniform";
    case SamplerKind::dns: return "dns";
    case SamplerKind::adar_adaptive: return "adar_adaptive";
    case SamplerKind::adar_random_t: return "adar_random_t";
    case SamplerKind::adar_fixed_t: return "adar_fixed_t";
    case SamplerKind::adar_mixed_t: return "adar_mixed_t";
  }
  return "?";
}

struct SamplerMode {
  SamplerKind kind = SamplerKind::uniform;
  std::optional<std::size_t> dns_pool;   // dns only
  std::optional<std::size_t> fixed_t;    // adar_fixed_t only
  std::vector<std::size_t> mixed_t;      // adar_mixed_t only

  static SamplerMode uniform() { return {}; }
  static SamplerMode dns(std::size_t pool) { return {SamplerKind::dns, pool, {}, {}}; }
  static SamplerMode adaptive() { return {SamplerKind::adar_adaptive, {}, {}, {}}; }
  static SamplerMode random_t() { return {SamplerKind::adar_random_t, {}, {}, {}}; }

  // Midpoint T/2 (rounded down, at least 1).
  static SamplerMode fixed(std::size_t T) {
    return {SamplerKind::adar_fixed_t, {}, std::max<std::size_t>(1, T / 2), {}};
  }

  // T/2, T/4, T/8, T/10, each rounded down and raised to at least 1.
  static SamplerMode mixed(std::size_t T) {
    std::vector<std::size_t> ts;
    for (std::size_t div : {2, 4, 8, 10}) ts.push_back(std::max<std::size_t>(1, T / div));
    return {SamplerKind::adar_mixed_t, {}, {}, std::move(ts)};
  }

  bool augments() const noexcept { return kind != SamplerKind::uniform && kind != SamplerKind::dns; }

  // Parameters must be present exactly when the kind uses them.
  void validate(std::size_t T) const {
    const bool need_pool = kind == SamplerKind::dns;
    const bool need_fixed = kind == SamplerKind::adar_fixed_t;
    const bool need_mixed = kind == SamplerKind::adar_mixed_t;
    if (need_pool != dns_pool.has_value())
      throw InvalidArgument(need_pool ? "sampler dns requires a pool size" : "pool size given for non-dns sampler");
    if (need_pool && *dns_pool < 1) throw InvalidArgument("dns pool size must be at least 1");
    if (need_fixed != fixed_t.has_value())
      throw InvalidArgument(need_fixed ? "sampler adar_fixed_t requires a step" : "fixed step given for other sampler");
    if (need_fixed && (*fixed_t < 1 || *fixed_t > T)) throw InvalidArgument("fixed step must lie in [1, T]");
    if (need_mixed == mixed_t.empty())
      throw InvalidArgument(need_mixed ? "sampler adar_mixed_t requires a step list" : "step list given for other sampler");
    for (std::size_t t : mixed_t)
      if (t < 1 || t > T) throw InvalidArgument("mixed steps must lie in [1, T]");
  }
};

// Read-out step(s) of the reverse chain for one training row.
inline std::vector<std::size_t> select_variant_t(const SamplerMode& mode, double p_s, const TransitionConfig& cfg,
                                                 RngStream& rng) {
  mode.validate(cfg.T);
  switch (mode.kind) {
    case SamplerKind::adar_adaptive: return {transition_point(p_s, cfg)};
    case SamplerKind::adar_random_t: return {1 + static_cast<std::size_t>(rng.uniform_index(cfg.T))};
    case SamplerKind::adar_fixed_t: return {*mode.fixed_t};
    case SamplerKind::adar_mixed_t: return mode.mixed_t;
    default: throw InvalidArgument("select_variant_t: sampler does not generate negatives");
  }
}

// ---------------------------------------------------------------------------
// Generated negative
// ---------------------------------------------------------------------------

struct AugmentContext {
  const DiffusionSchedule* sched = nullptr;
  const TimeEmbeddingTable* embeddings = nullptr;  // optional cache of PE(t)
  ChainOptions chain;
};

// Runs one reverse chain conditioned on e_u and averages its states at the
// requested steps (a single step is returned as is).
inline std::vector<double> generate_negative(const FilmPredictor& pred, std::span<const double> e_u,
                                             std::span<const std::size_t> steps, const AugmentContext& ctx,
                                             RngStream& rng) {
  if (steps.size() == 1)
    return reverse_sample(pred, e_u, *ctx.sched, rng, steps[0], ctx.embeddings, ctx.chain);
  auto states = reverse_sample_at(pred, e_u, *ctx.sched, rng, steps, ctx.embeddings, ctx.chain);
  std::vector<double> mean(pred.dim(), 0.0);
  for (const auto& s : states) axpy(1.0 / static_cast<double>(states.size()), s, mean);
  return mean;
}

// p_s from the live encoder, t* from the score-aware rule, then the chain
// from T down to t*; returns x_{d,t*}.
inline std::vector<double> augment_negative(std::uint32_t u, std::uint32_t i, const Encoder& enc,
                                            const FilmPredictor& pred, const DiffusionSchedule& sched,
                                            const TransitionConfig& cfg, RngStream& rng,
                                            const TimeEmbeddingTable* embeddings = nullptr,
                                            const ChainOptions& chain = {}) {
  if (cfg.T != sched.T) throw InvalidArgument("augment_negative: transition T differs from schedule T");
  const auto e_u = enc.embed_user(u);
  const double p_s = score(e_u, enc.embed_item(i));
  const std::size_t t_star = transition_point(p_s, cfg);
  return reverse_sample(pred, e_u, sched, rng, t_star, embeddings, chain);
}

// ---------------------------------------------------------------------------
// Baseline samplers
// ---------------------------------------------------------------------------

// Uniform over items outside the user's train adjacency: one index draw
// mapped to the k-th non-member, so no rejection loop is needed.
inline std::uint32_t uniform_negative(std::uint32_t u, const InteractionSet& train, RngStream& rng) {
  const auto& pos = train.adjacency.at(u);
  if (pos.size() >= train.n_items)
    throw ExhaustedError("user '" + train.users.id(u) + "' has interacted with every item");
  auto candidate = static_cast<std::uint32_t>(rng.uniform_index(train.n_items - pos.size()));
  for (std::uint32_t p : pos) {
    if (p <= candidate)
      ++candidate;
    else
      break;
  }
  return candidate;
}

// Highest-scored item among M uniform unobserved draws; ties go to the
// smaller index. When M reaches the number of candidates, every candidate
// is scored.
inline std::uint32_t dns_negative(std::uint32_t u, const InteractionSet& train, const Encoder& enc, std::size_t M,
                                  RngStream& rng) {
  if (M < 1) throw InvalidArgument("dns: pool size must be at least 1");
  const auto& pos = train.adjacency.at(u);
  if (pos.size() >= train.n_items)
    throw ExhaustedError("user '" + train.users.id(u) + "' has interacted with every item");
  const std::size_t n_candidates = train.n_items - pos.size();
  const auto e_u = enc.embed_user(u);

  std::uint32_t best = 0;
  double best_score = 0.0;
  bool have = false;
  auto consider = [&](std::uint32_t j) {
    const double s = score(e_u, enc.embed_item(j));
    if (!have || s > best_score || (s == best_score && j < best)) {
      best = j;
      best_score = s;
      have = true;
    }
  };
  if (M >= n_candidates) {
    std::size_t p = 0;
    for (std::uint32_t j = 0; j < train.n_items; ++j) {
      while (p < pos.size() && pos[p] < j) ++p;
      if (p < pos.size() && pos[p] == j) continue;
      consider(j);
    }
  } else {
    for (std::size_t m = 0; m < M; ++m) consider(uniform_negative(u, train, rng));
  }
  return best;
}

}  // namespace adar
