#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "adar/augment.hpp"
#include "adar/data.hpp"
#include "adar/diffusion.hpp"
#include "adar/encoder.hpp"
#include "adar/eval.hpp"
#include "adar/numkit.hpp"

namespace adar::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string measured;  // measured errors, rendered deterministically
  std::string detail;    // failure context, e.g. the offending tensor
  double seconds = 0.0;

  // One report line: status, name, measured errors, detail. Timing is kept
  // out of the line so repeated runs print identical text.
  std::string line() const {
    std::string out = (passed ? "PASS  " : "FAIL  ") + name + "  " + measured;
    if (!detail.empty()) out += "  [" + detail + "]";
    return out;
  }
};

// The gradient routines under test. Tests swap in a corrupted version to
// confirm the finite-difference check notices and names the tensor.
struct GradientFns {
  std::function<PairwiseGrads(std::span<const double>, std::span<const double>, std::span<const double>,
                              std::span<const double>, double)>
      d_bpr = [](auto e_u, auto e_i, auto e_j, auto e_d, double lambda) {
        return d_bpr_loss_and_grads(e_u, e_i, e_j, e_d, lambda);
      };
  std::function<double(const FilmPredictor&, std::span<const double>, const NoisedSample&, std::span<const double>,
                       std::span<const double>, const DiffusionSchedule&, FilmPredictor&, double)>
      diffusion = [](const FilmPredictor& pred, auto x0, const NoisedSample& s, auto e_t, auto e_u,
                     const DiffusionSchedule& sched, FilmPredictor& grads, double scale) {
        return diffusion_loss_and_grads(pred, x0, s, e_t, e_u, sched, grads, scale);
      };
};

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTolerance = 1e-4;
// Denominator floor of the relative error, per unit of loss magnitude. A
// central difference carries roundoff of about eps_mach * |L| / h, i.e.
// 2e-11 * |L| at h = 1e-5, so entries much smaller than 1e-5 * |L| cannot
// be resolved relatively and are compared on that absolute scale instead.
inline constexpr double kFdFloor = 1e-5;

inline double relative_error(double analytic, double numeric, double loss = 1.0) {
  const double floor = kFdFloor * std::max(1.0, std::abs(loss));
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << std::scientific << v;
  return os.str();
}

inline RngStream stream(std::uint64_t seed, std::uint64_t check, std::uint64_t trial = 0) {
  return RngStream(seed, stream_id({check, trial, static_cast<std::uint64_t>(StreamRole::verify)}));
}

template <typename F>
CheckResult timed(F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r = body();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

struct WorstError {
  double value = 0.0;
  std::string where;
  void observe(double err, const std::string& name) {
    if (where.empty() || !(err <= value)) {
      value = err;
      where = name;
    }
  }
};

}  // namespace detail

// Per-dimension mean and variance of x_t against the closed-form marginal.
inline CheckResult forward_marginal(std::uint64_t seed, std::size_t draws = 20000) {
  return detail::timed([&] {
    const auto sched = default_schedule();
    auto rng = detail::stream(seed, 1);
    const auto x0 = gaussian_vec(rng, 8);
    double worst_mean = 0.0, worst_var = 0.0;
    for (std::size_t t : {std::size_t{1}, std::size_t{25}, std::size_t{50}}) {
      std::vector<double> sum(8, 0.0), sq(8, 0.0);
      for (std::size_t n = 0; n < draws; ++n) {
        const auto s = forward_noise(x0, t, sched, rng);
        for (std::size_t k = 0; k < 8; ++k) {
          sum[k] += s.x_t[k];
          sq[k] += s.x_t[k] * s.x_t[k];
        }
      }
      const double a = std::sqrt(sched.alpha_bar[t]);
      const double var_target = 1.0 - sched.alpha_bar[t];
      for (std::size_t k = 0; k < 8; ++k) {
        const double mean = sum[k] / static_cast<double>(draws);
        const double var = sq[k] / static_cast<double>(draws) - mean * mean;
        worst_mean = std::max(worst_mean, std::abs(mean - a * x0[k]));
        worst_var = std::max(worst_var, std::abs(var - var_target) / var_target);
      }
    }
    CheckResult r;
    r.name = "forward_marginal";
    r.passed = worst_mean <= 0.03 && worst_var <= 0.05;
    r.measured = "max|mean err|=" + detail::fmt(worst_mean) + " (tol 3e-2) max var rel err=" +
                 detail::fmt(worst_var) + " (tol 5e-2)";
    return r;
  });
}

// Monte-Carlo crossing step of a linear scorer under forward noising,
// bracketed against the closed-form target (mu_minus / mu_plus)^2; the
// crossing must also move later as mu_plus grows.
inline CheckResult crossing_bracketing(std::uint64_t seed, std::size_t samples = 50000) {
  return detail::timed([&] {
    const auto sched = cosine_schedule();
    const double mu_minus = 0.5;
    const std::size_t d = 8;
    // The Monte-Carlo error of the mean score is |e_u| sqrt(1 - abar) / sqrt(n);
    // a short user vector (with x0 scaled up to keep e_u . x0 = mu_plus) keeps
    // every neighbouring step of the crossing more than 10 sigma apart.
    const double norm = 0.05;
    std::vector<double> e_u(d, norm / std::sqrt(static_cast<double>(d)));
    CheckResult r;
    r.name = "crossing_bracketing";
    r.passed = true;
    std::ostringstream m;
    std::size_t previous = 0;
    for (double mu_plus : {1.0, 2.0, 4.0}) {
      std::vector<double> x0(d);
      for (std::size_t k = 0; k < d; ++k) x0[k] = mu_plus * e_u[k] / (norm * norm);
      auto rng = detail::stream(seed, 2, static_cast<std::uint64_t>(mu_plus * 16));
      std::size_t t_hat = 0;
      try {
        t_hat = empirical_transition(e_u, x0, mu_minus, sched, samples, rng);
      } catch (const NoTransitionError&) {
        r.passed = false;
        r.detail += "no crossing for mu_plus=" + detail::fmt(mu_plus) + "; ";
        continue;
      }
      const double target = transition_alpha_bar(mu_plus, mu_minus);
      const bool bracket = sched.alpha_bar[t_hat] <= target && target < sched.alpha_bar[t_hat - 1];
      if (!bracket) {
        r.passed = false;
        r.detail += "bracket broken at mu_plus=" + detail::fmt(mu_plus) + "; ";
      }
      if (t_hat < previous) {
        r.passed = false;
        r.detail += "crossing moved earlier at mu_plus=" + detail::fmt(mu_plus) + "; ";
      }
      previous = t_hat;
      m << "mu+=" << mu_plus << ":t=" << t_hat << " ";
    }
    r.measured = m.str();
    if (!r.measured.empty()) r.measured.pop_back();
    return r;
  });
}

// Central differences of the pairwise losses against their analytic
// gradients; e_d is a constant, so it gets no gradient of its own.
inline CheckResult pairwise_gradients(std::uint64_t seed, bool with_generated, const GradientFns& fns = {},
                                      std::size_t trials = 100) {
  return detail::timed([&] {
    detail::WorstError worst;
    for (std::size_t trial = 0; trial < trials; ++trial) {
      auto rng = detail::stream(seed, with_generated ? 4 : 3, trial);
      const std::size_t d = 1 + static_cast<std::size_t>(rng.uniform_index(16));
      const double lambda = with_generated ? rng.uniform(0.0, 1.0) : 0.0;
      std::vector<std::vector<double>> v{gaussian_vec(rng, d), gaussian_vec(rng, d), gaussian_vec(rng, d)};
      const std::vector<double> e_d = with_generated ? gaussian_vec(rng, d) : std::vector<double>{};
      const auto g = fns.d_bpr(v[0], v[1], v[2], e_d, lambda);
      const std::vector<double>* analytic[3] = {&g.d_user, &g.d_pos, &g.d_neg};
      const char* names[3] = {"d_user", "d_pos", "d_neg"};
      for (std::size_t which = 0; which < 3; ++which) {
        for (std::size_t k = 0; k < d; ++k) {
          const double keep = v[which][k];
          v[which][k] = keep + kFdStep;
          const double up = fns.d_bpr(v[0], v[1], v[2], e_d, lambda).loss;
          v[which][k] = keep - kFdStep;
          const double down = fns.d_bpr(v[0], v[1], v[2], e_d, lambda).loss;
          v[which][k] = keep;
          const double numeric = (up - down) / (2.0 * kFdStep);
          const double a = analytic[which]->size() == d ? (*analytic[which])[k] : std::nan("");
          const double err = std::isfinite(a) ? relative_error(a, numeric, g.loss) : INFINITY;
          worst.observe(err, names[which]);
        }
      }
    }
    CheckResult r;
    r.name = with_generated ? "gradient_d_bpr" : "gradient_bpr";
    r.passed = worst.value < kFdTolerance;
    r.measured = "max rel err=" + detail::fmt(worst.value) + " (tol 1e-4)";
    if (!r.passed) r.detail = "worst tensor " + worst.where;
    return r;
  });
}

namespace detail {

struct DiffusionCase {
  FilmPredictor pred;
  DiffusionSchedule sched;
  std::vector<double> x0, e_u, e_t;
  NoisedSample sample;
};

inline DiffusionCase diffusion_case(std::uint64_t seed, std::size_t trial) {
  auto rng = stream(seed, 5, trial);
  const std::size_t d = 1 + static_cast<std::size_t>(rng.uniform_index(6));
  const std::size_t d_t = 2 * (1 + static_cast<std::size_t>(rng.uniform_index(4)));
  const std::size_t hidden = 1 + static_cast<std::size_t>(rng.uniform_index(3));
  const std::size_t width = 2 + static_cast<std::size_t>(rng.uniform_index(7));
  DiffusionCase c;
  c.pred = FilmPredictor::xavier(d, d_t, rng, hidden, width);
  // Non-zero biases so their gradients are exercised away from the origin.
  c.pred.for_each_tensor([&](const std::string& name, std::span<double> v) {
    if (name.ends_with(".bias"))
      for (double& b : v) b = rng.uniform(-0.5, 0.5);
  });
  c.sched = rng.uniform_index(2) == 0 ? default_schedule() : cosine_schedule();
  const std::size_t t = 1 + static_cast<std::size_t>(rng.uniform_index(c.sched.T));
  c.x0 = gaussian_vec(rng, d);
  c.e_u = gaussian_vec(rng, d);
  c.e_t = timestep_embedding(static_cast<double>(t), d_t);
  c.sample = forward_noise(c.x0, t, c.sched, rng);
  return c;
}

}  // namespace detail

// `tensors`: only tensors whose name passes the filter are checked.
inline CheckResult film_gradients(std::uint64_t seed, const std::string& check_name,
                                  const std::function<bool(const std::string&, std::size_t)>& tensors,
                                  const GradientFns& fns = {}, std::size_t trials = 100) {
  return detail::timed([&] {
    detail::WorstError worst;
    for (std::size_t trial = 0; trial < trials; ++trial) {
      auto c = detail::diffusion_case(seed, trial);
      FilmPredictor grads(c.pred.dim(), c.pred.time_dim(), c.pred.hidden_layers(),
                          c.pred.gamma.layers.front().out_dim());
      const double loss = fns.diffusion(c.pred, c.x0, c.sample, c.e_t, c.e_u, c.sched, grads, 1.0);
      std::vector<std::span<double>> analytic;
      grads.for_each_tensor([&](const std::string&, std::span<double> v) { analytic.push_back(v); });
      std::size_t index = 0;
      c.pred.for_each_tensor([&](const std::string& name, std::span<double> v) {
        const auto g = analytic[index++];
        if (!tensors(name, c.pred.gamma.layers.size())) return;
        for (std::size_t k = 0; k < v.size(); ++k) {
          const double keep = v[k];
          v[k] = keep + kFdStep;
          const double up = diffusion_loss(c.pred, c.x0, c.sample, c.e_t, c.e_u, c.sched);
          v[k] = keep - kFdStep;
          const double down = diffusion_loss(c.pred, c.x0, c.sample, c.e_t, c.e_u, c.sched);
          v[k] = keep;
          worst.observe(relative_error(g[k], (up - down) / (2.0 * kFdStep), loss), name);
        }
      });
    }
    CheckResult r;
    r.name = check_name;
    r.passed = worst.value < kFdTolerance;
    r.measured = "max rel err=" + detail::fmt(worst.value) + " (tol 1e-4)";
    if (!r.passed) r.detail = "worst tensor " + worst.where;
    return r;
  });
}

// The output-layer biases see dL/d eps_hat directly (times x_t for gamma),
// which isolates the loss derivative from backpropagation through the nets.
inline CheckResult diffusion_loss_gradient(std::uint64_t seed, const GradientFns& fns = {}) {
  return film_gradients(
      seed, "gradient_diffusion_loss",
      [](const std::string& name, std::size_t n_layers) {
        return name.ends_with(".layer" + std::to_string(n_layers - 1) + ".bias");
      },
      fns);
}

inline CheckResult film_parameter_gradients(std::uint64_t seed, const GradientFns& fns = {}) {
  return film_gradients(seed, "gradient_film_parameters", [](const std::string&, std::size_t) { return true; }, fns);
}

// Exact value at p_s = 0, monotonicity in p_s, and the raw value held
// strictly between T/2 and T across the finite range.
inline CheckResult transition_law(std::uint64_t seed, std::size_t draws = 1000) {
  return detail::timed([&] {
    CheckResult r;
    r.name = "transition_point";
    r.passed = true;
    const std::size_t exact = transition_point(0.0, TransitionConfig{});
    if (exact != 36) {
      r.passed = false;
      r.detail += "t*(0) = " + std::to_string(exact) + "; ";
    }
    auto rng = detail::stream(seed, 6);
    std::size_t violations = 0;
    for (std::size_t n = 0; n < draws; ++n) {
      TransitionConfig cfg{rng.uniform(0.05, 5.0), rng.uniform(0.05, 5.0), 1 + rng.uniform_index(200)};
      double a = rng.uniform(-10.0, 10.0), b = rng.uniform(-10.0, 10.0);
      if (a > b) std::swap(a, b);
      if (raw_transition_point(a, cfg) > raw_transition_point(b, cfg) ||
          transition_point(a, cfg) > transition_point(b, cfg))
        ++violations;
    }
    if (violations) {
      r.passed = false;
      r.detail += std::to_string(violations) + " monotonicity violations; ";
    }
    std::size_t outside = 0;
    std::vector<double> probes{-std::numeric_limits<double>::max(), -1e6, -745.0, -40.0, -1.0, 0.0,
                               1.0, 40.0, 709.0, 1e6, std::numeric_limits<double>::max()};
    for (std::size_t n = 0; n < 200; ++n) probes.push_back(rng.uniform(-1e3, 1e3));
    for (double p : probes) {
      const TransitionConfig cfg{};
      const auto m = transition_margins(p, cfg);
      const double raw = raw_transition_point(p, cfg);
      if (!std::isfinite(m.log_lower) || !std::isfinite(m.log_neg_log_upper) || raw < 25.0 || raw > 50.0) ++outside;
    }
    if (outside) {
      r.passed = false;
      r.detail += std::to_string(outside) + " probes outside (T/2, T); ";
    }
    r.measured = "t*(0)=" + std::to_string(exact) + " monotonicity violations=" + std::to_string(violations) +
                 "/" + std::to_string(draws) + " interior failures=" + std::to_string(outside) + "/" +
                 std::to_string(probes.size());
    return r;
  });
}

namespace detail {

// Straightforward reimplementation used only as a reference: full
// selection sort, then literal metric definitions.
inline std::pair<double, double> brute_force_user(const Encoder& enc, std::uint32_t u,
                                                  const std::vector<std::uint32_t>& train,
                                                  const std::vector<std::uint32_t>& test, std::size_t K) {
  std::vector<std::uint32_t> cand;
  for (std::uint32_t i = 0; i < enc.n_items(); ++i)
    if (std::find(train.begin(), train.end(), i) == train.end()) cand.push_back(i);
  for (std::size_t a = 0; a < cand.size(); ++a) {
    std::size_t best = a;
    for (std::size_t b = a + 1; b < cand.size(); ++b) {
      const double sb = enc.score(u, cand[b]), sbest = enc.score(u, cand[best]);
      if (sb > sbest || (sb == sbest && cand[b] < cand[best])) best = b;
    }
    std::swap(cand[a], cand[best]);
  }
  double hits = 0.0, dcg = 0.0, idcg = 0.0;
  for (std::size_t r = 0; r < K && r < cand.size(); ++r)
    if (std::find(test.begin(), test.end(), cand[r]) != test.end()) {
      hits += 1.0;
      dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
  for (std::size_t r = 0; r < K && r < test.size(); ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return {hits / static_cast<double>(test.size()), dcg / idcg};
}

}  // namespace detail

// evaluate() against the reference on random small instances with many
// score ties, plus two closed-form spot checks.
inline CheckResult metric_oracle(std::uint64_t seed, std::size_t instances = 50) {
  return detail::timed([&] {
    CheckResult r;
    r.name = "metric_oracle";
    std::size_t mismatches = 0;
    for (std::size_t n = 0; n < instances; ++n) {
      auto rng = detail::stream(seed, 7, n);
      const std::uint32_t n_users = 10, n_items = 20;
      Matrix users(n_users, 2), items(n_items, 2);
      // Small integer grids make tied scores common.
      for (double& v : users.data) v = static_cast<double>(rng.uniform_index(5)) - 2.0;
      for (double& v : items.data) v = static_cast<double>(rng.uniform_index(5)) - 2.0;
      MfEncoder enc(users, items);
      SplitDataset split;
      std::vector<std::vector<std::uint32_t>> adj(n_users);
      split.test.resize(n_users);
      IdMap um, im;
      for (std::uint32_t u = 0; u < n_users; ++u) um.intern("u" + std::to_string(u));
      for (std::uint32_t i = 0; i < n_items; ++i) im.intern("i" + std::to_string(i));
      for (std::uint32_t u = 0; u < n_users; ++u) {
        for (std::uint32_t i = 0; i < n_items; ++i) {
          const auto coin = rng.uniform_index(4);
          if (coin == 0) adj[u].push_back(i);
          else if (coin == 1) split.test[u].push_back(i);
        }
        if (adj[u].empty()) {
          adj[u].push_back(0);
          std::erase(split.test[u], 0u);
        }
      }
      split.train = make_interaction_set(adj, um, im);
      const std::vector<std::size_t> ks{1, 5, 10, 20};
      const auto rep = evaluate(enc, split, ks);
      for (std::size_t k = 0; k < ks.size(); ++k) {
        double rec = 0.0, nd = 0.0;
        std::size_t counted = 0;
        for (std::uint32_t u = 0; u < n_users; ++u) {
          if (split.test[u].empty()) continue;
          const auto [ru, nu] = detail::brute_force_user(enc, u, adj[u], split.test[u], ks[k]);
          rec += ru;
          nd += nu;
          ++counted;
        }
        rec /= static_cast<double>(counted);
        nd /= static_cast<double>(counted);
        if (rec != rep.recall[k] || nd != rep.ndcg[k]) ++mismatches;
      }
    }
    const std::vector<std::uint32_t> ranked{7, 8, 3, 9, 1};
    const std::vector<std::uint32_t> single{3};
    const std::vector<std::uint32_t> all{1, 3, 7, 8, 9};
    const double nd_spot = ndcg_at_k(ranked, single, 5);
    const double rec_spot = recall_at_k(ranked, all, 5);
    r.passed = mismatches == 0 && nd_spot == 0.5 && rec_spot == 1.0;
    r.measured = "mismatched (instance, K) pairs=" + std::to_string(mismatches) + " ndcg(single hit @3)=" +
                 detail::fmt(nd_spot) + " recall(all hits)=" + detail::fmt(rec_spot);
    return r;
  });
}

// With every predictor weight zero the update reduces to x_{t-1} = x_t / sqrt(alpha_t).
inline CheckResult zero_predictor_chain(std::uint64_t seed) {
  return detail::timed([&] {
    double worst = 0.0;
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
      const auto sched = kind == ScheduleKind::linear ? default_schedule()
                                                      : cosine_schedule();
      const FilmPredictor pred(8, 8);
      auto rng = detail::stream(seed, 8, static_cast<std::uint64_t>(kind));
      const auto e_u = gaussian_vec(rng, 8);
      const auto chain = reverse_chain(pred, e_u, sched, rng, 0);
      const auto& x_T = chain.front();
      double prod = 1.0;
      for (std::size_t n = 0; n < chain.size(); ++n) {
        const std::size_t t = sched.T - n;
        if (n > 0) prod *= std::sqrt(sched.alpha[t + 1]);
        for (std::size_t k = 0; k < 8; ++k) {
          const double expect = x_T[k] / prod;
          worst = std::max(worst, std::abs(chain[n][k] - expect) / std::max(std::abs(expect), 1e-300));
        }
      }
    }
    CheckResult r;
    r.name = "zero_predictor_chain";
    // Both sides accumulate at most T rounding errors of one ulp each.
    r.passed = worst <= 1e-13;
    r.measured = "max rel err=" + detail::fmt(worst) + " (tol 1e-13)";
    return r;
  });
}

inline CheckResult schedule_premise() {
  return detail::timed([&] {
    CheckResult r;
    r.name = "schedule_premise";
    std::ostringstream m;
    r.passed = true;
    for (std::size_t T : {std::size_t{20}, std::size_t{50}}) {
      const double last = default_schedule(T).alpha_bar[T];
      r.passed = r.passed && last < 0.1;
      m << "alpha_bar_" << T << "=" << detail::fmt(last) << " ";
    }
    r.measured = m.str() + "(tol < 1e-1)";
    return r;
  });
}

// The full battery in report order.
inline std::vector<CheckResult> run_all(std::uint64_t seed, const GradientFns& fns = {}) {
  return {
      forward_marginal(seed),
      crossing_bracketing(seed),
      pairwise_gradients(seed, false, fns),
      pairwise_gradients(seed, true, fns),
      diffusion_loss_gradient(seed, fns),
      film_parameter_gradients(seed, fns),
      transition_law(seed),
      metric_oracle(seed),
      zero_predictor_chain(seed),
      schedule_premise(),
  };
}

}  // namespace adar::verify
