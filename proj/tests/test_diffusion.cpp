#include <cmath>
#include <numeric>
#include <vector>

#include "support.hpp"

namespace adar {
namespace {

using Vec = std::vector<double>;

TEST(Schedule, LinearSingleStep) {
  const auto s = build_schedule(ScheduleKind::linear, 1, 0.02, 0.3);
  ASSERT_EQ(s.beta.size(), 2u);
  EXPECT_EQ(s.beta[1], 0.02);
}

TEST(Schedule, HandCumulativeProduct) {
  const auto s = build_schedule(ScheduleKind::linear, 2, 0.1, 0.3);
  EXPECT_EQ(s.alpha_bar[0], 1.0);
  EXPECT_NEAR(s.alpha_bar[1], 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar[2], 0.63, 1e-15);
}

TEST(Schedule, DefaultEndsNearPureNoise) {
  const auto s = default_schedule();
  double prod = 1.0, sum = 0.0;
  for (std::size_t t = 1; t <= 50; ++t) {
    prod *= 1.0 - s.beta[t];
    sum += s.beta[t];
  }
  EXPECT_NEAR(s.beta[50], 0.1, 1e-15);
  EXPECT_NEAR(sum, 2.5025, 1e-12);
  EXPECT_EQ(s.alpha_bar[50], prod);
  EXPECT_LT(s.alpha_bar[50], 0.1);
  EXPECT_LT(s.alpha_bar[50], std::exp(-sum));
  EXPECT_LT(default_schedule(20).alpha_bar[20], 0.1);
}

TEST(Schedule, AlphaBarStrictlyDecreasing) {
  for (const auto& s : {default_schedule(), cosine_schedule(), default_schedule(7)})
    for (std::size_t t = 1; t <= s.T; ++t) EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]) << "t=" << t;
}

TEST(Schedule, InvalidBoundsRejected) {
  EXPECT_THROW(build_schedule(ScheduleKind::linear, 0, 1e-4, 0.1), InvalidArgument);
  EXPECT_THROW(build_schedule(ScheduleKind::linear, 10, 0.2, 0.1), InvalidArgument);
  EXPECT_THROW(build_schedule(ScheduleKind::linear, 10, 0.0, 0.1), InvalidArgument);
  EXPECT_THROW(build_schedule(ScheduleKind::linear, 10, 1e-4, 1.0), InvalidArgument);
}

TEST(Forward, ZeroNoiseIsScaledSignal) {
  const auto s = default_schedule();
  const Vec x0{1.0, -2.0, 0.5};
  const auto n = forward_noise_with(x0, 25, s, Vec(3, 0.0));
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(n.x_t[k], std::sqrt(s.alpha_bar[25]) * x0[k]);
}

TEST(Forward, StepZeroIsIdentity) {
  const auto s = default_schedule();
  const Vec x0{1.0, -2.0};
  RngStream r(1, 0);
  EXPECT_EQ(forward_noise(x0, 0, s, r).x_t, x0);
}

TEST(Forward, OutOfRangeStepRejected) {
  RngStream r(1, 0);
  EXPECT_THROW(forward_noise(Vec{1.0}, 51, default_schedule(), r), InvalidArgument);
}

TEST(Forward, MarginalMomentsAtMidpoint) {
  const auto s = default_schedule();
  RngStream xr(4, 0);
  const auto x0 = gaussian_vec(xr, 8);
  RngStream r(4, 1);
  constexpr std::size_t n = 20000;
  Vec sum(8, 0.0), sq(8, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const auto x = forward_noise(x0, 25, s, r).x_t;
    for (std::size_t j = 0; j < 8; ++j) {
      sum[j] += x[j];
      sq[j] += x[j] * x[j];
    }
  }
  const double a = std::sqrt(s.alpha_bar[25]), v = 1.0 - s.alpha_bar[25];
  for (std::size_t j = 0; j < 8; ++j) {
    const double mean = sum[j] / n;
    EXPECT_NEAR(mean, a * x0[j], 0.03);
    EXPECT_NEAR(sq[j] / n - mean * mean, v, 0.05 * v);
  }
}

TEST(TimeEmbedding, StepZero) {
  const auto e = timestep_embedding(0.0, 6);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(e[i], i % 2 == 0 ? 0.0 : 1.0);
  EXPECT_NEAR(std::sqrt(squared_norm(e)), std::sqrt(3.0), 1e-15);
}

TEST(TimeEmbedding, FirstComponentIsSin) {
  EXPECT_EQ(timestep_embedding(17.0, 8)[0], std::sin(17.0));
}

TEST(TimeEmbedding, HandValuesAtOne) {
  const auto e = timestep_embedding(1.0, 4);
  EXPECT_NEAR(e[0], 0.8414709848078965, 1e-15);
  EXPECT_NEAR(e[1], 0.9999500004166653, 1e-15);
  EXPECT_NEAR(e[2], 9.999999983333334e-05, 1e-18);
  EXPECT_NEAR(e[3], 0.9999999999995, 1e-15);
}

TEST(TimeEmbedding, OddWidthRejected) { EXPECT_THROW(timestep_embedding(1.0, 3), InvalidArgument); }

TEST(TimeEmbedding, PairedSharesFrequency) {
  const auto e = timestep_embedding(3.0, 4, TimeEmbeddingKind::paired);
  EXPECT_EQ(e[0], std::sin(3.0));
  EXPECT_EQ(e[1], std::cos(3.0));
  EXPECT_EQ(e[2], std::sin(3.0 * 0.01));
}

TEST(Film, ZeroNetworkPredictsZero) {
  FilmPredictor p(3, 4);
  const auto eps = predict_noise(p, Vec{5, -1, 2}, timestep_embedding(3, 4), Vec{1, 1, 1});
  for (double v : eps) EXPECT_EQ(v, 0.0);
}

TEST(Film, IdentityModulation) {
  FilmPredictor p(2, 2);
  std::fill(p.gamma.layers.back().bias.begin(), p.gamma.layers.back().bias.end(), 1.0);
  const Vec x{0.25, -3.0};
  EXPECT_EQ(predict_noise(p, x, Vec{0.1, 0.2}, Vec{1, 2}), x);
}

TEST(Film, HandFixtureForward) {
  FilmPredictor p(1, 2, 1, 1);
  auto set = [](Mlp& net, Vec w0, double b0, double w1, double b1) {
    net.layers[0].weight.data = std::move(w0);
    net.layers[0].bias = {b0};
    net.layers[1].weight.data = {w1};
    net.layers[1].bias = {b1};
  };
  set(p.gamma, {0.1, 0.2, -0.3}, 0.05, 1.5, -0.2);
  set(p.eta, {-0.4, 0.3, 0.25}, -0.1, -0.7, 0.3);
  const auto eps = predict_noise(p, Vec{0.8}, Vec{0.5, -1.0}, Vec{2.0});
  EXPECT_NEAR(eps[0], -0.5154737363031274, 1e-12);
}

TEST(Film, ShapeMismatchRejected) {
  FilmPredictor p(3, 4);
  EXPECT_THROW(predict_noise(p, Vec{1, 2}, Vec(4, 0.0), Vec(3, 0.0)), ShapeError);
}

// eta output bias fixed at `c`, everything else zero: eps_hat = c.
FilmPredictor constant_predictor(std::size_t d, std::size_t d_t, double c) {
  FilmPredictor p(d, d_t);
  std::fill(p.eta.layers.back().bias.begin(), p.eta.layers.back().bias.end(), c);
  return p;
}

TEST(DiffusionLoss, HandExample) {
  const auto s = build_schedule(ScheduleKind::linear, 1, 0.75, 0.75);
  ASSERT_NEAR(s.alpha_bar[1], 0.25, 1e-16);
  const auto pred = constant_predictor(1, 2, 0.5);
  const Vec x0{1.0};
  const auto sample = forward_noise_with(x0, 1, s, Vec{0.0});
  EXPECT_EQ(sample.x_t[0], 0.5);
  const auto x0_hat = estimate_x0(sample.x_t, Vec{0.5}, s.alpha_bar[1]);
  EXPECT_NEAR(x0_hat[0], 1.0 - std::sqrt(0.75), 1e-15);
  // 0.25 + (sqrt(0.75))^2 = 1 exactly in real arithmetic
  EXPECT_NEAR(diffusion_loss(pred, x0, sample, Vec{0.0, 1.0}, Vec{0.0}, s), 1.0, 1e-15);
  FilmPredictor grads(1, 2);
  EXPECT_NEAR(diffusion_loss_and_grads(pred, x0, sample, Vec{0.0, 1.0}, Vec{0.0}, s, grads), 1.0, 1e-15);
}

TEST(DiffusionLoss, PerfectPredictionIsZero) {
  const auto s = default_schedule();
  const auto pred = constant_predictor(2, 2, 0.3);
  const Vec x0{0.7, -0.2};
  const auto sample = forward_noise_with(x0, 10, s, Vec{0.3, 0.3});
  EXPECT_NEAR(diffusion_loss(pred, x0, sample, timestep_embedding(10, 2), Vec{0, 0}, s), 0.0, 1e-28);
}

TEST(DiffusionLoss, GradientsMatchFiniteDifferences) {
  const auto s = default_schedule();
  RngStream r(31, 0);
  auto pred = FilmPredictor::xavier(8, 8, r);
  pred.for_each_tensor([&](const std::string&, std::span<double> v) {
    for (double& x : v) x += 0.1 * r.next_gaussian();
  });
  const auto x0 = gaussian_vec(r, 8), e_u = gaussian_vec(r, 8);
  const auto sample = forward_noise(x0, 17, s, r);
  const auto e_t = timestep_embedding(17, 8);
  FilmPredictor grads(8, 8);
  const double loss = diffusion_loss_and_grads(pred, x0, sample, e_t, e_u, s, grads);
  std::vector<std::span<const double>> g;
  grads.for_each_tensor([&](const std::string&, std::span<const double> v) { g.push_back(v); });
  std::size_t tensor = 0;
  double worst = 0.0;
  pred.for_each_tensor([&](const std::string& name, std::span<double> v) {
    for (std::size_t k = 0; k < v.size(); ++k) {
      const double keep = v[k];
      v[k] = keep + 1e-5;
      const double up = diffusion_loss(pred, x0, sample, e_t, e_u, s);
      v[k] = keep - 1e-5;
      const double down = diffusion_loss(pred, x0, sample, e_t, e_u, s);
      v[k] = keep;
      const double num = (up - down) / 2e-5;
      const double err = verify::relative_error(g[tensor][k], num, loss);
      worst = std::max(worst, err);
      EXPECT_LT(err, 1e-4) << name << "[" << k << "]";
    }
    ++tensor;
  });
  EXPECT_LT(worst, 1e-4);
}

TEST(Reverse, ZeroPredictionDividesBySqrtAlpha) {
  const auto s = default_schedule();
  const Vec x{1.0, -2.0};
  const auto out = reverse_step(x, 30, Vec(2, 0.0), s);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(out[k], x[k] / std::sqrt(s.alpha[30]));
}

TEST(Reverse, HandExample) {
  const auto out = reverse_update(Vec{1.0}, Vec{1.0}, 0.81, 0.5);
  EXPECT_NEAR(out[0], 0.8125549146101245, 1e-15);
}

TEST(Reverse, PosteriorMeanAgreesWithUpdate) {
  const auto s = default_schedule();
  RngStream r(8, 0);
  const auto x = gaussian_vec(r, 5), e = gaussian_vec(r, 5);
  const auto a = reverse_step(x, 12, e, s), b = posterior_mean(x, 12, e, s);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(a[k], b[k], 1e-14);
}

TEST(Reverse, StepZeroRejected) {
  EXPECT_THROW(reverse_step(Vec{1.0}, 0, Vec{0.0}, default_schedule()), InvalidArgument);
}

TEST(Chain, FullChainHasTPlusOneStates) {
  const auto s = default_schedule(12);
  FilmPredictor p(3, 4);
  RngStream r(1, 0);
  EXPECT_EQ(reverse_chain(p, Vec(3, 0.1), s, r, 0).size(), 13u);
}

TEST(Chain, ZeroPredictorClosedForm) {
  for (const auto& s : {default_schedule(), cosine_schedule()}) {
    FilmPredictor p(4, 4);
    RngStream r(2, 0);
    const auto chain = reverse_chain(p, Vec(4, 0.3), s, r, 0);
    const auto& xT = chain.front();
    double prod = 1.0;
    for (std::size_t t = s.T; t >= 1; --t) {
      prod *= std::sqrt(s.alpha[t]);
      const auto& x = chain[s.T - t + 1];
      for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(x[k], xT[k] / prod, 1e-13 * std::abs(x[k]));
    }
  }
}

TEST(Chain, SameStreamBitIdentical) {
  RngStream pr(5, 0);
  const auto p = FilmPredictor::xavier(4, 4, pr);
  const auto s = default_schedule();
  RngStream a(9, 1), b(9, 1);
  EXPECT_EQ(reverse_chain(p, Vec(4, 0.2), s, a, 3), reverse_chain(p, Vec(4, 0.2), s, b, 3));
}

TEST(Chain, SamplerMatchesReferenceChain) {
  const auto s = default_schedule();
  RngStream pr(6, 0);
  auto p = FilmPredictor::xavier(6, 6, pr, 2, 9);
  p.for_each_tensor([&](const std::string&, std::span<double> v) {
    for (double& x : v) x += 0.05 * pr.next_gaussian();
  });
  const TimeEmbeddingTable table(s.T, 6, TimeEmbeddingKind::literal);
  for (bool stochastic : {false, true}) {
    const ChainOptions opts{TimeEmbeddingKind::literal, stochastic};
    FilmSampler sampler(p, s, table, opts);
    for (std::size_t stop : {0u, 1u, 25u, 49u, 50u}) {
      const auto e_u = gaussian_vec(pr, 6);
      RngStream a(10, stop), b(10, stop);
      const auto ref = reverse_sample(p, e_u, s, a, stop, &table, opts);
      const std::size_t steps[] = {stop};
      const auto fast = sampler.sample_mean(e_u, steps, b);
      for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(fast[k], ref[k], 1e-10 * (1.0 + std::abs(ref[k])));
    }
    const auto e_u = gaussian_vec(pr, 6);
    const std::vector<std::size_t> steps{25, 12, 6, 5};
    RngStream a(11, 0), b(11, 0);
    const AugmentContext ctx{&s, &table, opts};
    const auto ref = generate_negative(p, e_u, steps, ctx, a);
    const auto fast = sampler.sample_mean(e_u, steps, b);
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(fast[k], ref[k], 1e-10 * (1.0 + std::abs(ref[k])));
  }
}

TEST(Predictor, CheckpointRoundTrip) {
  RngStream r(7, 0);
  const auto p = FilmPredictor::xavier(5, 4, r, 3, 7);
  std::stringstream ss;
  write_predictor(ss, p);
  EXPECT_EQ(read_predictor(ss), p);
}

TEST(Predictor, TruncatedCheckpointRejected) {
  RngStream r(7, 0);
  const auto p = FilmPredictor::xavier(2, 2, r);
  std::stringstream ss;
  write_predictor(ss, p);
  std::istringstream cut(ss.str().substr(0, 40));
  EXPECT_THROW(read_predictor(cut), FormatError);
}

TEST(Predictor, TensorNamesStable) {
  FilmPredictor p(2, 2, 1);
  std::vector<std::string> names;
  p.for_each_tensor([&](const std::string& n, std::span<double>) { names.push_back(n); });
  EXPECT_EQ(names, (std::vector<std::string>{"gamma.layer0.weight", "gamma.layer0.bias", "gamma.layer1.weight",
                                             "gamma.layer1.bias", "eta.layer0.weight", "eta.layer0.bias",
                                             "eta.layer1.weight", "eta.layer1.bias"}));
}

}  // namespace
}  // namespace adar
