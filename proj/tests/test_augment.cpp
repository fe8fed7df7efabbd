#include <cmath>
#include <limits>
#include <vector>

#include "support.hpp"

namespace adar {
namespace {

using Vec = std::vector<double>;

TEST(Transition, SigmoidOfOneAtFifty) {
  const TransitionConfig cfg{1.0, 1.0, 50};
  EXPECT_NEAR(raw_transition_point(0.0, cfg), 36.552928931500244, 1e-12);
  EXPECT_EQ(transition_point(0.0, cfg), 36u);
}

TEST(Transition, LargeScoreClampsToT) {
  const TransitionConfig cfg{1.0, 1.0, 50};
  EXPECT_EQ(transition_point(50.0, cfg), 50u);
  EXPECT_EQ(transition_point(1e6, cfg), 50u);
}

TEST(Transition, VerySmallScoreStaysAboveHalf) {
  const TransitionConfig cfg{1.0, 1.0, 50};
  EXPECT_EQ(transition_point(-1e6, cfg), 25u);
  const auto m = transition_margins(-1e6, cfg);
  EXPECT_TRUE(std::isfinite(m.log_lower));
}

TEST(Transition, MonotoneInScore) {
  RngStream r(12, 0);
  for (int k = 0; k < 500; ++k) {
    const TransitionConfig cfg{r.uniform(0.1, 3.0), r.uniform(0.1, 3.0), 50};
    double a = r.uniform(-5, 5), b = r.uniform(-5, 5);
    if (a > b) std::swap(a, b);
    EXPECT_LE(transition_point(a, cfg), transition_point(b, cfg));
    EXPECT_LE(raw_transition_point(a, cfg), raw_transition_point(b, cfg));
  }
}

TEST(Transition, NonFiniteScoreRejected) {
  const TransitionConfig cfg;
  EXPECT_THROW(transition_point(std::numeric_limits<double>::quiet_NaN(), cfg), InvalidArgument);
  EXPECT_THROW(transition_point(std::numeric_limits<double>::infinity(), cfg), InvalidArgument);
}

TEST(Transition, BadParametersRejected) {
  EXPECT_THROW(transition_point(0.0, {0.0, 1.0, 50}), InvalidArgument);
  EXPECT_THROW(transition_point(0.0, {1.0, -1.0, 50}), InvalidArgument);
  EXPECT_THROW(transition_point(0.0, {1.0, 1.0, 0}), InvalidArgument);
}

TEST(EmpiricalTransition, BracketsTarget) {
  const auto s = cosine_schedule();
  Vec e_u(8, 0.0);
  e_u[0] = 0.05;
  const double mu_plus = 2.0;
  Vec x0(8, 0.0);
  x0[0] = mu_plus / 0.05;
  RngStream r(13, 0);
  const auto t = empirical_transition(e_u, x0, 0.5, s, 50000, r);
  const double target = transition_alpha_bar(mu_plus, 0.5);
  EXPECT_DOUBLE_EQ(target, 0.0625);
  EXPECT_LE(s.alpha_bar[t], target);
  EXPECT_GT(s.alpha_bar[t - 1], target);
}

TEST(EmpiricalTransition, ThresholdAboveScoreRejected) {
  RngStream r(1, 0);
  EXPECT_THROW(empirical_transition(Vec{1.0}, Vec{0.5}, 0.7, default_schedule(), 10, r), InvalidArgument);
}

TEST(Variants, FixedAndMixedSteps) {
  EXPECT_EQ(*SamplerMode::fixed(50).fixed_t, 25u);
  EXPECT_EQ(SamplerMode::mixed(40).mixed_t, (std::vector<std::size_t>{20, 10, 5, 4}));
  RngStream r(1, 0);
  const TransitionConfig cfg{1.0, 1.0, 50};
  EXPECT_EQ(select_variant_t(SamplerMode::adaptive(), 0.0, cfg, r), std::vector<std::size_t>{36});
  EXPECT_EQ(select_variant_t(SamplerMode::fixed(50), 3.0, cfg, r), std::vector<std::size_t>{25});
}

TEST(Variants, RandomStepInRange) {
  RngStream r(2, 0);
  const TransitionConfig cfg{1.0, 1.0, 10};
  std::vector<int> hits(11, 0);
  for (int k = 0; k < 2000; ++k) ++hits[select_variant_t(SamplerMode::random_t(), 0.0, cfg, r).at(0)];
  EXPECT_EQ(hits[0], 0);
  for (std::size_t t = 1; t <= 10; ++t) EXPECT_GT(hits[t], 100);
}

TEST(Variants, MissingParameterRejected) {
  SamplerMode m;
  m.kind = SamplerKind::adar_fixed_t;
  EXPECT_THROW(m.validate(50), InvalidArgument);
  auto f = SamplerMode::fixed(50);
  f.fixed_t = 60;
  EXPECT_THROW(f.validate(50), InvalidArgument);
  RngStream r(1, 0);
  EXPECT_THROW(select_variant_t(SamplerMode::uniform(), 0.0, {}, r), InvalidArgument);
}

TEST(Generate, ZeroPredictorOneStep) {
  const auto s = build_schedule(ScheduleKind::linear, 2, 0.1, 0.3);
  FilmPredictor p(3, 2);
  RngStream a(3, 0), b(3, 0);
  const std::size_t steps[] = {1};
  const AugmentContext ctx{&s, nullptr, {}};
  const auto e_d = generate_negative(p, Vec{0.1, 0.2, 0.3}, steps, ctx, a);
  const auto x_T = gaussian_vec(b, 3);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(e_d[k], x_T[k] / std::sqrt(s.alpha[2]));
}

TEST(Generate, AugmentDeterministicAndFinite) {
  RngStream er(4, 0);
  auto enc = make_encoder(EncoderKind::mf, 3, 5, 4, er);
  auto p = FilmPredictor::xavier(4, 4, er);
  const auto s = default_schedule();
  const TransitionConfig cfg;
  RngStream a(4, 1), b(4, 1);
  const auto x = augment_negative(1, 2, *enc, p, s, cfg, a);
  const auto y = augment_negative(1, 2, *enc, p, s, cfg, b);
  EXPECT_EQ(x, y);
  EXPECT_EQ(x.size(), 4u);
  EXPECT_TRUE(all_finite(x));
}

TEST(Generate, MismatchedTRejected) {
  RngStream er(4, 0);
  auto enc = make_encoder(EncoderKind::mf, 1, 1, 2, er);
  FilmPredictor p(2, 2);
  RngStream r(1, 0);
  EXPECT_THROW(augment_negative(0, 0, *enc, p, default_schedule(20), TransitionConfig{}, r), InvalidArgument);
}

TEST(UniformNegative, EvenOverCandidates) {
  const auto train = testing::parse_tsv("p\t0\np\t1\np\t2\np\t3\np\t4\nv\t0\nv\t2\n");
  RngStream r(14, 0);
  std::vector<int> hits(5, 0);
  constexpr int n = 10000;
  for (int k = 0; k < n; ++k) ++hits[uniform_negative(1, train, r)];
  EXPECT_EQ(hits[0], 0);
  EXPECT_EQ(hits[2], 0);
  const double sigma = std::sqrt(n * (1.0 / 3.0) * (2.0 / 3.0));
  for (int i : {1, 3, 4}) EXPECT_NEAR(hits[i], n / 3.0, 4.0 * sigma) << "item " << i;
}

TEST(UniformNegative, ExhaustedUserRejected) {
  const auto train = testing::parse_tsv("p\t0\np\t1\n");
  RngStream r(1, 0);
  EXPECT_THROW(uniform_negative(0, train, r), ExhaustedError);
}

std::unique_ptr<Encoder> fixed_encoder(const std::vector<double>& item_scores) {
  Matrix users(1, 1, 1.0);
  Matrix items(item_scores.size(), 1);
  items.data = item_scores;
  return std::make_unique<MfEncoder>(std::move(users), std::move(items));
}

TEST(DnsNegative, PicksHighestScored) {
  // item 0 is observed; candidates 1..3 score 0.1, 0.9, 0.4
  const auto train = testing::parse_tsv("p\t0\nw\t1\nw\t2\nw\t3\n");
  const auto enc = fixed_encoder({5.0, 0.1, 0.9, 0.4});
  RngStream r(1, 0);
  EXPECT_EQ(dns_negative(0, train, *enc, 3, r), 2u);
  EXPECT_EQ(dns_negative(0, train, *enc, 100, r), 2u);
}

TEST(DnsNegative, PoolOfOneIsUniform) {
  const auto train = testing::parse_tsv("p\t0\nw\t1\nw\t2\nw\t3\nw\t4\n");
  const auto enc = fixed_encoder({0.0, 0.3, 0.2, 0.9, 0.1});
  RngStream a(2, 0), b(2, 0);
  for (int k = 0; k < 50; ++k) EXPECT_EQ(dns_negative(0, train, *enc, 1, a), uniform_negative(0, train, b));
}

TEST(DnsNegative, TiesGoToSmallerIndex) {
  const auto train = testing::parse_tsv("p\t0\nw\t1\nw\t2\nw\t3\n");
  const auto enc = fixed_encoder({0.0, 0.5, 0.5, 0.5});
  RngStream r(1, 0);
  EXPECT_EQ(dns_negative(0, train, *enc, 3, r), 1u);
}

}  // namespace
}  // namespace adar
