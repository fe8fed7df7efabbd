#include <cmath>
#include <vector>

#include "support.hpp"

namespace adar {
namespace {

using Vec = std::vector<double>;

TEST(Score, HandValues) {
  EXPECT_EQ(score(Vec{1, 2}, Vec{3, -1}), 1.0);
  EXPECT_EQ(score(Vec{1, 0}, Vec{0, 1}), 0.0);
  EXPECT_EQ(score(Vec{0, 1, 0}, Vec{0, 1, 0}), 1.0);
}

TEST(Score, MismatchedWidthThrows) { EXPECT_THROW(score(Vec{1, 2}, Vec{1}), ShapeError); }

TEST(Bpr, EqualScoresGiveLn2) {
  const Vec u{0.3, -0.2}, i{1.0, 2.0};
  EXPECT_NEAR(bpr_loss_and_grads(u, i, i).loss, std::log(2.0), 1e-15);
}

TEST(Bpr, Asymptotes) {
  const Vec u{1.0}, big{800.0}, zero{0.0};
  EXPECT_LT(bpr_loss_and_grads(u, big, zero).loss, 1e-300);
  EXPECT_NEAR(bpr_loss_and_grads(u, zero, big).loss, 800.0, 1e-9);
}

double pair_loss(const Vec& u, const Vec& i, const Vec& j, const Vec& d, double lambda) {
  return d_bpr_loss_and_grads(u, i, j, d, lambda).loss;
}

void check_fd(const Vec& u, const Vec& i, const Vec& j, const Vec& d, double lambda, double tol) {
  const auto g = d_bpr_loss_and_grads(u, i, j, d, lambda);
  constexpr double h = 1e-5;
  auto probe = [&](Vec base, std::size_t k, int which) {
    Vec plus = base, minus = base;
    plus[k] += h;
    minus[k] -= h;
    auto eval = [&](const Vec& v) {
      return which == 0 ? pair_loss(v, i, j, d, lambda)
             : which == 1 ? pair_loss(u, v, j, d, lambda)
                          : pair_loss(u, i, v, d, lambda);
    };
    return (eval(plus) - eval(minus)) / (2 * h);
  };
  for (std::size_t k = 0; k < u.size(); ++k) {
    const double an[3] = {g.d_user[k], g.d_pos[k], g.d_neg[k]};
    for (int w = 0; w < 3; ++w) {
      const double num = probe(w == 0 ? u : w == 1 ? i : j, k, w);
      const double denom = std::max({std::abs(an[w]), std::abs(num), 1e-8});
      EXPECT_LT(std::abs(an[w] - num) / denom, tol) << "tensor " << w << " index " << k;
    }
  }
}

TEST(Bpr, GradientsMatchFiniteDifferences) {
  RngStream r(21, 0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto u = gaussian_vec(r, 8), i = gaussian_vec(r, 8), j = gaussian_vec(r, 8);
    check_fd(u, i, j, {}, 0.0, 1e-6);
  }
}

TEST(DBpr, LambdaZeroEqualsBpr) {
  RngStream r(22, 0);
  const auto u = gaussian_vec(r, 5), i = gaussian_vec(r, 5), j = gaussian_vec(r, 5), d = gaussian_vec(r, 5);
  const auto a = d_bpr_loss_and_grads(u, i, j, d, 0.0);
  const auto b = bpr_loss_and_grads(u, i, j);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.d_user, b.d_user);
  EXPECT_EQ(a.d_pos, b.d_pos);
  EXPECT_EQ(a.d_neg, b.d_neg);
}

TEST(DBpr, AllZeroIsLn2) {
  const Vec z(3, 0.0);
  EXPECT_NEAR(d_bpr_loss_and_grads(z, z, z, z, 0.7).loss, std::log(2.0), 1e-15);
}

TEST(DBpr, HandExample) {
  const double loss = d_bpr_loss_and_grads(Vec{1, 0}, Vec{1, 0}, Vec{0, 0}, Vec{1, 0}, 0.5).loss;
  EXPECT_NEAR(loss, 0.4740769841801067, 1e-15);
}

TEST(DBpr, GeneratedNegativeGetsNoGradient) {
  RngStream r(23, 0);
  const auto u = gaussian_vec(r, 6), i = gaussian_vec(r, 6), j = gaussian_vec(r, 6), d = gaussian_vec(r, 6);
  check_fd(u, i, j, d, 0.4, 1e-6);
}

TEST(DBpr, LambdaOutOfRangeRejected) {
  const Vec z(2, 0.0);
  EXPECT_THROW(d_bpr_loss_and_grads(z, z, z, z, 1.5), InvalidArgument);
  EXPECT_THROW(d_bpr_loss_and_grads(z, z, z, z, -0.1), InvalidArgument);
}

TEST(DBpr, ContinuousInLambda) {
  RngStream r(24, 0);
  const auto u = gaussian_vec(r, 4), i = gaussian_vec(r, 4), j = gaussian_vec(r, 4), d = gaussian_vec(r, 4);
  EXPECT_NEAR(pair_loss(u, i, j, d, 1e-9), pair_loss(u, i, j, {}, 0.0), 1e-8);
}

TEST(Encoder, XavierBoundsRespected) {
  RngStream r(1, 0);
  auto enc = make_encoder(EncoderKind::mf, 50, 40, 8, r);
  const double bound = std::sqrt(6.0 / 16.0);
  for (double x : enc->user_table().data) EXPECT_LE(std::abs(x), bound);
  for (double x : enc->item_table().data) EXPECT_LE(std::abs(x), bound);
  EXPECT_EQ(enc->dim(), 8u);
}

TEST(Encoder, BiasedVariantKeepsConstantColumn) {
  RngStream r(1, 0);
  auto enc = make_encoder(EncoderKind::biased_mf, 3, 4, 2, r);
  ASSERT_EQ(enc->dim(), 3u);
  RowGradients ug(3, 3), ig(4, 3);
  ug.add(1, Vec{1.0, 1.0, 1.0});
  ig.add(2, Vec{1.0, 1.0, 1.0});
  AdamConfig cfg;
  cfg.weight_decay = 0.1;
  enc->apply_grads(ug, ig, cfg);
  for (std::uint32_t u = 0; u < 3; ++u) EXPECT_EQ(enc->embed_user(u)[2], 1.0);
  EXPECT_NE(enc->embed_item(2)[2], 0.0);
}

TEST(Encoder, UntouchedRowsBitIdentical) {
  RngStream r(2, 0);
  auto enc = make_encoder(EncoderKind::mf, 5, 5, 3, r);
  const auto before = enc->clone();
  RowGradients ug(5, 3), ig(5, 3);
  ug.add(0, Vec{0.1, 0.2, 0.3});
  ig.add(4, Vec{-0.1, 0.0, 0.2});
  enc->apply_grads(ug, ig, {});
  for (std::uint32_t k = 1; k < 5; ++k) {
    const auto a = enc->embed_user(k), b = before->embed_user(k);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
  for (std::uint32_t k = 0; k < 4; ++k) {
    const auto a = enc->embed_item(k), b = before->embed_item(k);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST(Checkpoint, EncoderRoundTripIsExact) {
  RngStream r(3, 0);
  auto enc = make_encoder(EncoderKind::biased_mf, 7, 9, 4, r);
  std::stringstream ss;
  write_encoder_checkpoint(ss, *enc);
  const auto back = read_encoder_checkpoint(ss);
  EXPECT_EQ(back->kind(), EncoderKind::biased_mf);
  EXPECT_EQ(back->user_table(), enc->user_table());
  EXPECT_EQ(back->item_table(), enc->item_table());
}

TEST(Checkpoint, BadMagicAndTruncation) {
  RngStream r(3, 0);
  auto enc = make_encoder(EncoderKind::mf, 2, 2, 2, r);
  std::stringstream ss;
  write_encoder_checkpoint(ss, *enc);
  const std::string bytes = ss.str();
  std::istringstream cut(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_encoder_checkpoint(cut), FormatError);
  std::istringstream bad("XXXX" + bytes.substr(4));
  EXPECT_THROW(read_encoder_checkpoint(bad), FormatError);
}

TEST(Embeddings, RoundTripAt32Bits) {
  Matrix m(3, 2);
  m.data = {0.1, -0.2, 1e-3, 4.0, 5.5, -6.25};
  std::stringstream ss;
  write_embeddings(ss, m);
  const auto t = read_embeddings(ss);
  EXPECT_EQ(t.rows, 3u);
  EXPECT_EQ(t.dim, 2u);
  for (std::size_t k = 0; k < m.data.size(); ++k) EXPECT_EQ(t.values[k], static_cast<float>(m.data[k]));
}

TEST(Embeddings, VersionMismatchIsFormatError) {
  Matrix m(1, 1);
  std::stringstream ss;
  write_embeddings(ss, m);
  std::string bytes = ss.str();
  bytes[4] = 9;
  std::istringstream in(bytes);
  EXPECT_THROW(read_embeddings(in), FormatError);
}

}  // namespace
}  // namespace adar
