#include <cmath>
#include <numeric>
#include <vector>

#include <nlohmann/json.hpp>

#include "support.hpp"

namespace adar {
namespace {

using Ids = std::vector<std::uint32_t>;

// One user; item i scores item_scores[i].
std::unique_ptr<Encoder> scored_items(const std::vector<double>& item_scores) {
  Matrix users(1, 1, 1.0);
  Matrix items(item_scores.size(), 1);
  items.data = item_scores;
  return std::make_unique<MfEncoder>(std::move(users), std::move(items));
}

Ids iota_ids(std::uint32_t n) {
  Ids v(n);
  std::iota(v.begin(), v.end(), 0u);
  return v;
}

TEST(Rank, TiesByAscendingIndex) {
  const auto enc = scored_items({0, 0, 0.2, 0, 0.2, 0, 0, 0.9});
  const Ids exclude{0, 1, 3, 5, 6};
  EXPECT_EQ(rank_items(0, *enc, exclude), (Ids{7, 2, 4}));
}

TEST(Rank, LengthIsCatalogueMinusExcluded) {
  const auto enc = scored_items(std::vector<double>(10, 0.5));
  EXPECT_EQ(rank_items(0, *enc, Ids{2, 3}).size(), 8u);
}

TEST(Rank, EverythingExcludedRejected) {
  const auto enc = scored_items({1.0, 2.0});
  EXPECT_THROW(rank_items(0, *enc, Ids{0, 1}), InvalidArgument);
}

TEST(Recall, HandCases) {
  const auto ranked = iota_ids(40);
  EXPECT_EQ(recall_at_k(ranked, Ids{2}, 10), 1.0);
  EXPECT_EQ(recall_at_k(ranked, Ids{4, 29}, 20), 0.5);
  EXPECT_EQ(recall_at_k(ranked, Ids{35}, 10), 0.0);
  EXPECT_THROW(recall_at_k(ranked, Ids{}, 10), InvalidArgument);
  EXPECT_THROW(recall_at_k(ranked, Ids{1}, 0), InvalidArgument);
}

TEST(Ndcg, HandCases) {
  const auto ranked = iota_ids(40);
  EXPECT_EQ(ndcg_at_k(ranked, Ids{0}, 10), 1.0);
  EXPECT_NEAR(ndcg_at_k(ranked, Ids{2}, 10), 0.5, 1e-15);
  EXPECT_NEAR(ndcg_at_k(ranked, Ids{0, 3}, 10), 0.8772153153380493, 1e-15);
  EXPECT_EQ(ndcg_at_k(ranked, Ids{39}, 10), 0.0);
}

TEST(Ndcg, OneOnlyWhenRelevantOnTop) {
  const auto ranked = iota_ids(20);
  EXPECT_EQ(ndcg_at_k(ranked, Ids{0, 1, 2}, 10), 1.0);
  EXPECT_LT(ndcg_at_k(ranked, Ids{0, 1, 3}, 10), 1.0);
}

TEST(Evaluate, SingleUserEqualsPerUserMetrics) {
  // item 2 ranks third among the non-excluded items 0, 1, 2, 3
  const auto enc = scored_items({0.9, 0.8, 0.7, 0.1, 5.0});
  SplitDataset split;
  IdMap users, items;
  users.intern("u");
  for (int i = 0; i < 5; ++i) items.intern(std::to_string(i));
  split.train = make_interaction_set({{4}}, users, items);
  split.test = {{2}};
  const auto rep = evaluate(*enc, split, {10, 20});
  EXPECT_EQ(rep.n_users_evaluated, 1u);
  EXPECT_EQ(rep.recall_at(10), 1.0);
  EXPECT_NEAR(rep.ndcg_at(10), 0.5, 1e-15);
}

TEST(Evaluate, SkipsUsersWithoutTestItems) {
  auto split = testing::small_split(3, 50, 40);
  split.test[0].clear();
  RngStream r(1, 0);
  const auto enc = make_encoder(EncoderKind::mf, split.train.n_users, split.train.n_items, 4, r);
  const auto rep = evaluate(*enc, split, {10});
  EXPECT_GE(rep.n_users_skipped, 1u);
  EXPECT_EQ(rep.n_users_evaluated + rep.n_users_skipped, 50u);
}

TEST(Evaluate, NoTestUsersRejected) {
  auto split = testing::small_split(3, 20, 30);
  for (auto& row : split.test) row.clear();
  RngStream r(1, 0);
  const auto enc = make_encoder(EncoderKind::mf, 20, split.train.n_items, 4, r);
  EXPECT_THROW(evaluate(*enc, split, {10}), EmptyDatasetError);
}

TEST(Evaluate, BoundsAndPrefixMonotone) {
  const auto split = testing::small_split(4, 80, 60);
  RngStream r(2, 0);
  const auto enc = make_encoder(EncoderKind::mf, split.train.n_users, split.train.n_items, 6, r);
  const auto rep = evaluate(*enc, split, {10, 20});
  for (double v : rep.recall) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  for (double v : rep.ndcg) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  EXPECT_LE(rep.recall_at(10), rep.recall_at(20));
  EXPECT_LE(rep.ndcg_at(10), rep.ndcg_at(20));
}

TEST(Evaluate, IndependentOfThreadCount) {
  const auto split = testing::small_split(5, 120, 50);
  RngStream r(3, 0);
  const auto enc = make_encoder(EncoderKind::mf, split.train.n_users, split.train.n_items, 6, r);
  const auto a = evaluate(*enc, split, {10, 20}, 1);
  const auto b = evaluate(*enc, split, {10, 20}, 4);
  EXPECT_EQ(a.recall, b.recall);
  EXPECT_EQ(a.ndcg, b.ndcg);
}

TEST(Evaluate, MatchesBruteForceOracle) {
  const auto r = verify::metric_oracle(77, 10);
  EXPECT_TRUE(r.passed) << r.line();
}

TEST(Report, JsonAndCsvShape) {
  MetricsReport rep;
  rep.ks = {10, 20};
  rep.recall = {0.25, 0.5};
  rep.ndcg = {0.125, 0.375};
  rep.n_users_evaluated = 3;
  rep.fingerprint = "abc";
  const auto j = nlohmann::json::parse(rep.json_line());
  EXPECT_EQ(j["recall@10"], 0.25);
  EXPECT_EQ(j["n_users"], 3);
  EXPECT_EQ(rep.csv_row(), "0.25,0.5,0.125,0.375,3,abc");
  EXPECT_THROW(rep.recall_at(5), InvalidArgument);
}

}  // namespace
}  // namespace adar
