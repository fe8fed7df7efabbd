#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "adar/data.hpp"
#include "adar/encoder.hpp"
#include "adar/error.hpp"

namespace adar {

namespace detail {

struct Scored {
  double score;
  std::uint32_t item;
};

// Descending score, ascending item index on ties.
inline bool ranks_before(const Scored& a, const Scored& b) noexcept {
  if (a.score != b.score) return a.score > b.score;
  return a.item < b.item;
}

inline std::vector<Scored> score_candidates(std::uint32_t u, const Encoder& enc,
                                            std::span<const std::uint32_t> exclude) {
  if (exclude.size() >= enc.n_items()) throw InvalidArgument("rank_items: every item is excluded");
  const auto e_u = enc.embed_user(u);
  std::vector<Scored> out;
  out.reserve(enc.n_items() - exclude.size());
  std::size_t p = 0;
  for (std::uint32_t i = 0; i < enc.n_items(); ++i) {
    while (p < exclude.size() && exclude[p] < i) ++p;
    if (p < exclude.size() && exclude[p] == i) continue;
    out.push_back({score(e_u, enc.embed_item(i)), i});
  }
  return out;
}

// Top `k` of the full ranking, in order.
inline std::vector<std::uint32_t> top_k(std::uint32_t u, const Encoder& enc,
                                        std::span<const std::uint32_t> exclude, std::size_t k) {
  auto scored = score_candidates(u, enc, exclude);
  k = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(), ranks_before);
  std::vector<std::uint32_t> out(k);
  for (std::size_t r = 0; r < k; ++r) out[r] = scored[r].item;
  return out;
}

inline void check_metric_args(std::span<const std::uint32_t> relevant, std::size_t K) {
  if (K < 1) throw InvalidArgument("metric: K must be at least 1");
  if (relevant.empty()) throw InvalidArgument("metric: relevant set is empty (metric undefined)");
}

// `relevant` must be sorted ascending.
inline bool is_relevant(std::span<const std::uint32_t> relevant, std::uint32_t item) {
  return std::binary_search(relevant.begin(), relevant.end(), item);
}

}  // namespace detail

// All non-excluded items by descending score (ties: ascending index).
// `exclude` must be sorted ascending.
inline std::vector<std::uint32_t> rank_items(std::uint32_t u, const Encoder& enc,
                                             std::span<const std::uint32_t> exclude) {
  auto scored = detail::score_candidates(u, enc, exclude);
  std::sort(scored.begin(), scored.end(), detail::ranks_before);
  std::vector<std::uint32_t> out(scored.size());
  for (std::size_t r = 0; r < scored.size(); ++r) out[r] = scored[r].item;
  return out;
}

// |top-K ∩ relevant| / |relevant|; `relevant` sorted ascending.
inline double recall_at_k(std::span<const std::uint32_t> ranked, std::span<const std::uint32_t> relevant,
                          std::size_t K) {
  detail::check_metric_args(relevant, K);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < std::min(K, ranked.size()); ++r) hits += detail::is_relevant(relevant, ranked[r]);
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

// DCG over 1-indexed hit ranks r <= K with gain 1/log2(r+1), normalised by
// the ideal DCG truncated at min(K, |relevant|).
inline double ndcg_at_k(std::span<const std::uint32_t> ranked, std::span<const std::uint32_t> relevant,
                        std::size_t K) {
  detail::check_metric_args(relevant, K);
  double dcg = 0.0;
  for (std::size_t r = 0; r < std::min(K, ranked.size()); ++r)
    if (detail::is_relevant(relevant, ranked[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  double idcg = 0.0;
  for (std::size_t r = 0; r < std::min(K, relevant.size()); ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

struct MetricsReport {
  std::vector<std::size_t> ks;
  std::vector<double> recall;  // parallel to ks
  std::vector<double> ndcg;
  std::size_t n_users_evaluated = 0;
  std::size_t n_users_skipped = 0;
  std::string fingerprint;

  double recall_at(std::size_t K) const { return recall.at(index_of(K)); }
  double ndcg_at(std::size_t K) const { return ndcg.at(index_of(K)); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    for (std::size_t k = 0; k < ks.size(); ++k) j["recall@" + std::to_string(ks[k])] = recall[k];
    for (std::size_t k = 0; k < ks.size(); ++k) j["ndcg@" + std::to_string(ks[k])] = ndcg[k];
    j["n_users"] = n_users_evaluated;
    j["n_users_skipped"] = n_users_skipped;
    j["fingerprint"] = fingerprint;
    return j;
  }

  // Single line, no trailing newline.
  std::string json_line() const { return to_json().dump(); }

  static std::string csv_header() { return "recall@10,recall@20,ndcg@10,ndcg@20,n_users,fingerprint"; }

  std::string csv_row() const {
    return format_double(recall_at(10)) + ',' + format_double(recall_at(20)) + ',' + format_double(ndcg_at(10)) +
           ',' + format_double(ndcg_at(20)) + ',' + std::to_string(n_users_evaluated) + ',' + fingerprint;
  }

 private:
  std::size_t index_of(std::size_t K) const {
    for (std::size_t k = 0; k < ks.size(); ++k)
      if (ks[k] == K) return k;
    throw InvalidArgument("metrics report has no entry for K = " + std::to_string(K));
  }
};

// Full-catalogue evaluation: each user's train items are excluded, metrics
// are averaged over users with at least one test item. Per-user results are
// reduced in user-index order, so the report does not depend on `threads`.
inline MetricsReport evaluate(const Encoder& enc, const SplitDataset& split, std::vector<std::size_t> ks,
                              unsigned threads = 1, std::string fingerprint = {}) {
  if (ks.empty()) throw InvalidArgument("evaluate: no cutoffs given");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  if (ks.front() < 1) throw InvalidArgument("evaluate: K must be at least 1");
  const std::size_t max_k = ks.back();
  const std::uint32_t n_users = split.train.n_users;
  if (split.test.size() != n_users) throw ShapeError("evaluate: test rows != user count");

  const std::size_t nk = ks.size();
  std::vector<double> per_user(std::size_t{n_users} * 2 * nk, 0.0);
  std::vector<char> evaluated(n_users, 0);

  auto work = [&](std::uint32_t begin, std::uint32_t end) {
    for (std::uint32_t u = begin; u < end; ++u) {
      const auto& rel = split.test[u];
      if (rel.empty()) continue;
      const auto top = detail::top_k(u, enc, split.train.adjacency[u], max_k);
      for (std::size_t k = 0; k < nk; ++k) {
        per_user[(std::size_t{u} * 2 + 0) * nk + k] = recall_at_k(top, rel, ks[k]);
        per_user[(std::size_t{u} * 2 + 1) * nk + k] = ndcg_at_k(top, rel, ks[k]);
      }
      evaluated[u] = 1;
    }
  };

  threads = std::max(1u, threads);
  if (threads == 1 || n_users < 2 * threads) {
    work(0, n_users);
  } else {
    std::vector<std::thread> pool;
    const std::uint32_t chunk = (n_users + threads - 1) / threads;
    for (unsigned w = 0; w < threads; ++w) {
      const std::uint32_t b = std::min(n_users, w * chunk);
      const std::uint32_t e = std::min(n_users, b + chunk);
      pool.emplace_back(work, b, e);
    }
    for (auto& t : pool) t.join();
  }

  MetricsReport rep;
  rep.ks = ks;
  rep.recall.assign(nk, 0.0);
  rep.ndcg.assign(nk, 0.0);
  rep.fingerprint = std::move(fingerprint);
  for (std::uint32_t u = 0; u < n_users; ++u) {
    if (!evaluated[u]) {
      ++rep.n_users_skipped;
      continue;
    }
    ++rep.n_users_evaluated;
    for (std::size_t k = 0; k < nk; ++k) {
      rep.recall[k] += per_user[(std::size_t{u} * 2 + 0) * nk + k];
      rep.ndcg[k] += per_user[(std::size_t{u} * 2 + 1) * nk + k];
    }
  }
  if (rep.n_users_evaluated == 0) throw EmptyDatasetError("evaluate: no user has test items");
  for (std::size_t k = 0; k < nk; ++k) {
    rep.recall[k] /= static_cast<double>(rep.n_users_evaluated);
    rep.ndcg[k] /= static_cast<double>(rep.n_users_evaluated);
  }
  return rep;
}

}  // namespace adar
