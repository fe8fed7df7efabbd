#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "adar/error.hpp"
#include "adar/numkit.hpp"

namespace adar {

enum class TextFormat { tsv, csv };

inline char separator(TextFormat f) noexcept { return f == TextFormat::tsv ? '\t' : ','; }

inline TextFormat parse_text_format(std::string_view s) {
  if (s == "tsv") return TextFormat::tsv;
  if (s == "csv") return TextFormat::csv;
  throw InvalidArgument("unknown text format '" + std::string(s) + "' (expected tsv or csv)");
}

// External id <-> dense index bijection; indices follow first appearance.
class IdMap {
 public:
  std::uint32_t intern(const std::string& id) {
    auto [it, inserted] = index_.try_emplace(id, static_cast<std::uint32_t>(ids_.size()));
    if (inserted) ids_.push_back(id);
    return it->second;
  }

  std::optional<std::uint32_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& id(std::uint32_t index) const { return ids_.at(index); }
  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }

  bool operator==(const IdMap& other) const { return ids_ == other.ids_; }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

// The observed positive set: per-user strictly ascending item lists.
struct InteractionSet {
  std::uint32_t n_users = 0;
  std::uint32_t n_items = 0;
  std::vector<std::vector<std::uint32_t>> adjacency;
  IdMap users;
  IdMap items;

  std::size_t n_interactions() const noexcept {
    std::size_t n = 0;
    for (const auto& row : adjacency) n += row.size();
    return n;
  }

  bool contains(std::uint32_t u, std::uint32_t i) const {
    const auto& row = adjacency.at(u);
    return std::binary_search(row.begin(), row.end(), i);
  }

  bool operator==(const InteractionSet& other) const {
    return n_users == other.n_users && n_items == other.n_items && adjacency == other.adjacency &&
           users == other.users && items == other.items;
  }
};

struct SplitDataset {
  InteractionSet train;
  std::vector<std::vector<std::uint32_t>> test;  // indexed by user, ascending

  std::size_t n_test_interactions() const noexcept {
    std::size_t n = 0;
    for (const auto& row : test) n += row.size();
    return n;
  }
};

namespace detail {

struct RawRecord {
  std::string user;
  std::string item;
  std::size_t line;
};

inline bool is_numeric(std::string_view s) {
  if (s.empty()) return false;
  std::size_t k = (s[0] == '-' || s[0] == '+') ? 1 : 0;
  if (k == s.size()) return false;
  bool digit = false;
  for (; k < s.size(); ++k) {
    if (s[k] >= '0' && s[k] <= '9')
      digit = true;
    else if (s[k] != '.')
      return false;
  }
  return digit;
}

inline std::vector<std::string> split_fields(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool looks_like_header_name(std::string field) {
  std::transform(field.begin(), field.end(), field.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return field.rfind("user", 0) == 0 || field == "uid" || field == "u";
}

// Reads `user sep item [sep ...]` records. The first line is taken as a
// header when its first field is non-numeric and either reads like a column
// name or the following record's first field is numeric.
inline std::vector<RawRecord> read_records(std::istream& in, TextFormat fmt, bool allow_empty = false) {
  const char sep = separator(fmt);
  std::vector<std::pair<std::string, std::size_t>> lines;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    lines.emplace_back(line, line_no);
  }
  if (lines.empty()) {
    if (allow_empty) return {};
    throw EmptyDatasetError("input contains no interactions");
  }

  std::size_t first = 0;
  {
    const auto head = split_fields(lines[0].first, sep);
    if (!is_numeric(head[0])) {
      bool header = looks_like_header_name(head[0]);
      if (!header && lines.size() > 1) header = is_numeric(split_fields(lines[1].first, sep)[0]);
      if (header) first = 1;
    }
  }

  std::vector<RawRecord> records;
  records.reserve(lines.size() - first);
  for (std::size_t k = first; k < lines.size(); ++k) {
    auto fields = split_fields(lines[k].first, sep);
    if (fields.size() < 2)
      throw ParseError("expected user" + std::string(1, sep == '\t' ? ' ' : sep) +
                           "item[,timestamp], found a single field",
                       lines[k].second);
    if (fields[0].empty() || fields[1].empty())
      throw ParseError("empty user or item field", lines[k].second);
    records.push_back({std::move(fields[0]), std::move(fields[1]), lines[k].second});
  }
  if (records.empty() && !allow_empty) throw EmptyDatasetError("input contains only a header line");
  return records;
}

inline void sort_unique(std::vector<std::uint32_t>& row) {
  std::sort(row.begin(), row.end());
  row.erase(std::unique(row.begin(), row.end()), row.end());
}

}  // namespace detail

// Parses implicit feedback, assigning dense indices in first-appearance
// order and collapsing duplicate pairs. Timestamps are ignored.
inline InteractionSet ingest_interactions(std::istream& in, TextFormat fmt) {
  InteractionSet set;
  for (auto& rec : detail::read_records(in, fmt)) {
    const std::uint32_t u = set.users.intern(rec.user);
    const std::uint32_t i = set.items.intern(rec.item);
    if (u >= set.adjacency.size()) set.adjacency.resize(u + 1);
    set.adjacency[u].push_back(i);
  }
  for (auto& row : set.adjacency) detail::sort_unique(row);
  set.n_users = static_cast<std::uint32_t>(set.users.size());
  set.n_items = static_cast<std::uint32_t>(set.items.size());
  return set;
}

// Parses against fixed id maps (e.g. the maps written next to a prepared
// split). Unknown ids are a parse error. Users may end up with no rows.
inline std::vector<std::vector<std::uint32_t>> ingest_with_maps(std::istream& in, TextFormat fmt,
                                                                 const IdMap& users,
                                                                 const IdMap& items) {
  std::vector<std::vector<std::uint32_t>> adjacency(users.size());
  for (auto& rec : detail::read_records(in, fmt)) {
    const auto u = users.find(rec.user);
    if (!u) throw ParseError("unknown user id '" + rec.user + "'", rec.line);
    const auto i = items.find(rec.item);
    if (!i) throw ParseError("unknown item id '" + rec.item + "'", rec.line);
    adjacency[*u].push_back(*i);
  }
  for (auto& row : adjacency) detail::sort_unique(row);
  return adjacency;
}

// Train and test files parsed against one shared index space: train ids
// first, then items seen only in test (they stay rankable candidates). A
// user that appears only in test is an error; an empty test file is not.
inline SplitDataset ingest_split(std::istream& train_in, std::istream& test_in, TextFormat fmt) {
  SplitDataset out;
  out.train = ingest_interactions(train_in, fmt);
  out.test.resize(out.train.n_users);
  for (auto& rec : detail::read_records(test_in, fmt, true)) {
    const auto u = out.train.users.find(rec.user);
    if (!u) throw ParseError("user '" + rec.user + "' has no train interactions", rec.line);
    out.test[*u].push_back(out.train.items.intern(rec.item));
  }
  out.train.n_items = static_cast<std::uint32_t>(out.train.items.size());
  for (std::uint32_t u = 0; u < out.train.n_users; ++u) {
    auto& row = out.test[u];
    detail::sort_unique(row);
    // A pair present in both files counts as train only.
    const auto& tr = out.train.adjacency[u];
    std::erase_if(row, [&](std::uint32_t i) { return std::binary_search(tr.begin(), tr.end(), i); });
  }
  return out;
}

inline InteractionSet make_interaction_set(std::vector<std::vector<std::uint32_t>> adjacency,
                                           IdMap users, IdMap items) {
  InteractionSet set;
  set.adjacency = std::move(adjacency);
  set.users = std::move(users);
  set.items = std::move(items);
  set.n_users = static_cast<std::uint32_t>(set.users.size());
  set.n_items = static_cast<std::uint32_t>(set.items.size());
  if (set.adjacency.size() != set.n_users) throw ShapeError("adjacency rows != user count");
  for (std::uint32_t u = 0; u < set.n_users; ++u) {
    if (set.adjacency[u].empty())
      throw EmptyDatasetError("user '" + set.users.id(u) + "' has no interactions");
    for (std::uint32_t i : set.adjacency[u])
      if (i >= set.n_items) throw ShapeError("item index out of range");
  }
  return set;
}

// Canonical export: ordered by user index, then item index.
inline void write_interactions(std::ostream& out, const std::vector<std::vector<std::uint32_t>>& adj,
                               const IdMap& users, const IdMap& items, TextFormat fmt) {
  const char sep = separator(fmt);
  for (std::uint32_t u = 0; u < adj.size(); ++u)
    for (std::uint32_t i : adj[u]) out << users.id(u) << sep << items.id(i) << '\n';
}

inline void write_interactions(std::ostream& out, const InteractionSet& set, TextFormat fmt) {
  write_interactions(out, set.adjacency, set.users, set.items, fmt);
}

// One id per line, in dense index order.
inline void write_idmap(std::ostream& out, const IdMap& map) {
  for (const auto& id : map.ids()) out << id << '\n';
}

inline IdMap read_idmap(std::istream& in) {
  IdMap map;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t before = map.size();
    map.intern(line);
    if (map.size() == before) throw ParseError("duplicate id '" + line + "' in id map", line_no);
  }
  return map;
}

// Per-user random split. Each user keeps max(1, floor(ratio * n_u)) items
// in train; single-interaction users contribute no test items.
inline SplitDataset split_train_test(const InteractionSet& set, double ratio, RngStream& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidArgument("split ratio must lie in (0, 1)");
  SplitDataset out;
  out.test.resize(set.n_users);
  std::vector<std::vector<std::uint32_t>> train(set.n_users);
  for (std::uint32_t u = 0; u < set.n_users; ++u) {
    std::vector<std::uint32_t> items = set.adjacency[u];
    shuffle(std::span<std::uint32_t>(items), rng);
    const auto n = items.size();
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    const auto n_train = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9)));
    train[u].assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test[u].assign(items.begin() + static_cast<std::ptrdiff_t>(n_train), items.end());
    std::sort(train[u].begin(), train[u].end());
    std::sort(out.test[u].begin(), out.test[u].end());
  }
  out.train = make_interaction_set(std::move(train), set.users, set.items);
  return out;
}

// Latent-factor world used as ground truth by oracle tests.
struct GroundTruth {
  Matrix user_factors;
  Matrix item_factors;
  double threshold = 0.0;

  double true_score(std::uint32_t u, std::uint32_t i) const {
    return dot(user_factors.row(u), item_factors.row(i));
  }
};

struct SyntheticWorld {
  InteractionSet interactions;
  GroundTruth truth;
};

// A pair is observed iff its true score exceeds `threshold` and an
// independent exposure coin (probability `exposure`) lands heads. Users left
// with no observations are redrawn, at most 100 times.
inline SyntheticWorld synth_dataset(std::uint32_t n_users, std::uint32_t n_items, std::size_t d_lat,
                                    double threshold, double exposure, RngStream& rng) {
  if (n_users == 0 || n_items == 0 || d_lat == 0)
    throw InvalidArgument("synth_dataset: counts must be at least 1");
  if (!(exposure > 0.0 && exposure <= 1.0))
    throw InvalidArgument("synth_dataset: exposure must lie in (0, 1]");

  SyntheticWorld world;
  auto& truth = world.truth;
  truth.threshold = threshold;
  truth.item_factors = Matrix(n_items, d_lat);
  truth.user_factors = Matrix(n_users, d_lat);
  for (double& x : truth.item_factors.data) x = rng.next_gaussian();

  IdMap users;
  IdMap items;
  for (std::uint32_t i = 0; i < n_items; ++i) items.intern("i" + std::to_string(i));
  std::vector<std::vector<std::uint32_t>> adjacency(n_users);

  constexpr int kMaxRedraws = 100;
  for (std::uint32_t u = 0; u < n_users; ++u) {
    users.intern("u" + std::to_string(u));
    auto factors = truth.user_factors.row(u);
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt > kMaxRedraws)
        throw EmptyDatasetError("synth_dataset: user " + std::to_string(u) +
                                " observed nothing after 100 redraws");
      for (double& x : factors) x = rng.next_gaussian();
      auto& row = adjacency[u];
      row.clear();
      for (std::uint32_t i = 0; i < n_items; ++i) {
        if (dot(factors, truth.item_factors.row(i)) <= threshold) continue;
        const bool exposed = exposure >= 1.0 || rng.next_uniform() < exposure;
        if (exposed) row.push_back(i);
      }
      if (!row.empty()) break;
    }
  }
  world.interactions = make_interaction_set(std::move(adjacency), std::move(users), std::move(items));
  return world;
}

}  // namespace adar
