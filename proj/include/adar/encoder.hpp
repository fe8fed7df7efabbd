#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "adar/binary_io.hpp"
#include "adar/error.hpp"
#include "adar/numkit.hpp"

namespace adar {

// f(u, x) for inner-product encoders.
inline double score(std::span<const double> e_u, std::span<const double> e_x) {
  return dot(e_u, e_x);
}

struct PairwiseGrads {
  double loss = 0.0;
  std::vector<double> d_user;
  std::vector<double> d_pos;
  std::vector<double> d_neg;
};

// -ln sigma(e_u.e_i - (e_u.e_j + lambda e_u.e_d)); e_d is held constant.
// An empty e_d is the plain pairwise loss.
inline PairwiseGrads d_bpr_loss_and_grads(std::span<const double> e_u, std::span<const double> e_i,
                                          std::span<const double> e_j, std::span<const double> e_d,
                                          double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("d-bpr: lambda must lie in [0, 1]");
  const std::size_t d = e_u.size();
  require_same_size(d, e_i.size(), "d-bpr e_i");
  require_same_size(d, e_j.size(), "d-bpr e_j");
  const bool augmented = !e_d.empty();
  if (augmented) require_same_size(d, e_d.size(), "d-bpr e_d");

  double margin = dot(e_u, e_i) - dot(e_u, e_j);
  if (augmented) margin -= lambda * dot(e_u, e_d);

  PairwiseGrads g;
  g.loss = softplus(-margin);
  // dloss/dmargin = -sigma(-margin)
  const double s = -sigmoid(-margin);
  g.d_user.resize(d);
  g.d_pos.resize(d);
  g.d_neg.resize(d);
  for (std::size_t k = 0; k < d; ++k) {
    double diff = e_i[k] - e_j[k];
    if (augmented) diff -= lambda * e_d[k];
    g.d_user[k] = s * diff;
    g.d_pos[k] = s * e_u[k];
    g.d_neg[k] = -s * e_u[k];
  }
  return g;
}

inline PairwiseGrads bpr_loss_and_grads(std::span<const double> e_u, std::span<const double> e_i,
                                        std::span<const double> e_j) {
  return d_bpr_loss_and_grads(e_u, e_i, e_j, {}, 0.0);
}

// Dense gradient buffer for a row-major table that remembers which rows
// were written, so optimizers can touch only those rows.
class RowGradients {
 public:
  RowGradients(std::size_t rows, std::size_t width)
      : width_(width), values_(rows * width, 0.0), touched_(rows, 0) {}

  std::size_t width() const noexcept { return width_; }

  void add(std::uint32_t row, std::span<const double> grad, double scale = 1.0) {
    require_same_size(grad.size(), width_, "row gradient");
    if (!touched_.at(row)) {
      touched_[row] = 1;
      rows_.push_back(row);
    }
    double* dst = values_.data() + static_cast<std::size_t>(row) * width_;
    for (std::size_t k = 0; k < width_; ++k) dst[k] += scale * grad[k];
  }

  // Touched rows in ascending order.
  std::span<const std::uint32_t> rows() {
    std::sort(rows_.begin(), rows_.end());
    return rows_;
  }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> row(std::uint32_t r) { return {values_.data() + std::size_t{r} * width_, width_}; }

  void clear() {
    for (std::uint32_t r : rows_) {
      std::fill_n(values_.data() + std::size_t{r} * width_, width_, 0.0);
      touched_[r] = 0;
    }
    rows_.clear();
  }

 private:
  std::size_t width_;
  std::vector<double> values_;
  std::vector<char> touched_;
  std::vector<std::uint32_t> rows_;
};

enum class EncoderKind : std::uint32_t { mf = 0, biased_mf = 1 };

inline std::string_view to_string(EncoderKind k) noexcept {
  return k == EncoderKind::mf ? "mf" : "biased_mf";
}

inline EncoderKind parse_encoder_kind(std::string_view s) {
  if (s == "mf") return EncoderKind::mf;
  if (s == "biased_mf") return EncoderKind::biased_mf;
  throw InvalidArgument("unknown encoder '" + std::string(s) + "' (expected mf or biased_mf)");
}

// Model-agnostic encoder boundary. The diffusion side only ever sees
// embed_user / embed_item vectors of width dim().
class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual EncoderKind kind() const noexcept = 0;
  virtual std::size_t dim() const noexcept = 0;
  virtual std::uint32_t n_users() const noexcept = 0;
  virtual std::uint32_t n_items() const noexcept = 0;
  virtual std::span<const double> embed_user(std::uint32_t u) const = 0;
  virtual std::span<const double> embed_item(std::uint32_t i) const = 0;

  // One sparse Adam step over the rows present in the gradient buffers.
  virtual void apply_grads(RowGradients& users, RowGradients& items, const AdamConfig& cfg) = 0;

  virtual std::unique_ptr<Encoder> clone() const = 0;

  double score(std::uint32_t u, std::uint32_t i) const { return adar::score(embed_user(u), embed_item(i)); }

  virtual const Matrix& user_table() const noexcept = 0;
  virtual const Matrix& item_table() const noexcept = 0;
};

// Plain matrix factorization: two embedding tables, Xavier-uniform init.
class MfEncoder : public Encoder {
 public:
  MfEncoder(std::uint32_t n_users, std::uint32_t n_items, std::size_t d, RngStream& rng)
      : users_(n_users, d), items_(n_items, d), user_moments_(std::size_t{n_users} * d),
        item_moments_(std::size_t{n_items} * d) {
    if (d == 0) throw InvalidArgument("encoder dimension must be at least 1");
    const double bound = xavier_bound(d, d);
    fill_uniform(users_.data, bound, rng);
    fill_uniform(items_.data, bound, rng);
  }

  MfEncoder(Matrix users, Matrix items)
      : users_(std::move(users)), items_(std::move(items)), user_moments_(users_.data.size()),
        item_moments_(items_.data.size()) {
    if (users_.cols != items_.cols) throw ShapeError("user and item tables differ in width");
  }

  EncoderKind kind() const noexcept override { return EncoderKind::mf; }
  std::size_t dim() const noexcept override { return users_.cols; }
  std::uint32_t n_users() const noexcept override { return static_cast<std::uint32_t>(users_.rows); }
  std::uint32_t n_items() const noexcept override { return static_cast<std::uint32_t>(items_.rows); }
  std::span<const double> embed_user(std::uint32_t u) const override { return users_.row(u); }
  std::span<const double> embed_item(std::uint32_t i) const override { return items_.row(i); }
  const Matrix& user_table() const noexcept override { return users_; }
  const Matrix& item_table() const noexcept override { return items_; }

  void apply_grads(RowGradients& users, RowGradients& items, const AdamConfig& cfg) override {
    adam_step_rows(users_.data, users.values(), users_.cols, users.rows(), user_moments_, cfg);
    adam_step_rows(items_.data, items.values(), items_.cols, items.rows(), item_moments_, cfg);
  }

  std::unique_ptr<Encoder> clone() const override { return std::make_unique<MfEncoder>(*this); }

 protected:
  Matrix users_;
  Matrix items_;
  AdamState user_moments_;
  AdamState item_moments_;
};

// MF with an item bias folded into one extra dimension: the user side holds
// a constant 1 there, so e_u . e_i = <p_u, q_i> + b_i and the diffusion model
// sees a plain (d + 1)-dimensional embedding.
class BiasedMfEncoder : public MfEncoder {
 public:
  BiasedMfEncoder(std::uint32_t n_users, std::uint32_t n_items, std::size_t d, RngStream& rng)
      : MfEncoder(n_users, n_items, d + 1, rng) {
    for (std::uint32_t u = 0; u < n_users; ++u) users_(u, d) = 1.0;
    for (std::uint32_t i = 0; i < n_items; ++i) items_(i, d) = 0.0;
  }

  BiasedMfEncoder(Matrix users, Matrix items) : MfEncoder(std::move(users), std::move(items)) {}

  EncoderKind kind() const noexcept override { return EncoderKind::biased_mf; }
  std::unique_ptr<Encoder> clone() const override { return std::make_unique<BiasedMfEncoder>(*this); }

  // The constant user column never moves, even under weight decay.
  void apply_grads(RowGradients& users, RowGradients& items, const AdamConfig& cfg) override {
    MfEncoder::apply_grads(users, items, cfg);
    const std::size_t last = users_.cols - 1;
    for (std::uint32_t r : users.rows()) users_(r, last) = 1.0;
  }
};

// `d` is the latent width; the biased variant adds its bias column on top.
inline std::unique_ptr<Encoder> make_encoder(EncoderKind kind, std::uint32_t n_users,
                                             std::uint32_t n_items, std::size_t d, RngStream& rng) {
  if (kind == EncoderKind::biased_mf) return std::make_unique<BiasedMfEncoder>(n_users, n_items, d, rng);
  return std::make_unique<MfEncoder>(n_users, n_items, d, rng);
}

// ---------------------------------------------------------------------------
// Checkpoint (64-bit, exact) and embedding export (32-bit)
// ---------------------------------------------------------------------------

inline constexpr std::string_view kEncoderMagic = "ADEC";
inline constexpr std::uint32_t kEncoderVersion = 1;
inline constexpr std::string_view kEmbeddingMagic = "ADAR";
inline constexpr std::uint32_t kEmbeddingVersion = 1;

// "ADEC", u32 version, u32 kind, u64 n_users, u64 n_items, u64 dim, then the
// user and item tables as row-major little-endian f64.
inline void write_encoder_checkpoint(std::ostream& out, const Encoder& enc) {
  io::write_magic(out, kEncoderMagic);
  io::write_le<std::uint32_t>(out, kEncoderVersion);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(enc.kind()));
  io::write_le<std::uint64_t>(out, enc.n_users());
  io::write_le<std::uint64_t>(out, enc.n_items());
  io::write_le<std::uint64_t>(out, enc.dim());
  for (double x : enc.user_table().data) io::write_le(out, x);
  for (double x : enc.item_table().data) io::write_le(out, x);
}

inline std::unique_ptr<Encoder> read_encoder_checkpoint(std::istream& in) {
  io::expect_magic(in, kEncoderMagic);
  const auto version = io::read_le<std::uint32_t>(in, "version");
  if (version != kEncoderVersion)
    throw FormatError("unsupported encoder checkpoint version " + std::to_string(version));
  const auto kind = io::read_le<std::uint32_t>(in, "kind");
  if (kind > 1) throw FormatError("unknown encoder kind " + std::to_string(kind));
  const auto n_users = io::read_le<std::uint64_t>(in, "n_users");
  const auto n_items = io::read_le<std::uint64_t>(in, "n_items");
  const auto dim = io::read_le<std::uint64_t>(in, "dim");
  if (dim == 0 || dim > (1u << 20) || n_users > (1ull << 32) || n_items > (1ull << 32))
    throw FormatError("implausible encoder checkpoint header");
  Matrix users(n_users, dim);
  Matrix items(n_items, dim);
  for (double& x : users.data) x = io::read_le<double>(in, "user table");
  for (double& x : items.data) x = io::read_le<double>(in, "item table");
  if (static_cast<EncoderKind>(kind) == EncoderKind::biased_mf)
    return std::make_unique<BiasedMfEncoder>(std::move(users), std::move(items));
  return std::make_unique<MfEncoder>(std::move(users), std::move(items));
}

struct EmbeddingTable {
  std::uint64_t rows = 0;
  std::uint64_t dim = 0;
  std::vector<float> values;  // row-major

  bool operator==(const EmbeddingTable&) const = default;
};

// "ADAR", u32 version = 1, u64 rows, u64 dim, row-major little-endian f32.
inline void write_embeddings(std::ostream& out, const Matrix& table) {
  io::write_magic(out, kEmbeddingMagic);
  io::write_le<std::uint32_t>(out, kEmbeddingVersion);
  io::write_le<std::uint64_t>(out, table.rows);
  io::write_le<std::uint64_t>(out, table.cols);
  for (double x : table.data) io::write_le(out, static_cast<float>(x));
}

inline EmbeddingTable read_embeddings(std::istream& in) {
  io::expect_magic(in, kEmbeddingMagic);
  const auto version = io::read_le<std::uint32_t>(in, "version");
  if (version != kEmbeddingVersion)
    throw FormatError("unsupported embedding file version " + std::to_string(version));
  EmbeddingTable t;
  t.rows = io::read_le<std::uint64_t>(in, "row count");
  t.dim = io::read_le<std::uint64_t>(in, "dimension");
  if (t.dim > (1u << 20) || t.rows > (1ull << 32)) throw FormatError("implausible embedding header");
  t.values.resize(t.rows * t.dim);
  for (float& x : t.values) x = io::read_le<float>(in, "embedding values");
  return t;
}

}  // namespace adar
