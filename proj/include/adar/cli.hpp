#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "adar/config.hpp"
#include "adar/data.hpp"
#include "adar/diffusion.hpp"
#include "adar/encoder.hpp"
#include "adar/error.hpp"
#include "adar/eval.hpp"
#include "adar/train.hpp"
#include "adar/verify.hpp"

// Command implementations behind the `adar` tool. Each returns a process
// exit code and writes diagnostics to the error stream it is given.
namespace adar::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kNumerical = 3, kFormat = 4 };

inline constexpr const char* kTrainFile = "train.tsv";
inline constexpr const char* kTestFile = "test.tsv";
inline constexpr const char* kUserMapFile = "users.idmap";
inline constexpr const char* kItemMapFile = "items.idmap";
inline constexpr const char* kMetricsFile = "metrics.json";
inline constexpr const char* kLossFile = "losses.csv";
inline constexpr const char* kSweepFile = "sweep.csv";
inline constexpr const char* kUserEmbFile = "users.emb";
inline constexpr const char* kItemEmbFile = "items.emb";
inline constexpr const char* kEncoderFile = "encoder.ckpt";
inline constexpr const char* kDiffusionFile = "diffusion.ckpt";

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfig;
  if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
  if (dynamic_cast<const FormatError*>(&e)) return kFormat;
  return kOther;
}

// Runs a command body, turning exceptions into an error line and exit code.
template <typename F>
int guarded(Streams io, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

namespace detail {

inline std::ifstream open_in(const fs::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return in;
}

inline std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

inline void finish(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

// Parse and emptiness errors gain the file name; other errors pass through.
template <typename F>
auto with_file(const fs::path& path, F&& fn) {
  try {
    return fn();
  } catch (const ParseError& e) {
    throw IoError(path.string() + ": " + e.what());
  } catch (const EmptyDatasetError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline IdMap load_idmap(const fs::path& path) {
  auto in = open_in(path);
  return with_file(path, [&] { return read_idmap(in); });
}

}  // namespace detail

// Train/test pair described by a config. With test_path set, the two files
// share one index space (taken from users.idmap / items.idmap next to the
// train file when both exist); otherwise train_path is split here with the
// configured ratio and seed.
inline SplitDataset load_split(const ConfigFile& cfg) {
  if (!cfg.test_path) {
    auto in = detail::open_in(cfg.train_path);
    const auto all = detail::with_file(cfg.train_path, [&] { return ingest_interactions(in, cfg.format); });
    RngStream rng(cfg.train.seed, stream_id(0, 0, StreamRole::split));
    return split_train_test(all, cfg.split_ratio, rng);
  }
  const fs::path dir = cfg.train_path.parent_path();
  const fs::path user_map = dir / kUserMapFile, item_map = dir / kItemMapFile;
  auto train_in = detail::open_in(cfg.train_path);
  auto test_in = detail::open_in(*cfg.test_path);
  if (fs::exists(user_map) && fs::exists(item_map)) {
    IdMap users = detail::load_idmap(user_map), items = detail::load_idmap(item_map);
    auto train_adj =
        detail::with_file(cfg.train_path, [&] { return ingest_with_maps(train_in, cfg.format, users, items); });
    SplitDataset out;
    out.test = detail::with_file(*cfg.test_path, [&] {
      // An empty test file is allowed: parse it only when it has records.
      std::stringstream buf;
      buf << test_in.rdbuf();
      const bool blank = buf.str().find_first_not_of(" \t\r\n") == std::string::npos;
      return blank ? std::vector<std::vector<std::uint32_t>>(users.size())
                   : ingest_with_maps(buf, cfg.format, users, items);
    });
    out.train = detail::with_file(cfg.train_path, [&] {
      return make_interaction_set(std::move(train_adj), std::move(users), std::move(items));
    });
    return out;
  }
  std::stringstream test_buf;
  test_buf << test_in.rdbuf();
  return detail::with_file(cfg.train_path, [&] { return ingest_split(train_in, test_buf, cfg.format); });
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

struct PrepareOptions {
  fs::path input;
  TextFormat format = TextFormat::tsv;
  double ratio = 0.8;
  std::uint64_t seed = 2024;
  fs::path out_dir = "prepared";
};

inline int cmd_prepare(const PrepareOptions& opt, Streams io) {
  return guarded(io, [&] {
    auto in = detail::open_in(opt.input);
    const auto all = detail::with_file(opt.input, [&] { return ingest_interactions(in, opt.format); });
    RngStream rng(opt.seed, stream_id(0, 0, StreamRole::split));
    const auto split = split_train_test(all, opt.ratio, rng);
    fs::create_directories(opt.out_dir);
    auto write = [&](const char* name, auto&& fn) {
      const fs::path path = opt.out_dir / name;
      auto out = detail::open_out(path);
      fn(out);
      detail::finish(out, path);
    };
    write(kTrainFile, [&](std::ostream& o) { write_interactions(o, split.train, TextFormat::tsv); });
    write(kTestFile, [&](std::ostream& o) {
      write_interactions(o, split.test, split.train.users, split.train.items, TextFormat::tsv);
    });
    write(kUserMapFile, [&](std::ostream& o) { write_idmap(o, all.users); });
    write(kItemMapFile, [&](std::ostream& o) { write_idmap(o, all.items); });
    io.out << "prepared " << split.train.n_interactions() << " train and " << split.n_test_interactions()
           << " test interactions (" << all.n_users << " users, " << all.n_items << " items) in "
           << opt.out_dir.string() << '\n';
    return kOk;
  });
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline void write_losses(std::ostream& out, const std::vector<LossRecord>& losses) {
  out << "epoch,batch,diff_loss,rank_loss\n";
  for (const auto& r : losses)
    out << r.epoch << ',' << r.batch << ',' << format_double(r.diff_loss) << ',' << format_double(r.rank_loss) << '\n';
}

inline void write_artifacts(const fs::path& dir, const TrainArtifacts& art) {
  fs::create_directories(dir);
  {
    const fs::path p = dir / kEncoderFile;
    auto out = detail::open_out(p, std::ios::binary);
    write_encoder_checkpoint(out, *art.encoder);
    detail::finish(out, p);
  }
  {
    const fs::path p = dir / kDiffusionFile;
    auto out = detail::open_out(p, std::ios::binary);
    write_predictor(out, art.predictor);
    detail::finish(out, p);
  }
  {
    const fs::path p = dir / kLossFile;
    auto out = detail::open_out(p);
    write_losses(out, art.losses);
    detail::finish(out, p);
  }
  {
    const fs::path p = dir / kMetricsFile;
    auto out = detail::open_out(p);
    out << art.metrics.json_line() << '\n';
    detail::finish(out, p);
  }
}

inline int cmd_train(const fs::path& config_path, Streams io) {
  return guarded(io, [&] {
    const auto cfg = ConfigFile::load(config_path);
    const auto split = load_split(cfg);
    if (split.n_test_interactions() == 0) io.err << "warning: no test interactions; metrics are not computed\n";
    const auto art = train(cfg.train, split);
    write_artifacts(cfg.out_dir, art);
    io.out << art.metrics.json_line() << '\n';
    return kOk;
  });
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

// Scores an encoder checkpoint (default: out_dir/encoder.ckpt) on the
// config's split and prints the report; `out_file`, when set, receives it too.
inline int cmd_eval(const fs::path& config_path, const fs::path& checkpoint, const fs::path& out_file, Streams io) {
  return guarded(io, [&] {
    const auto cfg = ConfigFile::load(config_path);
    const fs::path ckpt = checkpoint.empty() ? cfg.out_dir / kEncoderFile : checkpoint;
    auto in = detail::open_in(ckpt, std::ios::binary);
    const auto enc = read_encoder_checkpoint(in);
    const auto split = load_split(cfg);
    if (enc->n_users() != split.train.n_users || enc->n_items() != split.train.n_items)
      throw ShapeError("checkpoint shape (" + std::to_string(enc->n_users()) + " users, " +
                       std::to_string(enc->n_items()) + " items) does not match the data (" +
                       std::to_string(split.train.n_users) + ", " + std::to_string(split.train.n_items) + ")");
    const auto rep = evaluate(*enc, split, default_cutoffs(), cfg.train.threads, cfg.train.fingerprint());
    if (!out_file.empty()) {
      auto out = detail::open_out(out_file);
      out << rep.json_line() << '\n';
      detail::finish(out, out_file);
    }
    io.out << rep.json_line() << '\n';
    return kOk;
  });
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

inline std::string sweep_header() { return "lambda,T," + MetricsReport::csv_header() + ",status"; }

namespace detail {

template <typename T>
std::vector<T> dedup_grid(std::vector<T> grid, const char* name, std::ostream& err) {
  std::vector<T> out;
  for (const T& v : grid)
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  if (out.size() != grid.size())
    err << "warning: " << name << " has duplicate values; " << grid.size() - out.size() << " dropped\n";
  return out;
}

inline std::string csv_safe(std::string s) {
  std::replace_if(s.begin(), s.end(), [](char c) { return c == ',' || c == '\n' || c == '\r'; }, ';');
  return s;
}

}  // namespace detail

// lambda_grid x T_grid, one training run per point with the shared seed.
// A missing grid stands for the config's own scalar value. A failed point
// becomes an error row and the sweep continues; the exit code is then 1.
inline int cmd_sweep(const fs::path& config_path, unsigned parallel, Streams io) {
  return guarded(io, [&] {
    const auto cfg = ConfigFile::load(config_path);
    const auto lambdas = detail::dedup_grid(
        cfg.lambda_grid.empty() ? std::vector<double>{cfg.train.lambda} : cfg.lambda_grid, "lambda_grid", io.err);
    const auto steps = detail::dedup_grid(
        cfg.T_grid.empty() ? std::vector<std::size_t>{cfg.train.T} : cfg.T_grid, "T_grid", io.err);
    const auto split = load_split(cfg);

    struct Point {
      double lambda;
      std::size_t T;
      std::string row;
      bool ok = false;
    };
    std::vector<Point> points;
    for (double l : lambdas)
      for (std::size_t T : steps) points.push_back({l, T, {}, false});

    auto run_point = [&](Point& p) {
      std::ostringstream row;
      row << format_double(p.lambda) << ',' << p.T << ',';
      try {
        TrainConfig tc = cfg.train;
        tc.lambda = p.lambda;
        tc.T = p.T;
        try {
          tc.validate();
        } catch (const InvalidArgument& e) {
          throw ConfigError(e.what());
        }
        const auto art = train(tc, split);
        if (art.metrics.ks.empty()) throw EmptyDatasetError("no test interactions");
        row << art.metrics.csv_row() << ",ok";
        p.ok = true;
      } catch (const std::exception& e) {
        row << ",,,,," << ",error: " << detail::csv_safe(e.what());
      }
      p.row = row.str();
    };

    parallel = std::max(1u, parallel);
    if (parallel == 1) {
      for (auto& p : points) run_point(p);
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::thread> pool;
      for (unsigned w = 0; w < std::min<std::size_t>(parallel, points.size()); ++w)
        pool.emplace_back([&] {
          for (std::size_t k; (k = next.fetch_add(1)) < points.size();) run_point(points[k]);
        });
      for (auto& t : pool) t.join();
    }

    fs::create_directories(cfg.out_dir);
    const fs::path path = cfg.out_dir / kSweepFile;
    auto out = detail::open_out(path);
    out << sweep_header() << '\n';
    std::size_t failed = 0;
    for (const auto& p : points) {
      out << p.row << '\n';
      if (!p.ok) {
        ++failed;
        io.err << "warning: grid point lambda=" << p.lambda << " T=" << p.T << " failed\n";
      }
    }
    detail::finish(out, path);
    io.out << "wrote " << points.size() << " rows to " << path.string() << '\n';
    return failed == 0 ? kOk : kOther;
  });
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

inline int cmd_verify(std::uint64_t seed, Streams io, const verify::GradientFns& fns = {}) {
  return guarded(io, [&] {
    const auto results = verify::run_all(seed, fns);
    std::vector<std::string> failed;
    for (const auto& r : results) {
      io.out << r.line() << '\n';
      if (!r.passed) failed.push_back(r.name);
    }
    if (failed.empty()) {
      io.out << "all " << results.size() << " checks passed\n";
      return kOk;
    }
    io.err << "failed checks:";
    for (const auto& name : failed) io.err << ' ' << name;
    io.err << '\n';
    return kOther;
  });
}

// ---------------------------------------------------------------------------
// export-embeddings
// ---------------------------------------------------------------------------

inline int cmd_export_embeddings(const fs::path& checkpoint, const fs::path& out_dir, Streams io) {
  return guarded(io, [&] {
    auto in = detail::open_in(checkpoint, std::ios::binary);
    const auto enc = read_encoder_checkpoint(in);
    fs::create_directories(out_dir);
    for (const auto& [name, table] : {std::pair{kUserEmbFile, &enc->user_table()}, {kItemEmbFile, &enc->item_table()}}) {
      const fs::path p = out_dir / name;
      auto out = detail::open_out(p, std::ios::binary);
      write_embeddings(out, *table);
      detail::finish(out, p);
    }
    io.out << "exported " << enc->n_users() << " user and " << enc->n_items() << " item rows of width "
           << enc->user_table().cols << " to " << out_dir.string() << '\n';
    return kOk;
  });
}

}  // namespace adar::cli
