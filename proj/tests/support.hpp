#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "adar/adar.hpp"

namespace adar::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "adar_test";
    if (info) name += std::string("_") + info->test_suite_name() + "_" + info->name();
    path_ = std::filesystem::temp_directory_path() / (name + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline InteractionSet parse_tsv(const std::string& text, TextFormat fmt = TextFormat::tsv) {
  std::istringstream in(text);
  return ingest_interactions(in, fmt);
}

// Small world used by trainer and CLI tests.
inline SplitDataset small_split(std::uint64_t seed, std::uint32_t users = 200, std::uint32_t items = 100) {
  RngStream wr(seed, stream_id(0, 0, StreamRole::synth));
  auto world = synth_dataset(users, items, 8, 2.0, 0.5, wr);
  RngStream sr(seed, stream_id(0, 0, StreamRole::split));
  return split_train_test(world.interactions, 0.8, sr);
}

inline TrainConfig small_config(std::uint64_t seed) {
  TrainConfig c;
  c.d = 8;
  c.d_t = 8;
  c.lr = 0.01;
  c.batch_size = 128;
  c.epochs = 3;
  c.T = 20;
  c.seed = seed;
  return c;
}

// Config text for CLI tests; `extra` is appended verbatim.
inline std::string config_text(const std::filesystem::path& train, const std::filesystem::path& out,
                               const std::string& extra = {}) {
  return "train_path = " + train.string() + "\nout_dir = " + out.string() +
         "\nd = 8\nd_t = 8\nlr = 0.01\nbatch_size = 64\nepochs = 2\nT = 10\nseed = 11\n" + extra;
}

}  // namespace adar::testing
