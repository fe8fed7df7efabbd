#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "adar/data.hpp"
#include "adar/error.hpp"
#include "adar/train.hpp"

namespace adar {

// Flat `key = value` run description. Lines starting with '#' are comments.
// Relative paths are resolved against the directory of the config file.
struct ConfigFile {
  TrainConfig train;
  std::filesystem::path train_path;
  std::optional<std::filesystem::path> test_path;  // unset: split train_path in process
  std::filesystem::path out_dir = "out";
  TextFormat format = TextFormat::tsv;
  double split_ratio = 0.8;
  std::vector<double> lambda_grid;
  std::vector<std::size_t> T_grid;

  static ConfigFile parse(std::istream& in, const std::filesystem::path& base_dir = {});
  static ConfigFile load(const std::filesystem::path& path);

  // Every key this format understands, in documentation order.
  static const std::vector<std::string>& keys();
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) throw ConfigError("key '" + key + "': cannot parse '" + value + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ConfigError("key '" + key + "': expected a boolean, got '" + value + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
  std::vector<T> out;
  std::string item;
  std::istringstream is(value);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("key '" + key + "': empty list element");
    out.push_back(parse_number<T>(key, item));
  }
  if (out.empty()) throw ConfigError("key '" + key + "': list is empty");
  return out;
}

template <class F>
auto config_enum(const std::string& key, const std::string& value, F&& parse) {
  try {
    return parse(value);
  } catch (const InvalidArgument& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

using Setter = std::function<void(ConfigFile&, const std::string& key, const std::string& value,
                                  const std::filesystem::path& base)>;

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& value) {
  std::filesystem::path p(value);
  return p.is_relative() && !base.empty() ? base / p : p;
}

inline const std::vector<std::pair<std::string, Setter>>& config_setters() {
  using P = std::filesystem::path;
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"train_path", [](ConfigFile& c, auto&, auto& v, const P& b) { c.train_path = resolve(b, v); }},
      {"test_path", [](ConfigFile& c, auto&, auto& v, const P& b) { c.test_path = resolve(b, v); }},
      {"out_dir", [](ConfigFile& c, auto&, auto& v, const P& b) { c.out_dir = resolve(b, v); }},
      {"format", [](ConfigFile& c, auto& k, auto& v, const P&) { c.format = config_enum(k, v, parse_text_format); }},
      {"split_ratio", [](ConfigFile& c, auto& k, auto& v, const P&) { c.split_ratio = parse_number<double>(k, v); }},
      {"lambda_grid", [](ConfigFile& c, auto& k, auto& v, const P&) { c.lambda_grid = parse_list<double>(k, v); }},
      {"T_grid", [](ConfigFile& c, auto& k, auto& v, const P&) { c.T_grid = parse_list<std::size_t>(k, v); }},
      {"d", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.d = parse_number<std::size_t>(k, v); }},
      {"d_t", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.d_t = parse_number<std::size_t>(k, v); }},
      {"lr", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.lr = parse_number<double>(k, v); }},
      {"batch_size",
       [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.batch_size = parse_number<std::size_t>(k, v); }},
      {"epochs", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.epochs = parse_number<std::size_t>(k, v); }},
      {"T", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.T = parse_number<std::size_t>(k, v); }},
      {"schedule",
       [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.schedule = config_enum(k, v, parse_schedule_kind); }},
      {"beta_start", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.beta_start = parse_number<double>(k, v); }},
      {"beta_end", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.beta_end = parse_number<double>(k, v); }},
      {"lambda", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.lambda = parse_number<double>(k, v); }},
      {"omega", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.omega = parse_number<double>(k, v); }},
      {"k", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.k = parse_number<double>(k, v); }},
      {"sampler",
       [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.sampler = config_enum(k, v, parse_sampler_kind); }},
      {"base_sampler",
       [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.base_sampler = config_enum(k, v, parse_sampler_kind); }},
      {"dns_m", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.dns_m = parse_number<std::size_t>(k, v); }},
      {"fixed_t", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.fixed_t = parse_number<std::size_t>(k, v); }},
      {"seed", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.seed = parse_number<std::uint64_t>(k, v); }},
      {"deterministic", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.deterministic = parse_bool(k, v); }},
      {"threads", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.threads = parse_number<unsigned>(k, v); }},
      {"warmup_epochs",
       [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.warmup_epochs = parse_number<std::size_t>(k, v); }},
      {"eval_every",
       [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.eval_every = parse_number<std::size_t>(k, v); }},
      {"patience", [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.patience = parse_number<std::size_t>(k, v); }},
      {"weight_decay",
       [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.weight_decay = parse_number<double>(k, v); }},
      {"encoder",
       [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.encoder = config_enum(k, v, parse_encoder_kind); }},
      {"time_embedding", [](ConfigFile& c, auto& k, auto& v,
                            const P&) { c.train.time_embedding = config_enum(k, v, parse_time_embedding); }},
      {"stochastic_reverse",
       [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.stochastic_reverse = parse_bool(k, v); }},
      {"film_layers",
       [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.film_layers = parse_number<std::size_t>(k, v); }},
      {"film_width",
       [](ConfigFile& c, auto& k, auto& v, const P&) { c.train.film_width = parse_number<std::size_t>(k, v); }},
  };
  return table;
}

}  // namespace detail

inline const std::vector<std::string>& ConfigFile::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, setter] : detail::config_setters()) out.push_back(name);
    return out;
  }();
  return names;
}

inline ConfigFile ConfigFile::parse(std::istream& in, const std::filesystem::path& base_dir) {
  ConfigFile cfg;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = detail::trim(line);
    if (body.empty() || body[0] == '#') continue;
    const auto eq = body.find('=');
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "missing key");
    if (value.empty()) throw ConfigError(where + "missing value for '" + key + "'");
    const auto& table = detail::config_setters();
    const auto it = std::find_if(table.begin(), table.end(), [&](const auto& e) { return e.first == key; });
    if (it == table.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (auto [pos, fresh] = seen.emplace(key, line_no); !fresh)
      throw ConfigError(where + "key '" + key + "' already set on line " + std::to_string(pos->second));
    try {
      it->second(cfg, key, value, base_dir);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  if (cfg.train_path.empty()) throw ConfigError("config: train_path is required");
  if (!(cfg.split_ratio > 0.0 && cfg.split_ratio < 1.0)) throw ConfigError("config: split_ratio must lie in (0, 1)");
  try {
    cfg.train.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

inline ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path.string() + "'");
  return parse(in, path.parent_path());
}

}  // namespace adar
