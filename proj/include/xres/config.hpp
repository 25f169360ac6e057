#pragma once

// Run configuration: `key = value` lines (# comments) plus overrides.
//
//   model.size model.channels model.classes model.regions model.topk
//   model.heads model.mlp_ratio model.rdm
//   optim.lr optim.weight_decay optim.patience optim.factor optim.epochs
//   optim.batch optim.loss (anlc | ce)
//   data.dir data.out data.tiles data.tile_size data.blobs data.rho_mis
//   data.rho_chg data.block data.patches
//   seed

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "xres/dataset.hpp"
#include "xres/errors.hpp"
#include "xres/model.hpp"

namespace xres {

struct OptimConfig {
  double lr = 0.01;
  double weight_decay = 0.01;
  std::size_t patience = 8;
  double factor = 0.1;
  std::size_t epochs = 10;
  std::size_t batch = 4;
  std::string loss = "anlc";
};

struct DataConfig {
  std::string dir = "data";
  std::string out = "run";
  std::size_t tiles = 8;
  std::size_t tile_size = 256;
  std::size_t blobs = 24;
  double rho_mis = 0.2;
  double rho_chg = 0.1;
  std::size_t block = 8;
  std::size_t patches = 4;  // crops per tile per epoch
};

struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  DataConfig data;
  std::uint64_t seed = 0;

  SceneSpec scene(std::size_t tile) const {
    SceneSpec s;
    s.size = data.tile_size;
    s.classes = model.classes;
    s.blobs = data.blobs;
    s.rho_mis = data.rho_mis;
    s.rho_chg = data.rho_chg;
    s.block = data.block;
    s.seed = seed * 1000003ULL + tile;
    return s;
  }

  void validate() const {
    model.validate();
    if (optim.lr <= 0) throw ConfigError("optim.lr must be positive");
    if (optim.factor <= 0 || optim.factor >= 1) throw ConfigError("optim.factor must lie in (0, 1)");
    if (optim.batch == 0) throw ConfigError("optim.batch must be >= 1");
    if (optim.patience == 0) throw ConfigError("optim.patience must be >= 1");
    if (optim.loss != "anlc" && optim.loss != "ce") throw ConfigError("optim.loss must be anlc or ce");
    if (data.tile_size < model.size) throw ConfigError("data.tile_size must be >= model.size");
    scene(0).validate();
  }
};

namespace detail {

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const char* b = v.data();
  const char* e = b + v.size();
  auto r = std::from_chars(b, e, out);
  if (r.ec != std::errc{} || r.ptr != e) throw ConfigError("bad value for " + key + ": \"" + v + "\"");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + key + ": \"" + v + "\"");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class N>
std::string num_str(N v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline const std::map<std::string, Field>& fields() {
  using C = RunConfig;
  using S = const std::string&;
#define XRES_NUM(key, member, type)                                                         \
  {key, {[](C& c, S v) { c.member = parse_number<type>(key, v); },                          \
         [](const C& c) { return num_str(c.member); }}}
  static const std::map<std::string, Field> f = {
      XRES_NUM("model.size", model.size, std::size_t),
      XRES_NUM("model.channels", model.channels, std::size_t),
      XRES_NUM("model.classes", model.classes, std::size_t),
      XRES_NUM("model.regions", model.regions, std::size_t),
      XRES_NUM("model.heads", model.heads, std::size_t),
      XRES_NUM("model.mlp_ratio", model.mlp_ratio, std::size_t),
      {"model.rdm", {[](C& c, S v) { c.model.rdm = parse_bool("model.rdm", v); },
                     [](const C& c) { return std::string(c.model.rdm ? "true" : "false"); }}},
      {"model.topk",
       {[](C& c, S v) {
          std::vector<std::size_t> ks;
          std::stringstream ss(v);
          for (std::string item; std::getline(ss, item, ',');)
            ks.push_back(parse_number<std::size_t>("model.topk", trim(item)));
          c.model.topk = ks;
        },
        [](const C& c) {
          std::string s;
          for (std::size_t i = 0; i < c.model.topk.size(); ++i) s += (i ? "," : "") + std::to_string(c.model.topk[i]);
          return s;
        }}},
      XRES_NUM("optim.lr", optim.lr, double),
      XRES_NUM("optim.weight_decay", optim.weight_decay, double),
      XRES_NUM("optim.patience", optim.patience, std::size_t),
      XRES_NUM("optim.factor", optim.factor, double),
      XRES_NUM("optim.epochs", optim.epochs, std::size_t),
      XRES_NUM("optim.batch", optim.batch, std::size_t),
      {"optim.loss", {[](C& c, S v) { c.optim.loss = v; }, [](const C& c) { return c.optim.loss; }}},
      {"data.dir", {[](C& c, S v) { c.data.dir = v; }, [](const C& c) { return c.data.dir; }}},
      {"data.out", {[](C& c, S v) { c.data.out = v; }, [](const C& c) { return c.data.out; }}},
      XRES_NUM("data.tiles", data.tiles, std::size_t),
      XRES_NUM("data.tile_size", data.tile_size, std::size_t),
      XRES_NUM("data.blobs", data.blobs, std::size_t),
      XRES_NUM("data.rho_mis", data.rho_mis, double),
      XRES_NUM("data.rho_chg", data.rho_chg, double),
      XRES_NUM("data.block", data.block, std::size_t),
      XRES_NUM("data.patches", data.patches, std::size_t),
      XRES_NUM("seed", seed, std::uint64_t),
  };
#undef XRES_NUM
  return f;
}

}  // namespace detail

inline void set_option(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& f = detail::fields();
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError("unknown config key " + key);
  it->second.set(c, detail::trim(value));
}

// "key=value" form used by command-line overrides.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override \"" + assignment + "\" is not key=value");
  set_option(c, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void parse_config(RunConfig& c, std::istream& is) {
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + " is not key = value");
    set_option(c, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  RunConfig c;
  parse_config(c, is);
  return c;
}

// Every key with its effective value; parse_config of the result reproduces c.
inline std::string dump_config(const RunConfig& c) {
  std::string out;
  for (const auto& [key, f] : detail::fields()) out += key + " = " + f.get(c) + "\n";
  return out;
}

}  // namespace xres
