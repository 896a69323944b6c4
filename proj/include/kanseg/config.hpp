#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "kanseg/model.hpp"
#include "kanseg/serialize.hpp"

namespace kanseg {

struct TrainConfig {
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t epochs = 50;
  std::vector<std::size_t> milestones{25, 35, 45};
  double gamma = 0.1;
  std::size_t batch = 10;
  std::uint8_t ignore_index = 255;
  bool augment = true;
  /// Window stride of the per-epoch held-out evaluation that selects the best checkpoint.
  std::size_t eval_stride = 256;

  void validate() const {
    if (!(lr0 > 0)) throw ConfigError("train.lr must be positive");
    if (!(gamma > 0)) throw ConfigError("train.gamma must be positive");
    if (momentum < 0) throw ConfigError("train.momentum must be non-negative");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
    if (epochs == 0) throw ConfigError("train.epochs must be at least 1");
    if (batch == 0) throw ConfigError("train.batch must be at least 1");
    if (eval_stride == 0) throw ConfigError("train.eval_stride must be at least 1");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (i > 0 && milestones[i] <= milestones[i - 1]) throw ConfigError("train.milestones must be strictly increasing");
      if (milestones[i] >= epochs) {
        throw ConfigError("train.milestones: milestone " + std::to_string(milestones[i]) + " is not below train.epochs = " +
                          std::to_string(epochs));
      }
    }
  }
};

struct DataConfig {
  std::size_t tiles = 20;
  std::size_t test_tiles = 4;  // the last `test_tiles` tiles form the held-out split
  std::size_t tile_size = 512;
  std::size_t patch = 256;
  std::size_t train_stride = 256;
  std::size_t test_stride = 128;
  double min_coverage = 0.02;

  void validate() const {
    if (tiles == 0) throw ConfigError("data.tiles must be at least 1");
    if (test_tiles >= tiles) throw ConfigError("data.test_tiles must leave at least one training tile");
    if (patch == 0 || patch > tile_size) throw ConfigError("data.patch must be in [1, data.tile_size]");
    if (train_stride == 0 || test_stride == 0) throw ConfigError("data strides must be at least 1");
    if (min_coverage < 0 || min_coverage * 5 > 1) throw ConfigError("data.min_coverage must be in [0, 0.2]");
  }
};

struct RunConfig {
  std::uint64_t seed = 7;
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class U>
U parse_number(const std::string& key, const std::string& text) {
  U v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + text + "' as a number");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  if (trim(text).empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  return out;
}

template <std::size_t N>
std::array<std::size_t, N> parse_array(const std::string& key, const std::string& text) {
  const auto v = parse_list(key, text);
  if (v.size() != N) throw ConfigError(key + ": expected " + std::to_string(N) + " comma-separated values");
  std::array<std::size_t, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <class C>
std::string format_list(const C& c) {
  std::string out;
  for (std::size_t i = 0; i < c.size(); ++i) out += (i ? ", " : "") + std::to_string(c[i]);
  return out;
}

inline std::string format_bool(bool b) { return b ? "true" : "false"; }

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<Field>& fields() {
  using S = std::size_t;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto sz = [&f](std::string key, auto member) {
      f.push_back({key, [key, member](RunConfig& c, const std::string& v) { member(c) = parse_number<S>(key, v); },
                   [member](const RunConfig& c) { return std::to_string(member(c)); }});
    };
    auto dbl = [&f](std::string key, auto member) {
      f.push_back({key, [key, member](RunConfig& c, const std::string& v) { member(c) = parse_number<double>(key, v); },
                   [member](const RunConfig& c) { return format_double(member(c)); }});
    };
    auto flag = [&f](std::string key, auto member) {
      f.push_back({key, [key, member](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); },
                   [member](const RunConfig& c) { return format_bool(member(c)); }});
    };
    f.push_back({"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});

    f.push_back({"model.encoder_channels",
                 [](RunConfig& c, const std::string& v) { c.model.encoder_channels = parse_array<4>("model.encoder_channels", v); },
                 [](const RunConfig& c) { return format_list(c.model.encoder_channels); }});
    f.push_back({"model.decoder_widths",
                 [](RunConfig& c, const std::string& v) { c.model.decoder_widths = parse_array<3>("model.decoder_widths", v); },
                 [](const RunConfig& c) { return format_list(c.model.decoder_widths); }});
    sz("model.deepkan_modules", [](auto& c) -> auto& { return c.model.deepkan_modules; });
    sz("model.num_classes", [](auto& c) -> auto& { return c.model.num_classes; });
    sz("model.heads", [](auto& c) -> auto& { return c.model.heads; });
    sz("model.window", [](auto& c) -> auto& { return c.model.window; });
    dbl("model.spline_min", [](auto& c) -> auto& { return c.model.spline_min; });
    dbl("model.spline_max", [](auto& c) -> auto& { return c.model.spline_max; });
    sz("model.spline_intervals", [](auto& c) -> auto& { return c.model.spline_intervals; });
    sz("model.spline_order", [](auto& c) -> auto& { return c.model.spline_order; });
    flag("model.use_deepkan", [](auto& c) -> auto& { return c.model.use_deepkan; });
    flag("model.use_glkan_ffn", [](auto& c) -> auto& { return c.model.use_glkan_ffn; });
    flag("model.deepkan_residual", [](auto& c) -> auto& { return c.model.deepkan_residual; });

    dbl("train.lr", [](auto& c) -> auto& { return c.train.lr0; });
    dbl("train.momentum", [](auto& c) -> auto& { return c.train.momentum; });
    dbl("train.weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; });
    sz("train.epochs", [](auto& c) -> auto& { return c.train.epochs; });
    f.push_back({"train.milestones",
                 [](RunConfig& c, const std::string& v) { c.train.milestones = parse_list("train.milestones", v); },
                 [](const RunConfig& c) { return format_list(c.train.milestones); }});
    dbl("train.gamma", [](auto& c) -> auto& { return c.train.gamma; });
    sz("train.batch", [](auto& c) -> auto& { return c.train.batch; });
    f.push_back({"train.ignore_index",
                 [](RunConfig& c, const std::string& v) {
                   const auto x = parse_number<unsigned>("train.ignore_index", v);
                   if (x > 255) throw ConfigError("train.ignore_index must fit in 8 bits");
                   c.train.ignore_index = static_cast<std::uint8_t>(x);
                 },
                 [](const RunConfig& c) { return std::to_string(c.train.ignore_index); }});
    flag("train.augment", [](auto& c) -> auto& { return c.train.augment; });
    sz("train.eval_stride", [](auto& c) -> auto& { return c.train.eval_stride; });

    sz("data.tiles", [](auto& c) -> auto& { return c.data.tiles; });
    sz("data.test_tiles", [](auto& c) -> auto& { return c.data.test_tiles; });
    sz("data.tile_size", [](auto& c) -> auto& { return c.data.tile_size; });
    sz("data.patch", [](auto& c) -> auto& { return c.data.patch; });
    sz("data.train_stride", [](auto& c) -> auto& { return c.data.train_stride; });
    sz("data.test_stride", [](auto& c) -> auto& { return c.data.test_stride; });
    dbl("data.min_coverage", [](auto& c) -> auto& { return c.data.min_coverage; });
    return f;
  }();
  return table;
}

}  // namespace detail

/// Applies `key = value` lines onto `base`. '#' starts a comment; blank lines are skipped.
/// Unknown or repeated keys are errors.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}, const std::string& source = "config") {
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::stringstream ss{std::string(text)};
  std::string line;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + body + "'");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    const auto& table = detail::fields();
    const auto it = std::find_if(table.begin(), table.end(), [&](const detail::Field& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": key '" + key + "' given twice");
    try {
      it->set(base, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  return parse_config(io::read_text(path), std::move(base), path.string());
}

/// Every key with its current value, one per line, in a fixed order. parse_config(to_text(c)) == c.
inline std::string to_text(const RunConfig& c) {
  std::string out;
  std::string section;
  for (const auto& f : detail::fields()) {
    const auto dot = f.key.find('.');
    const std::string s = dot == std::string::npos ? "" : f.key.substr(0, dot);
    if (s != section && !out.empty()) out += "\n";
    section = s;
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

}  // namespace kanseg
