#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kanseg/config.hpp"
#include "kanseg/rng.hpp"
#include "kanseg/serialize.hpp"

namespace kanseg {

/// Class indices of the synthetic scenes.
enum Class : std::uint8_t { kImpervious = 0, kBuilding = 1, kLowVegetation = 2, kTree = 3, kCar = 4, kClutter = 5 };
inline constexpr std::uint8_t kVoid = 255;
inline constexpr std::size_t kNumClasses = 6;
inline constexpr std::array<const char*, kNumClasses> kClassNames{"impervious", "building", "low_veg", "tree", "car",
                                                                   "clutter"};

/// 8-bit raster, interleaved channels, row-major.
struct Raster {
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<std::uint8_t> data;

  Raster() = default;
  Raster(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t ch = 0) { return data[(y * width + x) * channels + ch]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t ch = 0) const { return data[(y * width + x) * channels + ch]; }
  std::size_t pixels() const { return height * width; }

  friend bool operator==(const Raster&, const Raster&) = default;
};

struct Sample {
  Raster image;  // 3 channels
  Raster label;  // 1 channel of class indices
};

struct Tile {
  std::string name;
  Raster image;
  Raster label;
};

// ---------------------------------------------------------------------------------------------
// PPM / PGM

namespace detail {

inline std::string next_token(std::istream& is) {
  std::string tok;
  char c;
  while (is.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

inline Raster read_netpbm(const std::filesystem::path& path, const std::string& magic, std::size_t channels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  if (next_token(is) != magic) throw IoError(path.string() + ": expected binary " + magic + " header");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token(is));
    h = std::stoul(next_token(is));
    maxval = std::stoul(next_token(is));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed header");
  }
  if (maxval != 255 || w == 0 || h == 0) throw IoError(path.string() + ": only non-empty 8-bit rasters are supported");
  Raster r(h, w, channels);
  is.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
  if (!is) throw IoError(path.string() + ": truncated pixel data");
  return r;
}

inline void write_netpbm(const std::filesystem::path& path, const std::string& magic, const Raster& r) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << magic << "\n" << r.width << " " << r.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const Raster& r) {
  if (r.channels != 3) throw IoError("write_ppm: raster must have 3 channels");
  detail::write_netpbm(path, "P6", r);
}

inline void write_pgm(const std::filesystem::path& path, const Raster& r) {
  if (r.channels != 1) throw IoError("write_pgm: raster must have 1 channel");
  detail::write_netpbm(path, "P5", r);
}

inline Raster read_ppm(const std::filesystem::path& path) { return detail::read_netpbm(path, "P6", 3); }
inline Raster read_pgm(const std::filesystem::path& path) { return detail::read_netpbm(path, "P5", 1); }

// ---------------------------------------------------------------------------------------------
// Synthetic scenes

struct ClassSpec {
  double min_coverage = 0.02;  // per foreground class, fraction of tile pixels
  std::size_t max_retries = 32;
};

inline constexpr std::array<std::array<double, 3>, kNumClasses> kClassColors{{
    {185, 185, 180},  // impervious: light grey
    {70, 60, 150},    // building: blue-violet roofs
    {150, 205, 110},  // low vegetation: pale green
    {25, 95, 35},     // tree: dark green
    {235, 205, 30},   // car: yellow
    {165, 70, 55},    // clutter: brick red
}};

namespace detail {

inline void paint_rect(Raster& label, long y0, long x0, long h, long w, std::uint8_t cls) {
  const long y1 = std::min<long>(y0 + h, static_cast<long>(label.height));
  const long x1 = std::min<long>(x0 + w, static_cast<long>(label.width));
  for (long y = std::max(0L, y0); y < y1; ++y)
    for (long x = std::max(0L, x0); x < x1; ++x) label.at(y, x) = cls;
}

inline void paint_ellipse(Raster& label, double cy, double cx, double ry, double rx, std::uint8_t cls) {
  const long y0 = std::max(0L, static_cast<long>(cy - ry)), y1 = std::min<long>(label.height - 1, static_cast<long>(cy + ry));
  const long x0 = std::max(0L, static_cast<long>(cx - rx)), x1 = std::min<long>(label.width - 1, static_cast<long>(cx + rx));
  for (long y = y0; y <= y1; ++y)
    for (long x = x0; x <= x1; ++x) {
      const double dy = (y - cy) / ry, dx = (x - cx) / rx;
      if (dy * dy + dx * dx <= 1.0) label.at(y, x) = cls;
    }
}

inline Raster synth_label(std::size_t size, Rng& rng) {
  Raster label(size, size, 1, kClutter);
  const double s = static_cast<double>(size);
  const auto scaled = [s](double v) { return v * s / 512.0; };
  // elongated bands
  const int roads = static_cast<int>(rng.integer(2, 3));
  for (int i = 0; i < roads; ++i) {
    const long width = static_cast<long>(scaled(rng.uniform(28, 44)));
    const long pos = static_cast<long>(rng.uniform(0.1, 0.9) * s);
    if (rng.bernoulli(0.5)) {
      paint_rect(label, pos - width / 2, 0, width, static_cast<long>(size), kImpervious);
    } else {
      paint_rect(label, 0, pos - width / 2, static_cast<long>(size), width, kImpervious);
    }
  }
  // smooth blobs
  const int meadows = static_cast<int>(rng.integer(4, 6));
  for (int i = 0; i < meadows; ++i) {
    paint_ellipse(label, rng.uniform(0, s), rng.uniform(0, s), scaled(rng.uniform(35, 75)), scaled(rng.uniform(35, 75)),
                  kLowVegetation);
  }
  // textured blobs
  const int trees = static_cast<int>(rng.integer(6, 10));
  for (int i = 0; i < trees; ++i) {
    const double r = scaled(rng.uniform(16, 34));
    paint_ellipse(label, rng.uniform(0, s), rng.uniform(0, s), r, r, kTree);
  }
  // axis-aligned rectangles
  const int buildings = static_cast<int>(rng.integer(4, 7));
  for (int i = 0; i < buildings; ++i) {
    const long h = static_cast<long>(scaled(rng.uniform(40, 100)));
    const long w = static_cast<long>(scaled(rng.uniform(40, 100)));
    paint_rect(label, static_cast<long>(rng.uniform(0, s - h)), static_cast<long>(rng.uniform(0, s - w)), h, w, kBuilding);
  }
  // small rectangles
  const int cars = static_cast<int>(rng.integer(14, 22));
  for (int i = 0; i < cars; ++i) {
    long h = static_cast<long>(scaled(rng.uniform(14, 18)));
    long w = static_cast<long>(scaled(rng.uniform(28, 36)));
    if (rng.bernoulli(0.5)) std::swap(h, w);
    paint_rect(label, static_cast<long>(rng.uniform(0, s - h)), static_cast<long>(rng.uniform(0, s - w)), h, w, kCar);
  }
  return label;
}

inline Raster synth_image(const Raster& label, Rng& rng) {
  Raster image(label.height, label.width, 3);
  // per-tile illumination offset and a low-frequency shading field
  const double gain = rng.uniform(0.92, 1.08);
  const double fy = rng.uniform(0.01, 0.03), fx = rng.uniform(0.01, 0.03), phase = rng.uniform(0, 6.283);
  for (std::size_t y = 0; y < label.height; ++y)
    for (std::size_t x = 0; x < label.width; ++x) {
      const std::uint8_t cls = label.at(y, x);
      const double shade = 8.0 * std::sin(fy * static_cast<double>(y) + fx * static_cast<double>(x) + phase);
      double texture = 0;
      if (cls == kTree) texture = 22.0 * ((((x / 3) + (y / 3)) % 2) ? 1.0 : -1.0) * rng.uniform(0.5, 1.0);
      if (cls == kClutter) texture = rng.normal(0, 18);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = gain * kClassColors[cls][ch] + shade + texture + rng.normal(0, 10);
        image.at(y, x, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  return image;
}

}  // namespace detail

/// Per-class pixel counts of a label raster; index kNumClasses counts everything else.
inline std::array<std::size_t, kNumClasses + 1> class_histogram(const Raster& label) {
  std::array<std::size_t, kNumClasses + 1> h{};
  for (std::uint8_t v : label.data) ++h[v < kNumClasses ? v : kNumClasses];
  return h;
}

/// Deterministic synthetic tiles: bands (impervious), smooth blobs (low vegetation), textured
/// blobs (tree), rectangles (building), small rectangles (car); remaining pixels are clutter.
/// Every foreground class covers at least spec.min_coverage of each tile.
inline std::vector<Tile> synth_generate(std::uint64_t seed, std::size_t n_tiles, std::size_t tile_size,
                                        const ClassSpec& spec = {}) {
  if (tile_size < 32) throw ConfigError("synth_generate: tile size must be at least 32");
  std::vector<Tile> tiles;
  tiles.reserve(n_tiles);
  for (std::size_t t = 0; t < n_tiles; ++t) {
    bool ok = false;
    for (std::size_t attempt = 0; attempt < spec.max_retries && !ok; ++attempt) {
      Rng rng(seed * 1000003ULL + t * 4099ULL + attempt);
      Raster label = detail::synth_label(tile_size, rng);
      const auto hist = class_histogram(label);
      const double need = spec.min_coverage * static_cast<double>(label.pixels());
      ok = true;
      for (std::size_t c = 0; c < kClutter; ++c) ok = ok && static_cast<double>(hist[c]) >= need;
      if (!ok) continue;
      char name[32];
      std::snprintf(name, sizeof name, "tile_%03zu", t);
      Raster image = detail::synth_image(label, rng);
      tiles.push_back(Tile{name, std::move(image), std::move(label)});
    }
    if (!ok) {
      throw ConfigError("synth_generate: tile " + std::to_string(t) + " could not reach " +
                        std::to_string(spec.min_coverage * 100) + "% coverage for every foreground class after " +
                        std::to_string(spec.max_retries) + " attempts");
    }
  }
  return tiles;
}

// ---------------------------------------------------------------------------------------------
// Sampling and augmentation

/// Window origins (y, x) of an S-sized window with stride s, plus edge-aligned windows so the
/// tile is covered completely. Row-major, no duplicates.
inline std::vector<std::pair<std::size_t, std::size_t>> sliding_window(std::size_t height, std::size_t width,
                                                                       std::size_t patch, std::size_t stride) {
  if (patch == 0 || stride == 0) throw ConfigError("sliding_window: patch and stride must be positive");
  if (patch > height || patch > width) {
    throw ConfigError("sliding_window: patch " + std::to_string(patch) + " exceeds tile extent " + std::to_string(height) +
                      "x" + std::to_string(width));
  }
  const auto axis = [patch, stride](std::size_t extent) {
    std::vector<std::size_t> o;
    for (std::size_t v = 0; v + patch <= extent; v += stride) o.push_back(v);
    if (o.back() + patch < extent) o.push_back(extent - patch);
    return o;
  };
  const auto ys = axis(height), xs = axis(width);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(ys.size() * xs.size());
  for (std::size_t y : ys)
    for (std::size_t x : xs) out.emplace_back(y, x);
  return out;
}

inline Raster crop(const Raster& r, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > r.height || x0 + w > r.width) throw ShapeError("crop: window exceeds raster extent");
  Raster out(h, w, r.channels);
  for (std::size_t y = 0; y < h; ++y) {
    const auto* src = r.data.data() + ((y0 + y) * r.width + x0) * r.channels;
    std::copy(src, src + w * r.channels, out.data.data() + y * w * r.channels);
  }
  return out;
}

inline Sample extract_patch(const Tile& tile, std::size_t y, std::size_t x, std::size_t patch) {
  return Sample{crop(tile.image, y, x, patch, patch), crop(tile.label, y, x, patch, patch)};
}

/// Patches of every tile at the given stride, tiles in order, windows row-major.
inline std::vector<Sample> extract_patches(const std::vector<Tile>& tiles, std::size_t patch, std::size_t stride) {
  std::vector<Sample> out;
  for (const auto& t : tiles)
    for (auto [y, x] : sliding_window(t.image.height, t.image.width, patch, stride)) out.push_back(extract_patch(t, y, x, patch));
  return out;
}

/// Rotates counter-clockwise by quarter_turns * 90 degrees. Square rasters only.
inline Raster rotate90(const Raster& r, int quarter_turns) {
  if (r.height != r.width) throw ShapeError("rotate90: raster must be square");
  const std::size_t n = r.height;
  Raster out = r;
  for (int t = 0; t < ((quarter_turns % 4) + 4) % 4; ++t) {
    Raster next(n, n, r.channels);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        for (std::size_t c = 0; c < r.channels; ++c) next.at(n - 1 - x, y, c) = out.at(y, x, c);
    out = std::move(next);
  }
  return out;
}

inline Raster flip(const Raster& r, bool horizontal) {
  Raster out(r.height, r.width, r.channels);
  for (std::size_t y = 0; y < r.height; ++y)
    for (std::size_t x = 0; x < r.width; ++x)
      for (std::size_t c = 0; c < r.channels; ++c) {
        const std::size_t sy = horizontal ? y : r.height - 1 - y;
        const std::size_t sx = horizontal ? r.width - 1 - x : x;
        out.at(y, x, c) = r.at(sy, sx, c);
      }
  return out;
}

struct AugmentOp {
  int quarter_turns = 0;
  bool flip_h = false;
  bool flip_v = false;
};

inline AugmentOp draw_augment(Rng& rng) {
  AugmentOp op;
  op.quarter_turns = static_cast<int>(rng.integer(0, 3));
  op.flip_h = rng.bernoulli(0.5);
  op.flip_v = rng.bernoulli(0.5);
  return op;
}

inline Sample apply_augment(const Sample& s, const AugmentOp& op) {
  if (s.image.height != s.image.width) throw ShapeError("augment: sample must be square");
  if (s.label.height != s.image.height || s.label.width != s.image.width) {
    throw ShapeError("augment: image and label extents differ");
  }
  Sample out{rotate90(s.image, op.quarter_turns), rotate90(s.label, op.quarter_turns)};
  if (op.flip_h) out = {flip(out.image, true), flip(out.label, true)};
  if (op.flip_v) out = {flip(out.image, false), flip(out.label, false)};
  return out;
}

/// Uniform quarter-turn rotation, then horizontal and vertical flips each with probability 0.5.
inline Sample augment(const Sample& s, Rng& rng) { return apply_augment(s, draw_augment(rng)); }

// ---------------------------------------------------------------------------------------------
// Batching

/// Maps 8-bit intensities to roughly zero-mean unit-range inputs.
template <class T>
T normalize_intensity(std::uint8_t v) {
  return static_cast<T>((static_cast<double>(v) - 127.5) / 64.0);
}

/// Stacks image rasters into [B,3,H,W].
template <class T>
Tensor<T> image_batch(const std::vector<const Raster*>& images) {
  if (images.empty()) throw ShapeError("image_batch: empty batch");
  const std::size_t h = images[0]->height, w = images[0]->width;
  Tensor<T> out({images.size(), 3, h, w});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Raster& r = *images[b];
    if (r.height != h || r.width != w || r.channels != 3) throw ShapeError("image_batch: inconsistent raster extents");
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < h * w; ++i) out[(b * 3 + c) * h * w + i] = normalize_intensity<T>(r.data[i * 3 + c]);
  }
  return out;
}

inline std::vector<std::uint8_t> label_batch(const std::vector<const Raster*>& labels) {
  std::vector<std::uint8_t> out;
  for (const Raster* r : labels) out.insert(out.end(), r->data.begin(), r->data.end());
  return out;
}

/// Display palette: impervious white, building blue, low vegetation cyan, tree green, car
/// yellow, clutter red; void and unknown indices black.
inline constexpr std::array<std::array<std::uint8_t, 3>, kNumClasses> kDisplayColors{{
    {255, 255, 255}, {0, 0, 255}, {0, 255, 255}, {0, 255, 0}, {255, 255, 0}, {255, 0, 0}}};

inline Raster colorize(const Raster& label) {
  Raster out(label.height, label.width, 3);
  for (std::size_t i = 0; i < label.pixels(); ++i) {
    const std::uint8_t c = label.data[i];
    for (std::size_t ch = 0; ch < 3; ++ch) out.data[i * 3 + ch] = c < kNumClasses ? kDisplayColors[c][ch] : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Manifest

struct TileRecord {
  std::string name;
  std::string image_path;  // relative to the manifest directory
  std::string label_path;
  std::size_t height = 0, width = 0;
  std::string split;  // "train" or "test"

  friend bool operator==(const TileRecord&, const TileRecord&) = default;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::size_t patch = 256;
  std::size_t train_stride = 256;
  std::size_t test_stride = 128;
  std::vector<TileRecord> tiles;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;

  void validate() const {
    if (train_stride == 0 || test_stride == 0) throw ConfigError("manifest: strides must be at least 1");
    for (const auto& t : tiles) {
      if (patch == 0 || patch > std::min(t.height, t.width)) {
        throw ConfigError("manifest: patch " + std::to_string(patch) + " does not fit tile " + t.name);
      }
      if (t.split != "train" && t.split != "test") throw ConfigError("manifest: tile " + t.name + " has unknown split '" + t.split + "'");
    }
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "# kanseg dataset manifest\n";
    os << "seed = " << seed << "\npatch = " << patch << "\ntrain_stride = " << train_stride
       << "\ntest_stride = " << test_stride << "\n";
    os << "# tile = name height width split image label\n";
    for (const auto& t : tiles) {
      os << "tile = " << t.name << " " << t.height << " " << t.width << " " << t.split << " " << t.image_path << " "
         << t.label_path << "\n";
    }
    return os.str();
  }

  static DatasetManifest parse(const std::string& text) {
    DatasetManifest m;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string body = detail::trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      const std::string where = "manifest:" + std::to_string(line_no);
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
      const std::string key = detail::trim(std::string_view(body).substr(0, eq));
      const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
      if (key == "seed") {
        m.seed = detail::parse_number<std::uint64_t>(where, value);
      } else if (key == "patch") {
        m.patch = detail::parse_number<std::size_t>(where, value);
      } else if (key == "train_stride") {
        m.train_stride = detail::parse_number<std::size_t>(where, value);
      } else if (key == "test_stride") {
        m.test_stride = detail::parse_number<std::size_t>(where, value);
      } else if (key == "tile") {
        std::istringstream fs(value);
        TileRecord t;
        if (!(fs >> t.name >> t.height >> t.width >> t.split >> t.image_path >> t.label_path)) {
          throw ConfigError(where + ": tile record needs name height width split image label");
        }
        m.tiles.push_back(t);
      } else {
        throw ConfigError(where + ": unknown key '" + key + "'");
      }
    }
    m.validate();
    return m;
  }

  static DatasetManifest load(const std::filesystem::path& path) { return parse(io::read_text(path)); }
  void save(const std::filesystem::path& path) const { io::write_text(path, to_text()); }
};

/// Writes tiles as PPM/PGM pairs plus manifest.txt into `dir`.
inline DatasetManifest write_dataset(const std::filesystem::path& dir, const std::vector<Tile>& tiles,
                                     const DataConfig& data, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.seed = seed;
  m.patch = data.patch;
  m.train_stride = data.train_stride;
  m.test_stride = data.test_stride;
  const std::size_t n_test = std::min(data.test_tiles, tiles.size());
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const Tile& t = tiles[i];
    TileRecord r{t.name, t.name + ".ppm", t.name + "_label.pgm", t.image.height, t.image.width,
                 i + n_test >= tiles.size() ? "test" : "train"};
    write_ppm(dir / r.image_path, t.image);
    write_pgm(dir / r.label_path, t.label);
    m.tiles.push_back(r);
  }
  m.validate();
  m.save(dir / "manifest.txt");
  return m;
}

/// Loads the tiles of one split ("train", "test" or "all") listed in `dir`/manifest.txt.
inline std::vector<Tile> load_tiles(const std::filesystem::path& dir, const DatasetManifest& m, const std::string& split) {
  std::vector<Tile> out;
  for (const auto& r : m.tiles) {
    if (split != "all" && r.split != split) continue;
    Tile t{r.name, read_ppm(dir / r.image_path), read_pgm(dir / r.label_path)};
    if (t.image.height != r.height || t.image.width != r.width || t.label.height != r.height || t.label.width != r.width) {
      throw IoError("tile " + r.name + ": raster extents disagree with the manifest");
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace kanseg
