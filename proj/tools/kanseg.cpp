// kanseg: dataset synthesis, training, evaluation, prediction, gradient checks and ablations.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "kanseg/checkpoint.hpp"
#include "kanseg/config.hpp"
#include "kanseg/dataset.hpp"
#include "kanseg/gradcheck.hpp"
#include "kanseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace kanseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

constexpr const char* kColorLegend =
    "# colors: impervious=white building=blue low_veg=cyan tree=green car=yellow clutter=red\n";

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string variant;
  std::optional<std::size_t> stride;
  std::optional<std::size_t> patch;
  std::string data;
  std::string checkpoint;
  std::string split = "test";
  std::optional<std::size_t> tiles;
  std::optional<std::size_t> size;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.variant.empty()) cfg.model = cfg.model.with_variant(parse_variant(c.variant));
  cfg.validate();
  return cfg;
}

struct LoadedData {
  DatasetManifest manifest;
  std::vector<Tile> train, test;
};

LoadedData load_data(const std::string& dir) {
  LoadedData d;
  d.manifest = DatasetManifest::load(fs::path(dir) / "manifest.txt");
  d.train = load_tiles(dir, d.manifest, "train");
  d.test = load_tiles(dir, d.manifest, "test");
  return d;
}

void write_file(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  io::write_text(path, text);
}

int cmd_synth(const Common& c) {
  RunConfig cfg = resolve_config(c);
  if (c.tiles) cfg.data.tiles = *c.tiles;
  if (c.size) cfg.data.tile_size = *c.size;
  if (c.patch) cfg.data.patch = *c.patch;
  if (c.stride) cfg.data.test_stride = *c.stride;
  if (cfg.data.test_tiles >= cfg.data.tiles) cfg.data.test_tiles = cfg.data.tiles / 4;
  cfg.data.validate();
  const auto tiles = synth_generate(cfg.seed, cfg.data.tiles, cfg.data.tile_size, ClassSpec{cfg.data.min_coverage});
  const DatasetManifest m = write_dataset(c.out, tiles, cfg.data, cfg.seed);
  std::size_t n_test = 0;
  for (const auto& t : m.tiles) n_test += t.split == "test" ? 1 : 0;
  std::cout << "wrote " << m.tiles.size() << " tiles (" << m.tiles.size() - n_test << " train, " << n_test << " test) to "
            << c.out << "\n";
  return kExitOk;
}

int cmd_train(const Common& c) {
  RunConfig cfg = resolve_config(c);
  const LoadedData d = load_data(c.data);
  cfg.data.patch = c.patch.value_or(d.manifest.patch);
  cfg.data.train_stride = c.stride.value_or(d.manifest.train_stride);
  cfg.data.test_stride = d.manifest.test_stride;
  cfg.validate();
  if (d.train.empty()) throw ConfigError("dataset has no training tiles");
  const auto samples = extract_patches(d.train, cfg.data.patch, cfg.data.train_stride);
  fs::create_directories(c.out);
  std::ofstream log(fs::path(c.out) / "train.log", std::ios::trunc);
  std::ofstream timing(fs::path(c.out) / "timing.log", std::ios::trunc);
  std::cout << "variant " << variant_name(cfg.model.variant()) << ", " << samples.size() << " training patches, "
            << d.test.size() << " held-out tiles\n";
  Model<float> model(cfg.model, cfg.seed);
  std::cout << "trainable parameters " << model.parameter_count() << "\n";
  struct Tee : std::streambuf {
    std::streambuf *a, *b;
    Tee(std::streambuf* x, std::streambuf* y) : a(x), b(y) {}
    int overflow(int ch) override {
      if (traits_type::eq_int_type(ch, traits_type::eof())) return traits_type::not_eof(ch);
      a->sputc(static_cast<char>(ch));
      b->sputc(static_cast<char>(ch));
      return ch;
    }
    int sync() override { return a->pubsync() | b->pubsync(); }
  } tee(log.rdbuf(), std::cout.rdbuf());
  std::ostream log_and_console(&tee);
  const TrainResult r = train_loop(model, samples, d.test, cfg, TrainOptions{c.out, &log_and_console, &timing});
  if (r.best_epoch > 0) std::cout << "best test mIoU " << r.best_miou << " at epoch " << r.best_epoch << "\n";
  std::cout << "checkpoints in " << c.out << "\n";
  return kExitOk;
}

struct Evaluated {
  RunConfig cfg;
  std::vector<Tile> tiles;
  TileEvaluation ev;
  std::size_t patch = 0, stride = 0;
};

Evaluated run_eval(const Common& c) {
  Evaluated e;
  Model<float> model = load_checkpoint<float>(c.checkpoint, &e.cfg);
  const DatasetManifest m = DatasetManifest::load(fs::path(c.data) / "manifest.txt");
  e.tiles = load_tiles(c.data, m, c.split);
  if (e.tiles.empty()) throw ConfigError("no tiles in split '" + c.split + "'");
  e.patch = c.patch.value_or(m.patch);
  e.stride = c.stride.value_or(m.test_stride);
  e.ev = evaluate_tiles(model, e.tiles, e.patch, e.stride, e.cfg.train.batch);
  return e;
}

std::string eval_report(const Evaluated& e) {
  std::ostringstream os;
  os << "# kanseg evaluation: split tiles " << e.tiles.size() << ", patch " << e.patch << ", stride " << e.stride << "\n";
  os << kColorLegend;
  const auto fg = foreground_classes(e.ev.cm.classes(), e.ev.cm.classes() - 1);
  os << format_report(e.ev.cm, kClassNames, fg);
  return os.str();
}

int cmd_eval(const Common& c) {
  const Evaluated e = run_eval(c);
  const std::string report = eval_report(e);
  std::cout << report;
  if (!c.out.empty()) write_file(fs::path(c.out) / "report.txt", report);
  return kExitOk;
}

int cmd_predict(const Common& c) {
  const Evaluated e = run_eval(c);
  fs::create_directories(c.out);
  for (std::size_t i = 0; i < e.tiles.size(); ++i) {
    write_pgm(fs::path(c.out) / (e.tiles[i].name + "_pred.pgm"), e.ev.predictions[i]);
    write_ppm(fs::path(c.out) / (e.tiles[i].name + "_pred.ppm"), colorize(e.ev.predictions[i]));
  }
  const std::string report = eval_report(e);
  write_file(fs::path(c.out) / "report.txt", report);
  std::cout << "wrote " << e.tiles.size() << " prediction rasters to " << c.out << "\n" << report;
  return kExitOk;
}

int cmd_gradcheck(const Common& c) {
  const auto reports = gradcheck_suite(c.seed.value_or(1));
  const std::string table = format_gradcheck(reports);
  std::cout << table;
  if (!c.out.empty()) write_file(fs::path(c.out) / "gradcheck.txt", table);
  for (const auto& r : reports) {
    if (!r.passed()) {
      std::cerr << "gradcheck: " << r.name << " exceeds its threshold (worst coordinate " << r.worst << ")\n";
      return kExitRuntime;
    }
  }
  return kExitOk;
}

int cmd_ablate(const Common& c) {
  RunConfig cfg = resolve_config(c);
  const LoadedData d = load_data(c.data);
  cfg.data.patch = c.patch.value_or(d.manifest.patch);
  cfg.data.train_stride = d.manifest.train_stride;
  cfg.data.test_stride = c.stride.value_or(d.manifest.test_stride);
  cfg.validate();
  if (d.test.empty()) throw ConfigError("ablation needs held-out tiles");
  const auto samples = extract_patches(d.train, cfg.data.patch, cfg.data.train_stride);
  const auto rows = run_ablation<float>(samples, d.test, cfg, &std::cerr);
  const std::string table = format_ablation(rows);
  std::cout << table;
  if (!c.out.empty()) write_file(fs::path(c.out) / "ablation.txt", table);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kanseg: KAN-based semantic segmentation toolkit"};
  app.require_subcommand(1);
  Common c;

  const auto add_config = [&](CLI::App* s) {
    s->add_option("--config", c.config, "configuration file (key = value lines)")->check(CLI::ExistingFile);
    s->add_option("--seed", c.seed, "random seed (overrides the config)");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate synthetic tiles and a manifest");
  add_config(synth);
  synth->add_option("--out", c.out, "output directory")->required();
  synth->add_option("--tiles", c.tiles, "number of tiles");
  synth->add_option("--size", c.size, "tile edge length in pixels");
  synth->add_option("--patch", c.patch, "patch size recorded in the manifest");
  synth->add_option("--stride", c.stride, "test stride recorded in the manifest");

  CLI::App* train = app.add_subcommand("train", "train a model on a synthesized dataset");
  add_config(train);
  train->add_option("--data", c.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", c.out, "run directory for logs and checkpoints")->required();
  train->add_option("--variant", c.variant, "baseline | deepkan | glkan | full");
  train->add_option("--patch", c.patch, "training patch size");
  train->add_option("--stride", c.stride, "training window stride");

  CLI::App* eval = app.add_subcommand("eval", "sliding-window evaluation of a checkpoint");
  CLI::App* predict = app.add_subcommand("predict", "write stitched class maps for each tile");
  for (CLI::App* s : {eval, predict}) {
    s->add_option("--checkpoint", c.checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
    s->add_option("--data", c.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    s->add_option("--split", c.split, "train | test | all")->check(CLI::IsMember({"train", "test", "all"}));
    s->add_option("--stride", c.stride, "window stride (default: manifest test stride)");
    s->add_option("--patch", c.patch, "window size (default: manifest patch)");
  }
  eval->add_option("--out", c.out, "directory for report.txt");
  predict->add_option("--out", c.out, "output directory")->required();

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks per layer family");
  gradcheck->add_option("--seed", c.seed, "random seed");
  gradcheck->add_option("--out", c.out, "directory for gradcheck.txt");

  CLI::App* ablate = app.add_subcommand("ablate", "train and evaluate the four ablation variants");
  add_config(ablate);
  ablate->add_option("--data", c.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--out", c.out, "directory for ablation.txt");
  ablate->add_option("--patch", c.patch, "patch size");
  ablate->add_option("--stride", c.stride, "evaluation stride");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(c);
    if (train->parsed()) return cmd_train(c);
    if (eval->parsed()) return cmd_eval(c);
    if (predict->parsed()) return cmd_predict(c);
    if (gradcheck->parsed()) return cmd_gradcheck(c);
    if (ablate->parsed()) return cmd_ablate(c);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
