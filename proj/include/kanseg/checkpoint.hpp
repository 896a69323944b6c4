#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kanseg/config.hpp"
#include "kanseg/model.hpp"
#include "kanseg/serialize.hpp"

namespace kanseg {

/// A checkpoint directory holds manifest.txt (the run configuration, preceded by '#' comment
/// lines for bookkeeping) and params.bin (every named parameter and buffer of the model).
inline constexpr const char* kManifestFile = "manifest.txt";
inline constexpr const char* kParamsFile = "params.bin";

template <class T>
std::vector<io::Record<T>> parameter_records(const ParamList<T>& params) {
  std::vector<io::Record<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.param->value});
  return out;
}

/// Copies records into the matching named parameters. The name sets must be identical.
template <class T>
void assign_parameters(const ParamList<T>& params, const std::vector<io::Record<T>>& records) {
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& r : records) {
    if (!by_name.emplace(r.name, &r.tensor).second) throw IoError("checkpoint: duplicate record " + r.name);
  }
  if (by_name.size() != params.size()) {
    throw IoError("checkpoint: holds " + std::to_string(by_name.size()) + " tensors but the model has " +
                  std::to_string(params.size()));
  }
  for (const auto& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw IoError("checkpoint: missing tensor " + p.name);
    if (it->second->shape() != p.param->value.shape()) {
      throw IoError("checkpoint: tensor " + p.name + " has shape " + to_string(it->second->shape()) + ", model expects " +
                    to_string(p.param->value.shape()));
    }
    p.param->value = *it->second;
  }
}

template <class T>
void save_checkpoint(const std::filesystem::path& dir, Model<T>& model, const RunConfig& cfg,
                     const std::vector<std::string>& notes = {}) {
  std::filesystem::create_directories(dir);
  RunConfig c = cfg;
  c.model = model.cfg;
  std::string manifest = "# kanseg checkpoint\n";
  for (const auto& n : notes) manifest += "# " + n + "\n";
  manifest += to_text(c);
  io::write_text(dir / kManifestFile, manifest);
  io::save_records(dir / kParamsFile, parameter_records(model.parameters()));
}

inline RunConfig load_checkpoint_config(const std::filesystem::path& dir) {
  return parse_config(io::read_text(dir / kManifestFile), RunConfig{}, (dir / kManifestFile).string());
}

/// Rebuilds the model described by the manifest and restores its tensors.
template <class T>
Model<T> load_checkpoint(const std::filesystem::path& dir, RunConfig* config_out = nullptr) {
  const RunConfig cfg = load_checkpoint_config(dir);
  Model<T> model(cfg.model, cfg.seed);
  assign_parameters(model.parameters(), io::load_records<T>(dir / kParamsFile));
  if (config_out) *config_out = cfg;
  return model;
}

}  // namespace kanseg
