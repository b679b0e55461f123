#pragma once

// Checkpoint = JSON manifest + binary blob of little-endian float32 values.
//
//   model.json  {"format": "indiformer-checkpoint", "version": 1,
//                "config": {...}, "blob": "model.bin",
//                "parameters": [{"name", "shape", "dtype": "float32", "offset"}]}
//   model.bin   parameters back to back, offsets in bytes

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "indiformer/separator.hpp"

namespace indiformer {

inline constexpr const char* kCheckpointFormat = "indiformer-checkpoint";

inline nlohmann::json to_json(const SeparatorConfig& c) {
  return {{"n_src", c.n_src},
          {"chunk_size", c.chunk_size},
          {"hop_size", c.hop_size},
          {"n_repeat", c.n_repeat},
          {"n_head", c.n_head},
          {"dropout", c.dropout},
          {"enc_num_filters", c.encoder.num_filters},
          {"enc_kernel_size", c.encoder.kernel_len},
          {"enc_stride", c.encoder.stride},
          {"local_kernel", c.local_kernel},
          {"global_stride", c.global_stride},
          {"coupling_depth", c.coupling_depth},
          {"mask_kernel", c.mask_kernel},
          {"decoupling_enabled", c.decoupling_enabled}};
}

/// Missing keys keep their defaults; unknown keys are ignored.
inline SeparatorConfig separator_config_from_json(const nlohmann::json& j,
                                                  SeparatorConfig c = {}) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_src", c.n_src);
  get("chunk_size", c.chunk_size);
  get("hop_size", c.hop_size);
  get("n_repeat", c.n_repeat);
  get("n_head", c.n_head);
  get("dropout", c.dropout);
  get("enc_num_filters", c.encoder.num_filters);
  get("enc_kernel_size", c.encoder.kernel_len);
  get("enc_stride", c.encoder.stride);
  get("local_kernel", c.local_kernel);
  get("global_stride", c.global_stride);
  get("coupling_depth", c.coupling_depth);
  get("mask_kernel", c.mask_kernel);
  get("decoupling_enabled", c.decoupling_enabled);
  return c;
}

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

template <typename T>
void save_checkpoint(SeparatorModel<T>& model, const std::filesystem::path& manifest_path) {
  const auto blob_path = blob_path_for(manifest_path);
  nlohmann::json manifest{{"format", kCheckpointFormat},
                          {"version", 1},
                          {"config", to_json(model.config())},
                          {"blob", blob_path.filename().string()},
                          {"parameters", nlohmann::json::array()}};
  std::string blob;
  for (const auto* p : model.parameters()) {
    manifest["parameters"].push_back({{"name", p->name()},
                                      {"shape", p->shape()},
                                      {"dtype", "float32"},
                                      {"offset", blob.size()}});
    for (T v : p->tensor().values()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int i = 0; i < 4; ++i) blob.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
  }
  if (manifest_path.has_parent_path()) {
    std::filesystem::create_directories(manifest_path.parent_path());
  }
  std::ofstream bf(blob_path, std::ios::binary | std::ios::trunc);
  bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  std::ofstream mf(manifest_path, std::ios::trunc);
  mf << manifest.dump(2) << '\n';
  if (!bf || !mf) throw IoError("failed writing checkpoint " + manifest_path.string());
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& manifest_path) {
  if (!std::filesystem::exists(manifest_path)) {
    throw FileNotFound("no such checkpoint: " + manifest_path.string());
  }
  std::ifstream f(manifest_path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError("checkpoint manifest " + manifest_path.string() +
                        " is not valid JSON: " + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat ||
      !j.contains("parameters") || !j.contains("config") || !j.contains("blob")) {
    throw ManifestError("checkpoint manifest " + manifest_path.string() +
                        " is missing format, config, blob or parameters");
  }
  return j;
}

/// Loads parameter values into an already configured model. Every manifest
/// entry must match the model's parameter list by name, shape and dtype.
template <typename T>
void load_parameters(SeparatorModel<T>& model, const std::filesystem::path& manifest_path) {
  const nlohmann::json j = read_checkpoint_manifest(manifest_path);
  const auto blob_path = manifest_path.parent_path() / j.at("blob").get<std::string>();
  if (!std::filesystem::exists(blob_path)) {
    throw ManifestError("checkpoint blob " + blob_path.string() + " is missing");
  }
  std::ifstream bf(blob_path, std::ios::binary);
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bf)),
                                  std::istreambuf_iterator<char>());

  auto params = model.parameters();
  const auto& entries = j.at("parameters");
  if (!entries.is_array() || entries.size() != params.size()) {
    throw ManifestError("checkpoint lists " + std::to_string(entries.size()) +
                        " parameters, architecture has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    auto* p = params[i];
    try {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto dtype = e.at("dtype").get<std::string>();
      const auto offset = e.at("offset").get<std::size_t>();
      if (name != p->name()) {
        throw ManifestError("checkpoint entry " + std::to_string(i) + " is '" + name +
                            "', architecture expects '" + p->name() + "'");
      }
      if (shape != p->shape()) {
        throw ManifestError("parameter '" + name + "' has shape " + shape_string(shape) +
                            " in checkpoint, architecture expects " +
                            shape_string(p->shape()));
      }
      if (dtype != "float32") {
        throw ManifestError("parameter '" + name + "' has unsupported dtype " + dtype);
      }
      const std::size_t count = shape_numel(shape);
      if (offset + 4 * count > blob.size()) {
        throw ManifestError("parameter '" + name + "' extends past the end of the blob");
      }
      auto& values = p->tensor();
      for (std::size_t k = 0; k < count; ++k) {
        const unsigned char* b = blob.data() + offset + 4 * k;
        const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                                   (static_cast<std::uint32_t>(b[1]) << 8) |
                                   (static_cast<std::uint32_t>(b[2]) << 16) |
                                   (static_cast<std::uint32_t>(b[3]) << 24);
        values[k] = static_cast<T>(std::bit_cast<float>(bits));
      }
      values.check_finite("checkpoint parameter " + name);
    } catch (const nlohmann::json::exception& ex) {
      throw ManifestError("malformed checkpoint entry " + std::to_string(i) + ": " + ex.what());
    }
  }
}

/// Rebuilds the architecture recorded in the manifest and loads its weights.
template <typename T>
SeparatorModel<T> load_checkpoint(const std::filesystem::path& manifest_path) {
  const nlohmann::json j = read_checkpoint_manifest(manifest_path);
  SeparatorConfig cfg;
  try {
    cfg = separator_config_from_json(j.at("config"));
  } catch (const nlohmann::json::exception& ex) {
    throw ManifestError("malformed checkpoint config: " + std::string(ex.what()));
  }
  SeparatorModel<T> model(cfg, 0);
  load_parameters(model, manifest_path);
  return model;
}

}  // namespace indiformer
