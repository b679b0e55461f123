#pragma once

// Run configuration shared by every command. On disk it is one flat JSON
// object; missing keys keep their defaults and unknown keys are rejected so
// typos do not silently fall back to defaults.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "indiformer/errors.hpp"
#include "indiformer/separator.hpp"
#include "indiformer/training.hpp"

namespace indiformer {

struct RunConfig {
  // model
  std::size_t n_src = 2;
  std::size_t chunk_size = 100;
  std::size_t hop_size = 50;
  std::size_t n_repeat = 6;
  std::size_t n_head = 4;
  double dropout = 0.1;
  std::size_t enc_num_filters = 128;
  std::size_t enc_kernel_size = 16;
  std::size_t enc_stride = 8;
  std::size_t local_kernel = 3;
  std::size_t global_stride = 2;
  std::size_t coupling_depth = 2;
  std::size_t mask_kernel = 3;
  bool decoupling_enabled = true;

  // training
  double lr = 1e-3;
  double lr_reduced = 1e-4;
  std::size_t epochs = 30;
  std::size_t patience = 5;
  std::size_t batch_size = 4;
  double nll_weight = 0.0;
  double grad_clip = 5.0;
  std::size_t max_steps = 0;
  bool record_wall_time = true;

  // data and run
  int sample_rate = 8000;
  std::size_t num_mixtures = 256;
  double recording_seconds = 6.0;
  std::uint64_t seed = 0;
  int precision = 64;
  std::string data_dir = "data";
  std::string out_dir = "run";

  bool operator==(const RunConfig&) const = default;

  SeparatorConfig model() const {
    SeparatorConfig m;
    m.n_src = n_src;
    m.chunk_size = chunk_size;
    m.hop_size = hop_size;
    m.n_repeat = n_repeat;
    m.n_head = n_head;
    m.dropout = dropout;
    m.encoder = {enc_num_filters, enc_kernel_size, enc_stride};
    m.local_kernel = local_kernel;
    m.global_stride = global_stride;
    m.coupling_depth = coupling_depth;
    m.mask_kernel = mask_kernel;
    m.decoupling_enabled = decoupling_enabled;
    return m;
  }

  TrainConfig training() const {
    TrainConfig t;
    t.epochs = epochs;
    t.lr_initial = lr;
    t.lr_reduced = lr_reduced;
    t.patience = patience;
    t.batch_size = batch_size;
    t.seed = seed;
    t.nll_weight = nll_weight;
    t.grad_clip = grad_clip;
    t.max_steps = max_steps;
    t.record_wall_time = record_wall_time;
    return t;
  }

  void validate() const {
    if (precision != 32 && precision != 64) {
      throw ConfigError("precision must be 32 or 64, got " + std::to_string(precision));
    }
    if (sample_rate <= 0) throw ConfigError("sample_rate must be positive");
    if (!(recording_seconds >= 2.0)) {
      throw ConfigError("recording_seconds must be at least 2 (one segment)");
    }
    model().validate();
    training().validate();
  }
};

// Visits every persisted field as (key, member reference).
template <typename Config, typename F>
void for_each_field(Config& c, F&& f) {
  f("n_src", c.n_src);
  f("chunk_size", c.chunk_size);
  f("hop_size", c.hop_size);
  f("n_repeat", c.n_repeat);
  f("n_head", c.n_head);
  f("dropout", c.dropout);
  f("enc_num_filters", c.enc_num_filters);
  f("enc_kernel_size", c.enc_kernel_size);
  f("enc_stride", c.enc_stride);
  f("local_kernel", c.local_kernel);
  f("global_stride", c.global_stride);
  f("coupling_depth", c.coupling_depth);
  f("mask_kernel", c.mask_kernel);
  f("decoupling_enabled", c.decoupling_enabled);
  f("lr", c.lr);
  f("lr_reduced", c.lr_reduced);
  f("epochs", c.epochs);
  f("patience", c.patience);
  f("batch_size", c.batch_size);
  f("nll_weight", c.nll_weight);
  f("grad_clip", c.grad_clip);
  f("max_steps", c.max_steps);
  f("record_wall_time", c.record_wall_time);
  f("sample_rate", c.sample_rate);
  f("num_mixtures", c.num_mixtures);
  f("recording_seconds", c.recording_seconds);
  f("seed", c.seed);
  f("precision", c.precision);
  f("data_dir", c.data_dir);
  f("out_dir", c.out_dir);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json::object();
  for_each_field(c, [&](const char* key, const auto& v) { j[key] = v; });
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig cfg;
  std::set<std::string> known;
  for_each_field(cfg, [&](const char* key, auto& v) {
    known.insert(key);
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(v);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad value for config key '") + key + "': " + e.what());
    }
  });
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileNotFound("no such config: " + path.string());
  std::ifstream f(path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

inline void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write config " + path.string());
  f << nlohmann::json(cfg).dump(2) << '\n';
}

}  // namespace indiformer
