#pragma once

// In-process implementations of the command-line entry points. Each command
// throws on failure; the executable maps exceptions to a non-zero exit.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "indiformer/checkpoint.hpp"
#include "indiformer/config.hpp"
#include "indiformer/grad_check.hpp"
#include "indiformer/metrics.hpp"
#include "indiformer/separator.hpp"
#include "indiformer/signal_io.hpp"
#include "indiformer/training.hpp"

namespace indiformer {

namespace fs = std::filesystem;

inline constexpr const char* kSplitNames[] = {"train", "val", "test"};

// ---------------------------------------------------------------------------
// synth

struct SynthSummary {
  std::size_t train = 0, val = 0, test = 0;
};

namespace synth_detail {

// Randomized per-recording parameters for one class, kept below 0.45 * sr.
inline SourceParams random_params(SourceKind kind, int sample_rate, Rng& rng) {
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<>(lo, hi)(rng); };
  const double top = 0.45 * sample_rate;
  SourceParams p;
  p.phase = uni(0.0, 2.0 * std::numbers::pi);
  switch (kind) {
    case SourceKind::tone:
      p.freq = std::min(uni(200.0, 1500.0), top);
      break;
    case SourceKind::chirp:
      p.freq = std::min(uni(100.0, 800.0), top);
      p.freq_end = std::min(uni(1000.0, 3000.0), top);
      break;
    case SourceKind::am_tone:
      p.freq = std::min(uni(300.0, 900.0), top);
      p.mod_rate = uni(1.0, 8.0);
      p.mod_depth = uni(0.3, 0.9);
      break;
    case SourceKind::band_noise:
      p.band_low = std::min(uni(200.0, 1000.0), top / 2);
      p.band_high = std::min(p.band_low + uni(300.0, 1500.0), top);
      break;
  }
  return p;
}

struct Mixed {
  std::string stem;
  MixturePair pair;
};

}  // namespace synth_detail

/// Labeled synthetic recordings, cut into 2 s segments and mixed pairwise
/// across classes, then split 7:2:1. Layout under data_dir:
///   {train,val,test}.json              manifests (paths relative to data_dir)
///   <split>/mix/<stem>.wav             mixtures
///   <split>/ref/<stem>_src<i>.wav      ground-truth sources
///   <split>/ref/labels.json            {stem: [label per source]}
inline SynthSummary cmd_synth(const RunConfig& cfg, std::ostream& log = std::cout) {
  cfg.validate();
  if (cfg.n_src != 2) throw ConfigError("synth builds pairwise mixtures; n_src must be 2");
  if (cfg.num_mixtures < 10) throw ConfigError("num_mixtures must be at least 10");
  const std::vector<SourceKind> kinds{SourceKind::tone, SourceKind::chirp, SourceKind::am_tone,
                                      SourceKind::band_noise};
  std::vector<std::pair<std::size_t, std::size_t>> class_pairs;
  for (std::size_t a = 0; a < kinds.size(); ++a) {
    for (std::size_t b = a + 1; b < kinds.size(); ++b) class_pairs.emplace_back(a, b);
  }

  Rng rng(cfg.seed);
  // Segment pools per class, refilled with fresh recordings on demand.
  std::vector<std::vector<Waveform>> pools(kinds.size());
  auto draw = [&](std::size_t c) {
    if (pools[c].empty()) {
      const auto params = synth_detail::random_params(kinds[c], cfg.sample_rate, rng);
      auto rec = synth_source(kinds[c], params, cfg.recording_seconds, cfg.sample_rate, rng());
      pools[c] = segment_2s(rec);
      std::reverse(pools[c].begin(), pools[c].end());
    }
    Waveform w = std::move(pools[c].back());
    pools[c].pop_back();
    return w;
  };

  std::vector<synth_detail::Mixed> items;
  for (std::size_t i = 0; i < cfg.num_mixtures; ++i) {
    const auto [a, b] = class_pairs[i % class_pairs.size()];
    char stem[32];
    std::snprintf(stem, sizeof stem, "mix_%05zu", i);
    items.push_back({stem, mix(draw(a), draw(b))});
  }

  auto split = split_dataset(std::move(items), cfg.seed);
  const fs::path root = cfg.data_dir;
  fs::create_directories(root);
  const std::vector<synth_detail::Mixed>* parts[] = {&split.train, &split.val, &split.test};
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string name = kSplitNames[s];
    std::vector<ManifestEntry> manifest;
    nlohmann::json labels = nlohmann::json::object();
    for (const auto& item : *parts[s]) {
      ManifestEntry e;
      e.path = name + "/mix/" + item.stem + ".wav";
      std::vector<std::string> source_labels;
      for (std::size_t k = 0; k < item.pair.sources.size(); ++k) {
        const auto& src = item.pair.sources[k];
        const std::string rel = name + "/ref/" + item.stem + "_src" + std::to_string(k) + ".wav";
        save_wav(root / rel, src, WavEncoding::float32);
        e.sources.push_back({rel, src.label.value_or("unknown"), {}});
        source_labels.push_back(src.label.value_or("unknown"));
      }
      e.label = source_labels[0] + "+" + source_labels[1];
      save_wav(root / e.path, item.pair.mixture, WavEncoding::float32);
      labels[item.stem] = source_labels;
      manifest.push_back(std::move(e));
    }
    fs::create_directories(root / name / "ref");
    std::ofstream(root / name / "ref" / "labels.json") << labels.dump(2) << '\n';
    write_manifest(root / (name + ".json"), manifest);
  }
  save_run_config(cfg, root / "config.json");
  log << "synth: " << split.train.size() << " train, " << split.val.size() << " val, "
      << split.test.size() << " test mixtures in " << root.string() << '\n';
  return {split.train.size(), split.val.size(), split.test.size()};
}

// ---------------------------------------------------------------------------
// train

template <typename T>
std::vector<T> to_precision(const std::vector<double>& x) {
  return std::vector<T>(x.begin(), x.end());
}

/// Loads every mixture of a manifest with its sources.
template <typename T>
std::vector<Example<T>> load_examples(const fs::path& manifest_path, int sample_rate) {
  const auto entries = read_manifest(manifest_path);
  const fs::path root = manifest_path.parent_path();
  std::vector<Example<T>> out;
  for (const auto& e : entries) {
    const Waveform mixture = load_wav(root / e.path);
    if (mixture.sample_rate != sample_rate) {
      throw InvalidInput(e.path + " has sample rate " + std::to_string(mixture.sample_rate) +
                         ", config expects " + std::to_string(sample_rate));
    }
    Example<T> ex;
    ex.mixture = to_precision<T>(mixture.samples);
    for (const auto& s : e.sources) {
      const Waveform w = load_wav(root / s.path);
      if (w.size() != mixture.size()) {
        throw InvalidInput(s.path + " and its mixture differ in length");
      }
      ex.sources.push_back(to_precision<T>(w.samples));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

/// Trains on data_dir/{train,val}.json and writes out_dir/{model.json,
/// model.bin, train_log.jsonl, config.json}.
template <typename T>
TrainHistory cmd_train(const RunConfig& cfg, std::ostream& log = std::cout) {
  cfg.validate();
  const fs::path data = cfg.data_dir;
  for (const char* split : {"train", "val"}) {
    if (!fs::exists(data / (std::string(split) + ".json"))) {
      throw FileNotFound("dataset " + data.string() + " has no " + split +
                         ".json manifest (run synth first)");
    }
  }
  auto train_set = load_examples<T>(data / "train.json", cfg.sample_rate);
  auto val_set = load_examples<T>(data / "val.json", cfg.sample_rate);
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  save_run_config(cfg, out / "config.json");

  SeparatorModel<T> model(cfg.model(), cfg.seed);
  TrainConfig tc = cfg.training();
  tc.checkpoint_path = out / "model.json";
  tc.log_path = out / "train_log.jsonl";
  log << "train: " << train_set.size() << " train / " << val_set.size() << " val mixtures, "
      << model.count_parameters() << " parameters, decoupling "
      << (model.decoupling_enabled() ? "on" : "off") << '\n';
  auto history = train(model, train_set, val_set, tc, &log);
  log << "train: best checkpoint " << tc.checkpoint_path.string() << '\n';
  return history;
}

// ---------------------------------------------------------------------------
// separate

/// Separates one WAV file or every WAV file of a directory; writes
/// <stem>_src<i>.wav per source into out_dir. Returns the written paths.
template <typename T>
std::vector<fs::path> cmd_separate(const fs::path& checkpoint, const fs::path& input,
                                   const fs::path& out_dir, std::ostream& log = std::cout) {
  auto model = load_checkpoint<T>(checkpoint);
  std::vector<fs::path> inputs;
  if (fs::is_directory(input)) {
    for (const auto& entry : fs::directory_iterator(input)) {
      if (entry.path().extension() == ".wav") inputs.push_back(entry.path());
    }
    std::sort(inputs.begin(), inputs.end());
    if (inputs.empty()) throw InvalidInput("no .wav files in " + input.string());
  } else {
    inputs.push_back(input);
  }
  std::vector<fs::path> written;
  for (const auto& path : inputs) {
    const Waveform mixture = load_wav(path);
    const auto sources = model.separate(to_precision<T>(mixture.samples));
    for (std::size_t i = 0; i < sources.size(); ++i) {
      Waveform w;
      w.samples.assign(sources[i].begin(), sources[i].end());
      w.sample_rate = mixture.sample_rate;
      const fs::path dst =
          out_dir / (path.stem().string() + "_src" + std::to_string(i) + ".wav");
      save_wav(dst, w);
      written.push_back(dst);
    }
  }
  log << "separate: " << inputs.size() << " mixture(s) -> " << written.size() << " file(s) in "
      << out_dir.string() << '\n';
  return written;
}

// ---------------------------------------------------------------------------
// eval

/// Scores <stem>_src<i>.wav estimates against references of the same name
/// for every <stem>.wav in mix_dir. Labels come from ref_dir/labels.json
/// when present.
inline metrics::Report cmd_eval(const fs::path& est_dir, const fs::path& ref_dir,
                                const fs::path& mix_dir, const metrics::MetricConfig& mc = {}) {
  for (const auto& d : {est_dir, ref_dir, mix_dir}) {
    if (!fs::is_directory(d)) throw FileNotFound("no such directory: " + d.string());
  }
  std::vector<fs::path> mixtures;
  for (const auto& entry : fs::directory_iterator(mix_dir)) {
    if (entry.path().extension() == ".wav") mixtures.push_back(entry.path());
  }
  std::sort(mixtures.begin(), mixtures.end());
  if (mixtures.empty()) throw InvalidInput("no .wav mixtures in " + mix_dir.string());

  nlohmann::json labels = nlohmann::json::object();
  if (fs::exists(ref_dir / "labels.json")) std::ifstream(ref_dir / "labels.json") >> labels;

  std::vector<std::string> missing;
  std::vector<metrics::ReportItem> items;
  for (const auto& mix_path : mixtures) {
    const std::string stem = mix_path.stem().string();
    auto name = [&](std::size_t i) { return stem + "_src" + std::to_string(i) + ".wav"; };
    std::size_t n = 0;
    while (fs::exists(ref_dir / name(n))) ++n;
    if (n == 0) {
      missing.push_back((ref_dir / name(0)).string());
      continue;
    }
    metrics::ReportItem item;
    item.pair = stem;
    item.mixture = load_wav(mix_path).samples;
    for (std::size_t i = 0; i < n; ++i) {
      if (!fs::exists(est_dir / name(i))) {
        missing.push_back((est_dir / name(i)).string());
        continue;
      }
      item.estimates.push_back(load_wav(est_dir / name(i)).samples);
      item.references.push_back(load_wav(ref_dir / name(i)).samples);
      item.labels.push_back(labels.contains(stem) && labels[stem].size() > i
                                ? labels[stem][i].get<std::string>()
                                : "src" + std::to_string(i));
    }
    items.push_back(std::move(item));
  }
  if (!missing.empty()) {
    std::string msg = "missing counterpart file(s):";
    for (const auto& m : missing) msg += "\n  " + m;
    throw FileNotFound(msg);
  }
  return metrics::report(items, mc);
}

// ---------------------------------------------------------------------------
// gradcheck

/// Micro separator used for gradient verification.
inline SeparatorConfig micro_model_config() {
  SeparatorConfig c;
  c.encoder = {8, 4, 2};
  c.chunk_size = 8;
  c.hop_size = 4;
  c.n_repeat = 1;
  c.n_head = 2;
  return c;
}

struct GradCheckReport {
  GradCheckResult result;        // 64-bit gradients vs extended-precision differences
  GradCheckResult double_probe;  // same gradients vs 64-bit differences (informational)
  std::size_t parameters = 0;
  bool passed = false;
};

inline constexpr double kGradCheckTolerance = 1e-6;
inline constexpr std::size_t kMicroInputLen = 64;

namespace gradcheck_detail {

template <typename T>
void perturb(SeparatorModel<T>& model, std::uint64_t seed) {
  // Moves the model off its exact initialization, where zero-initialized
  // layers put padded columns exactly on ReLU kinks.
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (auto* p : model.parameters()) {
    for (auto& v : p->tensor().storage()) v = static_cast<T>(v + noise(rng));
  }
}

template <typename T>
std::function<Var<T>()> micro_loss(const SeparatorModel<T>& model, const Example<T>& ex) {
  TrainConfig tc;
  tc.nll_weight = 0.1;
  return [&model, ex, tc] {
    Rng dropout(1);  // same masks on every evaluation
    return example_loss(model, ex, true, &dropout, tc);
  };
}

template <typename T>
Example<T> micro_example(std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  Example<T> ex;
  ex.sources.assign(2, std::vector<T>(kMicroInputLen));
  ex.mixture.assign(kMicroInputLen, T{0});
  for (auto& s : ex.sources) {
    for (std::size_t i = 0; i < kMicroInputLen; ++i) {
      s[i] = static_cast<T>(uni(rng));
      ex.mixture[i] += s[i];
    }
  }
  return ex;
}

}  // namespace gradcheck_detail

/// Finite-difference verification of every parameter of the micro model
/// (training-mode forward with fixed dropout masks, PIT loss plus coupling
/// likelihood). Refuses to run below 64-bit precision.
inline GradCheckReport cmd_gradcheck(const RunConfig& cfg, bool corrupt_gradient = false,
                                     double eps = 1e-5, std::ostream& log = std::cout) {
  if (cfg.precision != 64) {
    throw ConfigError("gradcheck requires --precision 64 (got " +
                      std::to_string(cfg.precision) + ")");
  }
  using Probe = long double;
  const SeparatorConfig mc = micro_model_config();
  SeparatorModel<double> model(mc, cfg.seed);
  gradcheck_detail::perturb(model, cfg.seed + 1);
  SeparatorModel<Probe> probe(mc, cfg.seed);
  const auto ex = gradcheck_detail::micro_example<double>(cfg.seed);
  Example<Probe> ex_probe{to_precision<Probe>(ex.mixture), {}};
  for (const auto& s : ex.sources) ex_probe.sources.push_back(to_precision<Probe>(s));

  std::function<void(ParameterList<double>&)> tamper;
  if (corrupt_gradient) {
    tamper = [](ParameterList<double>& params) {
      auto& g = params.front()->gradient();
      g[0] = g[0] * 1.01 + 1e-3;
    };
  }
  GradCheckReport rep;
  rep.parameters = model.count_parameters();
  rep.result = grad_check<double, Probe>(gradcheck_detail::micro_loss(model, ex),
                                         model.parameters(),
                                         gradcheck_detail::micro_loss(probe, ex_probe),
                                         probe.parameters(), eps, tamper);
  rep.double_probe = grad_check<double>(gradcheck_detail::micro_loss(model, ex),
                                        model.parameters(), eps, tamper);
  rep.passed = rep.result.max_relative_error <= kGradCheckTolerance;

  auto line = [&](const char* what, const GradCheckResult& r) {
    log << what << ": max relative error " << r.max_relative_error << " at "
        << r.worst_parameter << '[' << r.worst_index << "] (analytic " << r.worst_analytic
        << ", numeric " << r.worst_numeric << ")\n";
  };
  log << "gradcheck: micro model, " << rep.parameters << " parameters, "
      << rep.result.entries_checked << " entries, eps " << eps << '\n';
  line("  extended-precision differences", rep.result);
  line("  64-bit differences (informational)", rep.double_probe);
  log << "gradcheck: " << (rep.passed ? "PASS" : "FAIL") << " (tolerance "
      << kGradCheckTolerance << ")\n";
  return rep;
}

}  // namespace indiformer
