#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "indiformer/errors.hpp"

namespace indiformer {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 8000;
  std::optional<std::string> label;

  std::size_t size() const { return samples.size(); }
  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }

  void validate(const char* where) const {
    if (samples.empty()) throw InvalidInput(std::string(where) + ": empty waveform");
    if (sample_rate <= 0) throw InvalidInput(std::string(where) + ": non-positive sample rate");
    for (double s : samples) {
      if (!std::isfinite(s)) throw NumericError(std::string(where) + ": non-finite sample");
    }
  }
};

struct MixturePair {
  Waveform mixture;
  std::vector<Waveform> sources;
};

// ---------------------------------------------------------------------------
// RIFF/WAVE

enum class WavEncoding { pcm16, float32 };

namespace wav_detail {

inline constexpr std::uint16_t kFormatPcm = 1;
inline constexpr std::uint16_t kFormatFloat = 3;
inline constexpr std::uint16_t kFormatExtensible = 0xFFFE;

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

inline std::string codec_name(std::uint16_t tag) {
  switch (tag) {
    case 2: return "MS ADPCM";
    case 6: return "A-law";
    case 7: return "mu-law";
    case 0x55: return "MP3";
    default: return "format tag " + std::to_string(tag);
  }
}

}  // namespace wav_detail

/// Reads a mono RIFF/WAVE file holding 16-bit PCM or 32-bit IEEE float.
/// PCM samples are divided by 32768.
inline Waveform load_wav(const std::filesystem::path& path) {
  using namespace wav_detail;
  if (!std::filesystem::exists(path)) {
    throw FileNotFound("no such file: " + path.string());
  }
  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw IoError(name + ": not a RIFF/WAVE file");
  }

  std::optional<std::uint16_t> format, channels, bits;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t len = read_u32(hdr + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) throw IoError(name + ": truncated chunk");
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (len < 16) throw IoError(name + ": fmt chunk too short");
      const unsigned char* f = bytes.data() + body;
      format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      bits = read_u16(f + 14);
      if (*format == kFormatExtensible) {
        if (len < 26) throw IoError(name + ": extensible fmt chunk too short");
        format = read_u16(f + 24);  // first two bytes of the sub-format GUID
      }
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = bytes.data() + body;
      data_len = len;
    }
    pos = body + len + (len & 1);
  }
  if (!format) throw IoError(name + ": missing fmt chunk");
  if (!data) throw IoError(name + ": missing data chunk");
  if (*format != kFormatPcm && *format != kFormatFloat) {
    throw UnsupportedCodec(name + ": unsupported codec " + codec_name(*format) +
                           " (only 16-bit PCM and 32-bit float are read)");
  }
  if ((*format == kFormatPcm && *bits != 16) || (*format == kFormatFloat && *bits != 32)) {
    throw UnsupportedCodec(name + ": unsupported sample width of " + std::to_string(*bits) +
                           " bits");
  }
  if (*channels != 1) {
    throw UnsupportedChannelCount(name + ": unsupported channel count " +
                                  std::to_string(*channels) + " (mono only)");
  }
  if (rate == 0) throw IoError(name + ": sample rate is zero");

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  if (*format == kFormatPcm) {
    w.samples.resize(data_len / 2);
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
      const auto code = static_cast<std::int16_t>(read_u16(data + 2 * i));
      w.samples[i] = static_cast<double>(code) / 32768.0;
    }
  } else {
    w.samples.resize(data_len / 4);
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
      w.samples[i] = static_cast<double>(std::bit_cast<float>(read_u32(data + 4 * i)));
    }
  }
  if (w.samples.empty()) throw IoError(name + ": no samples");
  w.validate(name.c_str());
  return w;
}

/// Writes a mono file. 16-bit PCM clamps to [-1, 1) and rounds to the nearest
/// code.
inline void save_wav(const std::filesystem::path& path, const Waveform& w,
                     WavEncoding encoding = WavEncoding::pcm16) {
  using namespace wav_detail;
  w.validate("save_wav");
  const bool pcm = encoding == WavEncoding::pcm16;
  const std::uint16_t bits = pcm ? 16 : 32;
  const std::uint16_t block = bits / 8;
  const auto data_len = static_cast<std::uint32_t>(w.samples.size() * block);

  std::string out;
  out.reserve(44 + data_len);
  out += "RIFF";
  put_u32(out, 36 + data_len);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, pcm ? kFormatPcm : kFormatFloat);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate) * block);
  put_u16(out, block);
  put_u16(out, bits);
  out += "data";
  put_u32(out, data_len);
  for (double s : w.samples) {
    if (pcm) {
      const double code = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
      put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(code)));
    } else {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(s)));
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Synthetic sources

enum class SourceKind { tone, chirp, am_tone, band_noise };

inline std::string to_string(SourceKind k) {
  switch (k) {
    case SourceKind::tone: return "tone";
    case SourceKind::chirp: return "chirp";
    case SourceKind::am_tone: return "am_tone";
    case SourceKind::band_noise: return "band_noise";
  }
  return "unknown";
}

inline SourceKind source_kind_from_string(const std::string& s) {
  for (auto k : {SourceKind::tone, SourceKind::chirp, SourceKind::am_tone,
                 SourceKind::band_noise}) {
    if (to_string(k) == s) return k;
  }
  throw InvalidInput("unknown source kind '" + s + "'");
}

struct SourceParams {
  double freq = 440.0;      // tone / am carrier / chirp start (Hz)
  double freq_end = 880.0;  // chirp end (Hz)
  double mod_rate = 4.0;    // am modulation rate (Hz)
  double mod_depth = 0.5;   // am depth in [0, 1]
  double phase = 0.0;       // initial phase (rad)
  double band_low = 300.0;  // band_noise lower edge (Hz)
  double band_high = 1200.0;
};

inline constexpr double kSynthPeak = 0.7;

namespace synth_detail {

// Three passes of a centered moving average of width `width`.
inline std::vector<double> smooth(std::vector<double> x, std::size_t width) {
  if (width <= 1) return x;
  for (int pass = 0; pass < 3; ++pass) {
    std::vector<double> y(x.size());
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(width / 2);
    const auto n = static_cast<std::ptrdiff_t>(x.size());
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      double acc = 0.0;
      std::size_t cnt = 0;
      for (std::ptrdiff_t j = i - half; j < i - half + static_cast<std::ptrdiff_t>(width); ++j) {
        if (j >= 0 && j < n) {
          acc += x[static_cast<std::size_t>(j)];
          ++cnt;
        }
      }
      y[static_cast<std::size_t>(i)] = acc / static_cast<double>(cnt);
    }
    x = std::move(y);
  }
  return x;
}

}  // namespace synth_detail

/// Deterministic synthetic source normalized to a peak of 0.7.
inline Waveform synth_source(SourceKind kind, const SourceParams& p, double duration_s,
                             int sample_rate, std::uint64_t seed) {
  if (!(duration_s > 0.0)) throw InvalidInput("synth_source: duration must be positive");
  if (sample_rate <= 0) throw InvalidInput("synth_source: sample rate must be positive");
  auto require_positive = [](double v, const char* what) {
    if (!(v > 0.0)) throw InvalidInput(std::string("synth_source: ") + what + " must be positive");
  };
  const auto n = static_cast<std::size_t>(std::llround(duration_s * sample_rate));
  if (n == 0) throw InvalidInput("synth_source: duration shorter than one sample");
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double sr = sample_rate;

  std::vector<double> x(n);
  switch (kind) {
    case SourceKind::tone:
      require_positive(p.freq, "frequency");
      for (std::size_t i = 0; i < n; ++i) x[i] = std::sin(two_pi * p.freq * i / sr + p.phase);
      break;
    case SourceKind::chirp: {
      require_positive(p.freq, "start frequency");
      require_positive(p.freq_end, "end frequency");
      const double sweep = (p.freq_end - p.freq) / duration_s;
      for (std::size_t i = 0; i < n; ++i) {
        const double t = i / sr;
        x[i] = std::sin(two_pi * (p.freq * t + 0.5 * sweep * t * t) + p.phase);
      }
      break;
    }
    case SourceKind::am_tone:
      require_positive(p.freq, "carrier frequency");
      require_positive(p.mod_rate, "modulation rate");
      for (std::size_t i = 0; i < n; ++i) {
        const double t = i / sr;
        x[i] = (1.0 + p.mod_depth * std::sin(two_pi * p.mod_rate * t)) *
               std::sin(two_pi * p.freq * t + p.phase);
      }
      break;
    case SourceKind::band_noise: {
      require_positive(p.band_low, "band lower edge");
      require_positive(p.band_high, "band upper edge");
      if (p.band_high <= p.band_low) {
        throw InvalidInput("synth_source: band upper edge must exceed the lower edge");
      }
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (auto& v : x) v = gauss(rng);
      const auto narrow = static_cast<std::size_t>(std::max(1.0, std::round(sr / p.band_high)));
      const auto wide = static_cast<std::size_t>(std::max(1.0, std::round(sr / p.band_low)));
      auto below_high = synth_detail::smooth(x, narrow);
      auto below_low = synth_detail::smooth(x, wide);
      for (std::size_t i = 0; i < n; ++i) x[i] = below_high[i] - below_low[i];
      break;
    }
  }
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.0) {
    for (auto& v : x) v *= kSynthPeak / peak;
  }
  Waveform w;
  w.samples = std::move(x);
  w.sample_rate = sample_rate;
  w.label = to_string(kind);
  return w;
}

// ---------------------------------------------------------------------------
// Dataset assembly

/// Non-overlapping 2-second slices; a trailing remainder is dropped.
inline std::vector<Waveform> segment_2s(const Waveform& w) {
  const auto seg = static_cast<std::size_t>(2 * w.sample_rate);
  std::vector<Waveform> out;
  for (std::size_t start = 0; seg > 0 && start + seg <= w.samples.size(); start += seg) {
    Waveform s;
    s.samples.assign(w.samples.begin() + static_cast<std::ptrdiff_t>(start),
                     w.samples.begin() + static_cast<std::ptrdiff_t>(start + seg));
    s.sample_rate = w.sample_rate;
    s.label = w.label;
    out.push_back(std::move(s));
  }
  return out;
}

/// Equal-gain additive mixture; no renormalization.
inline MixturePair mix(const Waveform& a, const Waveform& b) {
  if (a.sample_rate != b.sample_rate) {
    throw InvalidInput("mix: sample rates differ (" + std::to_string(a.sample_rate) + " vs " +
                       std::to_string(b.sample_rate) + " Hz)");
  }
  if (a.size() != b.size()) {
    throw InvalidInput("mix: lengths differ (" + std::to_string(a.size()) + " vs " +
                       std::to_string(b.size()) + ")");
  }
  MixturePair m;
  m.mixture.sample_rate = a.sample_rate;
  m.mixture.samples.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) m.mixture.samples[i] = a.samples[i] + b.samples[i];
  if (a.label && b.label) m.mixture.label = *a.label + "+" + *b.label;
  m.sources = {a, b};
  return m;
}

template <typename Item>
struct DatasetSplit {
  std::vector<Item> train, val, test;
};

/// Seeded shuffle, then 70/20/10: validation and test sizes are floored and
/// the remainder goes to training.
template <typename Item>
DatasetSplit<Item> split_dataset(std::vector<Item> items, std::uint64_t seed) {
  if (items.size() < 10) {
    throw InvalidInput("split_dataset needs at least 10 items, got " +
                       std::to_string(items.size()));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(items.begin(), items.end(), rng);
  const std::size_t n_val = items.size() * 2 / 10;
  const std::size_t n_test = items.size() / 10;
  const std::size_t n_train = items.size() - n_val - n_test;
  DatasetSplit<Item> s;
  auto it = std::make_move_iterator(items.begin());
  s.train.assign(it, it + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(it + static_cast<std::ptrdiff_t>(n_train),
               it + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(it + static_cast<std::ptrdiff_t>(n_train + n_val),
                std::make_move_iterator(items.end()));
  return s;
}

// ---------------------------------------------------------------------------
// Manifests: a JSON array of {path, label[, sources: [{path, label}]]}.
// Paths are relative to the manifest's directory.

struct ManifestEntry {
  std::string path;
  std::string label;
  std::vector<ManifestEntry> sources;
};

inline nlohmann::json to_json(const ManifestEntry& e) {
  nlohmann::json j{{"path", e.path}, {"label", e.label}};
  if (!e.sources.empty()) {
    j["sources"] = nlohmann::json::array();
    for (const auto& s : e.sources) j["sources"].push_back(to_json(s));
  }
  return j;
}

inline ManifestEntry manifest_entry_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("path") || !j.contains("label")) {
    throw ManifestError("manifest entry needs 'path' and 'label'");
  }
  ManifestEntry e{j.at("path").get<std::string>(), j.at("label").get<std::string>(), {}};
  if (j.contains("sources")) {
    for (const auto& s : j.at("sources")) e.sources.push_back(manifest_entry_from_json(s));
  }
  return e;
}

inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<ManifestEntry>& entries) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries) j.push_back(to_json(e));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write manifest " + path.string());
  f << j.dump(2) << '\n';
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileNotFound("no such manifest: " + path.string());
  std::ifstream f(path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError("malformed manifest " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw ManifestError("manifest " + path.string() + " is not a JSON array");
  std::vector<ManifestEntry> out;
  try {
    for (const auto& e : j) out.push_back(manifest_entry_from_json(e));
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError("malformed manifest " + path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace indiformer
