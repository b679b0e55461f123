#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "indiformer/signal_io.hpp"
#include "support.hpp"

using namespace indiformer;
namespace fs = std::filesystem;

namespace {

// Hand-built RIFF header so the reader is not tested against its own writer.
void write_raw_wav(const fs::path& path, std::uint16_t format, std::uint16_t channels,
                   std::uint16_t bits, const std::string& payload, std::uint32_t rate = 8000) {
  std::string out = "RIFF";
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  };
  auto u16 = [&](std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>(v >> 8));
  };
  u32(36 + static_cast<std::uint32_t>(payload.size()));
  out += "WAVEfmt ";
  u32(16);
  u16(format);
  u16(channels);
  u32(rate);
  u32(rate * channels * bits / 8);
  u16(static_cast<std::uint16_t>(channels * bits / 8));
  u16(bits);
  out += "data";
  u32(static_cast<std::uint32_t>(payload.size()));
  out += payload;
  std::ofstream(path, std::ios::binary) << out;
}

std::string pcm16(std::initializer_list<std::int16_t> codes) {
  std::string s;
  for (auto c : codes) {
    const auto u = static_cast<std::uint16_t>(c);
    s.push_back(static_cast<char>(u & 0xFF));
    s.push_back(static_cast<char>(u >> 8));
  }
  return s;
}

Waveform wave(std::vector<double> s, int rate = 8000) {
  Waveform w;
  w.samples = std::move(s);
  w.sample_rate = rate;
  return w;
}

}  // namespace

TEST(LoadWav, ScalesPcm16) {
  const auto dir = testing_support::temp_dir("wav_scale");
  write_raw_wav(dir / "a.wav", 1, 1, 16, pcm16({0, 32767, -32768}), 11025);
  const auto w = load_wav(dir / "a.wav");
  ASSERT_EQ(w.size(), 3u);
  EXPECT_EQ(w.sample_rate, 11025);
  EXPECT_EQ(w.samples[0], 0.0);
  EXPECT_NEAR(w.samples[1], 0.99997, 1e-5);
  EXPECT_EQ(w.samples[1], 32767.0 / 32768.0);
  EXPECT_EQ(w.samples[2], -1.0);
}

TEST(LoadWav, ReadsFloat32) {
  const auto dir = testing_support::temp_dir("wav_float");
  std::string payload;
  for (float f : {0.25f, -0.5f, 1.5f}) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) payload.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
  write_raw_wav(dir / "f.wav", 3, 1, 32, payload);
  const auto w = load_wav(dir / "f.wav");
  EXPECT_EQ(w.samples, (std::vector<double>{0.25, -0.5, 1.5}));
}

TEST(LoadWav, DistinctErrors) {
  const auto dir = testing_support::temp_dir("wav_errors");
  write_raw_wav(dir / "stereo.wav", 1, 2, 16, pcm16({1, 2, 3, 4}));
  write_raw_wav(dir / "mulaw.wav", 7, 1, 8, std::string(4, '\x7f'));
  write_raw_wav(dir / "pcm24.wav", 1, 1, 24, std::string(6, '\0'));
  std::ofstream(dir / "junk.wav") << "not a wave file at all";

  EXPECT_THROW(load_wav(dir / "stereo.wav"), UnsupportedChannelCount);
  EXPECT_THROW(load_wav(dir / "mulaw.wav"), UnsupportedCodec);
  EXPECT_THROW(load_wav(dir / "pcm24.wav"), UnsupportedCodec);
  EXPECT_THROW(load_wav(dir / "absent.wav"), FileNotFound);
  EXPECT_THROW(load_wav(dir / "junk.wav"), IoError);
  try {
    load_wav(dir / "mulaw.wav");
  } catch (const UnsupportedCodec& e) {
    EXPECT_NE(std::string(e.what()).find("codec"), std::string::npos);
  }
  try {
    load_wav(dir / "stereo.wav");
  } catch (const UnsupportedChannelCount& e) {
    EXPECT_NE(std::string(e.what()).find("channel count 2"), std::string::npos);
  }
}

TEST(SaveWav, RoundTripWithinOneStep) {
  const auto dir = testing_support::temp_dir("wav_roundtrip");
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> s(testing_support::uniform_size(rng, 1, 500));
    for (auto& v : s) v = u(rng);
    auto w = wave(s);
    save_wav(dir / "r.wav", w);
    const auto back = load_wav(dir / "r.wav");
    ASSERT_EQ(back.size(), w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      EXPECT_LE(std::abs(back.samples[i] - w.samples[i]), 1.0 / 32768.0);
    }
  }
  auto w = wave({0.1, -0.3});
  save_wav(dir / "f.wav", w, WavEncoding::float32);
  EXPECT_NEAR(load_wav(dir / "f.wav").samples[1], -0.3, 1e-7);
}

TEST(SaveWav, ClampsAndRejectsEmpty) {
  const auto dir = testing_support::temp_dir("wav_clamp");
  save_wav(dir / "c.wav", wave({1.5, -2.0}));
  const auto back = load_wav(dir / "c.wav");
  EXPECT_EQ(back.samples[0], 32767.0 / 32768.0);
  EXPECT_EQ(back.samples[1], -1.0);
  EXPECT_THROW(save_wav(dir / "e.wav", wave({})), InvalidInput);
}

TEST(SynthSource, ToneExample) {
  SourceParams p;
  p.freq = 440.0;
  const auto w = synth_source(SourceKind::tone, p, 1.0, 8000, 0);
  ASSERT_EQ(w.size(), 8000u);
  EXPECT_EQ(w.samples[0], 0.0);
  // quarter period is 8000/440/4 = 4.55 samples
  EXPECT_GT(w.samples[5], w.samples[3]);
  EXPECT_GT(w.samples[5], w.samples[6]);
  EXPECT_NEAR(w.samples[5], kSynthPeak * std::sin(2 * std::numbers::pi * 440 * 5 / 8000.0), 1e-3);
}

TEST(SynthSource, EveryKindIsDeterministicAndNormalized) {
  SourceParams p;
  for (auto kind : {SourceKind::tone, SourceKind::chirp, SourceKind::am_tone,
                    SourceKind::band_noise}) {
    const auto a = synth_source(kind, p, 0.5, 8000, 11);
    const auto b = synth_source(kind, p, 0.5, 8000, 11);
    EXPECT_EQ(a.samples, b.samples) << to_string(kind);
    double peak = 0.0;
    for (double v : a.samples) peak = std::max(peak, std::abs(v));
    EXPECT_NEAR(peak, kSynthPeak, 1e-12) << to_string(kind);
    EXPECT_EQ(a.label, to_string(kind));
    EXPECT_EQ(source_kind_from_string(to_string(kind)), kind);
  }
  EXPECT_NE(synth_source(SourceKind::band_noise, p, 0.5, 8000, 1).samples,
            synth_source(SourceKind::band_noise, p, 0.5, 8000, 2).samples);
}

TEST(SynthSource, Errors) {
  SourceParams p;
  EXPECT_THROW(synth_source(SourceKind::tone, p, 0.0, 8000, 0), InvalidInput);
  p.freq = -1.0;
  EXPECT_THROW(synth_source(SourceKind::tone, p, 1.0, 8000, 0), InvalidInput);
  p = {};
  p.band_high = p.band_low;
  EXPECT_THROW(synth_source(SourceKind::band_noise, p, 1.0, 8000, 0), InvalidInput);
  EXPECT_THROW(source_kind_from_string("whale"), InvalidInput);
}

TEST(Segment2s, Counts) {
  EXPECT_EQ(segment_2s(wave(std::vector<double>(40000, 0.1))).size(), 2u);
  EXPECT_EQ(segment_2s(wave(std::vector<double>(40000, 0.1))).front().size(), 16000u);
  EXPECT_EQ(segment_2s(wave(std::vector<double>(16000, 0.1))).size(), 1u);
  EXPECT_TRUE(segment_2s(wave(std::vector<double>(8000, 0.1))).empty());
}

TEST(Segment2s, SlicesAreContiguous) {
  std::vector<double> s(50000);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<double>(i);
  const auto segs = segment_2s(wave(s));
  ASSERT_EQ(segs.size(), 3u);
  for (std::size_t k = 0; k < segs.size(); ++k) EXPECT_EQ(segs[k].samples[0], 16000.0 * k);
}

TEST(Mix, Examples) {
  const auto m = mix(wave({1, 2}), wave({3, 4}));
  EXPECT_EQ(m.mixture.samples, (std::vector<double>{4, 6}));
  ASSERT_EQ(m.sources.size(), 2u);
  EXPECT_EQ(mix(wave({1, -2}), wave({0, 0})).mixture.samples, (std::vector<double>{1, -2}));
  EXPECT_THROW(mix(wave({1, 2}, 8000), wave({1, 2}, 16000)), InvalidInput);
  EXPECT_THROW(mix(wave({1, 2}), wave({1, 2, 3})), InvalidInput);
}

TEST(Mix, CommutativeAndAssociative) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = testing_support::uniform_size(rng, 1, 64);
    auto a = wave(testing_support::random_signal(n, rng));
    auto b = wave(testing_support::random_signal(n, rng));
    auto c = wave(testing_support::random_signal(n, rng));
    const auto ab = mix(a, b).mixture, ba = mix(b, a).mixture;
    const auto ab_c = mix(ab, c).mixture, a_bc = mix(a, mix(b, c).mixture).mixture;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(ab.samples[i], ba.samples[i], 1e-9);
      EXPECT_NEAR(ab_c.samples[i], a_bc.samples[i], 1e-9);
    }
  }
}

TEST(SplitDataset, Sizes) {
  auto sizes = [](std::size_t n) {
    std::vector<int> items(n);
    const auto s = split_dataset(items, 3);
    return std::array<std::size_t, 3>{s.train.size(), s.val.size(), s.test.size()};
  };
  EXPECT_EQ(sizes(10), (std::array<std::size_t, 3>{7, 2, 1}));
  EXPECT_EQ(sizes(4096), (std::array<std::size_t, 3>{2868, 819, 409}));
  EXPECT_THROW(split_dataset(std::vector<int>(9), 0), InvalidInput);
}

TEST(SplitDataset, DisjointExhaustiveDeterministic) {
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = testing_support::uniform_size(rng, 10, 300);
    std::vector<int> items(n);
    for (std::size_t i = 0; i < n; ++i) items[i] = static_cast<int>(i);
    const auto seed = static_cast<std::uint64_t>(trial);
    const auto s = split_dataset(items, seed);
    std::set<int> seen;
    for (const auto* part : {&s.train, &s.val, &s.test}) {
      for (int v : *part) EXPECT_TRUE(seen.insert(v).second);
    }
    EXPECT_EQ(seen.size(), n);
    EXPECT_EQ(s.val.size(), n * 2 / 10);
    EXPECT_EQ(s.test.size(), n / 10);
    const auto again = split_dataset(items, seed);
    EXPECT_EQ(s.train, again.train);
    EXPECT_EQ(s.val, again.val);
    EXPECT_EQ(s.test, again.test);
  }
}

TEST(Manifest, RoundTripAndErrors) {
  const auto dir = testing_support::temp_dir("manifest");
  std::vector<ManifestEntry> entries{
      {"mix/a.wav", "tone+chirp", {{"ref/a_src0.wav", "tone", {}}, {"ref/a_src1.wav", "chirp", {}}}},
      {"mix/b.wav", "am_tone+band_noise", {}}};
  write_manifest(dir / "m.json", entries);
  const auto back = read_manifest(dir / "m.json");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].path, "mix/a.wav");
  ASSERT_EQ(back[0].sources.size(), 2u);
  EXPECT_EQ(back[0].sources[1].label, "chirp");
  EXPECT_TRUE(back[1].sources.empty());

  std::ofstream(dir / "bad.json") << "[{\"path\": 3";
  std::ofstream(dir / "obj.json") << "{\"path\": \"x\"}";
  std::ofstream(dir / "nolabel.json") << "[{\"path\": \"x\"}]";
  EXPECT_THROW(read_manifest(dir / "bad.json"), ManifestError);
  EXPECT_THROW(read_manifest(dir / "obj.json"), ManifestError);
  EXPECT_THROW(read_manifest(dir / "nolabel.json"), ManifestError);
  EXPECT_THROW(read_manifest(dir / "none.json"), FileNotFound);
}
