#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "pvae/data.hpp"
#include "pvae/error.hpp"
#include "test_util.hpp"

using namespace pvae;
using pvae::testing::scratch_dir;
using pvae::testing::short_data;

namespace {

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Hand-rolled big-endian writer for IDX fixtures; shares nothing with the
// library's reader.
void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

void dump(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> idx_images(std::uint32_t magic, std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                                      std::size_t payload) {
  std::vector<unsigned char> b;
  put_be32(b, magic);
  put_be32(b, count);
  put_be32(b, rows);
  put_be32(b, cols);
  for (std::size_t i = 0; i < payload; ++i) b.push_back(static_cast<unsigned char>((i * 37) % 256));
  return b;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& labels) {
  std::vector<unsigned char> b;
  put_be32(b, 0x801);
  put_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

}  // namespace

TEST(Data, ConfigValidate) {
  GeneratorConfig g;
  EXPECT_NO_THROW(g.validate());
  auto bad = [](auto edit) {
    GeneratorConfig c;
    edit(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](GeneratorConfig& c) { c.samples = 0; });
  bad([](GeneratorConfig& c) { c.feat_dim = 3; });
  bad([](GeneratorConfig& c) { c.t_max = c.t_min - 1; });
  bad([](GeneratorConfig& c) { c.t_max = c.t_min + c.onset_max - 1; });
  bad([](GeneratorConfig& c) { c.scale_min = 2.0; });
}

TEST(Data, RenderIsDeterministicAndBounded) {
  ImageStyle s;
  for (int id = 0; id < kNumIdentities; ++id) {
    const auto a = render_glyph(id, s, 5), b = render_glyph(id, s, 5);
    EXPECT_EQ(a, b);
    ASSERT_EQ(a.size(), 28u * 28u);
    for (double v : a) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_THROW(render_glyph(10, s, 1), RangeError);
  EXPECT_THROW(render_glyph(-1, s, 1), RangeError);
}

TEST(Data, ZeroIntensityIsNoiseOnly) {
  ImageStyle s;
  s.intensity = 0.0;
  for (int id = 0; id < kNumIdentities; ++id)
    for (double v : render_glyph(id, s, static_cast<std::uint64_t>(id), 0.02)) EXPECT_LE(v, 0.06 + 1e-12);
}

TEST(Data, DistinctIdentitiesDifferVisibly) {
  ImageStyle s;
  for (int a = 0; a < kNumIdentities; ++a)
    for (int b = a + 1; b < kNumIdentities; ++b) {
      const auto x = render_glyph(a, s, 1, 0.0), y = render_glyph(b, s, 1, 0.0);
      int differing = 0;
      for (std::size_t i = 0; i < x.size(); ++i) differing += std::abs(x[i] - y[i]) > 0.2;
      EXPECT_GE(differing, 30) << a << " vs " << b;
    }
}

TEST(Data, ThicknessRaisesMass) {
  for (int id = 0; id < kNumIdentities; ++id) {
    double last = -1;
    for (double t : {0.0, 0.4, 0.8, 1.2, 1.6}) {
      ImageStyle s;
      s.thickness = t;
      const double m = image_mass(render_glyph(id, s, 1, 0.0));
      EXPECT_GT(m, last);
      last = m;
    }
  }
}

TEST(Data, SynthShapeAndLengthRange) {
  GeneratorConfig g;
  AudioStyle s;
  s.onset = 3;
  s.duration = 30;
  const auto a = synth_audio(4, s, 9, g);
  EXPECT_EQ(a.size(), 33u * g.feat_dim);
  EXPECT_EQ(a, synth_audio(4, s, 9, g));
  s.duration = 70;
  EXPECT_THROW(synth_audio(4, s, 9, g), RangeError);
  s.onset = 0;
  s.duration = 10;
  EXPECT_THROW(synth_audio(4, s, 9, g), RangeError);
  EXPECT_THROW(synth_audio(12, AudioStyle{}, 9, g), RangeError);
}

TEST(Data, ZeroAmplitudeIsNoiseOnly) {
  GeneratorConfig g;
  AudioStyle s;
  s.amplitude = 0.0;
  for (int id = 0; id < kNumIdentities; ++id)
    for (double v : synth_audio(id, s, static_cast<std::uint64_t>(id), g))
      EXPECT_LE(std::abs(v), 3 * g.feature_noise + 1e-12);
}

TEST(Data, OnsetFramesAreLowEnergy) {
  GeneratorConfig g;
  g.feature_noise = 0.0;
  AudioStyle s;
  s.onset = 5;
  s.duration = 30;
  const auto a = synth_audio(2, s, 1, g);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t f = 0; f < g.feat_dim; ++f) EXPECT_EQ(a[t * g.feat_dim + f], 0.0);
  EXPECT_EQ(AudioTemplateClassifier::voiced_frames(a, 35, g.feat_dim), 30u);
}

// Property: sampled styles lie inside the configured ranges.
TEST(Data, SampledStylesInRange) {
  GeneratorConfig g;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 2000; ++i) {
    const ImageStyle s = sample_image_style(g, rng);
    EXPECT_LE(std::abs(s.tilt), g.tilt_max);
    EXPECT_GE(s.thickness, g.thickness_min);
    EXPECT_LE(s.thickness, g.thickness_max);
    EXPECT_GE(s.scale, g.scale_min);
    EXPECT_LE(s.scale, g.scale_max);
    EXPECT_LE(std::abs(s.offset_x), g.offset_max);
    EXPECT_LE(std::abs(s.offset_y), g.offset_max);
    EXPECT_GE(s.intensity, g.intensity_min);
    EXPECT_LE(s.intensity, g.intensity_max);
    const AudioStyle a = sample_audio_style(g, rng);
    EXPECT_GE(a.total_frames(), g.t_min);
    EXPECT_LE(a.total_frames(), g.t_max);
    EXPECT_LE(a.onset, g.onset_max);
    EXPECT_LE(std::abs(a.pitch_offset), g.pitch_max);
    EXPECT_GE(a.amplitude, g.amplitude_min);
    EXPECT_LE(a.amplitude, g.amplitude_max);
  }
}

TEST(Data, DatasetIsBalancedAndReproducible) {
  GeneratorConfig g;
  g.samples = 200;
  const Dataset a = generate_dataset(g, 7, "train"), b = generate_dataset(g, 7, "train");
  std::array<int, kNumIdentities> counts{};
  for (std::size_t i = 0; i < a.audio.size(); ++i) {
    EXPECT_EQ(a.audio[i].identity, a.images[i].identity);
    ++counts[static_cast<std::size_t>(a.audio[i].identity)];
    EXPECT_EQ(a.audio[i].values, b.audio[i].values);
    EXPECT_EQ(a.images[i].pixels, b.images[i].pixels);
    EXPECT_EQ(a.audio[i].frames, a.audio[i].style.total_frames());
    EXPECT_GE(a.audio[i].frames, g.t_min);
    EXPECT_LE(a.audio[i].frames, g.t_max);
    for (double v : a.images[i].pixels) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
  }
  for (int c : counts) EXPECT_EQ(c, 20);

  const Dataset other = generate_dataset(g, 8, "train"), test = generate_dataset(g, 7, "test");
  EXPECT_NE(a.images[0].pixels, other.images[0].pixels);
  EXPECT_NE(a.images[0].pixels, test.images[0].pixels);
}

TEST(Data, SamplesDependOnlyOnIndex) {
  GeneratorConfig small = short_data(20), large = short_data(60);
  const Dataset a = generate_dataset(small, 3, "train"), b = generate_dataset(large, 3, "train");
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(a.images[i].pixels, b.images[i].pixels);
    EXPECT_EQ(a.audio[i].values, b.audio[i].values);
  }
}

// Styles are drawn independently of identity: chi-square on a
// 10 x 4 contingency table of identity against binned thickness and
// binned duration (27 degrees of freedom, 0.999 quantile 55.48).
TEST(Data, StyleIndependentOfIdentity) {
  GeneratorConfig g;
  g.samples = 2000;
  const Dataset d = generate_dataset(g, 11, "train");
  auto chi_square = [&](auto bin_of) {
    std::array<std::array<double, 4>, kNumIdentities> table{};
    for (std::size_t i = 0; i < g.samples; ++i) table[i % kNumIdentities][bin_of(i)] += 1;
    std::array<double, 4> col{};
    for (const auto& row : table)
      for (std::size_t b = 0; b < 4; ++b) col[b] += row[b];
    double chi = 0;
    for (const auto& row : table)
      for (std::size_t b = 0; b < 4; ++b) {
        const double expected = col[b] / kNumIdentities;
        chi += (row[b] - expected) * (row[b] - expected) / expected;
      }
    return chi;
  };
  const double thick = chi_square([&](std::size_t i) {
    return std::min<std::size_t>(3, static_cast<std::size_t>(d.images[i].style.thickness / g.thickness_max * 4));
  });
  const double span = static_cast<double>(g.duration_max() - g.duration_min() + 1);
  const double dur = chi_square([&](std::size_t i) {
    return std::min<std::size_t>(3, static_cast<std::size_t>((d.audio[i].style.duration - g.duration_min()) / span * 4));
  });
  EXPECT_LT(thick, 55.48);
  EXPECT_LT(dur, 55.48);
}

TEST(Data, TemplateClassifiersRecoverIdentity) {
  GeneratorConfig g;
  g.samples = 1000;
  const Dataset d = generate_dataset(g, 21, "test");
  const ImageTemplateClassifier image;
  const AudioTemplateClassifier audio(g);
  int image_ok = 0, audio_ok = 0;
  for (std::size_t i = 0; i < g.samples; ++i) {
    image_ok += image.classify(d.images[i].pixels) == d.images[i].identity;
    audio_ok += audio.classify(d.audio[i].values, d.audio[i].frames) == d.audio[i].identity;
  }
  EXPECT_GE(image_ok, 990);
  EXPECT_GE(audio_ok, 990);
}

// voiced_frames tracks the true duration on clean-ish audio.
TEST(Data, VoicedFramesTrackDuration) {
  GeneratorConfig g;
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    const AudioStyle s = sample_audio_style(g, rng);
    const auto a = synth_audio(t % kNumIdentities, s, rng(), g);
    const auto v = AudioTemplateClassifier::voiced_frames(a, s.total_frames(), g.feat_dim);
    EXPECT_LE(std::abs(static_cast<long>(v) - static_cast<long>(s.duration)), 1);
  }
}

TEST(Data, PairEpochMatchesIdentityAndCoversAudio) {
  const Dataset d = generate_dataset(short_data(100), 1, "train");
  const auto pairs = pair_epoch(d, 5);
  ASSERT_EQ(pairs.size(), 100u);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(pairs[i].audio, i);
    EXPECT_EQ(d.audio[pairs[i].audio].identity, d.images[pairs[i].image].identity);
  }
  EXPECT_EQ(pairs, pair_epoch(d, 5));
  EXPECT_NE(pairs, pair_epoch(d, 6));
}

// Images are drawn uniformly within the identity: over many epochs every
// same-identity image shows up for a given audio sample.
TEST(Data, PairEpochIsUniformWithinIdentity) {
  const Dataset d = generate_dataset(short_data(50), 1, "train");
  std::mt19937_64 rng(2);
  std::array<int, 5> hits{};
  for (int e = 0; e < 2000; ++e) {
    const auto pairs = pair_epoch(d, rng);
    ++hits[pairs[3].image / 10];
  }
  for (int h : hits) EXPECT_NEAR(h, 400, 3 * std::sqrt(2000 * 0.2 * 0.8));
}

TEST(Data, PairEpochNeedsEveryIdentity) {
  Dataset d = generate_dataset(short_data(20), 1, "train");
  d.images.resize(9);
  EXPECT_THROW(pair_epoch(d, 1), RangeError);
}

TEST(Data, LabelFilteredNegativesNeverCollide) {
  const Dataset d = generate_dataset(short_data(100), 1, "train");
  const auto pairs = pair_epoch(d, 1);
  const auto neg = negative_for(pairs, pairs, d, NegativeMode::label_filtered, 9);
  ASSERT_EQ(neg.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i)
    EXPECT_NE(d.audio[neg[i].audio].identity, d.audio[pairs[i].audio].identity);
  EXPECT_EQ(neg, negative_for(pairs, pairs, d, NegativeMode::label_filtered, 9));

  std::vector<PairIndex> same_only(pairs.begin(), pairs.begin() + 1);
  EXPECT_THROW(negative_for(same_only, same_only, d, NegativeMode::label_filtered, 1), RangeError);
  EXPECT_THROW(negative_for(pairs, {}, d, NegativeMode::uniform, 1), RangeError);
}

TEST(Data, UniformNegativesCollideAtChance) {
  const Dataset d = generate_dataset(short_data(1000), 1, "train");
  const auto pairs = pair_epoch(d, 1);
  std::mt19937_64 rng(3);
  std::size_t collisions = 0, n = 0;
  for (int r = 0; r < 10; ++r) {
    const auto neg = negative_for(pairs, pairs, d, NegativeMode::uniform, rng);
    for (std::size_t i = 0; i < pairs.size(); ++i, ++n)
      collisions += d.audio[neg[i].audio].identity == d.audio[pairs[i].audio].identity;
  }
  const double expected = 0.1 * static_cast<double>(n);
  EXPECT_NEAR(static_cast<double>(collisions), expected, 3 * std::sqrt(expected * 0.9));
}

TEST(Data, NegativeModeNames) {
  EXPECT_EQ(negative_mode_from_string("uniform"), NegativeMode::uniform);
  EXPECT_EQ(negative_mode_from_string(to_string(NegativeMode::label_filtered)), NegativeMode::label_filtered);
  EXPECT_THROW(negative_mode_from_string("random"), ConfigError);
}

TEST(Data, BatchPadsWithZeros) {
  const Dataset d = generate_dataset(short_data(20), 1, "train");
  std::vector<PairIndex> pairs{{0, 0}, {1, 1}, {2, 2}};
  const Batch b = make_batch(d, pairs);
  const std::size_t T = b.audio.max_len(), F = b.audio.feat_dim;
  EXPECT_EQ(F, 8u);
  EXPECT_EQ(b.images.shape(), (Shape{3, 1, 28, 28}));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(b.audio.lengths[i], d.audio[i].frames);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = 0; f < F; ++f) {
        const double v = b.audio.frames[(i * T + t) * F + f];
        EXPECT_EQ(v, t < d.audio[i].frames ? d.audio[i].values[t * F + f] : 0.0);
      }
  }
}

TEST(Data, SaveLoadIsBitIdentical) {
  const auto dir = scratch_dir("dataset");
  const Dataset d = generate_dataset(short_data(30), 4, "test");
  save_dataset(d, dir / "a.bin");
  const Dataset e = load_dataset(dir / "a.bin");
  EXPECT_EQ(e.split, "test");
  EXPECT_EQ(e.seed, 4u);
  EXPECT_EQ(e.config, d.config);
  ASSERT_EQ(e.audio.size(), d.audio.size());
  for (std::size_t i = 0; i < d.audio.size(); ++i) {
    EXPECT_EQ(e.audio[i].values, d.audio[i].values);
    EXPECT_EQ(e.audio[i].style, d.audio[i].style);
    EXPECT_EQ(e.images[i].pixels, d.images[i].pixels);
    EXPECT_EQ(e.images[i].style, d.images[i].style);
  }
  save_dataset(e, dir / "b.bin");
  EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
}

TEST(Data, LoadRejectsBadFiles) {
  const auto dir = scratch_dir("dataset-bad");
  const Dataset d = generate_dataset(short_data(10), 4, "train");
  save_dataset(d, dir / "ok.bin");
  auto bytes = slurp(dir / "ok.bin");
  const auto newline = static_cast<std::size_t>(std::find(bytes.begin(), bytes.end(), '\n') - bytes.begin());
  std::string header(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(newline));

  auto write = [&](const std::string& name, const std::string& head, std::size_t payload) {
    std::ofstream out(dir / name, std::ios::binary);
    out << head << '\n';
    out.write(bytes.data() + newline + 1, static_cast<std::streamsize>(payload));
    return dir / name;
  };
  const std::size_t payload = bytes.size() - newline - 1;

  EXPECT_THROW(load_dataset(write("garbage.bin", "PK\x03\x04 not json", payload)), MagicError);
  std::string wrong_format = header;
  wrong_format.replace(wrong_format.find("pvae-dataset"), 12, "other-format");
  EXPECT_THROW(load_dataset(write("format.bin", wrong_format, payload)), MagicError);
  std::string v2 = header;
  v2.replace(v2.find("\"version\":1"), 11, "\"version\":2");
  EXPECT_THROW(load_dataset(write("version.bin", v2, payload)), VersionError);
  EXPECT_THROW(load_dataset(write("short.bin", header, payload - 4)), TruncatedError);
  EXPECT_THROW(load_dataset(dir / "missing.bin"), IoError);
}

TEST(Data, IdxFixtureRoundTrip) {
  const auto dir = scratch_dir("idx");
  const auto image_bytes = idx_images(0x803, 3, 28, 28, 3 * 28 * 28);
  dump(dir / "img.idx", image_bytes);
  dump(dir / "lab.idx", idx_labels({7, 0, 9}));

  const IdxImages img = read_idx_images(dir / "img.idx");
  EXPECT_EQ(img.count, 3u);
  EXPECT_EQ(img.rows, 28u);
  EXPECT_EQ(img.bytes.size(), 3u * 28 * 28);
  EXPECT_EQ(img.bytes[5], (5 * 37) % 256);
  EXPECT_DOUBLE_EQ(img.pixels[5], ((5 * 37) % 256) / 255.0);
  EXPECT_EQ(read_idx_labels(dir / "lab.idx"), (std::vector<std::uint8_t>{7, 0, 9}));

  write_idx_images(img, dir / "img2.idx");
  const std::vector<std::uint8_t> lab{7, 0, 9};
  write_idx_labels(lab, dir / "lab2.idx");
  EXPECT_EQ(slurp(dir / "img.idx"), slurp(dir / "img2.idx"));
  EXPECT_EQ(slurp(dir / "lab.idx"), slurp(dir / "lab2.idx"));

  const auto pool = load_mnist(dir / "img.idx", dir / "lab.idx");
  ASSERT_EQ(pool.size(), 3u);
  EXPECT_EQ(pool[2].identity, 9);
  EXPECT_DOUBLE_EQ(pool[1].pixels[0], img.pixels[28 * 28]);
}

TEST(Data, IdxErrors) {
  const auto dir = scratch_dir("idx-bad");
  dump(dir / "magic.idx", idx_images(0x804, 1, 28, 28, 28 * 28));
  try {
    read_idx_images(dir / "magic.idx");
    FAIL() << "expected MagicError";
  } catch (const MagicError& e) {
    EXPECT_NE(std::string(e.what()).find("0x00000804"), std::string::npos) << e.what();
  }
  dump(dir / "trunc.idx", idx_images(0x803, 2, 28, 28, 28 * 28 + 100));
  EXPECT_THROW(read_idx_images(dir / "trunc.idx"), TruncatedError);
  dump(dir / "head.idx", {0x00, 0x00, 0x08});
  EXPECT_THROW(read_idx_images(dir / "head.idx"), TruncatedError);
  dump(dir / "lab.idx", idx_labels({1, 10}));
  EXPECT_THROW(read_idx_labels(dir / "lab.idx"), RangeError);
  auto labels = idx_labels({1, 2, 3});
  labels.pop_back();
  dump(dir / "labtrunc.idx", labels);
  EXPECT_THROW(read_idx_labels(dir / "labtrunc.idx"), TruncatedError);
  dump(dir / "labmagic.idx", idx_images(0x803, 1, 28, 28, 28 * 28));
  EXPECT_THROW(read_idx_labels(dir / "labmagic.idx"), MagicError);

  dump(dir / "small.idx", idx_images(0x803, 1, 14, 14, 14 * 14));
  dump(dir / "one.idx", idx_labels({1}));
  EXPECT_THROW(load_mnist(dir / "small.idx", dir / "one.idx"), ShapeError);
  dump(dir / "img.idx", idx_images(0x803, 2, 28, 28, 2 * 28 * 28));
  EXPECT_THROW(load_mnist(dir / "img.idx", dir / "one.idx"), ShapeError);
  EXPECT_THROW(read_idx_images(dir / "nope.idx"), IoError);
}
