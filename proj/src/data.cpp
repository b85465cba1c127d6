#include "pvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <cstdio>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "binary_io.hpp"
#include "pvae/error.hpp"

namespace pvae {

using nlohmann::json;

namespace {

constexpr std::size_t kSide = 28;
constexpr double kGlyphBox = 20.0;

// Classic 5x7 digit font, one string per row, '1' = ink.
constexpr std::array<std::array<const char*, 7>, 10> kFont = {{
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
    {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
    {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},
}};

// Formant channel positions (start, middle, end) for the two formants of
// each spoken digit, before the pitch shift.
struct Formants {
  std::array<double, 3> low, high;
};
constexpr std::array<Formants, 10> kFormants = {{
    {{2.0, 2.0, 2.0}, {5.0, 5.0, 5.0}},
    {{1.5, 2.5, 3.5}, {3.5, 4.5, 5.5}},
    {{3.5, 2.5, 1.5}, {5.5, 4.5, 3.5}},
    {{1.5, 3.0, 1.5}, {4.0, 5.5, 4.0}},
    {{3.0, 1.5, 3.0}, {5.5, 4.0, 5.5}},
    {{1.5, 2.5, 3.5}, {5.5, 5.5, 5.5}},
    {{2.0, 2.0, 2.0}, {5.5, 4.5, 3.5}},
    {{3.0, 3.0, 3.0}, {4.0, 4.0, 4.0}},
    {{1.5, 3.5, 1.5}, {5.5, 5.5, 5.5}},
    {{3.5, 1.5, 1.5}, {3.5, 5.5, 5.5}},
}};
constexpr double kFormantWidth = 0.7;

void check_identity(int identity) {
  if (identity < 0 || identity >= kNumIdentities)
    throw RangeError("identity " + std::to_string(identity) + " outside 0.." + std::to_string(kNumIdentities - 1));
}

double clipped_normal(std::normal_distribution<double>& n, std::mt19937_64& rng, double sigma) {
  return std::clamp(n(rng), -3.0 * sigma, 3.0 * sigma);
}

// Distance from glyph-space point (u, v) to the nearest ink cell.
double ink_distance(int identity, double u, double v) {
  const double cw = kGlyphBox / 5.0, ch = kGlyphBox / 7.0;
  double best = 1e9;
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 5; ++c) {
      if (kFont[static_cast<std::size_t>(identity)][static_cast<std::size_t>(r)][c] != '1') continue;
      const double dx = std::max({c * cw - u, 0.0, u - (c + 1) * cw});
      const double dy = std::max({r * ch - v, 0.0, v - (r + 1) * ch});
      best = std::min(best, std::hypot(dx, dy));
    }
  return best;
}

double lerp3(const std::array<double, 3>& p, double tau) {
  return tau < 0.5 ? p[0] + (p[1] - p[0]) * (tau / 0.5) : p[1] + (p[2] - p[1]) * ((tau - 0.5) / 0.5);
}

std::uint64_t split_tag(const std::string& split) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : split) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::mt19937_64 sample_rng(std::uint64_t seed, const std::string& split, std::uint32_t modality, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split_tag(split)), modality, static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(static_cast<std::uint64_t>(index) >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

void GeneratorConfig::validate() const {
  if (samples == 0) throw ConfigError("data.samples must be positive");
  if (feat_dim < 4) throw ConfigError("data.feat_dim must be at least 4");
  if (t_min < 2 || t_max < t_min) throw ConfigError("data.t_min/t_max must satisfy 2 <= t_min <= t_max");
  if (t_max < onset_max + t_min) throw ConfigError("data.t_max must leave room for onset_max + t_min frames");
  if (thickness_min > thickness_max || scale_min > scale_max || intensity_min > intensity_max ||
      amplitude_min > amplitude_max || scale_min <= 0 || tilt_max < 0 || offset_max < 0 || pitch_max < 0 ||
      pixel_noise < 0 || feature_noise < 0)
    throw ConfigError("data generator ranges are inconsistent");
}

// ---------------------------------------------------------------------------
// Rendering

std::vector<double> render_glyph(int identity, const ImageStyle& style, std::uint64_t seed, double noise_sigma) {
  check_identity(identity);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, noise_sigma > 0 ? noise_sigma : 1.0);
  std::vector<double> img(kSide * kSide);
  const double centre = kSide / 2.0;
  for (std::size_t y = 0; y < kSide; ++y)
    for (std::size_t x = 0; x < kSide; ++x) {
      // Output pixel centre -> glyph box coordinates (inverse transform).
      const double dx = (x + 0.5 - centre - style.offset_x) / style.scale;
      const double dy = (y + 0.5 - centre - style.offset_y) / style.scale;
      const double u = dx + style.tilt * dy + kGlyphBox / 2.0;
      const double v = dy + kGlyphBox / 2.0;
      const double d = ink_distance(identity, u, v) * style.scale;
      double ink = std::clamp(1.0 - (d - style.thickness), 0.0, 1.0);
      double value = ink * style.intensity;
      if (noise_sigma > 0) value += clipped_normal(noise, rng, noise_sigma);
      img[y * kSide + x] = std::clamp(value, 0.0, 1.0);
    }
  return img;
}

std::vector<double> synth_audio(int identity, const AudioStyle& style, std::uint64_t seed,
                                const GeneratorConfig& config) {
  check_identity(identity);
  const std::size_t total = style.total_frames();
  if (total < config.t_min || total > config.t_max)
    throw RangeError("audio length " + std::to_string(total) + " outside [" + std::to_string(config.t_min) + ", " +
                     std::to_string(config.t_max) + "]");
  if (style.duration < 2) throw RangeError("audio duration must be at least 2 frames");
  const std::size_t f_dim = config.feat_dim;
  const double sigma = config.feature_noise;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma > 0 ? sigma : 1.0);
  const auto& formants = kFormants[static_cast<std::size_t>(identity)];
  // Formant positions are defined on an 8-channel grid; other widths rescale.
  const double channel_scale = static_cast<double>(f_dim) / 8.0;
  std::vector<double> out(total * f_dim);
  for (std::size_t t = 0; t < total; ++t) {
    double envelope = 0.0;
    double p_low = 0.0, p_high = 0.0;
    if (t >= style.onset) {
      const double tau = static_cast<double>(t - style.onset) / static_cast<double>(style.duration - 1);
      envelope = style.amplitude * (0.6 + 0.4 * std::sin(std::numbers::pi * tau));
      p_low = (lerp3(formants.low, tau) + style.pitch_offset) * channel_scale;
      p_high = (lerp3(formants.high, tau) + style.pitch_offset) * channel_scale;
    }
    for (std::size_t f = 0; f < f_dim; ++f) {
      double v = 0.0;
      if (envelope > 0.0) {
        const double w = kFormantWidth * channel_scale;
        const double a = (static_cast<double>(f) - p_low) / w;
        const double b = (static_cast<double>(f) - p_high) / w;
        v = envelope * (std::exp(-0.5 * a * a) + std::exp(-0.5 * b * b));
      }
      if (sigma > 0) v += clipped_normal(noise, rng, sigma);
      out[t * f_dim + f] = v;
    }
  }
  return out;
}

ImageStyle sample_image_style(const GeneratorConfig& c, std::mt19937_64& rng) {
  auto u = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  ImageStyle s;
  s.tilt = u(-c.tilt_max, c.tilt_max);
  s.thickness = u(c.thickness_min, c.thickness_max);
  s.scale = u(c.scale_min, c.scale_max);
  s.offset_x = u(-c.offset_max, c.offset_max);
  s.offset_y = u(-c.offset_max, c.offset_max);
  s.intensity = u(c.intensity_min, c.intensity_max);
  return s;
}

AudioStyle sample_audio_style(const GeneratorConfig& c, std::mt19937_64& rng) {
  AudioStyle s;
  s.duration = std::uniform_int_distribution<std::size_t>(c.duration_min(), c.duration_max())(rng);
  s.amplitude = std::uniform_real_distribution<double>(c.amplitude_min, c.amplitude_max)(rng);
  s.pitch_offset = std::uniform_int_distribution<int>(-c.pitch_max, c.pitch_max)(rng);
  s.onset = std::uniform_int_distribution<std::size_t>(0, c.onset_max)(rng);
  return s;
}

Dataset generate_dataset(const GeneratorConfig& config, std::uint64_t seed, const std::string& split) {
  config.validate();
  Dataset d;
  d.split = split;
  d.seed = seed;
  d.config = config;
  d.audio.resize(config.samples);
  d.images.resize(config.samples);
  for (std::size_t i = 0; i < config.samples; ++i) {
    const int identity = static_cast<int>(i % kNumIdentities);
    {
      auto rng = sample_rng(seed, split, 1, i);
      ImageSample& s = d.images[i];
      s.identity = identity;
      s.style = sample_image_style(config, rng);
      s.pixels = render_glyph(identity, s.style, rng(), config.pixel_noise);
      for (auto& p : s.pixels) p = io::round_f32(p);
    }
    {
      auto rng = sample_rng(seed, split, 2, i);
      AudioSample& s = d.audio[i];
      s.identity = identity;
      s.style = sample_audio_style(config, rng);
      s.frames = s.style.total_frames();
      s.values = synth_audio(identity, s.style, rng(), config);
      for (auto& v : s.values) v = io::round_f32(v);
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Pairing and negatives

std::vector<PairIndex> pair_epoch(const Dataset& dataset, std::mt19937_64& rng) {
  std::array<std::vector<std::size_t>, kNumIdentities> by_identity;
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    check_identity(dataset.images[i].identity);
    by_identity[static_cast<std::size_t>(dataset.images[i].identity)].push_back(i);
  }
  std::vector<PairIndex> pairs;
  pairs.reserve(dataset.audio.size());
  for (std::size_t i = 0; i < dataset.audio.size(); ++i) {
    const int id = dataset.audio[i].identity;
    check_identity(id);
    const auto& pool = by_identity[static_cast<std::size_t>(id)];
    if (pool.empty()) throw RangeError("no image sample with identity " + std::to_string(id) + " to pair with");
    pairs.push_back({i, pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]});
  }
  return pairs;
}

std::vector<PairIndex> pair_epoch(const Dataset& dataset, std::uint64_t epoch_seed) {
  std::mt19937_64 rng(epoch_seed);
  return pair_epoch(dataset, rng);
}

std::string to_string(NegativeMode mode) {
  return mode == NegativeMode::label_filtered ? "label_filtered" : "uniform";
}

NegativeMode negative_mode_from_string(const std::string& name) {
  if (name == "label_filtered") return NegativeMode::label_filtered;
  if (name == "uniform") return NegativeMode::uniform;
  throw ConfigError("unknown negative mode '" + name + "' (expected label_filtered or uniform)");
}

std::vector<PairIndex> negative_for(std::span<const PairIndex> anchors, std::span<const PairIndex> pool,
                                    const Dataset& dataset, NegativeMode mode, std::mt19937_64& rng) {
  if (pool.empty()) throw RangeError("negative sampling from an empty pool");
  auto identity = [&dataset](const PairIndex& p) { return dataset.audio.at(p.audio).identity; };
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<PairIndex> out;
  out.reserve(anchors.size());
  for (const auto& a : anchors) {
    const int id = identity(a);
    if (mode == NegativeMode::label_filtered &&
        std::all_of(pool.begin(), pool.end(), [&](const PairIndex& p) { return identity(p) == id; }))
      throw RangeError("no negative with an identity other than " + std::to_string(id));
    PairIndex n = pool[pick(rng)];
    while (mode == NegativeMode::label_filtered && identity(n) == id) n = pool[pick(rng)];
    out.push_back(n);
  }
  return out;
}

std::vector<PairIndex> negative_for(std::span<const PairIndex> anchors, std::span<const PairIndex> pool,
                                    const Dataset& dataset, NegativeMode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return negative_for(anchors, pool, dataset, mode, rng);
}

// ---------------------------------------------------------------------------
// Batches

AudioBatch make_audio_batch(std::span<const AudioSample* const> samples) {
  AudioBatch b;
  if (samples.empty()) return b;
  b.feat_dim = samples[0]->values.size() / std::max<std::size_t>(samples[0]->frames, 1);
  for (const auto* s : samples) b.lengths.push_back(s->frames);
  const std::size_t T = b.max_len();
  b.frames.assign(samples.size() * T * b.feat_dim, 0.0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->values.size() != samples[i]->frames * b.feat_dim)
      throw ShapeError("audio sample has inconsistent frame data");
    std::copy(samples[i]->values.begin(), samples[i]->values.end(),
              b.frames.begin() + static_cast<std::ptrdiff_t>(i * T * b.feat_dim));
  }
  return b;
}

Tensor make_image_batch(std::span<const ImageSample* const> samples, std::size_t side) {
  std::vector<double> v;
  v.reserve(samples.size() * side * side);
  for (const auto* s : samples) {
    if (s->pixels.size() != side * side) throw ShapeError("image sample is not " + std::to_string(side) + "x" + std::to_string(side));
    v.insert(v.end(), s->pixels.begin(), s->pixels.end());
  }
  return Tensor(Shape{samples.size(), 1, side, side}, std::move(v));
}

Batch make_batch(const Dataset& dataset, std::span<const PairIndex> pairs) {
  std::vector<const AudioSample*> audio;
  std::vector<const ImageSample*> images;
  for (const auto& p : pairs) {
    audio.push_back(&dataset.audio.at(p.audio));
    images.push_back(&dataset.images.at(p.image));
  }
  Batch b;
  if (!dataset.audio.empty()) b.audio = make_audio_batch(audio);
  if (!dataset.images.empty()) b.images = make_image_batch(images);
  return b;
}

// ---------------------------------------------------------------------------
// Native dataset files

namespace {

json config_to_json(const GeneratorConfig& c) {
  return {{"samples", c.samples},          {"feat_dim", c.feat_dim},
          {"t_min", c.t_min},              {"t_max", c.t_max},
          {"tilt_max", c.tilt_max},        {"thickness_min", c.thickness_min},
          {"thickness_max", c.thickness_max}, {"scale_min", c.scale_min},
          {"scale_max", c.scale_max},      {"offset_max", c.offset_max},
          {"intensity_min", c.intensity_min}, {"intensity_max", c.intensity_max},
          {"pixel_noise", c.pixel_noise},  {"onset_max", c.onset_max},
          {"amplitude_min", c.amplitude_min}, {"amplitude_max", c.amplitude_max},
          {"pitch_max", c.pitch_max},      {"feature_noise", c.feature_noise}};
}

GeneratorConfig config_from_json(const json& j) {
  GeneratorConfig c;
  c.samples = j.at("samples");
  c.feat_dim = j.at("feat_dim");
  c.t_min = j.at("t_min");
  c.t_max = j.at("t_max");
  c.tilt_max = j.at("tilt_max");
  c.thickness_min = j.at("thickness_min");
  c.thickness_max = j.at("thickness_max");
  c.scale_min = j.at("scale_min");
  c.scale_max = j.at("scale_max");
  c.offset_max = j.at("offset_max");
  c.intensity_min = j.at("intensity_min");
  c.intensity_max = j.at("intensity_max");
  c.pixel_noise = j.at("pixel_noise");
  c.onset_max = j.at("onset_max");
  c.amplitude_min = j.at("amplitude_min");
  c.amplitude_max = j.at("amplitude_max");
  c.pitch_max = j.at("pitch_max");
  c.feature_noise = j.at("feature_noise");
  return c;
}

constexpr int kDatasetVersion = 1;

}  // namespace

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  json header;
  header["format"] = "pvae-dataset";
  header["version"] = kDatasetVersion;
  header["split"] = d.split;
  header["seed"] = d.seed;
  header["config"] = config_to_json(d.config);
  header["image_side"] = kSide;
  header["feat_dim"] = d.config.feat_dim;
  std::size_t audio_floats = 0;
  json audio = json::array();
  for (const auto& s : d.audio) {
    audio.push_back({{"identity", s.identity},
                     {"frames", s.frames},
                     {"duration", s.style.duration},
                     {"amplitude", s.style.amplitude},
                     {"pitch_offset", s.style.pitch_offset},
                     {"onset", s.style.onset}});
    audio_floats += s.values.size();
  }
  json images = json::array();
  for (const auto& s : d.images)
    images.push_back({{"identity", s.identity},
                      {"tilt", s.style.tilt},
                      {"thickness", s.style.thickness},
                      {"scale", s.style.scale},
                      {"offset_x", s.style.offset_x},
                      {"offset_y", s.style.offset_y},
                      {"intensity", s.style.intensity}});
  header["audio"] = std::move(audio);
  header["images"] = std::move(images);
  header["payload"] = {{"image_floats", d.images.size() * kSide * kSide}, {"audio_floats", audio_floats}};

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset file " + path.string());
  out << header.dump() << '\n';
  for (const auto& s : d.images) io::write_f32(out, s.pixels);
  for (const auto& s : d.audio) io::write_f32(out, s.values);
  if (!out) throw IoError("failed writing dataset file " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw TruncatedError("dataset file " + path.string() + " has no header");
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception& e) {
    throw MagicError("dataset header is not JSON: " + std::string(e.what()));
  }
  if (h.value("format", "") != "pvae-dataset") throw MagicError("not a pvae dataset file: " + path.string());
  if (h.at("version") != kDatasetVersion)
    throw VersionError("dataset version " + h.at("version").dump() + " is not supported (expected " +
                       std::to_string(kDatasetVersion) + ")");
  Dataset d;
  d.split = h.at("split");
  d.seed = h.at("seed");
  d.config = config_from_json(h.at("config"));
  const std::size_t side = h.at("image_side");
  const std::size_t feat = h.at("feat_dim");
  if (side != kSide) throw ShapeError("dataset image side " + std::to_string(side) + " is not 28");
  for (const auto& j : h.at("images")) {
    ImageSample s;
    s.identity = j.at("identity");
    s.style = {j.at("tilt"), j.at("thickness"), j.at("scale"), j.at("offset_x"), j.at("offset_y"), j.at("intensity")};
    d.images.push_back(std::move(s));
  }
  for (const auto& j : h.at("audio")) {
    AudioSample s;
    s.identity = j.at("identity");
    s.frames = j.at("frames");
    s.style.duration = j.at("duration");
    s.style.amplitude = j.at("amplitude");
    s.style.pitch_offset = j.at("pitch_offset");
    s.style.onset = j.at("onset");
    d.audio.push_back(std::move(s));
  }
  std::size_t audio_floats = 0;
  for (const auto& s : d.audio) audio_floats += s.frames * feat;
  if (h.at("payload").at("image_floats") != d.images.size() * side * side ||
      h.at("payload").at("audio_floats") != audio_floats)
    throw ShapeError("dataset payload sizes disagree with the sample table");
  for (auto& s : d.images) s.pixels = io::read_f32(in, side * side, "dataset images");
  for (auto& s : d.audio) s.values = io::read_f32(in, s.frames * feat, "dataset audio");
  return d;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

std::uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw TruncatedError(what + ": header ends early");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

}  // namespace

IdxImages read_idx_images(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open IDX file " + path.string());
  const std::uint32_t magic = read_be32(in, path.string());
  if (magic != kIdxImages) throw MagicError("IDX image magic " + hex(magic) + " (expected 0x00000803)");
  IdxImages out;
  out.count = read_be32(in, path.string());
  out.rows = read_be32(in, path.string());
  out.cols = read_be32(in, path.string());
  if (out.rows == 0 || out.cols == 0) throw ShapeError("IDX images with zero rows or columns");
  const std::size_t n = out.count * out.rows * out.cols;
  out.bytes.resize(n);
  in.read(reinterpret_cast<char*>(out.bytes.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw TruncatedError("IDX payload truncated: expected " + std::to_string(n) + " bytes, got " +
                         std::to_string(in.gcount()));
  out.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.pixels[i] = out.bytes[i] / 255.0;
  return out;
}

std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open IDX file " + path.string());
  const std::uint32_t magic = read_be32(in, path.string());
  if (magic != kIdxLabels) throw MagicError("IDX label magic " + hex(magic) + " (expected 0x00000801)");
  const std::size_t n = read_be32(in, path.string());
  std::vector<std::uint8_t> labels(n);
  in.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw TruncatedError("IDX labels truncated: expected " + std::to_string(n) + " bytes, got " +
                         std::to_string(in.gcount()));
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] >= kNumIdentities)
      throw RangeError("IDX label " + std::to_string(labels[i]) + " at index " + std::to_string(i) + " outside 0..9");
  return labels;
}

void write_idx_images(const IdxImages& images, const std::filesystem::path& path) {
  if (images.bytes.size() != images.count * images.rows * images.cols)
    throw ShapeError("IDX image payload does not match count x rows x cols");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write IDX file " + path.string());
  write_be32(out, kIdxImages);
  write_be32(out, static_cast<std::uint32_t>(images.count));
  write_be32(out, static_cast<std::uint32_t>(images.rows));
  write_be32(out, static_cast<std::uint32_t>(images.cols));
  out.write(reinterpret_cast<const char*>(images.bytes.data()), static_cast<std::streamsize>(images.bytes.size()));
}

void write_idx_labels(std::span<const std::uint8_t> labels, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write IDX file " + path.string());
  write_be32(out, kIdxLabels);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

std::vector<ImageSample> load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels) {
  IdxImages img = read_idx_images(images);
  auto lab = read_idx_labels(labels);
  if (img.rows != kSide || img.cols != kSide)
    throw ShapeError("MNIST images are " + std::to_string(img.rows) + "x" + std::to_string(img.cols) + ", expected 28x28");
  if (img.count != lab.size())
    throw ShapeError(std::to_string(img.count) + " images but " + std::to_string(lab.size()) + " labels");
  std::vector<ImageSample> out(img.count);
  for (std::size_t i = 0; i < img.count; ++i) {
    out[i].identity = lab[i];
    out[i].pixels.assign(img.pixels.begin() + static_cast<std::ptrdiff_t>(i * kSide * kSide),
                         img.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * kSide * kSide));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Oracle classifiers

namespace {

// Clamp, move the centre of mass to the image centre, unit L2 norm.
std::vector<double> normalize_image(std::span<const double> pixels) {
  std::vector<double> p(pixels.size());
  double mass = 0, cx = 0, cy = 0;
  for (std::size_t y = 0; y < kSide; ++y)
    for (std::size_t x = 0; x < kSide; ++x) {
      const double v = std::clamp(pixels[y * kSide + x], 0.0, 1.0);
      mass += v;
      cx += v * static_cast<double>(x);
      cy += v * static_cast<double>(y);
    }
  if (mass <= 0) return p;
  const long sx = std::lround(cx / mass - 13.5), sy = std::lround(cy / mass - 13.5);
  double norm = 0;
  for (long y = 0; y < static_cast<long>(kSide); ++y)
    for (long x = 0; x < static_cast<long>(kSide); ++x) {
      const long src_x = x + sx, src_y = y + sy;
      if (src_x < 0 || src_y < 0 || src_x >= static_cast<long>(kSide) || src_y >= static_cast<long>(kSide)) continue;
      const double v = std::clamp(pixels[static_cast<std::size_t>(src_y) * kSide + static_cast<std::size_t>(src_x)], 0.0, 1.0);
      p[static_cast<std::size_t>(y) * kSide + static_cast<std::size_t>(x)] = v;
      norm += v * v;
    }
  norm = std::sqrt(norm);
  if (norm > 0)
    for (auto& v : p) v /= norm;
  return p;
}

constexpr std::size_t kAudioFeatureFrames = 16;

std::vector<double> audio_features(std::span<const double> frames, std::size_t num_frames, std::size_t feat_dim) {
  std::vector<double> energy(num_frames, 0.0);
  double peak = 0;
  for (std::size_t t = 0; t < num_frames; ++t) {
    for (std::size_t f = 0; f < feat_dim; ++f) energy[t] += frames[t * feat_dim + f];
    peak = std::max(peak, energy[t]);
  }
  std::vector<double> out(kAudioFeatureFrames * feat_dim, 0.0);
  if (peak <= 0) return out;
  std::size_t first = 0, last = num_frames - 1;
  while (first < num_frames && energy[first] <= 0.3 * peak) ++first;
  while (last > first && energy[last] <= 0.3 * peak) --last;
  const double span = static_cast<double>(last - first);
  double norm = 0;
  for (std::size_t k = 0; k < kAudioFeatureFrames; ++k) {
    const double pos = first + span * static_cast<double>(k) / (kAudioFeatureFrames - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, last);
    const double w = pos - static_cast<double>(lo);
    for (std::size_t f = 0; f < feat_dim; ++f) {
      const double v = (1 - w) * frames[lo * feat_dim + f] + w * frames[hi * feat_dim + f];
      out[k * feat_dim + f] = v;
      norm += v * v;
    }
  }
  norm = std::sqrt(norm);
  if (norm > 0)
    for (auto& v : out) v /= norm;
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

}  // namespace

ImageTemplateClassifier::ImageTemplateClassifier() {
  const double tilts[] = {-0.35, -0.175, 0.0, 0.175, 0.35};
  const double scales[] = {0.8, 0.975, 1.15};
  const double thicknesses[] = {0.0, 0.8, 1.6};
  for (int id = 0; id < kNumIdentities; ++id)
    for (double tilt : tilts)
      for (double sc : scales)
        for (double th : thicknesses) {
          ImageStyle s;
          s.tilt = tilt;
          s.scale = sc;
          s.thickness = th;
          templates_.push_back(normalize_image(render_glyph(id, s, 0, 0.0)));
          labels_.push_back(id);
        }
}

int ImageTemplateClassifier::classify(std::span<const double> pixels) const {
  if (pixels.size() != kSide * kSide) throw ShapeError("image classifier expects 28x28 pixels");
  const auto p = normalize_image(pixels);
  double best = -1e300;
  int label = 0;
  for (std::size_t i = 0; i < templates_.size(); ++i) {
    const double s = dot(p, templates_[i]);
    if (s > best) {
      best = s;
      label = labels_[i];
    }
  }
  return label;
}

AudioTemplateClassifier::AudioTemplateClassifier(const GeneratorConfig& config) : feat_dim_(config.feat_dim) {
  GeneratorConfig clean = config;
  clean.feature_noise = 0.0;
  for (int id = 0; id < kNumIdentities; ++id)
    for (int pitch = -config.pitch_max; pitch <= config.pitch_max; ++pitch) {
      AudioStyle s;
      s.duration = std::clamp<std::size_t>(36, clean.duration_min(), clean.duration_max());
      s.pitch_offset = pitch;
      s.onset = 0;
      if (s.total_frames() < clean.t_min) s.onset = clean.t_min - s.duration;
      auto frames = synth_audio(id, s, 0, clean);
      templates_.push_back(audio_features(frames, s.total_frames(), feat_dim_));
      labels_.push_back(id);
    }
}

int AudioTemplateClassifier::classify(std::span<const double> frames, std::size_t num_frames) const {
  if (num_frames == 0 || frames.size() != num_frames * feat_dim_)
    throw ShapeError("audio classifier: frame data does not match " + std::to_string(num_frames) + " x " +
                     std::to_string(feat_dim_));
  const auto feat = audio_features(frames, num_frames, feat_dim_);
  double best = -1e300;
  int label = 0;
  for (std::size_t i = 0; i < templates_.size(); ++i) {
    const double s = dot(feat, templates_[i]);
    if (s > best) {
      best = s;
      label = labels_[i];
    }
  }
  return label;
}

std::size_t AudioTemplateClassifier::voiced_frames(std::span<const double> frames, std::size_t num_frames,
                                                   std::size_t feat_dim) {
  std::vector<double> energy(num_frames, 0.0);
  double peak = 0;
  for (std::size_t t = 0; t < num_frames; ++t) {
    for (std::size_t f = 0; f < feat_dim; ++f) energy[t] += frames[t * feat_dim + f];
    peak = std::max(peak, energy[t]);
  }
  if (peak <= 0) return 0;
  std::size_t first = 0, last = num_frames - 1;
  while (first < num_frames && energy[first] <= 0.3 * peak) ++first;
  while (last > first && energy[last] <= 0.3 * peak) --last;
  return last - first + 1;
}

double image_mass(std::span<const double> pixels) {
  double m = 0;
  for (double p : pixels) m += std::clamp(p, 0.0, 1.0);
  return m;
}

}  // namespace pvae
