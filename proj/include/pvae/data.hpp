#pragma once

// Synthetic parallel spoken/written digits with ground-truth factors,
// MNIST IDX ingestion, per-epoch identity-preserving pairing and the
// native dataset file format.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pvae/networks.hpp"

namespace pvae {

inline constexpr int kNumIdentities = 10;

struct ImageStyle {
  double tilt = 0.0;       // horizontal shear per pixel of height
  double thickness = 0.6;  // stroke growth in output pixels
  double scale = 1.0;
  double offset_x = 0.0;
  double offset_y = 0.0;
  double intensity = 1.0;

  bool operator==(const ImageStyle&) const = default;
};

struct AudioStyle {
  std::size_t duration = 36;  // voiced frames
  double amplitude = 1.0;
  int pitch_offset = 0;       // channel shift of both formants
  std::size_t onset = 0;      // leading low-energy frames

  std::size_t total_frames() const { return onset + duration; }
  bool operator==(const AudioStyle&) const = default;
};

struct ImageSample {
  int identity = 0;
  ImageStyle style;
  std::vector<double> pixels;  // side * side, row-major, [0, 1]
};

struct AudioSample {
  int identity = 0;
  AudioStyle style;
  std::size_t frames = 0;
  std::vector<double> values;  // frames x feat_dim
};

/// Generator ranges; every sampled style lies within them.
struct GeneratorConfig {
  std::size_t samples = 2000;  // per modality
  std::size_t feat_dim = 8;
  std::size_t t_min = 20;
  std::size_t t_max = 60;
  double tilt_max = 0.35;
  double thickness_min = 0.0, thickness_max = 1.6;
  double scale_min = 0.8, scale_max = 1.15;
  double offset_max = 2.0;
  double intensity_min = 0.6, intensity_max = 1.0;
  double pixel_noise = 0.02;
  std::size_t onset_max = 8;
  double amplitude_min = 0.5, amplitude_max = 1.5;
  int pitch_max = 1;
  double feature_noise = 0.05;

  void validate() const;
  std::size_t duration_min() const { return t_min; }
  std::size_t duration_max() const { return t_max - onset_max; }
  bool operator==(const GeneratorConfig&) const = default;
};

struct Dataset {
  std::string split = "train";
  std::uint64_t seed = 0;
  GeneratorConfig config;
  std::vector<AudioSample> audio;
  std::vector<ImageSample> images;
};

/// Deterministic glyph render: 5x7 bitmap font in a 20x20 box, sheared,
/// thickened, scaled, translated, dimmed, plus clipped pixel noise.
std::vector<double> render_glyph(int identity, const ImageStyle& style, std::uint64_t seed,
                                 double noise_sigma = 0.02);

/// Deterministic frame sequence (onset + duration) x feat_dim from two
/// per-identity formant trajectories, plus clipped feature noise.
std::vector<double> synth_audio(int identity, const AudioStyle& style, std::uint64_t seed,
                                const GeneratorConfig& config = {});

ImageStyle sample_image_style(const GeneratorConfig& config, std::mt19937_64& rng);
AudioStyle sample_audio_style(const GeneratorConfig& config, std::mt19937_64& rng);

/// Balanced identities (index mod 10); every sample depends only on
/// (config, seed, split, index).
Dataset generate_dataset(const GeneratorConfig& config, std::uint64_t seed, const std::string& split);

struct PairIndex {
  std::size_t audio;
  std::size_t image;
  bool operator==(const PairIndex&) const = default;
};

/// Every audio sample exactly once, each with a uniformly drawn image of
/// the same identity.
std::vector<PairIndex> pair_epoch(const Dataset& dataset, std::uint64_t epoch_seed);
std::vector<PairIndex> pair_epoch(const Dataset& dataset, std::mt19937_64& rng);

enum class NegativeMode { label_filtered, uniform };

std::string to_string(NegativeMode mode);
NegativeMode negative_mode_from_string(const std::string& name);

/// For each anchor, a pair drawn from `pool`; label_filtered rejects pairs
/// sharing the anchor's identity.
std::vector<PairIndex> negative_for(std::span<const PairIndex> anchors, std::span<const PairIndex> pool,
                                    const Dataset& dataset, NegativeMode mode, std::mt19937_64& rng);
std::vector<PairIndex> negative_for(std::span<const PairIndex> anchors, std::span<const PairIndex> pool,
                                    const Dataset& dataset, NegativeMode mode, std::uint64_t seed);

Batch make_batch(const Dataset& dataset, std::span<const PairIndex> pairs);
AudioBatch make_audio_batch(std::span<const AudioSample* const> samples);
Tensor make_image_batch(std::span<const ImageSample* const> samples, std::size_t side = 28);

// --- Native dataset file: JSON header line + little-endian float32 payload.

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// --- MNIST IDX

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> bytes;
  std::vector<double> pixels;  // bytes / 255
};

IdxImages read_idx_images(const std::filesystem::path& path);
std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path);
void write_idx_images(const IdxImages& images, const std::filesystem::path& path);
void write_idx_labels(std::span<const std::uint8_t> labels, const std::filesystem::path& path);

/// IDX image + label files as an image pool (styles unknown, left default).
std::vector<ImageSample> load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels);

// --- Oracle identity classifiers (nearest clean template), independent of
// any trained model.

class ImageTemplateClassifier {
 public:
  ImageTemplateClassifier();
  int classify(std::span<const double> pixels) const;

 private:
  std::vector<std::vector<double>> templates_;
  std::vector<int> labels_;
};

class AudioTemplateClassifier {
 public:
  explicit AudioTemplateClassifier(const GeneratorConfig& config = {});
  int classify(std::span<const double> frames, std::size_t num_frames) const;
  /// Frames whose energy exceeds the voicing threshold, first to last.
  static std::size_t voiced_frames(std::span<const double> frames, std::size_t num_frames, std::size_t feat_dim);

 private:
  std::size_t feat_dim_;
  std::vector<std::vector<double>> templates_;
  std::vector<int> labels_;
};

/// Total pixel mass, the stroke-thickness proxy used by style checks.
double image_mass(std::span<const double> pixels);

}  // namespace pvae
