#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pvae/gaussian.hpp"
#include "pvae/tensor.hpp"

namespace pvae {

struct ArchConfig {
  std::size_t latent_dim_s = 16;
  std::size_t latent_dim_a = 16;
  std::size_t latent_dim_i = 16;
  std::size_t lstm_cells = 64;
  std::size_t preenc_out = 64;
  std::size_t image_side = 28;
  std::size_t audio_feat_dim = 8;
  std::array<std::size_t, 2> conv_channels{4, 8};
  std::array<std::size_t, 2> deconv_channels{8, 1};
  std::array<std::size_t, 2> fc_units{128, 7 * 7 * 16};

  /// 32-d latents, 512-cell LSTMs, 512-d pre-encoders, 80 filter banks.
  static ArchConfig full_scale();

  /// Throws ConfigError on non-positive sizes or a broken 28->14->7 chain.
  void validate() const;
  std::size_t decoder_channels() const;  // fc_units[1] / (side/4)^2
  std::size_t image_pixels() const { return image_side * image_side; }

  bool operator==(const ArchConfig&) const = default;
};

/// PVAE, or one of the single-modality VAE baselines (the M = 1 case).
enum class ModelKind { pvae, vae_audio, vae_image };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);

/// Which part of the model a parameter belongs to: generative decoders,
/// multimodal inference, or unimodal inference.
enum class ParamGroup { theta, phi, psi };

std::string to_string(ParamGroup group);

/// Zero-padded audio batch, [B x T_max x F] row-major.
struct AudioBatch {
  std::size_t feat_dim = 0;
  std::vector<std::size_t> lengths;
  std::vector<double> frames;

  std::size_t batch() const { return lengths.size(); }
  std::size_t max_len() const;
  bool empty() const { return lengths.empty(); }
  /// Frame t of every sequence, [B x F]; zeros past a sequence's end.
  Tensor step(std::size_t t) const;
  /// [T_max * B x F], row t * B + b.
  Tensor time_major() const;
  /// 1 where frame t of sample b exists, same layout as time_major().
  Tensor time_major_mask() const;
  /// Per-step activity of every sample, broadcast to `width` columns.
  Tensor step_mask(std::size_t t, std::size_t width) const;
};

/// Inputs of one training or inference call. Either modality may be
/// absent for the single-modality paths.
struct Batch {
  AudioBatch audio;
  Tensor images;  // [B x 1 x side x side]

  bool has_audio() const { return !audio.empty(); }
  bool has_image() const { return images.defined(); }
  std::size_t size() const;
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
};

struct GaussianHead {
  Linear mean;
  Linear log_var;
  DiagGaussian operator()(const Tensor& x) const { return {mean(x), log_var(x)}; }
};

struct AudioPreEncoder {
  LstmParams lstm;
  /// Final hidden state of each sequence (state frozen past its length).
  Tensor operator()(const AudioBatch& audio) const;
};

struct ImagePreEncoder {
  Tensor conv1, conv1_bias;
  Tensor conv2, conv2_bias;
  Linear fc;
  Tensor operator()(const Tensor& images) const;
};

struct AudioDecoder {
  LstmParams lstm;
  Linear out;
};

struct ImageDecoder {
  Linear fc1, fc2;
  Tensor deconv1, deconv1_bias;
  Tensor deconv2, deconv2_bias;
};

struct NamedParam {
  std::string name;
  ParamGroup group;
  Tensor tensor;
};

struct MultimodalPosterior {
  DiagGaussian zs, za, zi;  // za / zi undefined when the modality is absent
};

struct UnimodalPosterior {
  DiagGaussian zs;
  DiagGaussian style;
};

class PvaeModel {
 public:
  /// Parameters drawn uniformly in +-sqrt(1/fan_in), zero biases, LSTM
  /// forget-gate bias +1; values are rounded to float32.
  PvaeModel(ArchConfig arch, ModelKind kind, std::uint64_t seed);

  PvaeModel(const PvaeModel&) = delete;
  PvaeModel& operator=(const PvaeModel&) = delete;
  PvaeModel(PvaeModel&&) = default;
  PvaeModel& operator=(PvaeModel&&) = default;

  const ArchConfig& arch() const { return arch_; }
  ModelKind kind() const { return kind_; }
  bool has_audio() const { return kind_ != ModelKind::vae_image; }
  bool has_image() const { return kind_ != ModelKind::vae_audio; }

  /// Registry in a stable order; every parameter is in exactly one group.
  const std::vector<NamedParam>& parameters() const { return registry_; }
  std::vector<Tensor> group(ParamGroup g) const;
  void zero_grad();
  /// Deep copy of all parameter values.
  PvaeModel clone() const;

  // Multimodal inference network (phi). For the VAE baselines this is the
  // only encoder and feeds the zs and za (or zi) heads.
  struct {
    AudioPreEncoder audio;
    ImagePreEncoder image;
    GaussianHead zs, za, zi;
  } phi;

  // Unimodal inference networks (psi), PVAE only.
  struct {
    AudioPreEncoder audio;
    ImagePreEncoder image;
    GaussianHead audio_zs, audio_za;
    GaussianHead image_zs, image_zi;
  } psi;

  // Generative decoders (theta).
  struct {
    AudioDecoder audio;
    ImageDecoder image;
  } theta;

 private:
  void build(std::mt19937_64& rng);

  ArchConfig arch_;
  ModelKind kind_;
  std::vector<NamedParam> registry_;
};

MultimodalPosterior infer_multimodal(const PvaeModel& model, const Batch& batch);

/// Unimodal inference r(z^s | x^a) r(z^a | x^a). For the audio VAE
/// baseline the sole encoder is returned.
UnimodalPosterior infer_unimodal_audio(const PvaeModel& model, const AudioBatch& audio);
UnimodalPosterior infer_unimodal_image(const PvaeModel& model, const Tensor& images);

/// Frame means for `num_frames` steps, time-major [T x B x F]. The
/// concatenated (z_s, z_a) is the LSTM input at every step.
Tensor decode_audio(const PvaeModel& model, const Tensor& z_a, const Tensor& z_s, std::size_t num_frames);

/// Pixel means [B x 1 x side x side].
Tensor decode_image(const PvaeModel& model, const Tensor& z_i, const Tensor& z_s);

/// Decoder rollout lengths: ground truth at training time, the requested
/// or style-reference length at generation time.
std::vector<std::size_t> num_frames_policy(const AudioBatch& audio);

}  // namespace pvae
