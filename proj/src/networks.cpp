#include "pvae/networks.hpp"

#include <algorithm>
#include <cmath>

#include "pvae/error.hpp"

namespace pvae {

// ---------------------------------------------------------------------------
// Configuration

ArchConfig ArchConfig::full_scale() {
  ArchConfig a;
  a.latent_dim_s = a.latent_dim_a = a.latent_dim_i = 32;
  a.lstm_cells = 512;
  a.preenc_out = 512;
  a.audio_feat_dim = 80;
  a.fc_units = {512, 7 * 7 * 16};
  return a;
}

void ArchConfig::validate() const {
  const std::size_t sizes[] = {latent_dim_s,     latent_dim_a,     latent_dim_i,     lstm_cells,
                               preenc_out,       image_side,       audio_feat_dim,   conv_channels[0],
                               conv_channels[1], deconv_channels[0], deconv_channels[1], fc_units[0],
                               fc_units[1]};
  for (auto s : sizes)
    if (s == 0) throw ConfigError("architecture sizes must be positive");
  if (image_side % 4 != 0)
    throw ConfigError("image_side " + std::to_string(image_side) + " does not halve twice");
  const std::size_t low = image_side / 4;
  if (fc_units[1] % (low * low) != 0)
    throw ConfigError("fc_units[1] = " + std::to_string(fc_units[1]) + " is not a multiple of " +
                      std::to_string(low * low));
  if (deconv_channels[1] != 1) throw ConfigError("the last transposed convolution must emit 1 channel");
}

std::size_t ArchConfig::decoder_channels() const {
  const std::size_t low = image_side / 4;
  return fc_units[1] / (low * low);
}

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::pvae: return "pvae";
    case ModelKind::vae_audio: return "vae-sp";
    case ModelKind::vae_image: return "vae-im";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& name) {
  if (name == "pvae") return ModelKind::pvae;
  if (name == "vae-sp") return ModelKind::vae_audio;
  if (name == "vae-im") return ModelKind::vae_image;
  throw ConfigError("unknown model '" + name + "' (expected pvae, vae-sp or vae-im)");
}

std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::theta: return "theta";
    case ParamGroup::phi: return "phi";
    case ParamGroup::psi: return "psi";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Batches

std::size_t AudioBatch::max_len() const {
  return lengths.empty() ? 0 : *std::max_element(lengths.begin(), lengths.end());
}

Tensor AudioBatch::step(std::size_t t) const {
  const std::size_t b = batch(), T = max_len();
  std::vector<double> out(b * feat_dim);
  for (std::size_t i = 0; i < b; ++i)
    std::copy_n(frames.begin() + static_cast<std::ptrdiff_t>((i * T + t) * feat_dim), feat_dim,
                out.begin() + static_cast<std::ptrdiff_t>(i * feat_dim));
  return Tensor(Shape{b, feat_dim}, std::move(out));
}

Tensor AudioBatch::time_major() const {
  const std::size_t b = batch(), T = max_len();
  std::vector<double> out(T * b * feat_dim);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < b; ++i)
      std::copy_n(frames.begin() + static_cast<std::ptrdiff_t>((i * T + t) * feat_dim), feat_dim,
                  out.begin() + static_cast<std::ptrdiff_t>((t * b + i) * feat_dim));
  return Tensor(Shape{T * b, feat_dim}, std::move(out));
}

Tensor AudioBatch::time_major_mask() const {
  const std::size_t b = batch(), T = max_len();
  std::vector<double> out(T * b * feat_dim, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < b; ++i)
      if (t < lengths[i])
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((t * b + i) * feat_dim), feat_dim, 1.0);
  return Tensor(Shape{T * b, feat_dim}, std::move(out));
}

Tensor AudioBatch::step_mask(std::size_t t, std::size_t width) const {
  const std::size_t b = batch();
  std::vector<double> out(b * width, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    if (t < lengths[i]) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * width), width, 1.0);
  return Tensor(Shape{b, width}, std::move(out));
}

std::size_t Batch::size() const {
  if (has_audio()) return audio.batch();
  if (has_image()) return images.dim(0);
  return 0;
}

std::vector<std::size_t> num_frames_policy(const AudioBatch& audio) { return audio.lengths; }

// ---------------------------------------------------------------------------
// Modules

Tensor AudioPreEncoder::operator()(const AudioBatch& audio) const {
  if (audio.empty() || audio.max_len() == 0) throw ShapeError("audio pre-encoder: empty sequence");
  if (std::any_of(audio.lengths.begin(), audio.lengths.end(), [](std::size_t n) { return n == 0; }))
    throw ShapeError("audio pre-encoder: empty sequence in batch");
  if (audio.feat_dim != lstm.input_dim())
    throw ShapeError("audio pre-encoder: feature dim " + std::to_string(audio.feat_dim) + " vs " +
                     std::to_string(lstm.input_dim()));
  const std::size_t b = audio.batch(), hidden = lstm.hidden_dim();
  const std::size_t shortest = *std::min_element(audio.lengths.begin(), audio.lengths.end());
  LstmState state{Tensor(Shape{b, hidden}), Tensor(Shape{b, hidden})};
  for (std::size_t t = 0; t < audio.max_len(); ++t) {
    LstmState next = lstm_step(audio.step(t), state, lstm);
    if (t < shortest) {
      state = next;
    } else {
      Tensor m = audio.step_mask(t, hidden);
      state.h = state.h + m * (next.h - state.h);
      state.c = state.c + m * (next.c - state.c);
    }
  }
  return state.h;
}

Tensor ImagePreEncoder::operator()(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != images.dim(3))
    throw ShapeError("image pre-encoder: expected [B x 1 x S x S], got " + to_string(images.shape()));
  Tensor h1 = relu(add_channel_bias(conv2d(images, conv1), conv1_bias));
  Tensor h2 = relu(add_channel_bias(conv2d(h1, conv2), conv2_bias));
  const std::size_t b = images.dim(0);
  Tensor flat = reshape(h2, Shape{b, h2.size() / b});
  return relu(fc(flat));
}

// ---------------------------------------------------------------------------
// Model construction

namespace {

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, std::size_t fan_in) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(n);
  for (auto& x : v) x = static_cast<double>(static_cast<float>(dist(rng)));
  return v;
}

class Builder {
 public:
  Builder(std::mt19937_64& rng, std::vector<NamedParam>& registry) : rng_(rng), registry_(registry) {}

  Tensor weight(const std::string& name, ParamGroup g, Shape shape, std::size_t fan_in) {
    Tensor t = Tensor::parameter(shape, uniform(rng_, numel(shape), fan_in));
    registry_.push_back({name, g, t});
    return t;
  }

  Tensor bias(const std::string& name, ParamGroup g, std::size_t n) {
    Tensor t = Tensor::parameter(Shape{n}, std::vector<double>(n, 0.0));
    registry_.push_back({name, g, t});
    return t;
  }

  Linear linear(const std::string& name, ParamGroup g, std::size_t in, std::size_t out) {
    return {weight(name + ".weight", g, Shape{in, out}, in), bias(name + ".bias", g, out)};
  }

  GaussianHead head(const std::string& name, ParamGroup g, std::size_t in, std::size_t out) {
    return {linear(name + ".mean", g, in, out), linear(name + ".log_var", g, in, out)};
  }

  LstmParams lstm(const std::string& name, ParamGroup g, std::size_t in, std::size_t hidden) {
    LstmParams p;
    p.weight = weight(name + ".weight", g, Shape{in + hidden, 4 * hidden}, in + hidden);
    std::vector<double> b(4 * hidden, 0.0);
    std::fill(b.begin() + static_cast<std::ptrdiff_t>(hidden), b.begin() + static_cast<std::ptrdiff_t>(2 * hidden),
              1.0);
    p.bias = Tensor::parameter(Shape{4 * hidden}, std::move(b));
    registry_.push_back({name + ".bias", g, p.bias});
    return p;
  }

  ImagePreEncoder image_encoder(const std::string& name, ParamGroup g, const ArchConfig& a) {
    ImagePreEncoder e;
    const auto [c1, c2] = a.conv_channels;
    e.conv1 = weight(name + ".conv1", g, Shape{c1, 1, 4, 4}, 16);
    e.conv1_bias = bias(name + ".conv1_bias", g, c1);
    e.conv2 = weight(name + ".conv2", g, Shape{c2, c1, 4, 4}, c1 * 16);
    e.conv2_bias = bias(name + ".conv2_bias", g, c2);
    const std::size_t low = a.image_side / 4;
    e.fc = linear(name + ".fc", g, c2 * low * low, a.preenc_out);
    return e;
  }

 private:
  std::mt19937_64& rng_;
  std::vector<NamedParam>& registry_;
};

}  // namespace

PvaeModel::PvaeModel(ArchConfig arch, ModelKind kind, std::uint64_t seed) : arch_(arch), kind_(kind) {
  arch_.validate();
  std::mt19937_64 rng(seed);
  build(rng);
}

void PvaeModel::build(std::mt19937_64& rng) {
  Builder b(rng, registry_);
  const auto& a = arch_;
  const auto phi_g = ParamGroup::phi, psi_g = ParamGroup::psi, theta_g = ParamGroup::theta;

  std::size_t summary = 0;
  if (has_audio()) {
    phi.audio.lstm = b.lstm("phi.audio.lstm", phi_g, a.audio_feat_dim, a.lstm_cells);
    summary += a.lstm_cells;
  }
  if (has_image()) {
    phi.image = b.image_encoder("phi.image", phi_g, a);
    summary += a.preenc_out;
  }
  phi.zs = b.head("phi.zs", phi_g, summary, a.latent_dim_s);
  if (has_audio()) phi.za = b.head("phi.za", phi_g, summary, a.latent_dim_a);
  if (has_image()) phi.zi = b.head("phi.zi", phi_g, summary, a.latent_dim_i);

  if (kind_ == ModelKind::pvae) {
    psi.audio.lstm = b.lstm("psi.audio.lstm", psi_g, a.audio_feat_dim, a.lstm_cells);
    psi.audio_zs = b.head("psi.audio_zs", psi_g, a.lstm_cells, a.latent_dim_s);
    psi.audio_za = b.head("psi.audio_za", psi_g, a.lstm_cells, a.latent_dim_a);
    psi.image = b.image_encoder("psi.image", psi_g, a);
    psi.image_zs = b.head("psi.image_zs", psi_g, a.preenc_out, a.latent_dim_s);
    psi.image_zi = b.head("psi.image_zi", psi_g, a.preenc_out, a.latent_dim_i);
  }

  if (has_audio()) {
    theta.audio.lstm = b.lstm("theta.audio.lstm", theta_g, a.latent_dim_s + a.latent_dim_a, a.lstm_cells);
    theta.audio.out = b.linear("theta.audio.out", theta_g, a.lstm_cells, a.audio_feat_dim);
  }
  if (has_image()) {
    auto& d = theta.image;
    d.fc1 = b.linear("theta.image.fc1", theta_g, a.latent_dim_s + a.latent_dim_i, a.fc_units[0]);
    d.fc2 = b.linear("theta.image.fc2", theta_g, a.fc_units[0], a.fc_units[1]);
    const std::size_t c0 = a.decoder_channels();
    const auto [c1, c2] = a.deconv_channels;
    d.deconv1 = b.weight("theta.image.deconv1", theta_g, Shape{c0, c1, 4, 4}, c0 * 4);
    d.deconv1_bias = b.bias("theta.image.deconv1_bias", theta_g, c1);
    d.deconv2 = b.weight("theta.image.deconv2", theta_g, Shape{c1, c2, 4, 4}, c1 * 4);
    d.deconv2_bias = b.bias("theta.image.deconv2_bias", theta_g, c2);
  }
}

std::vector<Tensor> PvaeModel::group(ParamGroup g) const {
  std::vector<Tensor> out;
  for (const auto& p : registry_)
    if (p.group == g) out.push_back(p.tensor);
  return out;
}

void PvaeModel::zero_grad() {
  for (auto& p : registry_) p.tensor.zero_grad();
}

PvaeModel PvaeModel::clone() const {
  PvaeModel copy(arch_, kind_, 0);
  for (std::size_t i = 0; i < registry_.size(); ++i) {
    auto src = registry_[i].tensor.data();
    auto dst = copy.registry_[i].tensor.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

// ---------------------------------------------------------------------------
// Inference

namespace {

void check_image_batch(const PvaeModel& model, const Tensor& images) {
  const std::size_t s = model.arch().image_side;
  if (!images.defined() || images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != s || images.dim(3) != s)
    throw ShapeError("expected images [B x 1 x " + std::to_string(s) + " x " + std::to_string(s) + "], got " +
                     (images.defined() ? to_string(images.shape()) : std::string("none")));
}

void check_latent(const Tensor& z, std::size_t dim, const char* what) {
  if (z.rank() != 2 || z.dim(1) != dim)
    throw ShapeError(std::string(what) + ": expected [B x " + std::to_string(dim) + "], got " +
                     to_string(z.shape()));
}

}  // namespace

MultimodalPosterior infer_multimodal(const PvaeModel& model, const Batch& batch) {
  std::vector<Tensor> summaries;
  if (model.has_audio()) {
    if (!batch.has_audio()) throw ShapeError("multimodal inference: batch has no audio");
    summaries.push_back(model.phi.audio(batch.audio));
  }
  if (model.has_image()) {
    check_image_batch(model, batch.images);
    summaries.push_back(model.phi.image(batch.images));
  }
  if (summaries.size() == 2 && summaries[0].dim(0) != summaries[1].dim(0))
    throw ShapeError("multimodal inference: audio and image batch sizes differ");
  Tensor joint = summaries.size() == 1 ? summaries[0] : concat(summaries);
  MultimodalPosterior out;
  out.zs = model.phi.zs(joint);
  if (model.has_audio()) out.za = model.phi.za(joint);
  if (model.has_image()) out.zi = model.phi.zi(joint);
  return out;
}

UnimodalPosterior infer_unimodal_audio(const PvaeModel& model, const AudioBatch& audio) {
  switch (model.kind()) {
    case ModelKind::pvae: {
      Tensor h = model.psi.audio(audio);
      return {model.psi.audio_zs(h), model.psi.audio_za(h)};
    }
    case ModelKind::vae_audio: {
      Tensor h = model.phi.audio(audio);
      return {model.phi.zs(h), model.phi.za(h)};
    }
    case ModelKind::vae_image: break;
  }
  throw ShapeError("audio inference requested from an image-only model");
}

UnimodalPosterior infer_unimodal_image(const PvaeModel& model, const Tensor& images) {
  check_image_batch(model, images);
  switch (model.kind()) {
    case ModelKind::pvae: {
      Tensor h = model.psi.image(images);
      return {model.psi.image_zs(h), model.psi.image_zi(h)};
    }
    case ModelKind::vae_image: {
      Tensor h = model.phi.image(images);
      return {model.phi.zs(h), model.phi.zi(h)};
    }
    case ModelKind::vae_audio: break;
  }
  throw ShapeError("image inference requested from an audio-only model");
}

Tensor decode_audio(const PvaeModel& model, const Tensor& z_a, const Tensor& z_s, std::size_t num_frames) {
  if (!model.has_audio()) throw ShapeError("model has no audio decoder");
  if (num_frames == 0) throw ShapeError("decode_audio: zero frames requested");
  check_latent(z_s, model.arch().latent_dim_s, "decode_audio z_s");
  check_latent(z_a, model.arch().latent_dim_a, "decode_audio z_a");
  if (z_a.dim(0) != z_s.dim(0)) throw ShapeError("decode_audio: latent batch sizes differ");
  const auto& dec = model.theta.audio;
  const std::size_t b = z_s.dim(0), hidden = dec.lstm.hidden_dim();
  Tensor input = concat(z_s, z_a);
  LstmState state{Tensor(Shape{b, hidden}), Tensor(Shape{b, hidden})};
  std::vector<Tensor> hs;
  hs.reserve(num_frames);
  for (std::size_t t = 0; t < num_frames; ++t) {
    state = lstm_step(input, state, dec.lstm);
    hs.push_back(state.h);
  }
  Tensor frames = dec.out(concat_rows(hs));
  return reshape(frames, Shape{num_frames, b, model.arch().audio_feat_dim});
}

Tensor decode_image(const PvaeModel& model, const Tensor& z_i, const Tensor& z_s) {
  if (!model.has_image()) throw ShapeError("model has no image decoder");
  check_latent(z_s, model.arch().latent_dim_s, "decode_image z_s");
  check_latent(z_i, model.arch().latent_dim_i, "decode_image z_i");
  if (z_i.dim(0) != z_s.dim(0)) throw ShapeError("decode_image: latent batch sizes differ");
  const auto& dec = model.theta.image;
  const auto& a = model.arch();
  const std::size_t b = z_s.dim(0), low = a.image_side / 4;
  Tensor h = relu(dec.fc1(concat(z_s, z_i)));
  h = relu(dec.fc2(h));
  h = reshape(h, Shape{b, a.decoder_channels(), low, low});
  h = relu(add_channel_bias(conv2d_transposed(h, dec.deconv1), dec.deconv1_bias));
  return add_channel_bias(conv2d_transposed(h, dec.deconv2), dec.deconv2_bias);
}

}  // namespace pvae
