#include "pvae/reference.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "pvae/error.hpp"

namespace pvae {

namespace {

using R = long double;
using Vec = std::vector<R>;

const R kHalfLog2Pi = 0.5L * std::log(2.0L * std::numbers::pi_v<R>);

Vec to_vec(const Tensor& t) { return t.defined() ? Vec(t.data().begin(), t.data().end()) : Vec{}; }

R sigmoid(R x) { return 1.0L / (1.0L + std::exp(-x)); }

Vec concat_rows(const Vec& a, std::size_t da, const Vec& b, std::size_t db, std::size_t rows) {
  Vec out(rows * (da + db));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < da; ++i) out[r * (da + db) + i] = a[r * da + i];
    for (std::size_t i = 0; i < db; ++i) out[r * (da + db) + da + i] = b[r * db + i];
  }
  return out;
}

// 0.5 * sum[exp(lq - lp) + (mp - mq)^2 exp(-lp) - 1 + lp - lq] for row r.
R kl_row(const Vec& mq, const Vec& lq, const Vec& mp, const Vec& lp, std::size_t r, std::size_t d) {
  R s = 0;
  for (std::size_t i = r * d; i < (r + 1) * d; ++i) {
    const R diff = mp[i] - mq[i];
    s += std::exp(lq[i] - lp[i]) + diff * diff * std::exp(-lp[i]) - 1.0L + lp[i] - lq[i];
  }
  return 0.5L * s;
}

R kl_standard_row(const Vec& m, const Vec& lv, std::size_t r, std::size_t d) {
  R s = 0;
  for (std::size_t i = r * d; i < (r + 1) * d; ++i) s += std::exp(lv[i]) + m[i] * m[i] - 1.0L - lv[i];
  return 0.5L * s;
}

R rbf_row(const Vec& a, const Vec& b, std::size_t r, std::size_t d) {
  R s = 0;
  for (std::size_t i = r * d; i < (r + 1) * d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::exp(-0.5L * s);
}

}  // namespace

ReferenceObjective::ReferenceObjective(const PvaeModel& model, const Batch& batch, const Batch& negatives,
                                       const ObjectiveWeights& weights, const ElboNoise& noise)
    : model_(&model), batch_(batch), negatives_(negatives), weights_(weights) {
  if (model.kind() != ModelKind::pvae) throw ConfigError("reference objective covers the two-modality PVAE only");
  if (!batch.has_audio() || !batch.has_image() || !negatives.has_audio() || !negatives.has_image())
    throw ShapeError("reference objective needs both modalities in the batch and the negatives");
  eps_s_ = to_vec(noise.eps_s);
  eps_a_ = to_vec(noise.eps_a);
  eps_i_ = to_vec(noise.eps_i);
  for (const auto& np : model.parameters()) params_.push_back(to_vec(np.tensor));
}

std::size_t ReferenceObjective::index_of(const char* name) const {
  const auto& reg = model_->parameters();
  for (std::size_t i = 0; i < reg.size(); ++i)
    if (reg[i].name == name) return i;
  throw ConfigError(std::string("reference objective: no parameter named ") + name);
}

long double ReferenceObjective::value() const { return evaluate(); }

long double ReferenceObjective::relu(long double x) const {
  const bool on = x > 0;
  pattern_ = (pattern_ ^ (on ? 0x9e3779b97f4a7c15ull : 0x5851f42d4c957f2dull)) * 0x100000001b3ull;
  return on ? x : 0.0L;
}

void ReferenceObjective::relu_inplace(Vec& v) const {
  for (auto& x : v) x = relu(x);
}

long double ReferenceObjective::value_shifted(std::size_t param, std::size_t flat, long double delta) {
  const R orig = params_.at(param).at(flat);
  params_[param][flat] = orig + delta;
  const R v = evaluate();
  params_[param][flat] = orig;
  return v;
}

ReferenceObjective::Vec ReferenceObjective::linear(const Vec& x, std::size_t rows, std::size_t in, const char* name,
                                                   std::size_t out) const {
  const std::string n(name);
  const Vec& w = p(index_of((n + ".weight").c_str()));
  const Vec& b = p(index_of((n + ".bias").c_str()));
  Vec y(rows * out);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      R s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w[i * out + o];
      y[r * out + o] = s;
    }
  return y;
}

ReferenceObjective::Posterior ReferenceObjective::head(const Vec& x, std::size_t rows, std::size_t in,
                                                       const char* name, std::size_t out) const {
  const std::string n(name);
  return {linear(x, rows, in, (n + ".mean").c_str(), out), linear(x, rows, in, (n + ".log_var").c_str(), out)};
}

namespace {

// One LSTM step for one row; gates [x, h] * W + b in blocks i, f, g, o.
void lstm_cell(const R* x, std::size_t din, R* h, R* c, std::size_t hidden, const Vec& w, const Vec& b) {
  const std::size_t width = 4 * hidden;
  Vec gates(b.begin(), b.end());
  for (std::size_t k = 0; k < din; ++k)
    for (std::size_t j = 0; j < width; ++j) gates[j] += x[k] * w[k * width + j];
  for (std::size_t k = 0; k < hidden; ++k)
    for (std::size_t j = 0; j < width; ++j) gates[j] += h[k] * w[(din + k) * width + j];
  for (std::size_t u = 0; u < hidden; ++u) {
    const R i = sigmoid(gates[u]), f = sigmoid(gates[hidden + u]);
    const R g = std::tanh(gates[2 * hidden + u]), o = sigmoid(gates[3 * hidden + u]);
    c[u] = f * c[u] + i * g;
    h[u] = o * std::tanh(c[u]);
  }
}

}  // namespace

ReferenceObjective::Vec ReferenceObjective::audio_summary(const AudioBatch& audio, const char* lstm) const {
  const std::string n(lstm);
  const Vec& w = p(index_of((n + ".weight").c_str()));
  const Vec& b = p(index_of((n + ".bias").c_str()));
  const std::size_t hidden = model_->arch().lstm_cells, F = audio.feat_dim, T = audio.max_len();
  Vec h(audio.batch() * hidden, 0.0L), c(audio.batch() * hidden, 0.0L);
  Vec x(F);
  for (std::size_t r = 0; r < audio.batch(); ++r)
    for (std::size_t t = 0; t < audio.lengths[r]; ++t) {
      for (std::size_t k = 0; k < F; ++k) x[k] = audio.frames[(r * T + t) * F + k];
      lstm_cell(x.data(), F, h.data() + r * hidden, c.data() + r * hidden, hidden, w, b);
    }
  return h;
}

ReferenceObjective::Vec ReferenceObjective::conv(const Vec& x, std::size_t rows, std::size_t c_in, std::size_t side,
                                                 const char* kernel, std::size_t c_out) const {
  const Vec& k = p(index_of(kernel));
  const std::size_t out_side = side / 2;
  Vec y(rows * c_out * out_side * out_side, 0.0L);
  for (std::size_t n = 0; n < rows; ++n)
    for (std::size_t co = 0; co < c_out; ++co)
      for (std::size_t oy = 0; oy < out_side; ++oy)
        for (std::size_t ox = 0; ox < out_side; ++ox) {
          R s = 0;
          for (std::size_t ci = 0; ci < c_in; ++ci)
            for (std::size_t ky = 0; ky < 4; ++ky)
              for (std::size_t kx = 0; kx < 4; ++kx) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(2 * oy + ky) - 1;
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(2 * ox + kx) - 1;
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(side) ||
                    ix >= static_cast<std::ptrdiff_t>(side))
                  continue;
                s += k[((co * c_in + ci) * 4 + ky) * 4 + kx] *
                     x[((n * c_in + ci) * side + static_cast<std::size_t>(iy)) * side + static_cast<std::size_t>(ix)];
              }
          y[((n * c_out + co) * out_side + oy) * out_side + ox] = s;
        }
  return y;
}

// Scatter form of the transposed convolution; kernel is [c_in x c_out x 4 x 4].
ReferenceObjective::Vec ReferenceObjective::deconv(const Vec& x, std::size_t rows, std::size_t c_in,
                                                   std::size_t side, const char* kernel, std::size_t c_out) const {
  const Vec& k = p(index_of(kernel));
  const std::size_t out_side = side * 2;
  Vec y(rows * c_out * out_side * out_side, 0.0L);
  for (std::size_t n = 0; n < rows; ++n)
    for (std::size_t ci = 0; ci < c_in; ++ci)
      for (std::size_t iy = 0; iy < side; ++iy)
        for (std::size_t ix = 0; ix < side; ++ix) {
          const R v = x[((n * c_in + ci) * side + iy) * side + ix];
          for (std::size_t co = 0; co < c_out; ++co)
            for (std::size_t ky = 0; ky < 4; ++ky)
              for (std::size_t kx = 0; kx < 4; ++kx) {
                const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(2 * iy + ky) - 1;
                const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(2 * ix + kx) - 1;
                if (oy < 0 || ox < 0 || oy >= static_cast<std::ptrdiff_t>(out_side) ||
                    ox >= static_cast<std::ptrdiff_t>(out_side))
                  continue;
                y[((n * c_out + co) * out_side + static_cast<std::size_t>(oy)) * out_side +
                  static_cast<std::size_t>(ox)] += v * k[((ci * c_out + co) * 4 + ky) * 4 + kx];
              }
        }
  return y;
}

namespace {

void add_channel_bias(Vec& x, std::size_t rows, std::size_t channels, std::size_t plane, const Vec& bias) {
  for (std::size_t n = 0; n < rows; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < plane; ++i) x[(n * channels + c) * plane + i] += bias[c];
}

}  // namespace

ReferenceObjective::Vec ReferenceObjective::image_summary(const Tensor& images, const char* prefix) const {
  const auto& a = model_->arch();
  const std::string n(prefix);
  const std::size_t rows = images.dim(0), s = a.image_side;
  const auto [c1, c2] = a.conv_channels;
  Vec h1 = conv(to_vec(images), rows, 1, s, (n + ".conv1").c_str(), c1);
  add_channel_bias(h1, rows, c1, (s / 2) * (s / 2), p(index_of((n + ".conv1_bias").c_str())));
  relu_inplace(h1);
  Vec h2 = conv(h1, rows, c1, s / 2, (n + ".conv2").c_str(), c2);
  add_channel_bias(h2, rows, c2, (s / 4) * (s / 4), p(index_of((n + ".conv2_bias").c_str())));
  relu_inplace(h2);
  Vec out = linear(h2, rows, c2 * (s / 4) * (s / 4), (n + ".fc").c_str(), a.preenc_out);
  relu_inplace(out);
  return out;
}

long double ReferenceObjective::evaluate() const {
  pattern_ = 0xcbf29ce484222325ull;
  const auto& a = model_->arch();
  const std::size_t B = batch_.size(), H = a.lstm_cells, P = a.preenc_out;
  const std::size_t ds = a.latent_dim_s, da = a.latent_dim_a, di = a.latent_dim_i;

  // Multimodal posteriors.
  const Vec joint = concat_rows(audio_summary(batch_.audio, "phi.audio.lstm"), H,
                                image_summary(batch_.images, "phi.image"), P, B);
  const Posterior qs = head(joint, B, H + P, "phi.zs", ds);
  const Posterior qa = head(joint, B, H + P, "phi.za", da);
  const Posterior qi = head(joint, B, H + P, "phi.zi", di);
  auto sample = [](const Posterior& q, const Vec& eps) {
    Vec z(eps.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = q.mean[i] + std::exp(0.5L * q.log_var[i]) * eps[i];
    return z;
  };
  const Vec zs = sample(qs, eps_s_), za = sample(qa, eps_a_), zi = sample(qi, eps_i_);

  // Audio reconstruction over unpadded frames.
  const AudioBatch& audio = batch_.audio;
  const std::size_t F = audio.feat_dim, T = audio.max_len();
  R recon_a = 0;
  {
    const Vec in = concat_rows(zs, ds, za, da, B);
    const Vec& w = p(index_of("theta.audio.lstm.weight"));
    const Vec& b = p(index_of("theta.audio.lstm.bias"));
    Vec h(B * H, 0.0L), c(B * H, 0.0L);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t r = 0; r < B; ++r) lstm_cell(in.data() + r * (ds + da), ds + da, &h[r * H], &c[r * H], H, w, b);
      const Vec mu = linear(h, B, H, "theta.audio.out", F);
      for (std::size_t r = 0; r < B; ++r) {
        if (t >= audio.lengths[r]) continue;
        for (std::size_t k = 0; k < F; ++k) {
          const R d = static_cast<R>(audio.frames[(r * T + t) * F + k]) - mu[r * F + k];
          recon_a += -kHalfLog2Pi - 0.5L * d * d;
        }
      }
    }
    recon_a /= static_cast<R>(B);
  }

  // Image reconstruction.
  R recon_i = 0;
  {
    const std::size_t low = a.image_side / 4, c0 = a.decoder_channels();
    const auto [c1, c2] = a.deconv_channels;
    Vec h = linear(concat_rows(zs, ds, zi, di, B), B, ds + di, "theta.image.fc1", a.fc_units[0]);
    relu_inplace(h);
    h = linear(h, B, a.fc_units[0], "theta.image.fc2", a.fc_units[1]);
    relu_inplace(h);
    Vec d1 = deconv(h, B, c0, low, "theta.image.deconv1", c1);
    add_channel_bias(d1, B, c1, 4 * low * low, p(index_of("theta.image.deconv1_bias")));
    relu_inplace(d1);
    Vec mu = deconv(d1, B, c1, 2 * low, "theta.image.deconv2", c2);
    add_channel_bias(mu, B, c2, a.image_pixels(), p(index_of("theta.image.deconv2_bias")));
    const auto px = batch_.images.data();
    for (std::size_t i = 0; i < mu.size(); ++i) {
      const R d = static_cast<R>(px[i]) - mu[i];
      recon_i += -kHalfLog2Pi - 0.5L * d * d;
    }
    recon_i /= static_cast<R>(B);
  }

  R kl_s = 0, kl_a = 0, kl_i = 0;
  for (std::size_t r = 0; r < B; ++r) {
    kl_s += kl_standard_row(qs.mean, qs.log_var, r, ds);
    kl_a += kl_standard_row(qa.mean, qa.log_var, r, da);
    kl_i += kl_standard_row(qi.mean, qi.log_var, r, di);
  }
  kl_s /= static_cast<R>(B);
  kl_a /= static_cast<R>(B);
  kl_i /= static_cast<R>(B);

  // Unimodal posteriors and coherence.
  const Vec ua = audio_summary(batch_.audio, "psi.audio.lstm");
  const Vec ui = image_summary(batch_.images, "psi.image");
  const Posterior ra_s = head(ua, B, H, "psi.audio_zs", ds), ra_a = head(ua, B, H, "psi.audio_za", da);
  const Posterior ri_s = head(ui, B, P, "psi.image_zs", ds), ri_i = head(ui, B, P, "psi.image_zi", di);
  R ch = 0;
  for (std::size_t r = 0; r < B; ++r)
    ch += kl_row(qa.mean, qa.log_var, ra_a.mean, ra_a.log_var, r, da) +
          kl_row(qs.mean, qs.log_var, ra_s.mean, ra_s.log_var, r, ds) +
          kl_row(qi.mean, qi.log_var, ri_i.mean, ri_i.log_var, r, di) +
          kl_row(qs.mean, qs.log_var, ri_s.mean, ri_s.log_var, r, ds);
  ch = -ch / static_cast<R>(B);

  R cm = 0;
  if (weights_.alpha_cm != 0) {
    const Vec na = linear(audio_summary(negatives_.audio, "psi.audio.lstm"), B, H, "psi.audio_zs.mean", ds);
    const Vec ni = linear(image_summary(negatives_.images, "psi.image"), B, P, "psi.image_zs.mean", ds);
    const R t = weights_.margin;
    for (std::size_t r = 0; r < B; ++r) {
      const R pos = rbf_row(ra_s.mean, ri_s.mean, r, ds);
      cm += relu(t - pos + rbf_row(ra_s.mean, ni, r, ds)) + relu(t - pos + rbf_row(ri_s.mean, na, r, ds));
    }
    cm = -0.5L * cm / static_cast<R>(B);
  }

  return recon_a + recon_i - kl_a - kl_i - kl_s + static_cast<R>(weights_.alpha_ch) * ch +
         static_cast<R>(weights_.alpha_cm) * cm;
}

}  // namespace pvae
