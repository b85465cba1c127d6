#include "pvae/objectives.hpp"

#include <cmath>

#include "pvae/error.hpp"

namespace pvae {

void ObjectiveWeights::validate() const {
  if (!std::isfinite(alpha_ch) || !std::isfinite(alpha_cm) || alpha_ch < 0 || alpha_cm < 0)
    throw ConfigError("objective weights must be finite and non-negative");
  if (!std::isfinite(margin)) throw ConfigError("contrastive margin must be finite");
}

namespace {

Tensor gaussian_noise(std::size_t rows, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(rows * dim);
  for (auto& x : v) x = n(rng);
  return Tensor(Shape{rows, dim}, std::move(v));
}

struct ElboTerms {
  Tensor recon_audio, recon_image, kl_za, kl_zi, kl_zs;  // scalars, undefined if absent
};

Tensor batch_mean(const Tensor& per_sample) { return mean(per_sample); }

ElboTerms elbo_terms(const PvaeModel& model, const Batch& batch, const MultimodalPosterior& q,
                     const ElboNoise& noise) {
  ElboTerms t;
  Tensor zs = sample_reparam(q.zs, noise.eps_s);
  t.kl_zs = batch_mean(kl_to_standard(q.zs));
  if (model.has_audio()) {
    Tensor za = sample_reparam(q.za, noise.eps_a);
    const std::size_t T = batch.audio.max_len();
    Tensor frames = decode_audio(model, za, zs, T);
    const std::size_t b = batch.audio.batch(), f = batch.audio.feat_dim;
    Tensor flat = reshape(frames, Shape{T * b, f});
    // Batch mean of per-sample sums == total over all frames / B.
    Tensor per_row = unit_log_prob(batch.audio.time_major(), flat, batch.audio.time_major_mask());
    t.recon_audio = scale(sum(per_row), 1.0 / static_cast<double>(b));
    t.kl_za = batch_mean(kl_to_standard(q.za));
  }
  if (model.has_image()) {
    Tensor zi = sample_reparam(q.zi, noise.eps_i);
    Tensor mean_img = decode_image(model, zi, zs);
    const std::size_t b = mean_img.dim(0), pixels = model.arch().image_pixels();
    Tensor per_sample = unit_log_prob(reshape(batch.images, Shape{b, pixels}), reshape(mean_img, Shape{b, pixels}));
    t.recon_image = batch_mean(per_sample);
    t.kl_zi = batch_mean(kl_to_standard(q.zi));
  }
  return t;
}

void check_batch(const PvaeModel& model, const Batch& batch, const char* op) {
  if (model.has_audio() && !batch.has_audio())
    throw ShapeError(std::string(op) + ": batch is missing the audio modality; use the unimodal paths");
  if (model.has_image() && !batch.has_image())
    throw ShapeError(std::string(op) + ": batch is missing the image modality; use the unimodal paths");
  if (batch.has_audio() && batch.has_image() && batch.audio.batch() != batch.images.dim(0))
    throw ShapeError(std::string(op) + ": audio and image batch sizes differ");
}

// Accumulates the objective in a fixed order so the tensor total and the
// scalar breakdown agree exactly.
ObjectiveResult combine(const ElboTerms& e, const Tensor& ch, const Tensor& cm, const ObjectiveWeights& w) {
  ObjectiveResult r;
  ObjectiveBreakdown& p = r.parts;
  Tensor total;
  double value = 0.0;
  auto accumulate = [&](const Tensor& term, double factor, double& slot) {
    if (!term.defined()) return;
    slot = term.item();
    Tensor scaled = factor == 1.0 ? term : scale(term, factor);
    total = total.defined() ? add(total, scaled) : scaled;
    value = value + (factor == 1.0 ? slot : factor * slot);
  };
  accumulate(e.recon_audio, 1.0, p.recon_audio);
  accumulate(e.recon_image, 1.0, p.recon_image);
  accumulate(e.kl_za, -1.0, p.kl_za);
  accumulate(e.kl_zi, -1.0, p.kl_zi);
  accumulate(e.kl_zs, -1.0, p.kl_zs);
  if (ch.defined() && w.alpha_ch != 0.0) accumulate(ch, w.alpha_ch, p.coherence);
  else if (ch.defined()) p.coherence = ch.item();
  if (cm.defined() && w.alpha_cm != 0.0) accumulate(cm, w.alpha_cm, p.contrastive);
  else if (cm.defined()) p.contrastive = cm.item();
  p.total = value;
  r.total = total;
  return r;
}

}  // namespace

ElboNoise ElboNoise::draw(const PvaeModel& model, std::size_t rows, std::mt19937_64& rng) {
  const auto& a = model.arch();
  ElboNoise n;
  n.eps_s = gaussian_noise(rows, a.latent_dim_s, rng);
  if (model.has_audio()) n.eps_a = gaussian_noise(rows, a.latent_dim_a, rng);
  if (model.has_image()) n.eps_i = gaussian_noise(rows, a.latent_dim_i, rng);
  return n;
}

ElboNoise ElboNoise::zeros(const PvaeModel& model, std::size_t rows) {
  const auto& a = model.arch();
  ElboNoise n;
  n.eps_s = Tensor(Shape{rows, a.latent_dim_s});
  if (model.has_audio()) n.eps_a = Tensor(Shape{rows, a.latent_dim_a});
  if (model.has_image()) n.eps_i = Tensor(Shape{rows, a.latent_dim_i});
  return n;
}

ObjectiveResult elbo(const PvaeModel& model, const Batch& batch, const ElboNoise& noise) {
  check_batch(model, batch, "elbo");
  MultimodalPosterior q = infer_multimodal(model, batch);
  return combine(elbo_terms(model, batch, q, noise), Tensor(), Tensor(), ObjectiveWeights{0, 0, 0});
}

Tensor coherence(const MultimodalPosterior& q, const UnimodalPosterior& r_audio, const UnimodalPosterior& r_image) {
  Tensor kl = kl_divergence(q.za, r_audio.style) + kl_divergence(q.zs, r_audio.zs) +
              kl_divergence(q.zi, r_image.style) + kl_divergence(q.zs, r_image.zs);
  return scale(mean(kl), -1.0);
}

Tensor coherence(const PvaeModel& model, const Batch& batch) {
  if (model.kind() != ModelKind::pvae) throw ShapeError("coherence requires a two-modality PVAE");
  check_batch(model, batch, "coherence");
  MultimodalPosterior q = infer_multimodal(model, batch);
  return coherence(q, infer_unimodal_audio(model, batch.audio), infer_unimodal_image(model, batch.images));
}

Tensor contrastive_from_means(const Tensor& mu_audio, const Tensor& mu_image, const Tensor& mu_neg_audio,
                              const Tensor& mu_neg_image, double margin) {
  if (mu_audio.shape() != mu_image.shape() || mu_audio.shape() != mu_neg_audio.shape() ||
      mu_audio.shape() != mu_neg_image.shape())
    throw ShapeError("contrastive: misaligned batches " + to_string(mu_audio.shape()) + ", " +
                     to_string(mu_image.shape()) + ", " + to_string(mu_neg_audio.shape()) + ", " +
                     to_string(mu_neg_image.shape()));
  // Ordered pairs (m', m): (audio, image) and (image, audio); M = 2.
  Tensor pos = rbf_kernel(mu_audio, mu_image);
  Tensor hinge_ai = relu(add_scalar(rbf_kernel(mu_audio, mu_neg_image) - pos, margin));
  Tensor hinge_ia = relu(add_scalar(rbf_kernel(mu_image, mu_neg_audio) - pos, margin));
  return scale(mean(hinge_ai + hinge_ia), -0.5);
}

Tensor contrastive(const PvaeModel& model, const Batch& batch, const Batch& negatives, double margin) {
  if (model.kind() != ModelKind::pvae) throw ShapeError("contrastive requires a two-modality PVAE");
  check_batch(model, batch, "contrastive");
  check_batch(model, negatives, "contrastive");
  if (batch.size() != negatives.size())
    throw ShapeError("contrastive: misaligned batches of " + std::to_string(batch.size()) + " and " +
                     std::to_string(negatives.size()) + " samples");
  return contrastive_from_means(infer_unimodal_audio(model, batch.audio).zs.mean,
                                infer_unimodal_image(model, batch.images).zs.mean,
                                infer_unimodal_audio(model, negatives.audio).zs.mean,
                                infer_unimodal_image(model, negatives.images).zs.mean, margin);
}

ObjectiveResult total_objective(const PvaeModel& model, const Batch& batch, const Batch& negatives,
                                const ObjectiveWeights& weights, const ElboNoise& noise) {
  weights.validate();
  check_batch(model, batch, "total_objective");
  MultimodalPosterior q = infer_multimodal(model, batch);
  ElboTerms e = elbo_terms(model, batch, q, noise);
  if (model.kind() != ModelKind::pvae) return combine(e, Tensor(), Tensor(), weights);

  check_batch(model, negatives, "total_objective");
  if (batch.size() != negatives.size())
    throw ShapeError("total_objective: misaligned batches of " + std::to_string(batch.size()) + " and " +
                     std::to_string(negatives.size()) + " samples");
  UnimodalPosterior ra = infer_unimodal_audio(model, batch.audio);
  UnimodalPosterior ri = infer_unimodal_image(model, batch.images);
  Tensor ch = coherence(q, ra, ri);
  // The contrastive term is not evaluated when its weight is zero.
  Tensor cm;
  if (weights.alpha_cm != 0.0) {
    Tensor neg_a = infer_unimodal_audio(model, negatives.audio).zs.mean;
    Tensor neg_i = infer_unimodal_image(model, negatives.images).zs.mean;
    cm = contrastive_from_means(ra.zs.mean, ri.zs.mean, neg_a, neg_i, weights.margin);
  }
  return combine(e, ch, cm, weights);
}

}  // namespace pvae
