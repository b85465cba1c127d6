#pragma once

#include <random>

#include "pvae/networks.hpp"

namespace pvae {

struct ObjectiveWeights {
  double alpha_ch = 0.1;
  double alpha_cm = 10.0;
  double margin = 0.5;

  void validate() const;
  bool operator==(const ObjectiveWeights&) const = default;
};

/// Batch-mean values of every term. `total` is the maximized quantity:
/// recon_audio + recon_image - kl_za - kl_zi - kl_zs
///   + alpha_ch * coherence + alpha_cm * contrastive.
struct ObjectiveBreakdown {
  double recon_audio = 0, recon_image = 0;
  double kl_za = 0, kl_zi = 0, kl_zs = 0;
  double coherence = 0, contrastive = 0;
  double total = 0;

  double elbo() const { return recon_audio + recon_image - kl_za - kl_zi - kl_zs; }
};

struct ObjectiveResult {
  Tensor total;  // scalar on the graph
  ObjectiveBreakdown parts;
};

/// One standard-normal draw per latent per sample, [B x D] each.
struct ElboNoise {
  Tensor eps_s, eps_a, eps_i;

  static ElboNoise draw(const PvaeModel& model, std::size_t rows, std::mt19937_64& rng);
  static ElboNoise zeros(const PvaeModel& model, std::size_t rows);
};

/// Single-sample reparameterized lower bound, mean over the batch.
ObjectiveResult elbo(const PvaeModel& model, const Batch& batch, const ElboNoise& noise);

/// -sum_m [KL(q(z^m|X) || r(z^m|x^m)) + KL(q(z^s|X) || r(z^s|x^m))], batch mean.
Tensor coherence(const PvaeModel& model, const Batch& batch);
Tensor coherence(const MultimodalPosterior& q, const UnimodalPosterior& r_audio,
                 const UnimodalPosterior& r_image);

/// Cross-modal hinge on RBF similarities of unimodal z^s means; `negatives`
/// is aligned with `batch` by index.
Tensor contrastive(const PvaeModel& model, const Batch& batch, const Batch& negatives, double margin);
Tensor contrastive_from_means(const Tensor& mu_audio, const Tensor& mu_image, const Tensor& mu_neg_audio,
                              const Tensor& mu_neg_image, double margin);

ObjectiveResult total_objective(const PvaeModel& model, const Batch& batch, const Batch& negatives,
                                const ObjectiveWeights& weights, const ElboNoise& noise);

}  // namespace pvae
