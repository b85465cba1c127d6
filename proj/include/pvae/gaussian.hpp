#pragma once

#include <vector>

#include "pvae/tensor.hpp"

namespace pvae {

/// Batch of diagonal Gaussians: row b of `mean` / `log_var` ([B x D]) holds
/// one distribution. Variances are parameterized by their natural log.
struct DiagGaussian {
  Tensor mean;
  Tensor log_var;

  std::size_t rows() const { return mean.dim(0); }
  std::size_t dim() const { return mean.dim(1); }

  static DiagGaussian standard(std::size_t rows, std::size_t dim);
  /// Single distribution from plain vectors (constant, no gradient).
  static DiagGaussian from_values(std::vector<double> mean, std::vector<double> log_var);
};

/// Per-row KL(q || p) in closed form -> [B].
Tensor kl_divergence(const DiagGaussian& q, const DiagGaussian& p);
/// KL(q || N(0, I)) -> [B].
Tensor kl_to_standard(const DiagGaussian& q);

/// mean + exp(log_var / 2) * eps, eps [B x D] supplied by the caller.
Tensor sample_reparam(const DiagGaussian& q, const Tensor& eps);

/// Full log-density including the normalizing constant -> [B].
Tensor log_prob(const Tensor& x, const DiagGaussian& q);

/// log N(x; mean, I) per row, restricted to entries where `mask` is 1.
/// An undefined mask means every entry counts. -> [B]
Tensor unit_log_prob(const Tensor& x, const Tensor& mean, const Tensor& mask = Tensor());

/// exp(-||a - b||^2 / 2) per row -> [B].
Tensor rbf_kernel(const Tensor& a, const Tensor& b);

// Plain-value conveniences for single vectors.
double kl_divergence(const std::vector<double>& mean_q, const std::vector<double>& log_var_q,
                     const std::vector<double>& mean_p, const std::vector<double>& log_var_p);
double rbf_kernel(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace pvae
