#pragma once

// Oracle suites shared by `pvae verify`, the unit tests and the acceptance
// binary. Each check is self-contained and deterministic given its seed.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pvae/networks.hpp"

namespace pvae {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0;      // the measured statistic
  double threshold = 0;  // what it was compared against
  std::string detail;
};

/// Architecture used by the gradient check: 16-d latents, 32-cell LSTMs.
ArchConfig gradient_check_arch();

/// Reverse-mode gradients of the total objective against central finite
/// differences on `num_params` parameters drawn evenly from theta, phi and
/// psi. value = worst relative error |a - n| / max(|a|, |n|, 1e-6). The
/// differences are taken on ReferenceObjective, which must first agree with
/// the library's forward value to 1e-12 relative.
CheckResult check_gradients(const ArchConfig& arch, std::size_t num_params, std::uint64_t seed,
                            double tolerance = 1e-4);

/// Closed-form KL against a Monte-Carlo estimate of E_q[log q - log p] on
/// random D-dim pairs; value = worst |error| in standard errors.
CheckResult check_kl_monte_carlo(std::size_t pairs, std::size_t samples, std::size_t dim, std::uint64_t seed);

/// Analytic spot values of KL, log_prob, rbf_kernel and the contrastive hinge.
CheckResult check_gaussian_spot_values();

/// On random tiny models, mean single-sample ELBO <= mean K-sample
/// importance-weighted bound + 3 combined standard errors.
CheckResult check_elbo_bound(std::size_t models, std::size_t importance_samples, std::uint64_t seed);

/// weighted_purity equals a brute-force majority count on random instances.
CheckResult check_purity_bruteforce(std::size_t instances, std::size_t max_points, std::uint64_t seed);

/// Every logged Lloyd inertia is no larger than the one before it.
CheckResult check_lloyd_monotone(std::size_t instances, std::uint64_t seed);

/// k = 4 on four well-separated 2-D blobs recovers the blob partition.
CheckResult check_kmeans_blobs(std::uint64_t seed);

/// Hand-written IDX image and label fixtures survive read + write byte-exactly.
CheckResult check_idx_roundtrip(const std::filesystem::path& scratch_dir);

/// <conv(x), y> == <x, conv_transposed(y)> for random tensors.
CheckResult check_conv_adjoint(std::uint64_t seed);

enum class VerifyLevel { fast, full };

std::vector<CheckResult> run_verify(VerifyLevel level, const std::filesystem::path& scratch_dir);

std::string format_check(const CheckResult& r);

}  // namespace pvae
