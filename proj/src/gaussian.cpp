#include "pvae/gaussian.hpp"

#include <cmath>
#include <numbers>

#include "pvae/error.hpp"

namespace pvae {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // ln(2 pi)

Tensor as_row(const Tensor& t) { return t.rank() == 1 ? reshape(t, Shape{1, t.dim(0)}) : t; }

void require_match(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": dimension mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

void require_valid(const DiagGaussian& g, const char* op) {
  require_match(g.mean, g.log_var, op);
  if (g.mean.rank() != 2) throw ShapeError(std::string(op) + ": expected [B x D], got " + to_string(g.mean.shape()));
}

}  // namespace

DiagGaussian DiagGaussian::standard(std::size_t rows, std::size_t dim) {
  return {Tensor(Shape{rows, dim}, 0.0), Tensor(Shape{rows, dim}, 0.0)};
}

DiagGaussian DiagGaussian::from_values(std::vector<double> mean, std::vector<double> log_var) {
  if (mean.size() != log_var.size())
    throw ShapeError("DiagGaussian: mean has " + std::to_string(mean.size()) + " entries, log_var " +
                     std::to_string(log_var.size()));
  const std::size_t d = mean.size();
  return {Tensor(Shape{1, d}, std::move(mean)), Tensor(Shape{1, d}, std::move(log_var))};
}

Tensor kl_divergence(const DiagGaussian& q, const DiagGaussian& p) {
  require_valid(q, "kl_divergence");
  require_valid(p, "kl_divergence");
  require_match(q.mean, p.mean, "kl_divergence");
  // 1/2 [ exp(lq - lp) + (mp - mq)^2 exp(-lp) - 1 + lp - lq ]
  Tensor ratio = exp(q.log_var - p.log_var);
  Tensor maha = square(p.mean - q.mean) * exp(-p.log_var);
  Tensor per_dim = add_scalar(ratio + maha, -1.0) + (p.log_var - q.log_var);
  return scale(sum_last(per_dim), 0.5);
}

Tensor kl_to_standard(const DiagGaussian& q) {
  return kl_divergence(q, DiagGaussian::standard(q.rows(), q.dim()));
}

Tensor sample_reparam(const DiagGaussian& q, const Tensor& eps) {
  require_valid(q, "sample_reparam");
  Tensor e = as_row(eps);
  require_match(q.mean, e, "sample_reparam");
  return q.mean + exp(scale(q.log_var, 0.5)) * e;
}

Tensor log_prob(const Tensor& x, const DiagGaussian& q) {
  require_valid(q, "log_prob");
  Tensor xr = as_row(x);
  require_match(xr, q.mean, "log_prob");
  Tensor per_dim = add_scalar(square(xr - q.mean) * exp(-q.log_var) + q.log_var, kLog2Pi);
  return scale(sum_last(per_dim), -0.5);
}

Tensor unit_log_prob(const Tensor& x, const Tensor& mean, const Tensor& mask) {
  Tensor xr = as_row(x);
  Tensor mr = as_row(mean);
  require_match(xr, mr, "unit_log_prob");
  Tensor sq = square(xr - mr);
  const std::size_t rows = xr.dim(0), cols = xr.dim(1);
  std::vector<double> counts(rows, static_cast<double>(cols));
  if (mask.defined()) {
    Tensor mk = as_row(mask);
    require_match(xr, mk, "unit_log_prob");
    sq = sq * mk;
    for (std::size_t r = 0; r < rows; ++r) {
      counts[r] = 0.0;
      for (std::size_t c = 0; c < cols; ++c) counts[r] += mk.at(r * cols + c);
    }
  }
  for (auto& c : counts) c *= -0.5 * kLog2Pi;
  return scale(sum_last(sq), -0.5) + Tensor(Shape{rows}, std::move(counts));
}

Tensor rbf_kernel(const Tensor& a, const Tensor& b) {
  Tensor ar = as_row(a);
  Tensor br = as_row(b);
  require_match(ar, br, "rbf_kernel");
  return exp(scale(sum_last(square(ar - br)), -0.5));
}

double kl_divergence(const std::vector<double>& mean_q, const std::vector<double>& log_var_q,
                     const std::vector<double>& mean_p, const std::vector<double>& log_var_p) {
  return kl_divergence(DiagGaussian::from_values(mean_q, log_var_q),
                       DiagGaussian::from_values(mean_p, log_var_p))
      .item();
}

double rbf_kernel(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw ShapeError("rbf_kernel: dimension mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  return rbf_kernel(Tensor(Shape{1, a.size()}, a), Tensor(Shape{1, b.size()}, b)).item();
}

}  // namespace pvae
