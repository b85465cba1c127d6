#pragma once

// Plain-loop long-double evaluation of the combined PVAE objective. It
// shares no code with the tensor library, so it serves as the forward half
// of the gradient oracle: finite differences taken on it are limited by
// 64-bit-mantissa rounding instead of double rounding.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pvae/networks.hpp"
#include "pvae/objectives.hpp"

namespace pvae {

class ReferenceObjective {
 public:
  /// Snapshots the parameter values and inputs; PVAE models only.
  ReferenceObjective(const PvaeModel& model, const Batch& batch, const Batch& negatives,
                     const ObjectiveWeights& weights, const ElboNoise& noise);

  /// Objective at the snapshot.
  long double value() const;
  /// Objective with entry `flat` of registry parameter `param` shifted by `delta`.
  long double value_shifted(std::size_t param, std::size_t flat, long double delta);

  /// Hash of every ReLU and hinge on/off decision in the last evaluation.
  /// Equal hashes put two evaluations on the same smooth piece.
  std::uint64_t last_pattern() const { return pattern_; }

 private:
  using Vec = std::vector<long double>;

  struct Posterior {
    Vec mean, log_var;  // rows x dim
  };

  const Vec& p(std::size_t index) const { return params_[index]; }
  std::size_t index_of(const char* name) const;

  Vec linear(const Vec& x, std::size_t rows, std::size_t in, const char* name, std::size_t out) const;
  Posterior head(const Vec& x, std::size_t rows, std::size_t in, const char* name, std::size_t out) const;
  Vec audio_summary(const AudioBatch& audio, const char* lstm) const;
  Vec image_summary(const Tensor& images, const char* prefix) const;
  Vec conv(const Vec& x, std::size_t rows, std::size_t c_in, std::size_t side, const char* kernel,
           std::size_t c_out) const;
  Vec deconv(const Vec& x, std::size_t rows, std::size_t c_in, std::size_t side, const char* kernel,
             std::size_t c_out) const;
  long double evaluate() const;
  long double relu(long double x) const;
  void relu_inplace(Vec& v) const;

  const PvaeModel* model_;
  Batch batch_, negatives_;
  ObjectiveWeights weights_;
  Vec eps_s_, eps_a_, eps_i_;
  std::vector<Vec> params_;
  mutable std::uint64_t pattern_ = 0;
};

}  // namespace pvae
