#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pvae/data.hpp"
#include "pvae/error.hpp"
#include "pvae/networks.hpp"
#include "pvae/objectives.hpp"

namespace pvae {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.95;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t epochs = 60;
  ObjectiveWeights weights;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  double clip_norm = 5.0;            // global gradient norm; <= 0 disables
  NegativeMode negatives = NegativeMode::label_filtered;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;

  static AdamState zeros(std::span<const Tensor> params);
};

/// One Adam update with bias correction, descending the gradients stored on
/// `params` (the trainer differentiates the negated objective). Parameters
/// and moments are rounded to float32 storage precision afterwards.
/// Throws NumericError naming the first parameter with a non-finite gradient.
void adam_step(std::span<Tensor> params, AdamState& state, const TrainConfig& config,
               std::span<const std::string> names = {});

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_global_norm(std::span<Tensor> params, double max_norm);

struct TrainState {
  std::size_t epoch = 0;  // completed epochs
  AdamState adam;
  std::mt19937_64 rng;

  static TrainState initial(const PvaeModel& model, const TrainConfig& config);
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  ObjectiveBreakdown mean;
  double wall_time_s = 0;
};

struct FitOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::function<void(const EpochLog&)> on_epoch;
};

/// Thrown when the objective becomes non-finite; the batch is identified
/// so it can be replayed.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t epoch, std::size_t batch)
      : Error("numeric", what), epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_, batch_;
};

/// Runs epochs state.epoch + 1 .. config.epochs: re-pair, shuffle, and per
/// batch draw negatives and noise, ascend the combined objective.
/// Writes train_log.csv and checkpoints into `options.out_dir` if set.
std::vector<EpochLog> fit(PvaeModel& model, const Dataset& dataset, const TrainConfig& config, TrainState& state,
                          const FitOptions& options = {});

extern const char* const kTrainLogHeader;
std::string format_log_row(const EpochLog& log);

struct Checkpoint {
  PvaeModel model;
  TrainConfig train;
  TrainState state;
};

void save_checkpoint(const std::filesystem::path& path, const PvaeModel& model, const TrainConfig& train,
                     const TrainState& state);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Also rejects a checkpoint whose architecture differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig& expected);

}  // namespace pvae
