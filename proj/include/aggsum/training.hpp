#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "aggsum/model.hpp"

namespace aggsum {

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double dropout = 0.1;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 10;
  std::size_t truncate_len = kDefaultTruncateLen;
  std::size_t target_len = 120;  // summary tokens kept for training
  std::uint64_t seed = 1;
  std::size_t patience_epochs = 2;
  double lr_decay_factor = 0.5;
  double plateau_eps = 1e-4;  // improvement must exceed this
  double clip_norm = 2.0;     // global gradient norm; <= 0 disables

  // Throws ConfigError.
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Adam moments aligned with ParameterSet::entries().
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const ParameterSet<T>& params);
};

// Validation-plateau bookkeeping.
struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  friend bool operator==(const PlateauState&, const PlateauState&) = default;
};

// Feeds one epoch's validation loss; returns the learning rate to use next.
double plateau_step(PlateauState& state, double val_loss, double lr, const TrainConfig& config);

// Replays the plateau rule over a validation history and returns the new
// rate given the rate in effect before the last epoch.
double lr_schedule_update(std::span<const double> val_losses, double current_lr, const TrainConfig& config);

// 1-based epochs after which the rate is halved for a loss history.
std::vector<std::size_t> plateau_halving_epochs(std::span<const double> val_losses, const TrainConfig& config);

// Mean over non-PAD targets of -log p(target). log_probs is [t, width] and
// targets has t entries. Log-probabilities below log(1e-12) are clamped.
template <typename T>
Var<T> nll_loss(Var<T> log_probs, std::span<const TokenId> targets);
// Sum over non-PAD targets.
template <typename T>
Var<T> nll_loss_sum(Var<T> log_probs, std::span<const TokenId> targets);

// Gold next-token ids for a teacher-forced pair (extended ids when the
// model copies).
std::vector<TokenId> shifted_targets(const EncodedPair& pair, bool use_pointer);
std::size_t target_token_count(const EncodedPair& pair);

// One Adam update with bias correction. Throws NumericError naming the
// first parameter with a non-finite gradient, before anything changes.
template <typename T>
void adam_step(ParameterSet<T>& params, const GradientBuffers<T>& grads, AdamState<T>& state, double lr,
               const TrainConfig& config);

// Scales grads to the given global norm if above it; returns the norm before scaling.
template <typename T>
double clip_global_norm(GradientBuffers<T>& grads, double max_norm);

struct TrainState {
  std::size_t epoch = 0;           // completed epochs
  std::size_t batch_in_epoch = 0;  // batches done in the current epoch
  std::uint64_t step = 0;          // optimizer steps
  double lr = 0.0;
  PlateauState plateau;
  double best_val_loss = std::numeric_limits<double>::infinity();
  double epoch_loss_sum = 0.0;     // running token NLL of the current epoch
  double epoch_tokens = 0.0;

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

// Deterministic teacher-forced training. Examples in a batch are processed
// in parallel, each into its own gradient buffer; buffers are summed in
// example order, so results do not depend on the thread count.
template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, TrainConfig config);
  Trainer(Model<T>& model, TrainConfig config, AdamState<T> adam, TrainState state);

  const TrainConfig& config() const noexcept { return config_; }
  const TrainState& state() const noexcept { return state_; }
  const AdamState<T>& adam() const noexcept { return adam_; }
  Model<T>& model() noexcept { return model_; }

  // One optimizer step on `batch`; returns its per-token loss before the update.
  double train_step(std::span<const EncodedPair> batch);
  // Runs (or finishes) the current epoch over `data` in a seed-determined
  // order; returns the epoch's per-token training loss.
  double train_epoch(std::span<const EncodedPair> data);
  // Stops after `max_steps` steps; returns false if the epoch is unfinished.
  bool train_epoch_partial(std::span<const EncodedPair> data, std::size_t max_steps, double* epoch_loss = nullptr);
  // Applies the plateau rule; returns the new learning rate.
  double end_epoch(double val_loss);

  // Per-token NLL without dropout; batch_size only groups the work.
  double evaluate_loss(std::span<const EncodedPair> data, std::size_t batch_size = 0) const;

  // Example order used for epoch `epoch`.
  std::vector<std::size_t> epoch_order(std::size_t n, std::size_t epoch) const;

 private:
  Model<T>& model_;
  TrainConfig config_;
  AdamState<T> adam_;
  TrainState state_;
};

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace aggsum
