#include "aggsum/training.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>
#include <exception>
#include <numeric>

#include "aggsum/error.hpp"
#include "aggsum/kernels.hpp"
#include "aggsum/random.hpp"

namespace aggsum {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (batch_size == 0) fail("batch_size must be at least 1");
  if (max_epochs == 0) fail("max_epochs must be at least 1");
  if (truncate_len == 0) fail("truncate_len must be at least 1");
  if (target_len == 0) fail("target_len must be at least 1");
  if (patience_epochs == 0) fail("patience_epochs must be at least 1");
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) fail("lr_decay_factor must be in (0, 1]");
  if (!(plateau_eps >= 0.0)) fail("plateau_eps must be non-negative");
}

template <typename T>
AdamState<T> AdamState<T>::zeros_like(const ParameterSet<T>& params) {
  AdamState<T> s;
  for (const auto& e : params.entries()) {
    s.m.emplace_back(e.second.shape());
    s.v.emplace_back(e.second.shape());
  }
  return s;
}

template struct AdamState<float>;
template struct AdamState<double>;

// ---- learning-rate schedule ---------------------------------------------------

double plateau_step(PlateauState& state, double val_loss, double lr, const TrainConfig& config) {
  if (val_loss < state.best - config.plateau_eps) {
    state.best = val_loss;
    state.bad_epochs = 0;
    return lr;
  }
  if (++state.bad_epochs >= config.patience_epochs) {
    state.bad_epochs = 0;
    return lr * config.lr_decay_factor;
  }
  return lr;
}

double lr_schedule_update(std::span<const double> val_losses, double current_lr, const TrainConfig& config) {
  if (val_losses.empty()) throw ContractError("lr_schedule_update needs at least one completed epoch");
  PlateauState state;
  for (std::size_t i = 0; i + 1 < val_losses.size(); ++i) plateau_step(state, val_losses[i], 1.0, config);
  return plateau_step(state, val_losses.back(), current_lr, config);
}

std::vector<std::size_t> plateau_halving_epochs(std::span<const double> val_losses, const TrainConfig& config) {
  std::vector<std::size_t> out;
  PlateauState state;
  for (std::size_t i = 0; i < val_losses.size(); ++i) {
    if (plateau_step(state, val_losses[i], 1.0, config) != 1.0) out.push_back(i + 1);
  }
  return out;
}

// ---- loss ----------------------------------------------------------------------

namespace {

template <typename T>
Var<T> nll(Var<T> log_probs, std::span<const TokenId> targets, bool mean) {
  const Tensor<T>& X = log_probs.value();
  if (X.rank() != 2 || X.dim(0) != targets.size()) {
    throw ShapeError("nll_loss: log_probs " + shape_str(X.shape()) + " with " + std::to_string(targets.size()) +
                     " targets");
  }
  const std::size_t cols = X.dim(1);
  // Accumulate in at least double precision.
  using Acc = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;
  const T floor = static_cast<T>(std::log(kLogFloor));
  std::size_t count = 0;
  Acc total = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const TokenId y = targets[r];
    if (y == kPad) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw IndexError("target id " + std::to_string(y) + " outside distribution of width " + std::to_string(cols), y);
    }
    total -= static_cast<Acc>(std::max(X[r * cols + static_cast<std::size_t>(y)], floor));
    ++count;
  }
  if (count == 0) throw InputError("nll_loss with no target tokens");
  const Acc denom = mean ? static_cast<Acc>(count) : Acc(1);
  std::vector<TokenId> ys(targets.begin(), targets.end());
  const std::size_t ix = log_probs.id();
  return log_probs.tape().record(Tensor<T>::scalar(static_cast<T>(total / denom)), {log_probs},
                                 [=](Tape<T>& t, std::size_t o) {
                                   const T coef = static_cast<T>(-static_cast<Acc>(t.out_grad(o)[0]) / denom);
                                   const auto& Xv = t.value(ix);
                                   auto gx = t.in_grad(ix);
                                   for (std::size_t r = 0; r < ys.size(); ++r) {
                                     if (ys[r] == kPad) continue;
                                     const std::size_t k = r * cols + static_cast<std::size_t>(ys[r]);
                                     if (Xv[k] > floor) gx[k] += coef;
                                   }
                                 });
}

}  // namespace

template <typename T>
Var<T> nll_loss(Var<T> log_probs, std::span<const TokenId> targets) {
  return nll(log_probs, targets, true);
}

template <typename T>
Var<T> nll_loss_sum(Var<T> log_probs, std::span<const TokenId> targets) {
  return nll(log_probs, targets, false);
}

std::vector<TokenId> shifted_targets(const EncodedPair& pair, bool use_pointer) {
  const auto& ids = use_pointer && !pair.target_ext_ids.empty() ? pair.target_ext_ids : pair.target_ids;
  if (ids.size() < 2) throw InputError("target must contain BOS and at least one more token");
  return std::vector<TokenId>(ids.begin() + 1, ids.end());
}

std::size_t target_token_count(const EncodedPair& pair) {
  if (pair.target_ids.size() < 2) return 0;
  return static_cast<std::size_t>(
      std::count_if(pair.target_ids.begin() + 1, pair.target_ids.end(), [](TokenId id) { return id != kPad; }));
}

// ---- optimizer -------------------------------------------------------------------

namespace {

template <typename T>
void check_gradients(const ParameterSet<T>& params, const GradientBuffers<T>& grads) {
  if (grads.size() != params.size()) throw ShapeError("gradient buffer count does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& [name, value] = params.entries()[i];
    if (grads[i].size() != value.size()) throw ShapeError("gradient for '" + name + "' has the wrong size");
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      if (!std::isfinite(grads[i][j])) {
        throw NumericError("non-finite gradient in parameter '" + name + "' at element " + std::to_string(j));
      }
    }
  }
}

}  // namespace

template <typename T>
void adam_step(ParameterSet<T>& params, const GradientBuffers<T>& grads, AdamState<T>& state, double lr,
               const TrainConfig& config) {
  check_gradients(params, grads);
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("optimizer state does not match parameters");
  }
  const std::uint64_t t = ++state.t;
  const double b1 = config.beta1, b2 = config.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.entries()[i].second.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    if (m.size() != p.size() || v.size() != p.size()) {
      throw ShapeError("optimizer moments for '" + params.entries()[i].first + "' have the wrong size");
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i][j];
      m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * g);
      v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * g * g);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] = static_cast<T>(p[j] - lr * mhat / (std::sqrt(vhat) + config.adam_eps));
    }
  }
}

template <typename T>
double clip_global_norm(GradientBuffers<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (T& x : g) x = static_cast<T>(x * s);
    }
  }
  return norm;
}

// ---- trainer ---------------------------------------------------------------------

namespace {

template <typename T>
void zero(GradientBuffers<T>& g) {
  for (auto& b : g) std::fill(b.begin(), b.end(), T(0));
}

// Runs body(i, slot) for i in [0, n) in parallel chunks of at most
// `width`; `after(i, slot)` runs serially in index order after each chunk.
template <typename Body, typename After>
void chunked(std::size_t n, std::size_t width, Body&& body, After&& after) {
  std::vector<std::exception_ptr> errors(width);
  for (std::size_t start = 0; start < n; start += width) {
    const std::size_t cnt = std::min(width, n - start);
#pragma omp parallel for schedule(static) if (cnt > 1)
    for (std::size_t i = 0; i < cnt; ++i) {
      try {
        body(start + i, i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
    for (std::size_t i = 0; i < cnt; ++i) {
      if (errors[i]) std::rethrow_exception(errors[i]);
    }
    for (std::size_t i = 0; i < cnt; ++i) after(start + i, i);
  }
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(Model<T>& model, TrainConfig config)
    : model_(model), config_(std::move(config)), adam_(AdamState<T>::zeros_like(model.parameters())) {
  config_.validate();
  state_.lr = config_.learning_rate;
}

template <typename T>
Trainer<T>::Trainer(Model<T>& model, TrainConfig config, AdamState<T> adam, TrainState state)
    : model_(model), config_(std::move(config)), adam_(std::move(adam)), state_(state) {
  config_.validate();
  if (adam_.m.size() != model_.parameters().size() || adam_.v.size() != model_.parameters().size()) {
    throw ConfigError("optimizer state does not match the model parameters");
  }
}

template <typename T>
std::vector<std::size_t> Trainer<T>::epoch_order(std::size_t n, std::size_t epoch) const {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(config_.seed, epoch, 0x5348));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

template <typename T>
double Trainer<T>::train_step(std::span<const EncodedPair> batch) {
  if (batch.empty()) throw ConfigError("empty training batch");
  const ModelConfig& mc = model_.config();
  const ParameterSet<T>& params = model_.parameters();
  std::size_t tokens = 0;
  for (const auto& p : batch) tokens += target_token_count(p);
  if (tokens == 0) throw InputError("training batch has no target tokens");
  const T inv_tokens = static_cast<T>(1.0 / static_cast<double>(tokens));

  const std::size_t width =
      std::min(batch.size(), static_cast<std::size_t>(std::max(1, kernels::max_threads())));
  std::vector<GradientBuffers<T>> slots(width, make_gradient_buffers(params));
  GradientBuffers<T> total = make_gradient_buffers(params);
  std::vector<double> sums(batch.size(), 0.0);
  const std::uint64_t step = state_.step;

  chunked(
      batch.size(), width,
      [&](std::size_t i, std::size_t slot) {
        zero(slots[slot]);
        Tape<T> tape;
        const BoundWeights<T> w = bind_weights(tape, mc, params, &slots[slot]);
        std::mt19937_64 rng(mix_seed(config_.seed, step, i));
        ForwardOptions<T> opts;
        opts.training = true;
        opts.rng = &rng;
        opts.dropout = config_.dropout;
        Var<T> lp = model_.forward(tape, w, batch[i], opts);
        const auto targets = shifted_targets(batch[i], mc.use_pointer);
        Var<T> s = nll_loss_sum(lp, std::span<const TokenId>(targets));
        tape.backward(scale(s, inv_tokens));
        sums[i] = static_cast<double>(s.value().item());
      },
      [&](std::size_t, std::size_t slot) {
        for (std::size_t p = 0; p < total.size(); ++p) {
          const auto& src = slots[slot][p];
          auto& dst = total[p];
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
      });

  check_gradients(params, total);
  clip_global_norm(total, config_.clip_norm);
  adam_step(model_.parameters(), total, adam_, state_.lr, config_);
  ++state_.step;
  double sum = 0.0;
  for (double s : sums) sum += s;
  return sum / static_cast<double>(tokens);
}

template <typename T>
bool Trainer<T>::train_epoch_partial(std::span<const EncodedPair> data, std::size_t max_steps, double* epoch_loss) {
  if (data.empty()) throw ConfigError("empty training dataset");
  const std::size_t bs = config_.batch_size;
  const std::size_t batches = (data.size() + bs - 1) / bs;
  const auto order = epoch_order(data.size(), state_.epoch);
  std::size_t done = 0;
  while (state_.batch_in_epoch < batches && done < max_steps) {
    const std::size_t begin = state_.batch_in_epoch * bs;
    const std::size_t end = std::min(begin + bs, data.size());
    std::vector<EncodedPair> batch;
    batch.reserve(end - begin);
    std::size_t tokens = 0;
    for (std::size_t k = begin; k < end; ++k) {
      batch.push_back(data[order[k]]);
      tokens += target_token_count(batch.back());
    }
    const double loss = train_step(batch);
    state_.epoch_loss_sum += loss * static_cast<double>(tokens);
    state_.epoch_tokens += static_cast<double>(tokens);
    ++state_.batch_in_epoch;
    ++done;
  }
  if (state_.batch_in_epoch < batches) return false;
  if (epoch_loss) *epoch_loss = state_.epoch_loss_sum / state_.epoch_tokens;
  ++state_.epoch;
  state_.batch_in_epoch = 0;
  state_.epoch_loss_sum = 0.0;
  state_.epoch_tokens = 0.0;
  return true;
}

template <typename T>
double Trainer<T>::train_epoch(std::span<const EncodedPair> data) {
  double loss = 0.0;
  train_epoch_partial(data, static_cast<std::size_t>(-1), &loss);
  return loss;
}

template <typename T>
double Trainer<T>::end_epoch(double val_loss) {
  state_.best_val_loss = std::min(state_.best_val_loss, val_loss);
  state_.lr = plateau_step(state_.plateau, val_loss, state_.lr, config_);
  return state_.lr;
}

template <typename T>
double Trainer<T>::evaluate_loss(std::span<const EncodedPair> data, std::size_t batch_size) const {
  if (data.empty()) throw ConfigError("empty evaluation dataset");
  const ModelConfig& mc = model_.config();
  const std::size_t group = batch_size == 0 ? data.size() : batch_size;
  std::vector<double> sums(data.size(), 0.0);
  std::size_t tokens = 0;
  for (const auto& p : data) tokens += target_token_count(p);
  if (tokens == 0) throw InputError("evaluation data has no target tokens");
  for (std::size_t start = 0; start < data.size(); start += group) {
    const std::size_t cnt = std::min(group, data.size() - start);
    chunked(
        cnt, std::min(cnt, static_cast<std::size_t>(std::max(1, kernels::max_threads()))),
        [&](std::size_t i, std::size_t) {
          const EncodedPair& pair = data[start + i];
          Tape<T> tape(false);
          const BoundWeights<T> w =
              bind_weights<T>(tape, mc, model_.parameters(), static_cast<GradientBuffers<T>*>(nullptr));
          Var<T> lp = model_.forward(tape, w, pair, {});
          const auto targets = shifted_targets(pair, mc.use_pointer);
          sums[start + i] = static_cast<double>(nll_loss_sum(lp, std::span<const TokenId>(targets)).value().item());
        },
        [](std::size_t, std::size_t) {});
  }
  double sum = 0.0;
  for (double s : sums) sum += s;
  return sum / static_cast<double>(tokens);
}

#define AGGSUM_INSTANTIATE(T)                                                                          \
  template Var<T> nll_loss<T>(Var<T>, std::span<const TokenId>);                                       \
  template Var<T> nll_loss_sum<T>(Var<T>, std::span<const TokenId>);                                   \
  template void adam_step<T>(ParameterSet<T>&, const GradientBuffers<T>&, AdamState<T>&, double,       \
                             const TrainConfig&);                                                      \
  template double clip_global_norm<T>(GradientBuffers<T>&, double);                                    \
  template class Trainer<T>;

AGGSUM_INSTANTIATE(float)
AGGSUM_INSTANTIATE(double)

// Extended precision for finite-difference oracles.
template Var<long double> nll_loss<long double>(Var<long double>, std::span<const TokenId>);
template Var<long double> nll_loss_sum<long double>(Var<long double>, std::span<const TokenId>);

#undef AGGSUM_INSTANTIATE

}  // namespace aggsum
