#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "aggsum/model.hpp"

namespace aggsum {

struct BeamConfig {
  std::size_t beam_size = 10;
  std::size_t no_repeat_ngram = 3;  // 0 disables blocking
  double length_penalty_alpha = 2.0;
  std::size_t min_len = 50;  // generated tokens, BOS and EOS excluded
  std::size_t max_len = 120;

  // Throws ConfigError.
  void validate() const;

  friend bool operator==(const BeamConfig&, const BeamConfig&) = default;
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // starts with BOS; ends with EOS when finished
  double log_prob = 0.0;
  bool finished = false;
  double score = 0.0;  // log_prob / length_penalty

  // Generated tokens, BOS and EOS excluded.
  std::size_t length() const;
  std::span<const TokenId> generated() const;
};

// ((5 + length) / 6)^alpha. Throws ContractError for length 0.
double length_penalty(std::size_t length, double alpha);

// Sets log_probs[t] = -inf for every t that would complete an n-gram
// already present in `tokens`.
void block_repeat_ngrams(std::span<const TokenId> tokens, std::span<double> log_probs, std::size_t n);
// Same, over the generated part of a hypothesis (BOS is not part of any n-gram).
void block_repeat_ngrams(const Hypothesis& hyp, std::span<double> log_probs, std::size_t n);

// Log-probabilities of the next token after `prefix` (which starts with BOS).
using StepScorer = std::function<std::vector<double>(std::span<const TokenId> prefix)>;

struct BeamCandidate {
  std::size_t parent = 0;
  TokenId token = 0;
  double log_prob = 0.0;
};

// Called once per step with the kept and discarded candidates.
using BeamObserver =
    std::function<void(std::size_t step, std::span<const BeamCandidate> kept, std::span<const BeamCandidate> dropped)>;

struct BeamResult {
  Hypothesis best;
  std::vector<Hypothesis> finished;  // in completion order
};

// Beam search with length bounds, n-gram blocking and length-penalized
// final ranking. PAD and BOS are never generated. Ties are broken by
// parent index, then token id.
BeamResult beam_search(const StepScorer& scorer, const BeamConfig& config, const BeamObserver& observer = {});

// Argmax decoding under the same constraints as beam_search.
Hypothesis greedy_decode(const StepScorer& scorer, const BeamConfig& config);

template <typename T>
StepScorer model_scorer(const Model<T>& model, const EncodedSource<T>& source);

// Encodes the source and runs beam search. Throws InputError on an empty source.
template <typename T>
Hypothesis summarize_ids(const Model<T>& model, const EncodedPair& source, const BeamConfig& config);

}  // namespace aggsum
