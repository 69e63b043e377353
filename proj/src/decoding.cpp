#include "aggsum/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "aggsum/error.hpp"

namespace aggsum {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

void BeamConfig::validate() const {
  if (beam_size == 0) throw ConfigError("beam_size must be at least 1");
  if (max_len == 0) throw ConfigError("max_len must be at least 1");
  if (min_len > max_len) {
    throw ConfigError("min_len " + std::to_string(min_len) + " exceeds max_len " + std::to_string(max_len));
  }
  if (!std::isfinite(length_penalty_alpha)) throw ConfigError("length_penalty must be finite");
}

std::span<const TokenId> Hypothesis::generated() const {
  std::span<const TokenId> s(tokens);
  if (!s.empty() && s.front() == kBos) s = s.subspan(1);
  if (!s.empty() && s.back() == kEos) s = s.first(s.size() - 1);
  return s;
}

std::size_t Hypothesis::length() const { return generated().size(); }

double length_penalty(std::size_t length, double alpha) {
  if (length == 0) throw ContractError("length_penalty needs length >= 1");
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

void block_repeat_ngrams(std::span<const TokenId> tokens, std::span<double> log_probs, std::size_t n) {
  if (n == 0 || tokens.size() + 1 < n) return;
  const std::size_t k = n - 1;
  const auto suffix = tokens.subspan(tokens.size() - k);
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    if (std::equal(suffix.begin(), suffix.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) {
      const TokenId t = tokens[i + k];
      if (t >= 0 && static_cast<std::size_t>(t) < log_probs.size()) log_probs[static_cast<std::size_t>(t)] = kNegInf;
    }
  }
}

void block_repeat_ngrams(const Hypothesis& hyp, std::span<double> log_probs, std::size_t n) {
  block_repeat_ngrams(hyp.generated(), log_probs, n);
}

namespace {

// Step log-probabilities with bans, length bounds and blocking applied.
std::vector<double> constrained_step(const StepScorer& scorer, const Hypothesis& hyp, const BeamConfig& config) {
  std::vector<double> lp = scorer(hyp.tokens);
  if (lp.size() < kNumSpecials) throw ContractError("scorer returned fewer entries than the special tokens");
  for (double& x : lp) {
    if (std::isnan(x)) throw NumericError("scorer returned NaN");
  }
  lp[kPad] = kNegInf;
  lp[kBos] = kNegInf;
  const std::size_t len = hyp.length();
  if (len < config.min_len) lp[kEos] = kNegInf;
  if (len >= config.max_len) {
    const double eos = lp[kEos];
    std::fill(lp.begin(), lp.end(), kNegInf);
    lp[kEos] = std::isfinite(eos) ? eos : 0.0;
    return lp;
  }
  block_repeat_ngrams(hyp, lp, config.no_repeat_ngram);
  return lp;
}

Hypothesis extend(const Hypothesis& parent, TokenId token, double log_prob, const BeamConfig& config) {
  Hypothesis h;
  h.tokens = parent.tokens;
  h.tokens.push_back(token);
  h.log_prob = log_prob;
  h.finished = token == kEos;
  if (h.finished) h.score = log_prob / length_penalty(h.length() + 1, config.length_penalty_alpha);
  return h;
}

bool better_candidate(const BeamCandidate& a, const BeamCandidate& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  if (a.parent != b.parent) return a.parent < b.parent;
  return a.token < b.token;
}

}  // namespace

BeamResult beam_search(const StepScorer& scorer, const BeamConfig& config, const BeamObserver& observer) {
  config.validate();
  BeamResult result;
  std::vector<Hypothesis> live(1);
  live[0].tokens = {kBos};
  std::vector<Hypothesis> last_live = live;
  for (std::size_t step = 0; !live.empty(); ++step) {
    std::vector<BeamCandidate> cands;
    for (std::size_t p = 0; p < live.size(); ++p) {
      const auto lp = constrained_step(scorer, live[p], config);
      for (std::size_t t = 0; t < lp.size(); ++t) {
        if (lp[t] == kNegInf) continue;
        cands.push_back({p, static_cast<TokenId>(t), live[p].log_prob + lp[t]});
      }
    }
    std::sort(cands.begin(), cands.end(), better_candidate);
    const std::size_t keep = std::min(config.beam_size, cands.size());
    if (observer) {
      observer(step, std::span<const BeamCandidate>(cands).first(keep),
               std::span<const BeamCandidate>(cands).subspan(keep));
    }
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis h = extend(live[cands[i].parent], cands[i].token, cands[i].log_prob, config);
      if (h.finished) {
        result.finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    last_live = std::move(live);
    live = std::move(next);
    if (!live.empty()) last_live = live;
  }
  if (!result.finished.empty()) {
    const Hypothesis* best = &result.finished.front();
    for (const auto& h : result.finished) {
      if (h.score > best->score) best = &h;
    }
    result.best = *best;
    return result;
  }
  // Nothing finished (every continuation was blocked): best live hypothesis.
  const Hypothesis* best = nullptr;
  for (auto& h : last_live) {
    h.score = h.log_prob / length_penalty(std::max<std::size_t>(1, h.length()), config.length_penalty_alpha);
    if (!best || h.score > best->score) best = &h;
  }
  result.best = *best;
  return result;
}

Hypothesis greedy_decode(const StepScorer& scorer, const BeamConfig& config) {
  config.validate();
  Hypothesis h;
  h.tokens = {kBos};
  while (true) {
    const auto lp = constrained_step(scorer, h, config);
    std::size_t arg = lp.size();
    for (std::size_t t = 0; t < lp.size(); ++t) {
      if (lp[t] == kNegInf) continue;
      if (arg == lp.size() || lp[t] > lp[arg]) arg = t;
    }
    if (arg == lp.size()) break;
    h = extend(h, static_cast<TokenId>(arg), h.log_prob + lp[arg], config);
    if (h.finished) return h;
  }
  h.score = h.log_prob / length_penalty(std::max<std::size_t>(1, h.length()), config.length_penalty_alpha);
  return h;
}

template <typename T>
StepScorer model_scorer(const Model<T>& model, const EncodedSource<T>& source) {
  return [&model, &source](std::span<const TokenId> prefix) {
    const Tensor<T> lp = model.next_log_probs(source, prefix);
    return std::vector<double>(lp.buffer().begin(), lp.buffer().end());
  };
}

template <typename T>
Hypothesis summarize_ids(const Model<T>& model, const EncodedPair& source, const BeamConfig& config) {
  if (source.source_ids.empty()) throw InputError("empty source");
  config.validate();
  const EncodedSource<T> enc = model.encode(source.source_ids, source.source_ext_ids, source.oov_count());
  return beam_search(model_scorer(model, enc), config).best;
}

template StepScorer model_scorer<float>(const Model<float>&, const EncodedSource<float>&);
template StepScorer model_scorer<double>(const Model<double>&, const EncodedSource<double>&);
template Hypothesis summarize_ids<float>(const Model<float>&, const EncodedPair&, const BeamConfig&);
template Hypothesis summarize_ids<double>(const Model<double>&, const EncodedPair&, const BeamConfig&);

}  // namespace aggsum
