#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "aggsum/model.hpp"
#include "aggsum/random.hpp"
#include "aggsum/training.hpp"

namespace aggsum::testing {

inline ModelConfig toy_config(AggMethod method = AggMethod::attention, bool pointer = true) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc = 2;
  c.n_dec = 2;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.agg_layers = 1;
  c.agg_method = method;
  c.use_pointer = pointer;
  c.vocab_size = 12;
  c.max_positions = 16;
  return c;
}

// Random pair with ids in [4, vocab) and optional source OOVs that the
// target copies.
inline EncodedPair random_pair(std::mt19937_64& rng, std::size_t vocab, std::size_t src_len, std::size_t tgt_len,
                               std::size_t oovs = 0) {
  EncodedPair p;
  for (std::size_t i = 0; i < src_len; ++i) {
    const auto id = static_cast<TokenId>(kNumSpecials + uniform_index(rng, vocab - kNumSpecials));
    p.source_ids.push_back(id);
    p.source_ext_ids.push_back(id);
  }
  for (std::size_t k = 0; k < oovs && k < src_len; ++k) {
    const std::size_t pos = (k * 2 + 1) % src_len;
    p.source_ids[pos] = kUnk;
    p.source_ext_ids[pos] = static_cast<TokenId>(vocab + k);
    p.oov_map[static_cast<TokenId>(vocab + k)] = "oov" + std::to_string(k);
  }
  p.target_ids.push_back(kBos);
  p.target_ext_ids.push_back(kBos);
  for (std::size_t i = 0; i + 1 < tgt_len; ++i) {
    const std::size_t pos = uniform_index(rng, src_len);
    p.target_ids.push_back(p.source_ids[pos]);
    p.target_ext_ids.push_back(p.source_ext_ids[pos]);
  }
  p.target_ids.push_back(kEos);
  p.target_ext_ids.push_back(kEos);
  return p;
}

struct GradientReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// Double-precision backprop gradients of the mean NLL against central
// differences whose forward passes run in long double, so the oracle's
// rounding noise sits far below the gradients being checked.
inline GradientReport full_gradient_check(const ModelConfig& config, const ParameterSet<double>& params,
                                          const EncodedPair& pair, long double h = 1e-5L, double floor = 1e-8) {
  const auto targets = shifted_targets(pair, config.use_pointer);
  const std::span<const TokenId> ys(targets);
  Model<double> model(config, params);
  model.parameters().zero_grad();
  {
    Tape<double> tape;
    const auto w = bind_weights(tape, config, model.parameters());
    tape.backward(nll_loss(model.forward(tape, w, pair), ys));
  }
  auto ext = model.parameters().cast<long double>();
  auto loss = [&] {
    Model<long double> m(config, ext);
    Tape<long double> tape(false);
    return nll_loss(m.forward(tape, pair), ys).value().item();
  };
  GradientReport r;
  for (std::size_t k = 0; k < ext.size(); ++k) {
    auto& t = ext.entries()[k].second;
    const auto& g = model.parameters().entries()[k].second.grad();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const long double x = t[i];
      t[i] = x + h;
      const long double up = loss();
      t[i] = x - h;
      const long double down = loss();
      t[i] = x;
      const double numeric = static_cast<double>((up - down) / (2 * h));
      const double analytic = g[i];
      const double abs_err = std::abs(analytic - numeric);
      const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), floor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst_name = ext.entries()[k].first;
        r.worst_index = i;
        r.worst_analytic = analytic;
        r.worst_numeric = numeric;
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace aggsum::testing
