#pragma once

#include <span>

#include "aggsum/model.hpp"

namespace aggsum {

// Plain encoder-decoder Transformer evaluated directly on the kernels,
// without a tape. Only valid for configurations without aggregation and
// without the pointer; used to cross-check Model::forward.
//
// Returns log-probabilities [decoder_input.size(), vocab_size].
template <typename T>
Tensor<T> reference_log_probs(const ModelConfig& config, const ParameterSet<T>& params,
                              std::span<const TokenId> source_ids, std::span<const TokenId> decoder_input);

}  // namespace aggsum
