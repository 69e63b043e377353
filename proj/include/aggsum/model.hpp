#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aggsum/autodiff.hpp"
#include "aggsum/tensor.hpp"
#include "aggsum/tokenizer.hpp"

namespace aggsum {

// How the encoder's final states are rebuilt from earlier layers before
// the decoder attends to them.
enum class AggMethod { none, add, projection, attention };

std::string to_string(AggMethod method);
AggMethod parse_agg_method(std::string_view name);

struct ModelConfig {
  std::size_t d_model = 512;
  std::size_t n_heads = 8;
  std::size_t n_enc = 4;
  std::size_t n_dec = 4;
  std::size_t d_ff = 2048;
  double dropout = 0.1;
  std::size_t agg_layers = 1;  // L
  AggMethod agg_method = AggMethod::attention;
  bool use_pointer = true;
  std::size_t vocab_size = kDefaultVocabSize;
  std::size_t max_positions = 512;
  double layer_norm_eps = 1e-6;

  std::size_t d_head() const { return d_model / n_heads; }
  // Throws ConfigError on inconsistent settings.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named learnable tensors in a stable (insertion) order.
template <typename T>
class ParameterSet {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  void add(std::string name, Tensor<T> value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t element_count() const;
  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  void zero_grad();
  // (name, tensor*) pairs, e.g. for gradient checks.
  std::vector<std::pair<std::string, Tensor<T>*>> pointers();

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& [n, t] : entries_) out.add(n, t.template cast<U>());
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template class ParameterSet<long double>;

// Names and shapes implied by a configuration, in initialization order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config);
// Closed-form parameter count, independent of parameter_shapes.
std::size_t analytic_parameter_count(const ModelConfig& config);

template <typename T>
ParameterSet<T> init_parameters(const ModelConfig& config, std::uint64_t seed);

// Sinusoidal position table [max_len, d_model]; d_model must be even.
template <typename T>
Tensor<T> positional_encoding(std::size_t max_len, std::size_t d_model);

// ---- weights bound to a tape -------------------------------------------

template <typename T>
struct AttentionWeights {
  Var<T> wq, wk, wv, wo;
};

template <typename T>
struct NormWeights {
  Var<T> gain, bias;
};

template <typename T>
struct FeedForwardWeights {
  Var<T> w1, b1, w2, b2;
};

template <typename T>
struct EncoderLayerWeights {
  AttentionWeights<T> self_attn;
  NormWeights<T> norm1;
  FeedForwardWeights<T> ffn;
  NormWeights<T> norm2;
};

template <typename T>
struct DecoderLayerWeights {
  AttentionWeights<T> self_attn;
  NormWeights<T> norm1;
  AttentionWeights<T> cross_attn;
  NormWeights<T> norm2;
  FeedForwardWeights<T> ffn;
  NormWeights<T> norm3;
};

template <typename T>
struct AggregationWeights {
  Var<T> history_w, history_b;              // projection only
  std::vector<AttentionWeights<T>> attn;    // projection: 1 block, attention: L + 1 blocks
};

template <typename T>
struct PointerWeights {
  Var<T> w_gen, b_gen, b_copy;
};

template <typename T>
struct BoundWeights {
  Var<T> embedding;
  std::vector<EncoderLayerWeights<T>> encoder;
  std::vector<DecoderLayerWeights<T>> decoder;
  AggregationWeights<T> aggregation;
  PointerWeights<T> pointer;
  Var<T> out_w, out_b;
};

// Per-parameter gradient buffers aligned with ParameterSet::entries().
template <typename T>
using GradientBuffers = std::vector<std::vector<T>>;

template <typename T>
GradientBuffers<T> make_gradient_buffers(const ParameterSet<T>& params);

// Binds parameters to a tape. Gradients go to each parameter's own slot.
template <typename T>
BoundWeights<T> bind_weights(Tape<T>& tape, const ModelConfig& config, ParameterSet<T>& params);
// Binds parameters whose gradients go to `sinks` (or nowhere when null).
template <typename T>
BoundWeights<T> bind_weights(Tape<T>& tape, const ModelConfig& config, const ParameterSet<T>& params,
                             GradientBuffers<T>* sinks);

// ---- forward building blocks -------------------------------------------

template <typename T>
struct AttentionRecord {
  std::string site;
  bool source_keys = false;  // keys are source positions
  std::size_t head = 0;
  Tensor<T> weights;         // [queries, keys]
};

// Intermediate values captured by a forward pass for inspection.
template <typename T>
struct ForwardTrace {
  std::vector<AttentionRecord<T>> attention;
  std::vector<Tensor<T>> encoder_layers;  // h_el^(1..N)
  Tensor<T> memory;                       // decoder cross-attention memory
  Tensor<T> p_vocab, copy_weights, p_gen, p_final;
  std::size_t aggregation_attention_calls = 0;
};

template <typename T>
struct LayerContext {
  std::size_t n_heads = 1;
  T layer_norm_eps = T(1e-6);
  T dropout = T(0);
  bool training = false;
  std::mt19937_64* rng = nullptr;
  ForwardTrace<T>* trace = nullptr;
};

// softmax(q k^T / sqrt(d_k) with masked logits excluded) v.
template <typename T>
Var<T> scaled_dot_attention(Var<T> q, Var<T> k, Var<T> v, const Mask* mask, Tensor<T>* weights_out = nullptr);

// Per-head projections (column blocks of wq/wk/wv), attention, concat, output projection.
template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, const Mask* mask, const AttentionWeights<T>& w,
                            const LayerContext<T>& ctx, const std::string& site = {}, bool source_keys = false);

template <typename T>
Var<T> feed_forward(Var<T> x, const FeedForwardWeights<T>& w);

template <typename T>
Var<T> encoder_layer_forward(Var<T> x, const EncoderLayerWeights<T>& w, const Mask* key_mask,
                             const LayerContext<T>& ctx, const std::string& site = "enc");

// Returns h_el^(1) ... h_el^(N) for input u = E_w + E_p.
template <typename T>
std::vector<Var<T>> encoder_forward(Var<T> u, std::span<const EncoderLayerWeights<T>> layers, const Mask* key_mask,
                                    const LayerContext<T>& ctx);

// The aggregation functions take `layers` with layers[0] = u and
// layers[l] = h_el^(l) for l = 1..N, and require 1 <= L <= N - 1.
template <typename T>
Var<T> aggregate_add(std::span<const Var<T>> layers, std::size_t L);

template <typename T>
Var<T> aggregate_projection(std::span<const Var<T>> layers, std::size_t L, const AggregationWeights<T>& w,
                            const Mask* key_mask, const LayerContext<T>& ctx);

template <typename T>
Var<T> aggregate_attention(std::span<const Var<T>> layers, std::size_t L, const AggregationWeights<T>& w,
                           const Mask* key_mask, const LayerContext<T>& ctx);

template <typename T>
Var<T> decoder_layer_forward(Var<T> y, Var<T> memory, const DecoderLayerWeights<T>& w, const Mask& causal,
                             const Mask* memory_key_mask, const LayerContext<T>& ctx, const std::string& site = "dec");

// P_gen per decoder step, shape [tgt_len].
template <typename T>
Var<T> pointer_gate(Var<T> h_dec, const PointerWeights<T>& w);

// alpha = softmax over source positions of h_dec memory^T + b_copy.
template <typename T>
Var<T> copy_weights(Var<T> h_dec, Var<T> memory, const PointerWeights<T>& w, const Mask* key_mask);

// P_final = P_copy (1 - P_gen) + P_vocab P_gen over vocab_size + oov_count ids.
template <typename T>
Var<T> final_distribution(Var<T> p_vocab, Var<T> alpha, std::span<const TokenId> source_ext_ids,
                          std::size_t oov_count, Var<T> p_gen);

// Probability floor applied before taking logs of the pointer mixture.
inline constexpr double kLogFloor = 1e-12;

template <typename T>
struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;
  ForwardTrace<T>* trace = nullptr;
  // Dropout rate for this pass; negative means ModelConfig::dropout.
  double dropout = -1.0;
};

// Encoder output ready for repeated decoding.
template <typename T>
struct EncodedSource {
  Tensor<T> memory;
  std::vector<std::uint8_t> pad;
  std::vector<TokenId> ext_ids;
  std::size_t oov_count = 0;
};

// The Aggregation Transformer: configuration plus parameters.
template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  // Adopts existing parameters; every required name must be present with
  // the right shape (extra entries are ignored).
  Model(ModelConfig config, ParameterSet<T> params);

  const ModelConfig& config() const noexcept { return config_; }
  ParameterSet<T>& parameters() noexcept { return params_; }
  const ParameterSet<T>& parameters() const noexcept { return params_; }
  const Tensor<T>& positions() const noexcept { return positions_; }

  // Teacher-forced log P_final [tgt_len, vocab_size + oov_count]; the
  // decoder reads target_ids[0..n-2] and row t scores target step t+1.
  Var<T> forward(Tape<T>& tape, const BoundWeights<T>& w, const EncodedPair& pair,
                 const ForwardOptions<T>& opts = {}) const;
  Var<T> forward(Tape<T>& tape, const EncodedPair& pair, const ForwardOptions<T>& opts = {});

  // Encoder and aggregation without gradients.
  EncodedSource<T> encode(std::span<const TokenId> source_ids, std::span<const TokenId> source_ext_ids,
                          std::size_t oov_count) const;
  // Log-probabilities of the token following `prefix` (which starts with BOS).
  Tensor<T> next_log_probs(const EncodedSource<T>& source, std::span<const TokenId> prefix) const;

 private:
  Var<T> embed(Tape<T>& tape, Var<T> table, std::span<const TokenId> ids, const ForwardOptions<T>& opts) const;
  Var<T> encode_graph(Tape<T>& tape, const BoundWeights<T>& w, std::span<const TokenId> source_ids,
                      const Mask* key_mask, const ForwardOptions<T>& opts) const;
  Var<T> decode_graph(Tape<T>& tape, const BoundWeights<T>& w, Var<T> memory, const Mask* key_mask,
                      std::span<const TokenId> decoder_input, std::span<const TokenId> source_ext_ids,
                      std::size_t oov_count, const ForwardOptions<T>& opts) const;
  LayerContext<T> context(const ForwardOptions<T>& opts) const;

  ModelConfig config_;
  ParameterSet<T> params_;
  Tensor<T> positions_;
};

extern template class Model<float>;
extern template class Model<double>;
extern template class Model<long double>;

// Key mask [1, n] excluding PAD source positions.
Mask source_key_mask(std::span<const TokenId> source_ids);

}  // namespace aggsum
