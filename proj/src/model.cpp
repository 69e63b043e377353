#include "aggsum/model.hpp"

#include <algorithm>
#include <cmath>

#include "aggsum/error.hpp"
#include "aggsum/random.hpp"

namespace aggsum {

std::string to_string(AggMethod method) {
  switch (method) {
    case AggMethod::none: return "none";
    case AggMethod::add: return "add";
    case AggMethod::projection: return "projection";
    case AggMethod::attention: return "attention";
  }
  return "none";
}

AggMethod parse_agg_method(std::string_view name) {
  if (name == "none") return AggMethod::none;
  if (name == "add") return AggMethod::add;
  if (name == "projection") return AggMethod::projection;
  if (name == "attention") return AggMethod::attention;
  throw ConfigError("unknown aggregation method '" + std::string(name) + "' (expected none, add, projection or attention)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (d_model < 2 || d_model % 2 != 0) fail("d_model must be a positive even number, got " + std::to_string(d_model));
  if (n_heads == 0 || d_model % n_heads != 0) {
    fail("head count " + std::to_string(n_heads) + " does not divide d_model " + std::to_string(d_model));
  }
  if (n_enc == 0 || n_dec == 0) fail("encoder and decoder need at least one layer");
  if (d_ff == 0) fail("d_ff must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (vocab_size <= kNumSpecials) fail("vocab_size must exceed the " + std::to_string(kNumSpecials) + " special tokens");
  if (max_positions == 0) fail("max_positions must be positive");
  if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
  if (agg_method != AggMethod::none && (agg_layers < 1 || agg_layers + 1 > n_enc)) {
    fail("aggregation layers L=" + std::to_string(agg_layers) + " must satisfy 1 <= L <= N_enc - 1 = " +
         std::to_string(n_enc - 1));
  }
}

// ---- ParameterSet ------------------------------------------------------------

template <typename T>
void ParameterSet<T>::add(std::string name, Tensor<T> value) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
}

template <typename T>
std::size_t ParameterSet<T>::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
Tensor<T>& ParameterSet<T>::at(const std::string& name) {
  return entries_[index_of(name)].second;
}

template <typename T>
const Tensor<T>& ParameterSet<T>::at(const std::string& name) const {
  return entries_[index_of(name)].second;
}

template <typename T>
std::size_t ParameterSet<T>::element_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ParameterSet<T>::pointers() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (auto& e : entries_) out.emplace_back(e.first, &e.second);
  return out;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class ParameterSet<long double>;

// ---- parameter layout --------------------------------------------------------

namespace {

void add_attention_shapes(std::vector<std::pair<std::string, Shape>>& out, const std::string& prefix, std::size_t d) {
  for (const char* w : {"wq", "wk", "wv", "wo"}) out.emplace_back(prefix + "." + w, Shape{d, d});
}

void add_norm_shapes(std::vector<std::pair<std::string, Shape>>& out, const std::string& prefix, std::size_t d) {
  out.emplace_back(prefix + ".gain", Shape{d});
  out.emplace_back(prefix + ".bias", Shape{d});
}

void add_ffn_shapes(std::vector<std::pair<std::string, Shape>>& out, const std::string& prefix, std::size_t d,
                    std::size_t ff) {
  out.emplace_back(prefix + ".w1", Shape{d, ff});
  out.emplace_back(prefix + ".b1", Shape{ff});
  out.emplace_back(prefix + ".w2", Shape{ff, d});
  out.emplace_back(prefix + ".b2", Shape{d});
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embedding", Shape{c.vocab_size, d});
  for (std::size_t l = 0; l < c.n_enc; ++l) {
    const std::string p = "enc." + std::to_string(l);
    add_attention_shapes(out, p + ".self_attn", d);
    add_norm_shapes(out, p + ".norm1", d);
    add_ffn_shapes(out, p + ".ffn", d, c.d_ff);
    add_norm_shapes(out, p + ".norm2", d);
  }
  for (std::size_t l = 0; l < c.n_dec; ++l) {
    const std::string p = "dec." + std::to_string(l);
    add_attention_shapes(out, p + ".self_attn", d);
    add_norm_shapes(out, p + ".norm1", d);
    add_attention_shapes(out, p + ".cross_attn", d);
    add_norm_shapes(out, p + ".norm2", d);
    add_ffn_shapes(out, p + ".ffn", d, c.d_ff);
    add_norm_shapes(out, p + ".norm3", d);
  }
  if (c.agg_method == AggMethod::projection) {
    out.emplace_back("agg.history.weight", Shape{c.agg_layers * d, d});
    out.emplace_back("agg.history.bias", Shape{d});
    add_attention_shapes(out, "agg.attn.0", d);
  } else if (c.agg_method == AggMethod::attention) {
    for (std::size_t i = 0; i <= c.agg_layers; ++i) add_attention_shapes(out, "agg.attn." + std::to_string(i), d);
  }
  if (c.use_pointer) {
    out.emplace_back("pointer.w_gen", Shape{d, 1});
    out.emplace_back("pointer.b_gen", Shape{1});
    out.emplace_back("pointer.b_copy", Shape{c.max_positions});
  }
  out.emplace_back("output.weight", Shape{d, c.vocab_size});
  out.emplace_back("output.bias", Shape{c.vocab_size});
  return out;
}

std::size_t analytic_parameter_count(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, ff = c.d_ff, V = c.vocab_size, L = c.agg_layers;
  const std::size_t mh = 4 * d * d;
  const std::size_t norm = 2 * d;
  const std::size_t ffn = d * ff + ff + ff * d + d;
  std::size_t n = V * d + (d * V + V);
  n += c.n_enc * (mh + ffn + 2 * norm);
  n += c.n_dec * (2 * mh + ffn + 3 * norm);
  switch (c.agg_method) {
    case AggMethod::none:
    case AggMethod::add: break;
    case AggMethod::projection: n += L * d * d + d + mh; break;
    case AggMethod::attention: n += (L + 1) * mh; break;
  }
  if (c.use_pointer) n += d + 1 + c.max_positions;
  return n;
}

template <typename T>
ParameterSet<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet<T> params;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  for (auto& [name, shape] : parameter_shapes(config)) {
    Tensor<T> t(shape);
    if (name == "embedding") {
      for (auto& v : t.data()) v = static_cast<T>(emb_std * standard_normal(rng));
    } else if (ends_with(name, ".gain")) {
      for (auto& v : t.data()) v = T(1);
    } else if (shape.size() == 2) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      for (auto& v : t.data()) v = static_cast<T>(uniform(rng, -bound, bound));
    }
    params.add(name, std::move(t));
  }
  return params;
}

template <typename T>
Tensor<T> positional_encoding(std::size_t max_len, std::size_t d_model) {
  if (d_model == 0 || d_model % 2 != 0) throw ConfigError("positional encoding needs an even d_model");
  Tensor<T> pe({max_len, d_model});
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; 2 * i < d_model; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      pe.at(pos, 2 * i) = static_cast<T>(std::sin(angle));
      pe.at(pos, 2 * i + 1) = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

// ---- binding -----------------------------------------------------------------

template <typename T>
GradientBuffers<T> make_gradient_buffers(const ParameterSet<T>& params) {
  GradientBuffers<T> out;
  out.reserve(params.size());
  for (const auto& e : params.entries()) out.emplace_back(e.second.size(), T(0));
  return out;
}

namespace {

template <typename T, typename Get>
BoundWeights<T> bind_with(const ModelConfig& c, Get&& get) {
  auto attn = [&](const std::string& p) {
    return AttentionWeights<T>{get(p + ".wq"), get(p + ".wk"), get(p + ".wv"), get(p + ".wo")};
  };
  auto norm = [&](const std::string& p) { return NormWeights<T>{get(p + ".gain"), get(p + ".bias")}; };
  auto ffn = [&](const std::string& p) {
    return FeedForwardWeights<T>{get(p + ".w1"), get(p + ".b1"), get(p + ".w2"), get(p + ".b2")};
  };
  BoundWeights<T> w;
  w.embedding = get("embedding");
  for (std::size_t l = 0; l < c.n_enc; ++l) {
    const std::string p = "enc." + std::to_string(l);
    w.encoder.push_back({attn(p + ".self_attn"), norm(p + ".norm1"), ffn(p + ".ffn"), norm(p + ".norm2")});
  }
  for (std::size_t l = 0; l < c.n_dec; ++l) {
    const std::string p = "dec." + std::to_string(l);
    w.decoder.push_back({attn(p + ".self_attn"), norm(p + ".norm1"), attn(p + ".cross_attn"), norm(p + ".norm2"),
                         ffn(p + ".ffn"), norm(p + ".norm3")});
  }
  if (c.agg_method == AggMethod::projection) {
    w.aggregation.history_w = get("agg.history.weight");
    w.aggregation.history_b = get("agg.history.bias");
    w.aggregation.attn.push_back(attn("agg.attn.0"));
  } else if (c.agg_method == AggMethod::attention) {
    for (std::size_t i = 0; i <= c.agg_layers; ++i) w.aggregation.attn.push_back(attn("agg.attn." + std::to_string(i)));
  }
  if (c.use_pointer) {
    w.pointer = {get("pointer.w_gen"), get("pointer.b_gen"), get("pointer.b_copy")};
  }
  w.out_w = get("output.weight");
  w.out_b = get("output.bias");
  return w;
}

}  // namespace

template <typename T>
BoundWeights<T> bind_weights(Tape<T>& tape, const ModelConfig& config, ParameterSet<T>& params) {
  return bind_with<T>(config, [&](const std::string& name) { return tape.watch(params.at(name)); });
}

template <typename T>
BoundWeights<T> bind_weights(Tape<T>& tape, const ModelConfig& config, const ParameterSet<T>& params,
                             GradientBuffers<T>* sinks) {
  return bind_with<T>(config, [&](const std::string& name) {
    const std::size_t idx = params.index_of(name);
    const Tensor<T>& value = params.entries()[idx].second;
    if (!sinks) return tape.constant_ref(value);
    return tape.watch(value, std::span<T>((*sinks)[idx]));
  });
}

// ---- layers ------------------------------------------------------------------

template <typename T>
Var<T> scaled_dot_attention(Var<T> q, Var<T> k, Var<T> v, const Mask* mask, Tensor<T>* weights_out) {
  const std::size_t dk = q.shape().back();
  if (k.shape().back() != dk) {
    throw ShapeError("attention key width " + shape_str(k.shape()) + " does not match query " + shape_str(q.shape()));
  }
  Var<T> scores = scale(matmul(q, transpose(k)), T(1) / std::sqrt(static_cast<T>(dk)));
  Var<T> weights = softmax(scores, -1, mask);
  if (weights_out) *weights_out = weights.value();
  return matmul(weights, v);
}

template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, const Mask* mask, const AttentionWeights<T>& w,
                            const LayerContext<T>& ctx, const std::string& site, bool source_keys) {
  const std::size_t d = w.wq.shape().back();
  if (ctx.n_heads == 0 || d % ctx.n_heads != 0) {
    throw ConfigError("head count " + std::to_string(ctx.n_heads) + " does not divide width " + std::to_string(d));
  }
  const std::size_t dk = d / ctx.n_heads;
  Var<T> Q = matmul(q, w.wq);
  Var<T> K = matmul(k, w.wk);
  Var<T> V = matmul(v, w.wv);
  std::vector<Var<T>> heads;
  heads.reserve(ctx.n_heads);
  for (std::size_t h = 0; h < ctx.n_heads; ++h) {
    Tensor<T> weights;
    Var<T> out = scaled_dot_attention(slice_last_dim(Q, h * dk, dk), slice_last_dim(K, h * dk, dk),
                                      slice_last_dim(V, h * dk, dk), mask, ctx.trace ? &weights : nullptr);
    if (ctx.trace) ctx.trace->attention.push_back({site, source_keys, h, std::move(weights)});
    heads.push_back(out);
  }
  Var<T> joined = heads.size() == 1 ? heads[0] : concat_last_dim(heads);
  return matmul(joined, w.wo);
}

template <typename T>
Var<T> feed_forward(Var<T> x, const FeedForwardWeights<T>& w) {
  Var<T> hidden = relu(add(matmul(x, w.w1), w.b1));
  return add(matmul(hidden, w.w2), w.b2);
}

namespace {

template <typename T>
Var<T> drop(Var<T> x, const LayerContext<T>& ctx) {
  if (!ctx.training || ctx.dropout == T(0)) return x;
  if (!ctx.rng) throw ContractError("training with dropout requires a random generator");
  return dropout(x, ctx.dropout, true, *ctx.rng);
}

template <typename T>
Var<T> norm(Var<T> x, const NormWeights<T>& w, const LayerContext<T>& ctx) {
  return layer_norm(x, w.gain, w.bias, ctx.layer_norm_eps);
}

std::size_t check_window(std::size_t stack_size, std::size_t L) {
  if (stack_size < 2) throw ConfigError("aggregation needs encoder layer outputs");
  const std::size_t n = stack_size - 1;
  if (L < 1 || L + 1 > n) {
    throw ConfigError("aggregation layers L=" + std::to_string(L) + " must satisfy 1 <= L <= N - 1 = " +
                      std::to_string(n - 1));
  }
  return n;
}

}  // namespace

template <typename T>
Var<T> encoder_layer_forward(Var<T> x, const EncoderLayerWeights<T>& w, const Mask* key_mask,
                             const LayerContext<T>& ctx, const std::string& site) {
  Var<T> attn = drop(multi_head_attention(x, x, x, key_mask, w.self_attn, ctx, site + ".self", true), ctx);
  Var<T> h = norm(add(x, attn), w.norm1, ctx);
  Var<T> ff = drop(feed_forward(h, w.ffn), ctx);
  return norm(add(h, ff), w.norm2, ctx);
}

template <typename T>
std::vector<Var<T>> encoder_forward(Var<T> u, std::span<const EncoderLayerWeights<T>> layers, const Mask* key_mask,
                                    const LayerContext<T>& ctx) {
  std::vector<Var<T>> outs;
  outs.reserve(layers.size());
  Var<T> x = u;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    x = encoder_layer_forward(x, layers[l], key_mask, ctx, "enc." + std::to_string(l));
    outs.push_back(x);
  }
  return outs;
}

template <typename T>
Var<T> aggregate_add(std::span<const Var<T>> layers, std::size_t L) {
  const std::size_t n = check_window(layers.size(), L);
  Var<T> acc = layers[n];
  for (std::size_t l = n - 1; l >= n - L; --l) acc = add(acc, layers[l]);
  return acc;
}

template <typename T>
Var<T> aggregate_projection(std::span<const Var<T>> layers, std::size_t L, const AggregationWeights<T>& w,
                            const Mask* key_mask, const LayerContext<T>& ctx) {
  const std::size_t n = check_window(layers.size(), L);
  if (w.attn.empty() || !w.history_w.valid()) throw ContractError("projection aggregation weights are not bound");
  std::vector<Var<T>> window(layers.begin() + static_cast<std::ptrdiff_t>(n - L),
                             layers.begin() + static_cast<std::ptrdiff_t>(n));
  Var<T> joined = window.size() == 1 ? window[0] : concat_last_dim(window);
  Var<T> history = add(matmul(joined, w.history_w), w.history_b);
  if (ctx.trace) ++ctx.trace->aggregation_attention_calls;
  return multi_head_attention(history, layers[n], layers[n], key_mask, w.attn[0], ctx, "agg.0", true);
}

template <typename T>
Var<T> aggregate_attention(std::span<const Var<T>> layers, std::size_t L, const AggregationWeights<T>& w,
                           const Mask* key_mask, const LayerContext<T>& ctx) {
  const std::size_t n = check_window(layers.size(), L);
  if (w.attn.size() != L + 1) throw ContractError("attention aggregation needs L + 1 attention blocks");
  Var<T> history = layers[n - L - 1];
  std::size_t block = 0;
  for (std::size_t l = n - L; l <= n; ++l, ++block) {
    if (ctx.trace) ++ctx.trace->aggregation_attention_calls;
    history = multi_head_attention(history, layers[l], layers[l], key_mask, w.attn[block], ctx,
                                   "agg." + std::to_string(block), true);
  }
  return history;
}

template <typename T>
Var<T> decoder_layer_forward(Var<T> y, Var<T> memory, const DecoderLayerWeights<T>& w, const Mask& causal,
                             const Mask* memory_key_mask, const LayerContext<T>& ctx, const std::string& site) {
  Var<T> self = drop(multi_head_attention(y, y, y, &causal, w.self_attn, ctx, site + ".self", false), ctx);
  Var<T> h_ms = norm(add(y, self), w.norm1, ctx);
  Var<T> cross =
      drop(multi_head_attention(h_ms, memory, memory, memory_key_mask, w.cross_attn, ctx, site + ".cross", true), ctx);
  Var<T> h_d = norm(add(h_ms, cross), w.norm2, ctx);
  Var<T> ff = drop(feed_forward(h_d, w.ffn), ctx);
  return norm(add(h_d, ff), w.norm3, ctx);
}

template <typename T>
Var<T> pointer_gate(Var<T> h_dec, const PointerWeights<T>& w) {
  if (!w.w_gen.valid()) throw ContractError("pointer_gate called with the pointer mechanism disabled");
  const std::size_t t = h_dec.shape()[0];
  return reshape(sigmoid(add(matmul(h_dec, w.w_gen), w.b_gen)), Shape{t});
}

template <typename T>
Var<T> copy_weights(Var<T> h_dec, Var<T> memory, const PointerWeights<T>& w, const Mask* key_mask) {
  if (!w.b_copy.valid()) throw ContractError("copy weights requested with the pointer mechanism disabled");
  const std::size_t m = memory.shape()[0];
  if (m > w.b_copy.shape()[0]) {
    throw LengthError("source length " + std::to_string(m) + " exceeds copy bias length " +
                      std::to_string(w.b_copy.shape()[0]));
  }
  Var<T> logits = add(matmul(h_dec, transpose(memory)), slice_first_dim(w.b_copy, 0, m));
  return softmax(logits, -1, key_mask);
}

template <typename T>
Var<T> final_distribution(Var<T> p_vocab, Var<T> alpha, std::span<const TokenId> source_ext_ids,
                          std::size_t oov_count, Var<T> p_gen) {
  const std::size_t t = p_vocab.shape()[0];
  const std::size_t width = p_vocab.shape()[1] + oov_count;
  Var<T> gate = reshape(p_gen, Shape{t, 1});
  Var<T> copied = scatter_add_cols(alpha, source_ext_ids, width);
  Var<T> generated = pad_last_dim(p_vocab, oov_count);
  return add(mul(copied, affine(gate, T(-1), T(1))), mul(generated, gate));
}

Mask source_key_mask(std::span<const TokenId> source_ids) {
  std::vector<std::uint8_t> excluded(source_ids.size());
  for (std::size_t i = 0; i < source_ids.size(); ++i) excluded[i] = source_ids[i] == kPad ? 1 : 0;
  return Mask::keys(excluded);
}

// ---- Model -------------------------------------------------------------------

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      params_(init_parameters<T>(config_, seed)),
      positions_(positional_encoding<T>(config_.max_positions, config_.d_model)) {}

template <typename T>
Model<T>::Model(ModelConfig config, ParameterSet<T> params)
    : config_(std::move(config)), positions_(positional_encoding<T>(config_.max_positions, config_.d_model)) {
  for (auto& [name, shape] : parameter_shapes(config_)) {
    if (!params.contains(name)) throw ConfigError("missing parameter '" + name + "'");
    Tensor<T>& t = params.at(name);
    if (t.shape() != shape) {
      throw ConfigError("parameter '" + name + "' has shape " + shape_str(t.shape()) + ", expected " + shape_str(shape));
    }
    params_.add(name, std::move(t));
  }
}

template <typename T>
LayerContext<T> Model<T>::context(const ForwardOptions<T>& opts) const {
  LayerContext<T> ctx;
  ctx.n_heads = config_.n_heads;
  ctx.layer_norm_eps = static_cast<T>(config_.layer_norm_eps);
  ctx.dropout = static_cast<T>(opts.dropout >= 0.0 ? opts.dropout : config_.dropout);
  ctx.training = opts.training;
  ctx.rng = opts.rng;
  ctx.trace = opts.trace;
  return ctx;
}

template <typename T>
Var<T> Model<T>::embed(Tape<T>& tape, Var<T> table, std::span<const TokenId> ids,
                       const ForwardOptions<T>& opts) const {
  std::vector<TokenId> in(ids.begin(), ids.end());
  // Extended (copied) ids have no embedding row and read as UNK.
  for (auto& id : in) {
    if (id >= 0 && static_cast<std::size_t>(id) >= config_.vocab_size) id = kUnk;
  }
  Var<T> tokens = embedding_lookup(table, std::span<const TokenId>(in));
  Var<T> pos = slice_first_dim(tape.constant_ref(positions_), 0, in.size());
  return drop(add(tokens, pos), context(opts));
}

template <typename T>
Var<T> Model<T>::encode_graph(Tape<T>& tape, const BoundWeights<T>& w, std::span<const TokenId> source_ids,
                              const Mask* key_mask, const ForwardOptions<T>& opts) const {
  if (source_ids.empty()) throw InputError("empty source sequence");
  if (source_ids.size() > config_.max_positions) {
    throw LengthError("source length " + std::to_string(source_ids.size()) + " exceeds max_positions " +
                      std::to_string(config_.max_positions));
  }
  const LayerContext<T> ctx = context(opts);
  Var<T> u = embed(tape, w.embedding, source_ids, opts);
  std::vector<Var<T>> stack{u};
  auto layers = encoder_forward(u, std::span<const EncoderLayerWeights<T>>(w.encoder), key_mask, ctx);
  stack.insert(stack.end(), layers.begin(), layers.end());
  if (opts.trace) {
    for (const auto& l : layers) opts.trace->encoder_layers.push_back(l.value());
  }
  Var<T> memory;
  const std::span<const Var<T>> view(stack);
  switch (config_.agg_method) {
    case AggMethod::none: memory = layers.back(); break;
    case AggMethod::add: memory = aggregate_add(view, config_.agg_layers); break;
    case AggMethod::projection:
      memory = aggregate_projection(view, config_.agg_layers, w.aggregation, key_mask, ctx);
      break;
    case AggMethod::attention:
      memory = aggregate_attention(view, config_.agg_layers, w.aggregation, key_mask, ctx);
      break;
  }
  if (opts.trace) opts.trace->memory = memory.value();
  return memory;
}

template <typename T>
Var<T> Model<T>::decode_graph(Tape<T>& tape, const BoundWeights<T>& w, Var<T> memory, const Mask* key_mask,
                              std::span<const TokenId> decoder_input, std::span<const TokenId> source_ext_ids,
                              std::size_t oov_count, const ForwardOptions<T>& opts) const {
  if (decoder_input.empty()) throw InputError("empty decoder input");
  if (decoder_input.size() > config_.max_positions) {
    throw LengthError("target length " + std::to_string(decoder_input.size()) + " exceeds max_positions " +
                      std::to_string(config_.max_positions));
  }
  const LayerContext<T> ctx = context(opts);
  Var<T> y = embed(tape, w.embedding, decoder_input, opts);
  const Mask causal = Mask::causal(decoder_input.size());
  for (std::size_t l = 0; l < w.decoder.size(); ++l) {
    y = decoder_layer_forward(y, memory, w.decoder[l], causal, key_mask, ctx, "dec." + std::to_string(l));
  }
  Var<T> logits = add(matmul(y, w.out_w), w.out_b);
  if (!config_.use_pointer) {
    Var<T> out = log_softmax(logits);
    if (opts.trace) {
      Tensor<T> p = out.value();
      for (auto& v : p.data()) v = std::exp(v);
      opts.trace->p_vocab = p;
      opts.trace->p_final = std::move(p);
    }
    return out;
  }
  Var<T> p_vocab = softmax(logits);
  Var<T> p_gen = pointer_gate(y, w.pointer);
  Var<T> alpha = copy_weights(y, memory, w.pointer, key_mask);
  Var<T> p_final = final_distribution(p_vocab, alpha, source_ext_ids, oov_count, p_gen);
  if (opts.trace) {
    opts.trace->p_vocab = p_vocab.value();
    opts.trace->p_gen = p_gen.value();
    opts.trace->copy_weights = alpha.value();
    opts.trace->p_final = p_final.value();
    opts.trace->attention.push_back({"copy", true, 0, alpha.value()});
  }
  return log(p_final, static_cast<T>(kLogFloor));
}

template <typename T>
Var<T> Model<T>::forward(Tape<T>& tape, const BoundWeights<T>& w, const EncodedPair& pair,
                         const ForwardOptions<T>& opts) const {
  if (pair.target_ids.size() < 2) throw InputError("target must contain BOS and at least one more token");
  if (pair.source_ext_ids.size() != pair.source_ids.size()) {
    throw InputError("source_ids and source_ext_ids differ in length");
  }
  const Mask key_mask = source_key_mask(pair.source_ids);
  Var<T> memory = encode_graph(tape, w, pair.source_ids, &key_mask, opts);
  const std::span<const TokenId> decoder_input(pair.target_ids.data(), pair.target_ids.size() - 1);
  return decode_graph(tape, w, memory, &key_mask, decoder_input, pair.source_ext_ids, pair.oov_count(), opts);
}

template <typename T>
Var<T> Model<T>::forward(Tape<T>& tape, const EncodedPair& pair, const ForwardOptions<T>& opts) {
  const BoundWeights<T> w = bind_weights(tape, config_, params_);
  return forward(tape, w, pair, opts);
}

template <typename T>
EncodedSource<T> Model<T>::encode(std::span<const TokenId> source_ids, std::span<const TokenId> source_ext_ids,
                                  std::size_t oov_count) const {
  if (source_ext_ids.size() != source_ids.size()) throw InputError("source_ids and source_ext_ids differ in length");
  Tape<T> tape(false);
  const BoundWeights<T> w = bind_weights<T>(tape, config_, params_, static_cast<GradientBuffers<T>*>(nullptr));
  const Mask key_mask = source_key_mask(source_ids);
  Var<T> memory = encode_graph(tape, w, source_ids, &key_mask, {});
  EncodedSource<T> out;
  out.memory = memory.value();
  out.pad = key_mask.masked;
  out.ext_ids.assign(source_ext_ids.begin(), source_ext_ids.end());
  out.oov_count = oov_count;
  return out;
}

template <typename T>
Tensor<T> Model<T>::next_log_probs(const EncodedSource<T>& source, std::span<const TokenId> prefix) const {
  Tape<T> tape(false);
  const BoundWeights<T> w = bind_weights<T>(tape, config_, params_, static_cast<GradientBuffers<T>*>(nullptr));
  const Mask key_mask = Mask::keys(source.pad);
  Var<T> memory = tape.constant_ref(source.memory);
  Var<T> out = decode_graph(tape, w, memory, &key_mask, prefix, source.ext_ids, source.oov_count, {});
  const std::size_t width = out.shape()[1];
  const auto& v = out.value();
  std::vector<T> last(v.buffer().end() - static_cast<std::ptrdiff_t>(width), v.buffer().end());
  return Tensor<T>(Shape{width}, std::move(last));
}

#define AGGSUM_INSTANTIATE(T)                                                                                       \
  template ParameterSet<T> init_parameters<T>(const ModelConfig&, std::uint64_t);                                   \
  template Tensor<T> positional_encoding<T>(std::size_t, std::size_t);                                              \
  template GradientBuffers<T> make_gradient_buffers<T>(const ParameterSet<T>&);                                     \
  template BoundWeights<T> bind_weights<T>(Tape<T>&, const ModelConfig&, ParameterSet<T>&);                         \
  template BoundWeights<T> bind_weights<T>(Tape<T>&, const ModelConfig&, const ParameterSet<T>&,                    \
                                           GradientBuffers<T>*);                                                    \
  template Var<T> scaled_dot_attention<T>(Var<T>, Var<T>, Var<T>, const Mask*, Tensor<T>*);                         \
  template Var<T> multi_head_attention<T>(Var<T>, Var<T>, Var<T>, const Mask*, const AttentionWeights<T>&,          \
                                          const LayerContext<T>&, const std::string&, bool);                        \
  template Var<T> feed_forward<T>(Var<T>, const FeedForwardWeights<T>&);                                            \
  template Var<T> encoder_layer_forward<T>(Var<T>, const EncoderLayerWeights<T>&, const Mask*,                      \
                                           const LayerContext<T>&, const std::string&);                             \
  template std::vector<Var<T>> encoder_forward<T>(Var<T>, std::span<const EncoderLayerWeights<T>>, const Mask*,     \
                                                  const LayerContext<T>&);                                          \
  template Var<T> aggregate_add<T>(std::span<const Var<T>>, std::size_t);                                           \
  template Var<T> aggregate_projection<T>(std::span<const Var<T>>, std::size_t, const AggregationWeights<T>&,       \
                                          const Mask*, const LayerContext<T>&);                                     \
  template Var<T> aggregate_attention<T>(std::span<const Var<T>>, std::size_t, const AggregationWeights<T>&,        \
                                         const Mask*, const LayerContext<T>&);                                      \
  template Var<T> decoder_layer_forward<T>(Var<T>, Var<T>, const DecoderLayerWeights<T>&, const Mask&, const Mask*, \
                                           const LayerContext<T>&, const std::string&);                             \
  template Var<T> pointer_gate<T>(Var<T>, const PointerWeights<T>&);                                                \
  template Var<T> copy_weights<T>(Var<T>, Var<T>, const PointerWeights<T>&, const Mask*);                           \
  template Var<T> final_distribution<T>(Var<T>, Var<T>, std::span<const TokenId>, std::size_t, Var<T>);             \
  template class Model<T>;

AGGSUM_INSTANTIATE(float)
AGGSUM_INSTANTIATE(double)
AGGSUM_INSTANTIATE(long double)

#undef AGGSUM_INSTANTIATE

}  // namespace aggsum
