#include "aggsum/reference.hpp"

#include <cmath>

#include "aggsum/error.hpp"
#include "aggsum/kernels.hpp"

namespace aggsum {

namespace {

template <typename T>
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<T> v;

  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, T(0)) {}
  T* data() { return v.data(); }
  const T* data() const { return v.data(); }
};

template <typename T>
class Reference {
 public:
  Reference(const ModelConfig& c, const ParameterSet<T>& p) : c_(c), p_(p) {}

  Mat<T> matmul(const Mat<T>& a, const std::string& w) const {
    const Tensor<T>& W = p_.at(w);
    Mat<T> out(a.rows, W.dim(1));
    kernels::gemm<T>({a.rows, a.cols, W.dim(1), a.data(), false, W.data().data(), false, out.data(), false});
    return out;
  }

  void add_bias(Mat<T>& x, const std::string& b) const {
    const Tensor<T>& B = p_.at(b);
    for (std::size_t i = 0; i < x.rows; ++i) {
      for (std::size_t j = 0; j < x.cols; ++j) x.v[i * x.cols + j] += B[j];
    }
  }

  static void add_into(Mat<T>& x, const Mat<T>& y) {
    for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] += y.v[i];
  }

  Mat<T> norm(const Mat<T>& x, const std::string& prefix) const {
    Mat<T> out(x.rows, x.cols);
    kernels::layer_norm_rows<T>({x.rows, x.cols, x.data(), p_.at(prefix + ".gain").data().data(),
                                 p_.at(prefix + ".bias").data().data(), static_cast<T>(c_.layer_norm_eps),
                                 out.data(), nullptr, nullptr});
    return out;
  }

  // mask is [q.rows, k.rows] (nonzero = excluded) or empty.
  Mat<T> attention(const Mat<T>& q, const Mat<T>& kv, const std::vector<std::uint8_t>& mask,
                   const std::string& prefix) const {
    const Mat<T> Q = matmul(q, prefix + ".wq");
    const Mat<T> K = matmul(kv, prefix + ".wk");
    const Mat<T> V = matmul(kv, prefix + ".wv");
    const std::size_t d = Q.cols, dk = d / c_.n_heads, tq = Q.rows, tk = K.rows;
    const T scale = T(1) / std::sqrt(static_cast<T>(dk));
    Mat<T> joined(tq, d);
    for (std::size_t h = 0; h < c_.n_heads; ++h) {
      Mat<T> qh(tq, dk), kh(tk, dk), vh(tk, dk);
      for (std::size_t i = 0; i < tq; ++i) {
        for (std::size_t j = 0; j < dk; ++j) qh.v[i * dk + j] = Q.v[i * d + h * dk + j];
      }
      for (std::size_t i = 0; i < tk; ++i) {
        for (std::size_t j = 0; j < dk; ++j) {
          kh.v[i * dk + j] = K.v[i * d + h * dk + j];
          vh.v[i * dk + j] = V.v[i * d + h * dk + j];
        }
      }
      Mat<T> scores(tq, tk);
      kernels::gemm<T>({tq, dk, tk, qh.data(), false, kh.data(), true, scores.data(), false});
      for (auto& s : scores.v) s = scale * s + T(0);
      Mat<T> weights(tq, tk);
      kernels::softmax_rows<T>({tq, tk, scores.data(), mask.empty() ? nullptr : mask.data(), weights.data()});
      Mat<T> out(tq, dk);
      kernels::gemm<T>({tq, tk, dk, weights.data(), false, vh.data(), false, out.data(), false});
      for (std::size_t i = 0; i < tq; ++i) {
        for (std::size_t j = 0; j < dk; ++j) joined.v[i * d + h * dk + j] = out.v[i * dk + j];
      }
    }
    return matmul(joined, prefix + ".wo");
  }

  Mat<T> ffn(const Mat<T>& x, const std::string& prefix) const {
    Mat<T> h = matmul(x, prefix + ".w1");
    add_bias(h, prefix + ".b1");
    for (auto& v : h.v) v = v > T(0) ? v : T(0);
    Mat<T> out = matmul(h, prefix + ".w2");
    add_bias(out, prefix + ".b2");
    return out;
  }

  Mat<T> embed(std::span<const TokenId> ids, const Tensor<T>& pe) const {
    const Tensor<T>& table = p_.at("embedding");
    const std::size_t d = c_.d_model;
    Mat<T> out(ids.size(), d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      TokenId id = ids[i];
      if (id < 0) throw IndexError("token id out of range", id);
      if (static_cast<std::size_t>(id) >= c_.vocab_size) id = kUnk;
      for (std::size_t j = 0; j < d; ++j) {
        out.v[i * d + j] = table[static_cast<std::size_t>(id) * d + j];
        out.v[i * d + j] += pe[i * d + j];
      }
    }
    return out;
  }

 private:
  const ModelConfig& c_;
  const ParameterSet<T>& p_;
};

std::vector<std::uint8_t> expand_rows(const std::vector<std::uint8_t>& keys, std::size_t rows) {
  std::vector<std::uint8_t> out;
  out.reserve(rows * keys.size());
  for (std::size_t i = 0; i < rows; ++i) out.insert(out.end(), keys.begin(), keys.end());
  return out;
}

}  // namespace

template <typename T>
Tensor<T> reference_log_probs(const ModelConfig& config, const ParameterSet<T>& params,
                              std::span<const TokenId> source_ids, std::span<const TokenId> decoder_input) {
  config.validate();
  if (config.agg_method != AggMethod::none || config.use_pointer) {
    throw ContractError("the reference path covers the plain Transformer only");
  }
  if (source_ids.empty() || decoder_input.empty()) throw InputError("empty sequence");
  const std::size_t longest = std::max(source_ids.size(), decoder_input.size());
  if (longest > config.max_positions) throw LengthError("sequence longer than max_positions");
  const Tensor<T> pe = positional_encoding<T>(longest, config.d_model);
  const Reference<T> ref(config, params);

  std::vector<std::uint8_t> key_pad(source_ids.size());
  for (std::size_t i = 0; i < source_ids.size(); ++i) key_pad[i] = source_ids[i] == kPad ? 1 : 0;

  Mat<T> x = ref.embed(source_ids, pe);
  const auto self_mask = expand_rows(key_pad, source_ids.size());
  for (std::size_t l = 0; l < config.n_enc; ++l) {
    const std::string p = "enc." + std::to_string(l);
    Mat<T> h = x;
    Reference<T>::add_into(h, ref.attention(x, x, self_mask, p + ".self_attn"));
    h = ref.norm(h, p + ".norm1");
    Mat<T> o = h;
    Reference<T>::add_into(o, ref.ffn(h, p + ".ffn"));
    x = ref.norm(o, p + ".norm2");
  }
  const Mat<T> memory = x;

  const std::size_t t = decoder_input.size();
  std::vector<std::uint8_t> causal(t * t, 0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) causal[i * t + j] = 1;
  }
  const auto cross_mask = expand_rows(key_pad, t);
  Mat<T> y = ref.embed(decoder_input, pe);
  for (std::size_t l = 0; l < config.n_dec; ++l) {
    const std::string p = "dec." + std::to_string(l);
    Mat<T> a = y;
    Reference<T>::add_into(a, ref.attention(y, y, causal, p + ".self_attn"));
    a = ref.norm(a, p + ".norm1");
    Mat<T> b = a;
    Reference<T>::add_into(b, ref.attention(a, memory, cross_mask, p + ".cross_attn"));
    b = ref.norm(b, p + ".norm2");
    Mat<T> o = b;
    Reference<T>::add_into(o, ref.ffn(b, p + ".ffn"));
    y = ref.norm(o, p + ".norm3");
  }
  Mat<T> logits = ref.matmul(y, "output.weight");
  ref.add_bias(logits, "output.bias");
  Tensor<T> out(Shape{t, config.vocab_size});
  kernels::softmax_rows<T>({t, config.vocab_size, logits.data(), nullptr, out.data().data(), true});
  return out;
}

template Tensor<float> reference_log_probs<float>(const ModelConfig&, const ParameterSet<float>&,
                                                  std::span<const TokenId>, std::span<const TokenId>);
template Tensor<double> reference_log_probs<double>(const ModelConfig&, const ParameterSet<double>&,
                                                    std::span<const TokenId>, std::span<const TokenId>);

}  // namespace aggsum
