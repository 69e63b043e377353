#include "aggsum/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "aggsum/kernels.hpp"

namespace aggsum {

// ---- Tape ------------------------------------------------------------------

template <typename T>
void Tape<T>::check_owner(const Var<T>& v) const {
  if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size()) {
    throw ContractError("variable does not belong to this tape");
  }
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant_ref(const Tensor<T>& value) {
  Node n;
  n.borrowed = &value;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  n.is_leaf = true;
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::watch(Tensor<T>& param) {
  if (!record_) return constant_ref(param);
  if (!param.has_grad()) param.set_requires_grad(true);
  return watch(param, param.grad());
}

template <typename T>
Var<T> Tape<T>::watch(const Tensor<T>& value, std::span<T> grad_sink) {
  if (!record_) return constant_ref(value);
  if (grad_sink.size() != value.size()) {
    throw ShapeError("gradient buffer of size " + std::to_string(grad_sink.size()) + " for tensor " +
                     shape_str(value.shape()));
  }
  Node n;
  n.borrowed = &value;
  n.is_leaf = true;
  n.requires_grad = true;
  n.touched = true;
  n.grad = grad_sink;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
  bool needs = false;
#ifdef AGGSUM_CHECK_FINITE
  bool inputs_finite = true;
#endif
  for (const auto& in : inputs) {
    check_owner(in);
    needs = needs || nodes_[in.id()].requires_grad;
#ifdef AGGSUM_CHECK_FINITE
    inputs_finite = inputs_finite && nodes_[in.id()].value().all_finite();
#endif
  }
#ifdef AGGSUM_CHECK_FINITE
  if (inputs_finite && !value.all_finite()) {
    throw NumericError("operation produced non-finite values from finite inputs, shape " + shape_str(value.shape()));
  }
#endif
  Node n;
  n.owned = std::move(value);
  n.requires_grad = record_ && needs && static_cast<bool>(fn);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
  return nodes_.at(id).value();
}

template <typename T>
std::span<const T> Tape<T>::grad(const Var<T>& v) const {
  check_owner(v);
  const Node& n = nodes_[v.id()];
  if (!n.touched) return {};
  return n.grad;
}

template <typename T>
std::span<const T> Tape<T>::out_grad(std::size_t out) const {
  return nodes_.at(out).grad;
}

template <typename T>
std::span<T> Tape<T>::in_grad(std::size_t id) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return {};
  if (n.grad.data() == nullptr) {
    n.grad_storage.assign(n.value().size(), T(0));
    n.grad = n.grad_storage;
  }
  n.touched = true;
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  check_owner(loss);
  if (!record_) throw ContractError("backward called on a non-recording tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  for (Node& n : nodes_) {
    if (n.is_leaf) continue;
    std::fill(n.grad_storage.begin(), n.grad_storage.end(), T(0));
    n.touched = false;
  }
  auto seed = in_grad(loss.id());
  if (seed.empty()) return;
  seed[0] += T(1);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.touched || !n.backward) continue;
    n.backward(*this, id);
  }
}

template class Tape<float>;
template class Tape<double>;
template class Tape<long double>;

// ---- masks and broadcasting ------------------------------------------------

Mask Mask::causal(std::size_t n) {
  Mask m{{n, n}, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m.masked[i * n + j] = 1;
  }
  return m;
}

Mask Mask::keys(std::span<const std::uint8_t> excluded) {
  return Mask{{1, excluded.size()}, std::vector<std::uint8_t>(excluded.begin(), excluded.end())};
}

namespace {

// For every flat index of `to`, the flat index of the broadcast source.
std::vector<std::size_t> broadcast_index(const Shape& from, const Shape& to) {
  if (from.size() > to.size()) {
    throw ShapeError("cannot broadcast " + shape_str(from) + " to " + shape_str(to));
  }
  const std::size_t off = to.size() - from.size();
  std::vector<std::size_t> src_stride(to.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = from.size(); i-- > 0;) {
    const std::size_t td = to[i + off];
    if (from[i] == td) {
      src_stride[i + off] = stride;
    } else if (from[i] != 1) {
      throw ShapeError("cannot broadcast " + shape_str(from) + " to " + shape_str(to));
    }
    stride *= from[i];
  }
  const std::size_t total = shape_numel(to);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(to.size(), 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t s = 0;
    for (std::size_t d = 0; d < to.size(); ++d) s += idx[d] * src_stride[d];
    map[flat] = s;
    for (std::size_t d = to.size(); d-- > 0;) {
      if (++idx[d] < to[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

template <typename T>
void add_into(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
  return static_cast<std::size_t>(a);
}

}  // namespace

std::vector<std::uint8_t> broadcast_mask(const Mask& mask, const Shape& target) {
  if (mask.masked.size() != shape_numel(mask.shape)) throw ShapeError("mask data does not match its shape");
  if (mask.shape == target) return mask.masked;
  const auto map = broadcast_index(mask.shape, target);
  std::vector<std::uint8_t> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = mask.masked[map[i]];
  return out;
}

// ---- operations ------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = a.tape();
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  if (A.rank() < 2 || B.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
  }
  const std::size_t m = A.dim(A.rank() - 2), k = A.dim(A.rank() - 1);
  const std::size_t kb = B.dim(B.rank() - 2), n = B.dim(B.rank() - 1);
  const Shape abatch(A.shape().begin(), A.shape().end() - 2);
  const Shape bbatch(B.shape().begin(), B.shape().end() - 2);
  if (k != kb || (!abatch.empty() && !bbatch.empty() && abatch != bbatch)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  }
  Shape out_shape = abatch.empty() ? bbatch : abatch;
  const std::size_t nb = shape_numel(out_shape);
  out_shape.push_back(m);
  out_shape.push_back(n);
  const bool a_batched = !abatch.empty();
  const bool b_batched = !bbatch.empty();
  Tensor<T> out(out_shape);
  for (std::size_t bi = 0; bi < nb; ++bi) {
    kernels::gemm<T>({m, k, n, A.data().data() + (a_batched ? bi * m * k : 0), false,
                      B.data().data() + (b_batched ? bi * k * n : 0), false, out.data().data() + bi * m * n, false});
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t o) {
    const T* g = t.out_grad(o).data();
    const T* Ad = t.value(ia).data().data();
    const T* Bd = t.value(ib).data().data();
    auto ga = t.in_grad(ia);
    auto gb = t.in_grad(ib);
    for (std::size_t bi = 0; bi < nb; ++bi) {
      const T* gbi = g + bi * m * n;
      const T* Abi = Ad + (a_batched ? bi * m * k : 0);
      const T* Bbi = Bd + (b_batched ? bi * k * n : 0);
      if (!ga.empty()) {
        kernels::gemm<T>({m, n, k, gbi, false, Bbi, true, ga.data() + (a_batched ? bi * m * k : 0), true});
      }
      if (!gb.empty()) {
        kernels::gemm<T>({k, m, n, Abi, true, gbi, false, gb.data() + (b_batched ? bi * k * n : 0), true});
      }
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> x) {
  const Tensor<T>& X = x.value();
  if (X.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(X.shape()));
  const std::size_t r = X.dim(X.rank() - 2), c = X.dim(X.rank() - 1);
  const std::size_t nb = X.size() / (r * c);
  Shape s = X.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  Tensor<T> out(s);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = X[b * r * c + i * c + j];
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    auto gx = t.in_grad(ix);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[b * r * c + i * c + j] += g[b * r * c + j * r + i];
      }
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  Tensor<T> out = Tensor<T>(A.shape(), A.buffer());
  const std::size_t ia = a.id(), ib = b.id();
  if (A.shape() == B.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t o) {
      auto g = t.out_grad(o);
      if (auto ga = t.in_grad(ia); !ga.empty()) add_into<T>(ga, g);
      if (auto gb = t.in_grad(ib); !gb.empty()) add_into<T>(gb, g);
    });
  }
  auto map = broadcast_index(B.shape(), A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[map[i]];
  return a.tape().record(std::move(out), {a, b}, [=, map = std::move(map)](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    if (auto ga = t.in_grad(ia); !ga.empty()) add_into<T>(ga, g);
    if (auto gb = t.in_grad(ib); !gb.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[map[i]] += g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  std::vector<std::size_t> map;
  const bool same = A.shape() == B.shape();
  if (!same) map = broadcast_index(B.shape(), A.shape());
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[same ? i : map[i]];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=, map = std::move(map)](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    const auto& Av = t.value(ia);
    const auto& Bv = t.value(ib);
    if (auto ga = t.in_grad(ia); !ga.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * Bv[same ? i : map[i]];
    }
    if (auto gb = t.in_grad(ib); !gb.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[same ? i : map[i]] += g[i] * Av[i];
    }
  });
}

template <typename T>
Var<T> affine(Var<T> x, T alpha, T beta) {
  const Tensor<T>& X = x.value();
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * X[i] + beta;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    auto gx = t.in_grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += alpha * g[i];
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  const Tensor<T>& X = x.value();
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] > T(0) ? X[i] : T(0);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    const auto& Xv = t.value(ix);
    auto gx = t.in_grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (Xv[i] > T(0)) gx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  const Tensor<T>& X = x.value();
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = X[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    const auto& Y = t.value(o);
    auto gx = t.in_grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * Y[i] * (T(1) - Y[i]);
  });
}

template <typename T>
Var<T> log(Var<T> x, T floor) {
  const Tensor<T>& X = x.value();
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(X[i], floor));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    const auto& Xv = t.value(ix);
    auto gx = t.in_grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (Xv[i] >= floor && Xv[i] > T(0)) gx[i] += g[i] / Xv[i];
    }
  });
}

template <typename T>
Var<T> softmax(Var<T> x, int axis, const Mask* mask) {
  const Tensor<T>& X = x.value();
  const std::size_t ax = norm_axis(axis, X.rank());
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= X.dim(d);
  for (std::size_t d = ax + 1; d < X.rank(); ++d) inner *= X.dim(d);
  const std::size_t len = X.dim(ax);
  std::vector<std::uint8_t> full_mask;
  if (mask) full_mask = broadcast_mask(*mask, X.shape());

  Tensor<T> out(X.shape());
  if (inner == 1) {
    kernels::softmax_rows<T>({outer, len, X.data().data(), mask ? full_mask.data() : nullptr, out.data().data()});
  } else {
    // Move the axis last, normalize, and move it back.
    const std::size_t rows = outer * inner;
    std::vector<T> tmp(X.size()), res(X.size());
    std::vector<std::uint8_t> tmask(mask ? X.size() : 0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t src = (o * len + j) * inner + in;
          const std::size_t dst = (o * inner + in) * len + j;
          tmp[dst] = X[src];
          if (mask) tmask[dst] = full_mask[src];
        }
      }
    }
    kernels::softmax_rows<T>({rows, len, tmp.data(), mask ? tmask.data() : nullptr, res.data()});
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        for (std::size_t j = 0; j < len; ++j) out[(o * len + j) * inner + in] = res[(o * inner + in) * len + j];
      }
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    const auto& Y = t.value(o);
    auto gx = t.in_grad(ix);
    for (std::size_t ob = 0; ob < outer; ++ob) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = ob * len * inner + in;
        T dot = T(0);
        for (std::size_t j = 0; j < len; ++j) dot += Y[base + j * inner] * g[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t p = base + j * inner;
          gx[p] += Y[p] * (g[p] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> x) {
  const Tensor<T>& X = x.value();
  const std::size_t cols = X.dim(X.rank() - 1);
  const std::size_t rows = X.size() / cols;
  Tensor<T> out(X.shape());
  kernels::softmax_rows<T>({rows, cols, X.data().data(), nullptr, out.data().data(), true});
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    const auto& Y = t.value(o);
    auto gx = t.in_grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T gs = T(0);
      for (std::size_t j = 0; j < cols; ++j) gs += g[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t p = r * cols + j;
        gx[p] += g[p] - std::exp(Y[p]) * gs;
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  const Tensor<T>& X = x.value();
  const std::size_t cols = X.dim(X.rank() - 1);
  if (gain.value().size() != cols || bias.value().size() != cols) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not match last dimension of " + shape_str(X.shape()));
  }
  const std::size_t rows = X.size() / cols;
  Tensor<T> out(X.shape());
  std::vector<T> mean(rows), rstd(rows);
  kernels::layer_norm_rows<T>({rows, cols, X.data().data(), gain.value().data().data(), bias.value().data().data(),
                               eps, out.data().data(), mean.data(), rstd.data()});
  const std::size_t ix = x.id(), ig = gain.id(), ibias = bias.id();
  return x.tape().record(std::move(out), {x, gain, bias}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    const auto& Xv = t.value(ix);
    const auto& G = t.value(ig);
    auto gx = t.in_grad(ix);
    auto gg = t.in_grad(ig);
    auto gbias = t.in_grad(ibias);
    std::vector<T> xhat(cols), dxhat(cols);
    for (std::size_t r = 0; r < rows; ++r) {
      T m1 = T(0), m2 = T(0);
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t p = r * cols + j;
        xhat[j] = (Xv[p] - mean[r]) * rstd[r];
        dxhat[j] = g[p] * G[j];
        if (!gg.empty()) gg[j] += g[p] * xhat[j];
        if (!gbias.empty()) gbias[j] += g[p];
        m1 += dxhat[j];
        m2 += dxhat[j] * xhat[j];
      }
      if (gx.empty()) continue;
      m1 /= static_cast<T>(cols);
      m2 /= static_cast<T>(cols);
      for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
    }
  });
}

template <typename T>
Var<T> concat_last_dim(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_last_dim of zero tensors");
  const Shape& s0 = parts[0].shape();
  const Shape lead(s0.begin(), s0.end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
      throw ShapeError("concat_last_dim: " + shape_str(s) + " incompatible with " + shape_str(s0));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  const std::size_t rows = shape_numel(lead);
  Shape os = lead;
  os.push_back(total);
  Tensor<T> out(os);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data().data() + r * widths[k], widths[k], out.data().data() + r * total + off);
    }
    off += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(std::move(out), parts, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto gp = t.in_grad(ids[k]);
      if (!gp.empty()) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[k]; ++j) gp[r * widths[k] + j] += g[r * total + offset + j];
        }
      }
      offset += widths[k];
    }
  });
}

template <typename T>
Var<T> slice_last_dim(Var<T> x, std::size_t begin, std::size_t len) {
  const Tensor<T>& X = x.value();
  const std::size_t cols = X.shape().back();
  if (len == 0 || begin + len > cols) {
    throw ShapeError("slice_last_dim [" + std::to_string(begin) + ", " + std::to_string(begin + len) +
                     ") out of range for " + shape_str(X.shape()));
  }
  const std::size_t rows = X.size() / cols;
  Shape s = X.shape();
  s.back() = len;
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(X.data().data() + r * cols + begin, len, out.data().data() + r * len);
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    auto gx = t.in_grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < len; ++j) gx[r * cols + begin + j] += g[r * len + j];
    }
  });
}

template <typename T>
Var<T> slice_first_dim(Var<T> x, std::size_t begin, std::size_t len) {
  const Tensor<T>& X = x.value();
  if (X.rank() == 0 || len == 0 || begin + len > X.dim(0)) {
    throw ShapeError("slice_first_dim [" + std::to_string(begin) + ", " + std::to_string(begin + len) +
                     ") out of range for " + shape_str(X.shape()));
  }
  const std::size_t row = X.size() / X.dim(0);
  Shape s = X.shape();
  s[0] = len;
  Tensor<T> out(s, std::vector<T>(X.buffer().begin() + begin * row, X.buffer().begin() + (begin + len) * row));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    auto gx = t.in_grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * row + i] += g[i];
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    add_into<T>(t.in_grad(ix), t.out_grad(o));
  });
}

template <typename T>
Var<T> embedding_lookup(Var<T> table, std::span<const std::int32_t> ids) {
  const Tensor<T>& E = table.value();
  if (E.rank() != 2) throw ShapeError("embedding table must be rank 2, got " + shape_str(E.shape()));
  if (ids.empty()) throw ShapeError("embedding_lookup with no ids");
  const std::size_t rows = E.dim(0), d = E.dim(1);
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("embedding id " + std::to_string(id) + " out of range [0, " + std::to_string(rows) + ")", id);
    }
  }
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(E.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data().data() + i * d);
  }
  const std::size_t it = table.id();
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {table}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    auto gt = t.in_grad(it);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      const std::size_t r = static_cast<std::size_t>(idv[i]);
      for (std::size_t j = 0; j < d; ++j) gt[r * d + j] += g[i * d + j];
    }
  });
}

template <typename T>
Var<T> dropout(Var<T> x, T p, bool training, std::mt19937_64& rng) {
  if (!(p >= T(0) && p < T(1))) throw ContractError("dropout probability must be in [0, 1), got " + std::to_string(p));
  if (!training || p == T(0)) return x;
  const Tensor<T>& X = x.value();
  const T keep_scale = T(1) / (T(1) - p);
  std::vector<T> factor(X.size());
  for (auto& f : factor) {
    // 53 random bits -> uniform [0, 1); avoids implementation-defined distributions.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    f = u >= static_cast<double>(p) ? keep_scale : T(0);
  }
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] * factor[i];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=, factor = std::move(factor)](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    auto gx = t.in_grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor[i];
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T s = T(0);
  for (T v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor<T>::scalar(s), {x}, [=](Tape<T>& t, std::size_t o) {
    const T g = t.out_grad(o)[0];
    for (T& v : t.in_grad(ix)) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const T n = static_cast<T>(x.value().size());
  return scale(sum(x), T(1) / n);
}

template <typename T>
Var<T> pad_last_dim(Var<T> x, std::size_t extra) {
  if (extra == 0) return x;
  const Tensor<T>& X = x.value();
  const std::size_t cols = X.shape().back();
  const std::size_t rows = X.size() / cols;
  Shape s = X.shape();
  s.back() += extra;
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(X.data().data() + r * cols, cols, out.data().data() + r * (cols + extra));
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    auto gx = t.in_grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += g[r * (cols + extra) + j];
    }
  });
}

template <typename T>
Var<T> scatter_add_cols(Var<T> x, std::span<const std::int32_t> ids, std::size_t width) {
  const Tensor<T>& X = x.value();
  if (X.rank() != 2 || X.dim(1) != ids.size()) {
    throw ShapeError("scatter_add_cols: " + shape_str(X.shape()) + " with " + std::to_string(ids.size()) + " ids");
  }
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= width) {
      throw IndexError("scatter id " + std::to_string(id) + " out of range [0, " + std::to_string(width) + ")", id);
    }
  }
  const std::size_t rows = X.dim(0), m = X.dim(1);
  Tensor<T> out({rows, width});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < m; ++j) out[r * width + static_cast<std::size_t>(ids[j])] += X[r * m + j];
  }
  const std::size_t ix = x.id();
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    auto gx = t.in_grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += g[r * width + static_cast<std::size_t>(idv[j])];
    }
  });
}

template <typename T>
Var<T> pick(Var<T> x, std::span<const std::int32_t> idx) {
  const Tensor<T>& X = x.value();
  if (X.rank() != 2 || X.dim(0) != idx.size()) {
    throw ShapeError("pick: " + shape_str(X.shape()) + " with " + std::to_string(idx.size()) + " indices");
  }
  const std::size_t rows = X.dim(0), cols = X.dim(1);
  for (std::int32_t id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= cols) {
      throw IndexError("pick index " + std::to_string(id) + " out of range [0, " + std::to_string(cols) + ")", id);
    }
  }
  Tensor<T> out({rows});
  for (std::size_t r = 0; r < rows; ++r) out[r] = X[r * cols + static_cast<std::size_t>(idx[r])];
  const std::size_t ix = x.id();
  std::vector<std::int32_t> idv(idx.begin(), idx.end());
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t o) {
    auto g = t.out_grad(o);
    auto gx = t.in_grad(ix);
    for (std::size_t r = 0; r < rows; ++r) gx[r * cols + static_cast<std::size_t>(idv[r])] += g[r];
  });
}

// ---- gradient verification -------------------------------------------------

namespace {

template <typename T>
T rel_error(T analytic, T numeric, T floor) {
  const T denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace

template <typename T>
T finite_diff_check(const std::function<Var<T>(Tape<T>&, Var<T>)>& f, const Tensor<T>& x, T h, T floor) {
  std::vector<T> analytic(x.size(), T(0));
  {
    Tape<T> tape;
    Var<T> xv = tape.leaf(x);
    tape.backward(f(tape, xv));
    auto g = tape.grad(xv);
    if (!g.empty()) std::copy(g.begin(), g.end(), analytic.begin());
  }
  Tensor<T> probe(x.shape(), x.buffer());
  auto eval = [&]() {
    Tape<T> tape(false);
    return f(tape, tape.constant_ref(probe)).value().item();
  };
  T worst = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const T fp = eval();
    probe[i] = x[i] - h;
    const T fm = eval();
    probe[i] = x[i];
    worst = std::max(worst, rel_error(analytic[i], (fp - fm) / (T(2) * h), floor));
  }
  return worst;
}

template <typename T>
GradCheckReport<T> finite_diff_check(const std::function<Var<T>(Tape<T>&)>& f,
                                     const std::vector<std::pair<std::string, Tensor<T>*>>& params, T h,
                                     T floor) {
  for (auto& [name, p] : params) {
    if (!p->has_grad()) p->set_requires_grad(true);
    p->zero_grad();
  }
  {
    Tape<T> tape;
    tape.backward(f(tape));
  }
  std::vector<std::vector<T>> analytic;
  for (auto& [name, p] : params) analytic.emplace_back(p->grad().begin(), p->grad().end());

  auto eval = [&]() {
    Tape<T> tape(false);
    return f(tape).value().item();
  };
  GradCheckReport<T> report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k].second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T orig = p[i];
      p[i] = orig + h;
      const T fp = eval();
      p[i] = orig - h;
      const T fm = eval();
      p[i] = orig;
      const T numeric = (fp - fm) / (T(2) * h);
      const T err = rel_error(analytic[k][i], numeric, floor);
      report.max_abs_error = std::max(report.max_abs_error, std::abs(analytic[k][i] - numeric));
      ++report.checked;
      if (err > report.max_rel_error || report.checked == 1) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.worst_name = params[k].first;
        report.worst_index = i;
        report.worst_analytic = analytic[k][i];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

#define AGGSUM_INSTANTIATE(T)                                                                        \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                         \
  template Var<T> transpose<T>(Var<T>);                                                              \
  template Var<T> add<T>(Var<T>, Var<T>);                                                            \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                            \
  template Var<T> affine<T>(Var<T>, T, T);                                                           \
  template Var<T> relu<T>(Var<T>);                                                                   \
  template Var<T> sigmoid<T>(Var<T>);                                                                \
  template Var<T> log<T>(Var<T>, T);                                                                 \
  template Var<T> softmax<T>(Var<T>, int, const Mask*);                                              \
  template Var<T> log_softmax<T>(Var<T>);                                                            \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                          \
  template Var<T> concat_last_dim<T>(const std::vector<Var<T>>&);                                    \
  template Var<T> slice_last_dim<T>(Var<T>, std::size_t, std::size_t);                              \
  template Var<T> slice_first_dim<T>(Var<T>, std::size_t, std::size_t);                             \
  template Var<T> reshape<T>(Var<T>, Shape);                                                         \
  template Var<T> embedding_lookup<T>(Var<T>, std::span<const std::int32_t>);                        \
  template Var<T> dropout<T>(Var<T>, T, bool, std::mt19937_64&);                                     \
  template Var<T> sum<T>(Var<T>);                                                                    \
  template Var<T> mean<T>(Var<T>);                                                                   \
  template Var<T> pad_last_dim<T>(Var<T>, std::size_t);                                              \
  template Var<T> scatter_add_cols<T>(Var<T>, std::span<const std::int32_t>, std::size_t);           \
  template Var<T> pick<T>(Var<T>, std::span<const std::int32_t>);                                    \
  template T finite_diff_check<T>(const std::function<Var<T>(Tape<T>&, Var<T>)>&, const Tensor<T>&, T, T);  \
  template GradCheckReport<T> finite_diff_check<T>(const std::function<Var<T>(Tape<T>&)>&,           \
                                                   const std::vector<std::pair<std::string, Tensor<T>*>>&, T, T);

AGGSUM_INSTANTIATE(float)
AGGSUM_INSTANTIATE(double)
AGGSUM_INSTANTIATE(long double)

#undef AGGSUM_INSTANTIATE

}  // namespace aggsum
