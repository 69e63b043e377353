#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aggsum/tensor.hpp"

namespace aggsum {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
  friend class Tape<T>;
};

// Ordered record of executed operations for reverse-mode differentiation.
//
// Operations append nodes after their inputs, so the node order is a
// topological order. A non-recording tape keeps values only and is used
// for inference. A tape is confined to one thread.
template <typename T>
class Tape {
 public:
  // Adds dL/d(inputs) given dL/d(out); receives the output node id.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Value that never receives a gradient.
  Var<T> constant(Tensor<T> value);
  // Borrowed constant; `value` must outlive the tape.
  Var<T> constant_ref(const Tensor<T>& value);
  // Owned leaf that accumulates a gradient readable through grad().
  Var<T> leaf(Tensor<T> value);
  // Borrowed parameter; backward adds into param.grad() (allocated on demand).
  Var<T> watch(Tensor<T>& param);
  // Borrowed parameter whose gradient is added into an external buffer.
  Var<T> watch(const Tensor<T>& value, std::span<T> grad_sink);

  // Appends an operation result. `fn` may be empty for non-differentiable ops.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn);

  // Populates gradients of every requires-grad value reachable from the
  // scalar `loss`. Leaf and watched gradients accumulate across calls.
  void backward(Var<T> loss);

  const Tensor<T>& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  // Gradient of a node after backward(); empty when none was produced.
  std::span<const T> grad(const Var<T>& v) const;

  // For backward rules: gradient flowing into node `out`.
  std::span<const T> out_grad(std::size_t out) const;
  // For backward rules: writable gradient buffer of an input, or an empty
  // span when that input does not require a gradient.
  std::span<T> in_grad(std::size_t id);

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* borrowed = nullptr;
    bool requires_grad = false;
    bool is_leaf = false;
    bool touched = false;
    std::vector<T> grad_storage;
    std::span<T> grad;
    BackwardFn backward;

    const Tensor<T>& value() const { return borrowed ? *borrowed : owned; }
  };

  void check_owner(const Var<T>& v) const;

  bool record_;
  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

// Boolean mask where nonzero marks an excluded position. Broadcasts against
// a value tensor by right-aligned dimensions of size 1 or equal size.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> masked;

  static Mask none(Shape shape) { return Mask{shape, std::vector<std::uint8_t>(shape_numel(shape), 0)}; }
  // Strictly causal [n, n] mask: position t may only see positions <= t.
  static Mask causal(std::size_t n);
  // [1, n] mask excluding the listed key positions.
  static Mask keys(std::span<const std::uint8_t> excluded);
};

// Expands a mask to `target` (throws ShapeError if not broadcastable).
std::vector<std::uint8_t> broadcast_mask(const Mask& mask, const Shape& target);

// ---- differentiable operations -------------------------------------------

// a[..., m, k] x b[..., k, n]; leading dimensions must match or one side
// has none (broadcast).
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// Swaps the last two dimensions.
template <typename T> Var<T> transpose(Var<T> x);
// Elementwise a + b where b broadcasts into a's shape.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
// Elementwise a * b where b broadcasts into a's shape.
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
// alpha * x + beta
template <typename T> Var<T> affine(Var<T> x, T alpha, T beta = T(0));
template <typename T> Var<T> scale(Var<T> x, T alpha) { return affine(x, alpha, T(0)); }
template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);
// log(max(x, floor)); the gradient is zero where x < floor.
template <typename T> Var<T> log(Var<T> x, T floor = T(0));
template <typename T> Var<T> softmax(Var<T> x, int axis = -1, const Mask* mask = nullptr);
template <typename T> Var<T> log_softmax(Var<T> x);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps);
template <typename T> Var<T> concat_last_dim(const std::vector<Var<T>>& parts);
template <typename T> Var<T> slice_last_dim(Var<T> x, std::size_t begin, std::size_t len);
template <typename T> Var<T> slice_first_dim(Var<T> x, std::size_t begin, std::size_t len);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);
// Rows of table[V, d] selected by ids -> [ids.size(), d].
template <typename T> Var<T> embedding_lookup(Var<T> table, std::span<const std::int32_t> ids);
// Inverted dropout; identity when !training or p == 0.
template <typename T> Var<T> dropout(Var<T> x, T p, bool training, std::mt19937_64& rng);
template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);
// Appends `extra` zero columns to the last dimension.
template <typename T> Var<T> pad_last_dim(Var<T> x, std::size_t extra);
// x[r, m] -> out[r, width] with out[r, ids[j]] += x[r, j].
template <typename T> Var<T> scatter_add_cols(Var<T> x, std::span<const std::int32_t> ids, std::size_t width);
// x[r, c] -> out[r] = x[r, idx[r]].
template <typename T> Var<T> pick(Var<T> x, std::span<const std::int32_t> idx);

// Central finite-difference check of the tape gradient of f at x. Returns
// the worst relative error |analytic - numeric| / max(|analytic|, |numeric|, floor).
//
// The floor keeps near-zero gradients from being judged against the
// difference quotient's own rounding noise (about eps * |f| / h, i.e.
// ~1e-10 for an O(1) loss at h = 1e-5 in double): below the floor the
// comparison is effectively absolute, at tolerance * floor.
template <typename T>
T finite_diff_check(const std::function<Var<T>(Tape<T>&, Var<T>)>& f, const Tensor<T>& x, T h = T(1e-5),
                    T floor = T(1e-8));

template <typename T>
struct GradCheckReport {
  T max_rel_error = T(0);
  std::string worst_name;
  std::size_t worst_index = 0;
  T worst_analytic = T(0);
  T worst_numeric = T(0);
  T max_abs_error = T(0);
  std::size_t checked = 0;
};

// Same check over several named tensors that f watches on its tape. Each
// tensor is perturbed in place and restored.
template <typename T>
GradCheckReport<T> finite_diff_check(const std::function<Var<T>(Tape<T>&)>& f,
                                     const std::vector<std::pair<std::string, Tensor<T>*>>& params, T h = T(1e-5),
                                     T floor = T(1e-8));

}  // namespace aggsum
