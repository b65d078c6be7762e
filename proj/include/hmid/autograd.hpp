#pragma once

// Reverse-mode differentiation over dense 2-D tensors.
//
// A Tape records every op in order; backward() walks it once in exact reverse
// order, accumulating gradients additively across fan-out. Only nodes that
// (transitively) depend on a parameter/variable leaf carry gradients.

#include <cstddef>
#include <functional>
#include <map>
#include <vector>

#include "hmid/tensor.hpp"

namespace hmid::ad {

using ParamId = std::size_t;

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t rows() const { return value().rows(); }
  std::int64_t cols() const { return value().cols(); }
};

template <typename T>
using Gradients = std::map<ParamId, Tensor<T>>;

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  /// Leaf whose gradient is reported under `id` by backward().
  Var<T> parameter(Tensor<T> value, ParamId id);
  /// Leaf with gradient tracking but no parameter id; read it back with grad().
  Var<T> variable(Tensor<T> value);

  /// Register an op result. `fn` runs during backward only if the node requires grad.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn);

  /// Runs the reverse sweep. Throws if `loss` is not a scalar on this tape or if
  /// backward already ran since the last reset().
  Gradients<T> backward(Var<T> loss);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  /// Gradient flowing into node `id` (valid inside backward fns and after backward()).
  const Tensor<T>& grad_of(std::size_t id) const { return nodes_.at(id).grad; }
  const Tensor<T>& grad(Var<T> v) const;
  /// Accumulation target for a parent's gradient, or nullptr if it needs none.
  T* grad_target(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool backward_done() const noexcept { return backward_done_; }
  void reset();

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_param = false;
    ParamId param_id = 0;
  };
  Var<T> push(Node node);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// ---- ops ---------------------------------------------------------------------
// Binary elementwise ops accept b with the same shape as a, a single row
// broadcast over a's rows ([N] or [1,N]), a column broadcast ([M,1]), or a
// scalar ([1]). The scalar form is also accepted on the left.

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// a · bᵀ
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T> Var<T> transpose(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);
template <typename T> Var<T> neg(Var<T> a);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> add_scalar(Var<T> a, T s);

template <typename T> Var<T> exp(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> sqrt(Var<T> a);
template <typename T> Var<T> cosh(Var<T> a);
template <typename T> Var<T> sinh(Var<T> a);
template <typename T> Var<T> acosh(Var<T> a);
template <typename T> Var<T> asin(Var<T> a);
template <typename T> Var<T> acos(Var<T> a);
template <typename T> Var<T> gelu(Var<T> a);
/// Hard clamp: gradient 1 strictly inside [lo, hi], 0 where the bound is active.
template <typename T> Var<T> clamp(Var<T> a, T lo, T hi);

template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
template <typename T> Var<T> max(Var<T> a);
/// Per-row sum, [M,N] -> [M,1].
template <typename T> Var<T> row_sum(Var<T> a);

template <typename T> Var<T> softmax_rows(Var<T> a);
template <typename T> Var<T> log_softmax_rows(Var<T> a);
/// out[i] = a[i, idx[i]], shape [M,1].
template <typename T> Var<T> pick(Var<T> a, const std::vector<std::int64_t>& idx);

template <typename T> Var<T> gather_rows(Var<T> a, const std::vector<std::int64_t>& idx);
template <typename T> Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <typename T> Var<T> embedding_lookup(Var<T> table, const std::vector<std::int64_t>& ids);

/// Normalizes each row over its columns, then applies gain/bias of shape [N].
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));

/// Multi-head scaled dot-product self-attention.
/// qkv: [batch*seq, 3*width] laid out as [q | k | v]; returns [batch*seq, width].
template <typename T>
Var<T> attention(Var<T> qkv, std::int64_t batch, std::int64_t seq, std::int64_t heads, bool causal);

// ---- finite differences ----------------------------------------------------

struct FdResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t worst_index = 0;
};

/// Compares the analytic gradient of scalar `f` at `x` with central differences.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, abs_floor).
FdResult finite_diff_check(const std::function<Var<double>(Tape<double>&, Var<double>)>& f,
                           const TensorD& x, double h = 1e-5, double abs_floor = 1e-6);

}  // namespace hmid::ad
