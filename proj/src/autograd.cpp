#include "hmid/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace hmid::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
CMapMat<T> as_mat(const Tensor<T>& t) {
  return CMapMat<T>(t.data(), t.rows(), t.cols());
}

template <typename T>
MapMat<T> as_mat(T* p, std::int64_t r, std::int64_t c) {
  return MapMat<T>(p, r, c);
}

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  HMID_REQUIRE(a.tape != nullptr && a.tape == b.tape, "operands live on different tapes");
  return *a.tape;
}

enum class Bcast { Full, Row, Col, Scalar };

inline std::int64_t bidx(Bcast k, std::int64_t r, std::int64_t c, std::int64_t cols) {
  switch (k) {
    case Bcast::Full: return r * cols + c;
    case Bcast::Row: return c;
    case Bcast::Col: return r;
    case Bcast::Scalar: return 0;
  }
  return 0;
}

// Classifies `op` against the output extents (rows x cols).
template <typename T>
Bcast classify(const Tensor<T>& op, const Tensor<T>& out, const char* name) {
  if (op.shape() == out.shape()) return Bcast::Full;
  if (op.size() == 1) return Bcast::Scalar;
  const auto R = out.rows(), C = out.cols();
  if (op.rows() == 1 && op.cols() == C && static_cast<std::int64_t>(op.size()) == C) return Bcast::Row;
  if (op.rank() == 2 && op.dim(0) == R && op.dim(1) == 1) return Bcast::Col;
  throw ContractViolation(std::string(name) + ": cannot broadcast " + shape_str(op.shape()) + " against " +
                          shape_str(out.shape()));
}

// Calls body(out_index, a_index, b_index) over an R x C output, with the common
// broadcast combinations specialized so the inner loop stays simple.
template <typename Body>
void for_each_index(Bcast ka, Bcast kb, std::int64_t R, std::int64_t C, Body body) {
  const std::int64_t n = R * C;
  if (ka == Bcast::Full && kb == Bcast::Full) {
    for (std::int64_t k = 0; k < n; ++k) body(k, k, k);
  } else if (ka == Bcast::Full && kb == Bcast::Row) {
    for (std::int64_t r = 0; r < R; ++r)
      for (std::int64_t c = 0; c < C; ++c) body(r * C + c, r * C + c, c);
  } else if (ka == Bcast::Full && kb == Bcast::Scalar) {
    for (std::int64_t k = 0; k < n; ++k) body(k, k, 0);
  } else {
    for (std::int64_t r = 0; r < R; ++r)
      for (std::int64_t c = 0; c < C; ++c) body(r * C + c, bidx(ka, r, c, C), bidx(kb, r, c, C));
  }
}

template <typename T, typename F, typename DA, typename DB>
Var<T> binary(Var<T> a, Var<T> b, const char* name, F f, DA da, DB db) {
  Tape<T>& tape = same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  // The larger operand defines the output shape; only a scalar may sit on the left.
  const bool a_is_out = !(av.size() == 1 && bv.size() > 1);
  Tensor<T> out(a_is_out ? av.shape() : bv.shape());
  const Bcast ka = classify(av, out, name);
  const Bcast kb = classify(bv, out, name);
  const auto R = out.rows(), C = out.cols();
  for_each_index(ka, kb, R, C, [&](std::int64_t k, std::int64_t xa, std::int64_t yb) { out[k] = f(av[xa], bv[yb]); });
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& x = t.value(ia);
    const Tensor<T>& y = t.value(ib);
    const Tensor<T>& o = t.value(self);
    T* ga = t.grad_target(ia);
    T* gb = t.grad_target(ib);
    if (ga)
      for_each_index(ka, kb, R, C, [&](std::int64_t k, std::int64_t xa, std::int64_t yb) {
        ga[xa] += g[k] * da(x[xa], y[yb], o[k]);
      });
    if (gb)
      for_each_index(ka, kb, R, C, [&](std::int64_t k, std::int64_t xa, std::int64_t yb) {
        gb[yb] += g[k] * db(x[xa], y[yb], o[k]);
      });
  });
}

template <typename T, typename F, typename D>
Var<T> unary(Var<T> a, F f, D d) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& x = t.value(ia);
    const Tensor<T>& o = t.value(self);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * d(x[i], o[i]);
  });
}

}  // namespace

// ---- Tape --------------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::push(Node node) {
  HMID_REQUIRE(!backward_done_, "cannot record on a tape after backward(); call reset()");
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::parameter(Tensor<T> value, ParamId id) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.is_param = true;
  n.param_id = id;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
  return record(std::move(value), std::vector<Var<T>>(parents), std::move(fn));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const auto& p : parents) {
    HMID_REQUIRE(p.tape == this, "operand recorded on a different tape");
    n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

template <typename T>
T* Tape<T>::grad_target(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
  return n.grad.data();
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var<T> v) const {
  HMID_REQUIRE(backward_done_, "grad() before backward()");
  return nodes_.at(v.id).grad;
}

template <typename T>
Gradients<T> Tape<T>::backward(Var<T> loss) {
  HMID_REQUIRE(loss.tape == this, "loss was not produced on this tape");
  HMID_REQUIRE(!backward_done_, "backward() already ran on this tape; reset() before reuse");
  HMID_REQUIRE(nodes_.at(loss.id).value.size() == 1,
               "backward() needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
  backward_done_ = true;
  Gradients<T> out;
  if (!nodes_[loss.id].requires_grad) return out;
  grad_target(loss.id)[0] = T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, i);
  }
  for (auto& n : nodes_) {
    if (!n.is_param) continue;
    Tensor<T> g = n.grad.size() == n.value.size() ? n.grad : Tensor<T>(n.value.shape());
    auto [it, fresh] = out.try_emplace(n.param_id, std::move(g));
    if (!fresh) {
      // Same parameter fed in twice: gradients add.
      const Tensor<T>& extra = n.grad;
      if (extra.size() == it->second.size())
        for (std::size_t k = 0; k < extra.size(); ++k) it->second[k] += extra[k];
    }
  }
  return out;
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  backward_done_ = false;
}

// ---- linear algebra ----------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  HMID_REQUIRE(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
               "matmul shape mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const auto M = av.dim(0), K = av.dim(1), N = bv.dim(1);
  Tensor<T> out({M, N});
  as_mat(out.data(), M, N).noalias() = as_mat(av) * as_mat(bv);
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    auto g = as_mat(t.grad_of(self));
    if (T* ga = t.grad_target(ia)) as_mat(ga, M, K).noalias() += g * as_mat(t.value(ib)).transpose();
    if (T* gb = t.grad_target(ib)) as_mat(gb, K, N).noalias() += as_mat(t.value(ia)).transpose() * g;
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  HMID_REQUIRE(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1),
               "matmul_nt shape mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()) + "^T");
  const auto M = av.dim(0), K = av.dim(1), N = bv.dim(0);
  Tensor<T> out({M, N});
  as_mat(out.data(), M, N).noalias() = as_mat(av) * as_mat(bv).transpose();
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    auto g = as_mat(t.grad_of(self));
    if (T* ga = t.grad_target(ia)) as_mat(ga, M, K).noalias() += g * as_mat(t.value(ib));
    if (T* gb = t.grad_target(ib)) as_mat(gb, N, K).noalias() += g.transpose() * as_mat(t.value(ia));
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const Tensor<T>& av = a.value();
  HMID_REQUIRE(av.rank() == 2, "transpose needs a 2-D tensor, got " + shape_str(av.shape()));
  const auto M = av.dim(0), N = av.dim(1);
  Tensor<T> out({N, M});
  as_mat(out.data(), N, M) = as_mat(av).transpose();
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    if (T* ga = t.grad_target(ia)) as_mat(ga, M, N) += as_mat(t.grad_of(self)).transpose();
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    if (T* ga = t.grad_target(ia)) {
      const Tensor<T>& g = t.grad_of(self);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

// ---- elementwise ---------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  return binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T o) { return -o / y; });
}

template <typename T>
Var<T> neg(Var<T> a) {
  return unary(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T o) { return o; });
}

template <typename T>
Var<T> log(Var<T> a) {
  return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> sqrt(Var<T> a) {
  return unary(a, [](T x) { return std::sqrt(x); }, [](T, T o) { return T(0.5) / o; });
}

template <typename T>
Var<T> cosh(Var<T> a) {
  return unary(a, [](T x) { return std::cosh(x); }, [](T x, T) { return std::sinh(x); });
}

template <typename T>
Var<T> sinh(Var<T> a) {
  return unary(a, [](T x) { return std::sinh(x); }, [](T x, T) { return std::cosh(x); });
}

template <typename T>
Var<T> acosh(Var<T> a) {
  return unary(
      a, [](T x) { return std::acosh(x); }, [](T x, T) { return T(1) / std::sqrt(x * x - T(1)); });
}

template <typename T>
Var<T> asin(Var<T> a) {
  return unary(
      a, [](T x) { return std::asin(x); }, [](T x, T) { return T(1) / std::sqrt(T(1) - x * x); });
}

template <typename T>
Var<T> acos(Var<T> a) {
  return unary(
      a, [](T x) { return std::acos(x); }, [](T x, T) { return T(-1) / std::sqrt(T(1) - x * x); });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  // Keep Phi(x) for the backward pass instead of evaluating erf twice.
  auto phi = std::make_shared<std::vector<T>>(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    (*phi)[i] = T(0.5) * (T(1) + std::erf(av[i] * inv_sqrt2));
    out[i] = av[i] * (*phi)[i];
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& x = t.value(ia);
    for (std::size_t i = 0; i < x.size(); ++i)
      ga[i] += g[i] * ((*phi)[i] + x[i] * inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]));
  });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  HMID_REQUIRE(lo <= hi, "clamp with lo > hi");
  return unary(
      a, [=](T x) { return std::clamp(x, lo, hi); },
      [=](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---- reductions ----------------------------------------------------------------

template <typename T>
Var<T> sum(Var<T> a) {
  const Tensor<T>& av = a.value();
  T s = 0;
  for (T v : av.values()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(Tensor<T>::scalar(s), {a}, [=](Tape<T>& t, std::size_t self) {
    if (T* ga = t.grad_target(ia)) {
      const T g = t.grad_of(self)[0];
      const std::size_t n = t.value(ia).size();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    }
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  HMID_REQUIRE(a.value().size() > 0, "mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> max(Var<T> a) {
  const Tensor<T>& av = a.value();
  HMID_REQUIRE(av.size() > 0, "max of an empty tensor");
  const auto it = std::max_element(av.buffer().begin(), av.buffer().end());
  const std::size_t arg = static_cast<std::size_t>(it - av.buffer().begin());
  const std::size_t ia = a.id;
  return a.tape->record(Tensor<T>::scalar(*it), {a}, [=](Tape<T>& t, std::size_t self) {
    if (T* ga = t.grad_target(ia)) ga[arg] += t.grad_of(self)[0];
  });
}

template <typename T>
Var<T> row_sum(Var<T> a) {
  const Tensor<T>& av = a.value();
  const auto R = av.rows(), C = av.cols();
  Tensor<T> out({R, 1});
  for (std::int64_t r = 0; r < R; ++r) {
    T s = 0;
    for (std::int64_t c = 0; c < C; ++c) s += av[r * C + c];
    out[r] = s;
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    if (T* ga = t.grad_target(ia)) {
      const Tensor<T>& g = t.grad_of(self);
      for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c) ga[r * C + c] += g[r];
    }
  });
}

// ---- softmax family --------------------------------------------------------------

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  const Tensor<T>& av = a.value();
  const auto R = av.rows(), C = av.cols();
  Tensor<T> out(av.shape());
  for (std::int64_t r = 0; r < R; ++r) {
    const T* x = av.data() + r * C;
    T* y = out.data() + r * C;
    const T m = *std::max_element(x, x + C);
    T z = 0;
    for (std::int64_t c = 0; c < C; ++c) z += (y[c] = std::exp(x[c] - m));
    for (std::int64_t c = 0; c < C; ++c) y[c] /= z;
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& y = t.value(self);
    for (std::int64_t r = 0; r < R; ++r) {
      T dot = 0;
      for (std::int64_t c = 0; c < C; ++c) dot += g[r * C + c] * y[r * C + c];
      for (std::int64_t c = 0; c < C; ++c) ga[r * C + c] += y[r * C + c] * (g[r * C + c] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> a) {
  const Tensor<T>& av = a.value();
  const auto R = av.rows(), C = av.cols();
  Tensor<T> out(av.shape());
  for (std::int64_t r = 0; r < R; ++r) {
    const T* x = av.data() + r * C;
    T* y = out.data() + r * C;
    const T m = *std::max_element(x, x + C);
    T z = 0;
    for (std::int64_t c = 0; c < C; ++c) z += std::exp(x[c] - m);
    const T lse = m + std::log(z);
    for (std::int64_t c = 0; c < C; ++c) y[c] = x[c] - lse;
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& y = t.value(self);
    for (std::int64_t r = 0; r < R; ++r) {
      T gs = 0;
      for (std::int64_t c = 0; c < C; ++c) gs += g[r * C + c];
      for (std::int64_t c = 0; c < C; ++c) ga[r * C + c] += g[r * C + c] - std::exp(y[r * C + c]) * gs;
    }
  });
}

template <typename T>
Var<T> pick(Var<T> a, const std::vector<std::int64_t>& idx) {
  const Tensor<T>& av = a.value();
  const auto R = av.rows(), C = av.cols();
  HMID_REQUIRE(static_cast<std::int64_t>(idx.size()) == R, "pick: one index per row required");
  Tensor<T> out({R, 1});
  for (std::int64_t r = 0; r < R; ++r) {
    HMID_REQUIRE(idx[r] >= 0 && idx[r] < C, "pick: column index out of range");
    out[r] = av[r * C + idx[r]];
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    if (T* ga = t.grad_target(ia)) {
      const Tensor<T>& g = t.grad_of(self);
      for (std::int64_t r = 0; r < R; ++r) ga[r * C + idx[r]] += g[r];
    }
  });
}

// ---- row plumbing -------------------------------------------------------------

template <typename T>
Var<T> gather_rows(Var<T> a, const std::vector<std::int64_t>& idx) {
  const Tensor<T>& av = a.value();
  const auto R = av.rows(), C = av.cols();
  const auto n = static_cast<std::int64_t>(idx.size());
  Tensor<T> out({n, C});
  for (std::int64_t i = 0; i < n; ++i) {
    HMID_REQUIRE(idx[i] >= 0 && idx[i] < R,
                 "gather_rows: index " + std::to_string(idx[i]) + " out of range for " + std::to_string(R) + " rows");
    std::copy_n(av.data() + idx[i] * C, C, out.data() + i * C);
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    if (T* ga = t.grad_target(ia)) {
      const Tensor<T>& g = t.grad_of(self);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < C; ++c) ga[idx[i] * C + c] += g[i * C + c];
    }
  });
}

template <typename T>
Var<T> embedding_lookup(Var<T> table, const std::vector<std::int64_t>& ids) {
  return gather_rows(table, ids);
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  HMID_REQUIRE(!parts.empty(), "concat_rows of nothing");
  const auto C = parts[0].cols();
  std::int64_t R = 0;
  for (const auto& p : parts) {
    HMID_REQUIRE(p.tape == parts[0].tape, "concat_rows: operands on different tapes");
    HMID_REQUIRE(p.cols() == C, "concat_rows: column mismatch");
    R += p.rows();
  }
  Tensor<T> out({R, C});
  std::vector<std::pair<std::size_t, std::int64_t>> spans;  // (id, row offset)
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().buffer().begin(), p.value().buffer().end(), out.data() + off * C);
    spans.emplace_back(p.id, off);
    off += p.rows();
  }
  return parts[0].tape->record(std::move(out), parts, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    for (const auto& [id, row0] : spans) {
      T* gp = t.grad_target(id);
      if (!gp) continue;
      const std::size_t n = t.value(id).size();
      for (std::size_t k = 0; k < n; ++k) gp[k] += g[row0 * C + k];
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  const Tensor<T>& xv = x.value();
  const auto R = xv.rows(), C = xv.cols();
  HMID_REQUIRE(static_cast<std::int64_t>(gain.value().size()) == C &&
                   static_cast<std::int64_t>(bias.value().size()) == C,
               "layer_norm: gain/bias must have one entry per column");
  Tensor<T> out(xv.shape());
  std::vector<T> xhat(xv.size()), inv_std(static_cast<std::size_t>(R));
  const T* gv = gain.value().data();
  const T* bv = bias.value().data();
  for (std::int64_t r = 0; r < R; ++r) {
    const T* row = xv.data() + r * C;
    T mu = 0;
    for (std::int64_t c = 0; c < C; ++c) mu += row[c];
    mu /= T(C);
    T var = 0;
    for (std::int64_t c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= T(C);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::int64_t c = 0; c < C; ++c) {
      const T h = (row[c] - mu) * is;
      xhat[r * C + c] = h;
      out[r * C + c] = h * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->record(std::move(out), {x, gain, bias},
                        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
                          const Tensor<T>& g = t.grad_of(self);
                          const T* gv2 = t.value(ig).data();
                          T* gx = t.grad_target(ix);
                          T* gg = t.grad_target(ig);
                          T* gb = t.grad_target(ib);
                          for (std::int64_t r = 0; r < R; ++r) {
                            T s1 = 0, s2 = 0;
                            for (std::int64_t c = 0; c < C; ++c) {
                              const T dh = g[r * C + c] * gv2[c];
                              s1 += dh;
                              s2 += dh * xhat[r * C + c];
                              if (gg) gg[c] += g[r * C + c] * xhat[r * C + c];
                              if (gb) gb[c] += g[r * C + c];
                            }
                            if (!gx) continue;
                            for (std::int64_t c = 0; c < C; ++c) {
                              const T dh = g[r * C + c] * gv2[c];
                              gx[r * C + c] += inv_std[r] * (dh - s1 / T(C) - xhat[r * C + c] * s2 / T(C));
                            }
                          }
                        });
}

template <typename T>
Var<T> attention(Var<T> qkv, std::int64_t batch, std::int64_t seq, std::int64_t heads, bool causal) {
  const Tensor<T>& in = qkv.value();
  HMID_REQUIRE(in.rank() == 2 && in.dim(0) == batch * seq && in.dim(1) % 3 == 0,
               "attention: qkv must be [batch*seq, 3*width], got " + shape_str(in.shape()));
  const std::int64_t width = in.dim(1) / 3;
  HMID_REQUIRE(heads > 0 && width % heads == 0, "attention: width not divisible by heads");
  const std::int64_t dh = width / heads;
  const std::int64_t stride = 3 * width;
  const T scale_f = T(1) / std::sqrt(T(dh));

  Tensor<T> out({batch * seq, width});
  // Attention weights per (batch, head): seq x seq, kept for backward.
  std::vector<T> probs(static_cast<std::size_t>(batch * heads * seq * seq), T(0));
  std::vector<T> srow(static_cast<std::size_t>(seq));
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t h = 0; h < heads; ++h) {
      T* P = probs.data() + (b * heads + h) * seq * seq;
      for (std::int64_t i = 0; i < seq; ++i) {
        const T* q = in.data() + (b * seq + i) * stride + h * dh;
        const std::int64_t jmax = causal ? i + 1 : seq;
        T m = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < jmax; ++j) {
          const T* k = in.data() + (b * seq + j) * stride + width + h * dh;
          T s = 0;
          for (std::int64_t d = 0; d < dh; ++d) s += q[d] * k[d];
          srow[j] = s * scale_f;
          m = std::max(m, srow[j]);
        }
        T z = 0;
        for (std::int64_t j = 0; j < jmax; ++j) z += (P[i * seq + j] = std::exp(srow[j] - m));
        for (std::int64_t j = 0; j < jmax; ++j) P[i * seq + j] /= z;
        T* o = out.data() + (b * seq + i) * width + h * dh;
        for (std::int64_t j = 0; j < jmax; ++j) {
          const T p = P[i * seq + j];
          const T* v = in.data() + (b * seq + j) * stride + 2 * width + h * dh;
          for (std::int64_t d = 0; d < dh; ++d) o[d] += p * v[d];
        }
      }
    }

  const std::size_t iq = qkv.id;
  return qkv.tape->record(
      std::move(out), {qkv}, [=, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
        T* gin = t.grad_target(iq);
        if (!gin) return;
        const Tensor<T>& g = t.grad_of(self);
        const Tensor<T>& x = t.value(iq);
        std::vector<T> dp(static_cast<std::size_t>(seq));
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t h = 0; h < heads; ++h) {
            const T* P = probs.data() + (b * heads + h) * seq * seq;
            for (std::int64_t i = 0; i < seq; ++i) {
              const std::int64_t jmax = causal ? i + 1 : seq;
              const T* go = g.data() + (b * seq + i) * width + h * dh;
              T dot = 0;
              for (std::int64_t j = 0; j < jmax; ++j) {
                const T* v = x.data() + (b * seq + j) * stride + 2 * width + h * dh;
                T* gv = gin + (b * seq + j) * stride + 2 * width + h * dh;
                const T p = P[i * seq + j];
                T s = 0;
                for (std::int64_t d = 0; d < dh; ++d) {
                  s += go[d] * v[d];
                  gv[d] += p * go[d];
                }
                dp[j] = s;
                dot += p * s;
              }
              const T* q = x.data() + (b * seq + i) * stride + h * dh;
              T* gq = gin + (b * seq + i) * stride + h * dh;
              for (std::int64_t j = 0; j < jmax; ++j) {
                const T ds = P[i * seq + j] * (dp[j] - dot) * scale_f;
                if (ds == T(0)) continue;
                const T* k = x.data() + (b * seq + j) * stride + width + h * dh;
                T* gk = gin + (b * seq + j) * stride + width + h * dh;
                for (std::int64_t d = 0; d < dh; ++d) {
                  gq[d] += ds * k[d];
                  gk[d] += ds * q[d];
                }
              }
            }
          }
      });
}

// ---- finite differences ----------------------------------------------------------

FdResult finite_diff_check(const std::function<Var<double>(Tape<double>&, Var<double>)>& f, const TensorD& x,
                           double h, double abs_floor) {
  HMID_REQUIRE(h > 0, "finite_diff_check: step must be positive");
  TensorD analytic;
  {
    Tape<double> tape;
    auto xv = tape.variable(x);
    auto y = f(tape, xv);
    tape.backward(y);
    analytic = tape.grad(xv).size() == x.size() ? tape.grad(xv) : TensorD(x.shape());
  }
  auto eval = [&](const TensorD& p) {
    Tape<double> tape;
    auto xv = tape.constant(p);
    return f(tape, xv).value().item();
  };
  FdResult res;
  TensorD probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = eval(probe);
    probe[i] = orig - h;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2 * h);
    const double abs_err = std::abs(numeric - analytic[i]);
    const double rel = abs_err / std::max({std::abs(numeric), std::abs(analytic[i]), abs_floor});
    res.max_abs_err = std::max(res.max_abs_err, abs_err);
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_index = i;
    }
  }
  return res;
}

// ---- instantiations ------------------------------------------------------------

#define HMID_INSTANTIATE(T)                                                                   \
  template class Tape<T>;                                                                     \
  template Var<T> matmul(Var<T>, Var<T>);                                                     \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                  \
  template Var<T> transpose(Var<T>);                                                          \
  template Var<T> reshape(Var<T>, Shape);                                                     \
  template Var<T> add(Var<T>, Var<T>);                                                        \
  template Var<T> sub(Var<T>, Var<T>);                                                        \
  template Var<T> mul(Var<T>, Var<T>);                                                        \
  template Var<T> div(Var<T>, Var<T>);                                                        \
  template Var<T> neg(Var<T>);                                                                \
  template Var<T> scale(Var<T>, T);                                                           \
  template Var<T> add_scalar(Var<T>, T);                                                      \
  template Var<T> exp(Var<T>);                                                                \
  template Var<T> log(Var<T>);                                                                \
  template Var<T> sqrt(Var<T>);                                                               \
  template Var<T> cosh(Var<T>);                                                               \
  template Var<T> sinh(Var<T>);                                                               \
  template Var<T> acosh(Var<T>);                                                              \
  template Var<T> asin(Var<T>);                                                               \
  template Var<T> acos(Var<T>);                                                               \
  template Var<T> gelu(Var<T>);                                                               \
  template Var<T> clamp(Var<T>, T, T);                                                        \
  template Var<T> sum(Var<T>);                                                                \
  template Var<T> mean(Var<T>);                                                               \
  template Var<T> max(Var<T>);                                                                \
  template Var<T> row_sum(Var<T>);                                                            \
  template Var<T> softmax_rows(Var<T>);                                                       \
  template Var<T> log_softmax_rows(Var<T>);                                                   \
  template Var<T> pick(Var<T>, const std::vector<std::int64_t>&);                             \
  template Var<T> gather_rows(Var<T>, const std::vector<std::int64_t>&);                      \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                                    \
  template Var<T> embedding_lookup(Var<T>, const std::vector<std::int64_t>&);                 \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                      \
  template Var<T> attention(Var<T>, std::int64_t, std::int64_t, std::int64_t, bool);

HMID_INSTANTIATE(float)
HMID_INSTANTIATE(double)

}  // namespace hmid::ad
