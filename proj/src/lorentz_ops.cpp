#include "hmid/lorentz_ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace hmid::lorentz::ad {

using hmid::ad::Tape;

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
Eigen::Map<const RowMat<T>> mat(const Tensor<T>& t) {
  return Eigen::Map<const RowMat<T>>(t.data(), t.rows(), t.cols());
}

template <typename T>
T curvature_of(Var<T> c) {
  const T v = c.value().item();
  HMID_REQUIRE(std::isfinite(v) && v > T(0), "curvature must be positive");
  return v;
}

template <typename T>
Vec<T> lifted_time(const Tensor<T>& x, T c) {
  return (mat(x).rowwise().squaredNorm().array() + T(1) / c).sqrt().matrix();
}

template <typename T>
void require_same_tape(Var<T> a, Var<T> b, Var<T> c) {
  HMID_REQUIRE(a.tape && a.tape == b.tape && a.tape == c.tape, "operands live on different tapes");
}

}  // namespace

template <typename T>
Var<T> exp_map_origin(Var<T> v, Var<T> c) {
  HMID_REQUIRE(v.tape && v.tape == c.tape, "operands live on different tapes");
  const T cv = curvature_of(c);
  const T sc = std::sqrt(cv);
  const Tensor<T>& vv = v.value();
  const auto R = vv.rows(), C = vv.cols();
  Tensor<T> out(vv.shape());
  for (std::int64_t r = 0; r < R; ++r) {
    const T* u = vv.data() + r * C;
    T n2 = 0;
    for (std::int64_t k = 0; k < C; ++k) {
      HMID_REQUIRE(std::isfinite(u[k]), "exp_map_origin: non-finite tangent vector");
      n2 += u[k] * u[k];
    }
    const T s = sinhc(sc * std::sqrt(n2));
    for (std::int64_t k = 0; k < C; ++k) out[r * C + k] = s * u[k];
  }
  const std::size_t iv = v.id, ic = c.id;
  return v.tape->record(std::move(out), {v, c}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& u = t.value(iv);
    T* gv = t.grad_target(iv);
    T* gc = t.grad_target(ic);
    for (std::int64_t r = 0; r < R; ++r) {
      const T* ur = u.data() + r * C;
      const T* gr = g.data() + r * C;
      T n2 = 0, ug = 0;
      for (std::int64_t k = 0; k < C; ++k) {
        n2 += ur[k] * ur[k];
        ug += ur[k] * gr[k];
      }
      const T z = sc * std::sqrt(n2);
      const T sp = sinhc_prime(z);
      if (gv) {
        // d(out)/du = sinhc(z) I + sinhc'(z) * c/z * u u^T
        const T s = sinhc(z);
        const T k2 = z < T(1e-2) ? cv * (T(1) / T(3) + z * z / T(30) + z * z * z * z / T(840)) : sp * cv / z;
        for (std::int64_t k = 0; k < C; ++k) gv[r * C + k] += s * gr[k] + k2 * ug * ur[k];
      }
      // dz/dc = z / (2c)
      if (gc) gc[0] += sp * z / (T(2) * cv) * ug;
    }
  });
}

template <typename T>
Var<T> pairwise_inner(Var<T> x, Var<T> y, Var<T> c) {
  require_same_tape(x, y, c);
  HMID_REQUIRE(x.cols() == y.cols(), "pairwise_inner: dimension mismatch");
  const T cv = curvature_of(c);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& yv = y.value();
  const Vec<T> tx = lifted_time(xv, cv), ty = lifted_time(yv, cv);
  const auto B = xv.rows(), M = yv.rows(), n = xv.cols();
  Tensor<T> out({B, M});
  Eigen::Map<RowMat<T>>(out.data(), B, M) = mat(xv) * mat(yv).transpose() - tx * ty.transpose();
  const std::size_t ix = x.id, iy = y.id, ic = c.id;
  return x.tape->record(std::move(out), {x, y, c}, [=](Tape<T>& t, std::size_t self) {
    const auto G = mat(t.grad_of(self));
    const auto X = mat(t.value(ix));
    const auto Y = mat(t.value(iy));
    if (T* gx = t.grad_target(ix)) {
      Eigen::Map<RowMat<T>> GX(gx, B, n);
      GX.noalias() += G * Y;
      const Vec<T> w = ((G * ty).array() / tx.array()).matrix();
      GX -= w.asDiagonal() * X;
    }
    if (T* gy = t.grad_target(iy)) {
      Eigen::Map<RowMat<T>> GY(gy, M, n);
      GY.noalias() += G.transpose() * X;
      const Vec<T> w = ((G.transpose() * tx).array() / ty.array()).matrix();
      GY -= w.asDiagonal() * Y;
    }
    if (T* gc = t.grad_target(ic)) {
      T acc = 0;
      for (std::int64_t i = 0; i < B; ++i)
        for (std::int64_t j = 0; j < M; ++j) acc += G(i, j) * (ty(j) / tx(i) + tx(i) / ty(j));
      gc[0] += acc / (T(2) * cv * cv);
    }
  });
}

template <typename T>
Var<T> pairwise_distance(Var<T> x, Var<T> y, Var<T> c) {
  require_same_tape(x, y, c);
  HMID_REQUIRE(x.cols() == y.cols(), "pairwise_distance: dimension mismatch");
  const T cv = curvature_of(c);
  const T sc = std::sqrt(cv);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& yv = y.value();
  const Vec<T> tx = lifted_time(xv, cv), ty = lifted_time(yv, cv);
  const auto B = xv.rows(), M = yv.rows(), n = xv.cols();
  // z = -c <x,y>_L = 1 + u with u = (c/2) <x-y, x-y>_L. u is formed from the
  // coordinate differences, and the time difference as (dx . sx) / (t_x + t_y), so
  // coincident rows give exactly u = 0 and near-coincident rows keep full precision.
  RowMat<T> U(B, M);
  Tensor<T> out({B, M});
  for (std::int64_t i = 0; i < B; ++i) {
    const T* xi = xv.data() + i * n;
    for (std::int64_t j = 0; j < M; ++j) {
      const T* yj = yv.data() + j * n;
      T dd = 0, ds = 0;
      for (std::int64_t k = 0; k < n; ++k) {
        const T d = xi[k] - yj[k];
        dd += d * d;
        ds += d * (xi[k] + yj[k]);
      }
      const T dt = ds / (tx(i) + ty(j));
      const T u = std::max(T(0.5) * cv * (dd - dt * dt), T(0));
      U(i, j) = u;
      out[i * M + j] = std::log1p(u + std::sqrt(u * (u + T(2)))) / sc;
    }
  }
  const std::size_t ix = x.id, iy = y.id, ic = c.id;
  return x.tape->record(std::move(out), {x, y, c}, [=, U = std::move(U)](Tape<T>& t, std::size_t self) {
    const auto G = mat(t.grad_of(self));
    const auto X = mat(t.value(ix));
    const auto Y = mat(t.value(iy));
    const Tensor<T>& D = t.value(self);
    // W = dL/dz, zero where the arccosh clamp is active.
    RowMat<T> W(B, M);
    for (std::int64_t i = 0; i < B; ++i)
      for (std::int64_t j = 0; j < M; ++j) {
        const T u = U(i, j);
        W(i, j) = u > T(kAcoshEps) ? G(i, j) / (sc * std::sqrt(u * (u + T(2)))) : T(0);
      }
    // dz/dx_i = c (t_y / t_x * x_i - y_j)
    if (T* gx = t.grad_target(ix)) {
      Eigen::Map<RowMat<T>> GX(gx, B, n);
      const Vec<T> w = ((W * ty).array() / tx.array()).matrix();
      GX += cv * (w.asDiagonal() * X);
      GX.noalias() -= cv * (W * Y);
    }
    if (T* gy = t.grad_target(iy)) {
      Eigen::Map<RowMat<T>> GY(gy, M, n);
      const Vec<T> w = ((W.transpose() * tx).array() / ty.array()).matrix();
      GY += cv * (w.asDiagonal() * Y);
      GY.noalias() -= cv * (W.transpose() * X);
    }
    if (T* gc = t.grad_target(ic)) {
      // D = acosh(z)/sqrt(c); z = c(t_x t_y - x.y) with t depending on c.
      T acc = 0;
      for (std::int64_t i = 0; i < B; ++i)
        for (std::int64_t j = 0; j < M; ++j) {
          acc += G(i, j) * (T(-0.5) * D[i * M + j] / cv);
          if (W(i, j) != T(0)) {
            const T dz = (T(1) + U(i, j)) / cv - (ty(j) / tx(i) + tx(i) / ty(j)) / (T(2) * cv);
            acc += W(i, j) * dz;
          }
        }
      gc[0] += acc;
    }
  });
}

template <typename T>
Var<T> half_aperture_rows(Var<T> x, Var<T> c, T K, std::atomic<std::int64_t>* root_hits) {
  HMID_REQUIRE(x.tape && x.tape == c.tape, "operands live on different tapes");
  const T cv = curvature_of(c);
  const T sc = std::sqrt(cv);
  const Tensor<T>& xv = x.value();
  const auto B = xv.rows(), n = xv.cols();
  const T hi = T(1) - T(kTrigEps);
  Tensor<T> out({B, 1});
  std::vector<T> arg(static_cast<std::size_t>(B));  // < 0 marks a row with zero gradient
  for (std::int64_t i = 0; i < B; ++i) {
    T r2 = 0;
    for (std::int64_t k = 0; k < n; ++k) r2 += xv[i * n + k] * xv[i * n + k];
    const T r = std::sqrt(r2);
    if (r <= T(kRootNorm)) {
      if (root_hits) root_hits->fetch_add(1, std::memory_order_relaxed);
      out[i] = std::asin(hi);
      arg[i] = T(-1);
      continue;
    }
    const T a = T(2) * K / (sc * r);
    out[i] = std::asin(std::min(a, hi));
    arg[i] = a < hi ? a : T(-1);
  }
  const std::size_t ix = x.id, ic = c.id;
  return x.tape->record(std::move(out), {x, c}, [=, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& X = t.value(ix);
    T* gx = t.grad_target(ix);
    T* gc = t.grad_target(ic);
    for (std::int64_t i = 0; i < B; ++i) {
      const T a = arg[i];
      if (a < T(0)) continue;
      const T dphi = g[i] / std::sqrt(T(1) - a * a);
      if (gx) {
        T r2 = 0;
        for (std::int64_t k = 0; k < n; ++k) r2 += X[i * n + k] * X[i * n + k];
        for (std::int64_t k = 0; k < n; ++k) gx[i * n + k] += dphi * (-a * X[i * n + k] / r2);
      }
      if (gc) gc[0] += dphi * (-a / (T(2) * cv));
    }
  });
}

template <typename T>
Var<T> exterior_angle_rows(Var<T> x, Var<T> y, Var<T> c) {
  require_same_tape(x, y, c);
  HMID_REQUIRE(x.rows() == y.rows() && x.cols() == y.cols(), "exterior_angle_rows: shape mismatch");
  const T cv = curvature_of(c);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& yv = y.value();
  const auto B = xv.rows(), n = xv.cols();
  const T lo = T(-1) + T(kTrigEps), hi = T(1) - T(kTrigEps);
  const T floor = T(kDenomFloor);
  Tensor<T> out({B, 1});
  for (std::int64_t i = 0; i < B; ++i) {
    const T* a = xv.data() + i * n;
    const T* b = yv.data() + i * n;
    T aa = 0, bb = 0, ab = 0;
    for (std::int64_t k = 0; k < n; ++k) {
      aa += a[k] * a[k];
      bb += b[k] * b[k];
      ab += a[k] * b[k];
    }
    const T tx = std::sqrt(T(1) / cv + aa), ty = std::sqrt(T(1) / cv + bb);
    const T q = cv * (ab - tx * ty);
    const T num = ty + tx * q;
    const T den = std::max(std::sqrt(aa) * std::sqrt(std::max(q * q - T(1), floor)), floor);
    out[i] = std::acos(std::clamp(num / den, lo, hi));
  }
  const std::size_t ix = x.id, iy = y.id, ic = c.id;
  return x.tape->record(std::move(out), {x, y, c}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& X = t.value(ix);
    const Tensor<T>& Y = t.value(iy);
    T* gx = t.grad_target(ix);
    T* gy = t.grad_target(iy);
    T* gc = t.grad_target(ic);
    for (std::int64_t i = 0; i < B; ++i) {
      const T* a = X.data() + i * n;
      const T* b = Y.data() + i * n;
      T aa = 0, bb = 0, ab = 0;
      for (std::int64_t k = 0; k < n; ++k) {
        aa += a[k] * a[k];
        bb += b[k] * b[k];
        ab += a[k] * b[k];
      }
      const T rx = std::sqrt(aa);
      const T tx = std::sqrt(T(1) / cv + aa), ty = std::sqrt(T(1) / cv + bb);
      const T ip = ab - tx * ty;
      const T q = cv * ip;
      const T num = ty + tx * q;
      const T s2 = q * q - T(1);
      const T sd = std::max(s2, floor);
      const T den_raw = rx * std::sqrt(sd);
      if (den_raw <= floor) continue;  // floored denominator: no gradient
      const T ratio = num / den_raw;
      if (ratio <= lo || ratio >= hi) continue;  // clamp active
      const T g_ratio = -g[i] / std::sqrt(T(1) - ratio * ratio);
      const T g_num = g_ratio / den_raw;
      const T g_den = -g_ratio * num / (den_raw * den_raw);
      const T g_rx = g_den * std::sqrt(sd);
      const T g_s2 = s2 > floor ? g_den * rx / (T(2) * std::sqrt(sd)) : T(0);
      T g_q = g_s2 * T(2) * q + g_num * tx;
      T g_tx = g_num * q;
      T g_ty = g_num;
      T g_c = g_q * ip;
      const T g_ip = g_q * cv;
      g_tx += -g_ip * ty;
      g_ty += -g_ip * tx;
      g_c += g_tx * (T(-1) / (T(2) * cv * cv * tx)) + g_ty * (T(-1) / (T(2) * cv * cv * ty));
      // coefficients multiplying a (= x) and b (= y) in the final vector gradients
      const T ca = g_tx / tx + g_rx / rx;
      const T cb = g_ty / ty;
      if (gx)
        for (std::int64_t k = 0; k < n; ++k) gx[i * n + k] += g_ip * b[k] + ca * a[k];
      if (gy)
        for (std::int64_t k = 0; k < n; ++k) gy[i * n + k] += g_ip * a[k] + cb * b[k];
      if (gc) gc[0] += g_c;
    }
  });
}

#define HMID_INSTANTIATE_LORENTZ(T)                                                       \
  template Var<T> exp_map_origin(Var<T>, Var<T>);                                         \
  template Var<T> pairwise_inner(Var<T>, Var<T>, Var<T>);                                 \
  template Var<T> pairwise_distance(Var<T>, Var<T>, Var<T>);                              \
  template Var<T> half_aperture_rows(Var<T>, Var<T>, T, std::atomic<std::int64_t>*);      \
  template Var<T> exterior_angle_rows(Var<T>, Var<T>, Var<T>);

HMID_INSTANTIATE_LORENTZ(float)
HMID_INSTANTIATE_LORENTZ(double)

}  // namespace hmid::lorentz::ad
