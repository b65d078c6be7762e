#include "hmid/lorentz.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hmid::lorentz {

Curvature::Curvature(double c, double c_max) : c_(c), c_max_(c_max) {
  HMID_REQUIRE(std::isfinite(c) && c > 0.0, "curvature must be positive and finite, got " + std::to_string(c));
  HMID_REQUIRE(c_max > 0.0 && c <= c_max,
               "curvature " + std::to_string(c) + " exceeds its bound " + std::to_string(c_max));
}

double Curvature::sqrt() const noexcept { return std::sqrt(c_); }

double LorentzPoint::space_norm() const noexcept {
  double s = 0;
  for (double v : space) s += v * v;
  return std::sqrt(s);
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    HMID_REQUIRE(std::isfinite(x), std::string(what) + ": non-finite coordinate");
}

}  // namespace

double lorentz_inner(double x_time, std::span<const double> x_space, double y_time,
                     std::span<const double> y_space) {
  HMID_REQUIRE(x_space.size() == y_space.size(), "lorentz_inner: dimension mismatch (" +
                                                     std::to_string(x_space.size()) + " vs " +
                                                     std::to_string(y_space.size()) + ")");
  return -x_time * y_time + dot(x_space, y_space);
}

double lorentz_inner(const LorentzPoint& x, const LorentzPoint& y) {
  return lorentz_inner(x.time, x.space, y.time, y.space);
}

LorentzPoint origin(std::size_t dim, Curvature c) {
  return LorentzPoint{1.0 / c.sqrt(), std::vector<double>(dim, 0.0)};
}

LorentzPoint lift_to_hyperboloid(std::span<const double> space, Curvature c) {
  require_finite(space, "lift_to_hyperboloid");
  LorentzPoint p;
  p.space.assign(space.begin(), space.end());
  p.time = std::sqrt(1.0 / c.value() + dot(space, space));
  return p;
}

LorentzPoint reproject(const LorentzPoint& x, Curvature c) { return lift_to_hyperboloid(x.space, c); }

double manifold_defect(const LorentzPoint& x, Curvature c) {
  return std::abs(lorentz_inner(x, x) + 1.0 / c.value());
}

void require_on_manifold(const LorentzPoint& x, Curvature c, double tol) {
  HMID_REQUIRE(x.time > 0.0, "point is not on the upper sheet (time <= 0)");
  const double defect = manifold_defect(x, c);
  HMID_REQUIRE(defect <= tol * std::max(1.0, x.time * x.time),
               "point is off the hyperboloid: defect " + std::to_string(defect));
}

double lorentz_distance(const LorentzPoint& x, const LorentzPoint& y, Curvature c) {
  require_on_manifold(x, c);
  require_on_manifold(y, c);
  HMID_REQUIRE(x.dim() == y.dim(), "lorentz_distance: dimension mismatch");
  // -c<x,y>_L - 1 = (c/2) <x-y, x-y>_L, which is exactly 0 for x == y and avoids
  // the cancellation of evaluating -c<x,y>_L near 1.
  double sq = -(x.time - y.time) * (x.time - y.time);
  for (std::size_t i = 0; i < x.dim(); ++i) sq += (x.space[i] - y.space[i]) * (x.space[i] - y.space[i]);
  const double u = std::max(0.5 * c.value() * sq, 0.0);
  return std::log1p(u + std::sqrt(u * (u + 2.0))) / c.sqrt();
}

template <typename T>
T sinhc(T z) {
  if (std::abs(z) < T(kSeriesThreshold)) return T(1) + z * z / T(6);
  return std::sinh(z) / z;
}

template <typename T>
T sinhc_prime(T z) {
  // (z cosh z - sinh z) / z^2 cancels badly for small z; use the Taylor series there.
  if (std::abs(z) < T(1e-2)) {
    const T z2 = z * z;
    return z * (T(1) / T(3) + z2 / T(30) + z2 * z2 / T(840));
  }
  return (z * std::cosh(z) - std::sinh(z)) / (z * z);
}

template float sinhc<float>(float);
template double sinhc<double>(double);
template float sinhc_prime<float>(float);
template double sinhc_prime<double>(double);

LorentzPoint exp_map_origin(const TangentVector& v, Curvature c) {
  require_finite(v.space, "exp_map_origin");
  const double norm = std::sqrt(dot(v.space, v.space));
  const double z = c.sqrt() * norm;
  // cosh(z) * origin + sinh(z)/z * (0, v); the time part equals cosh(z)/sqrt(c).
  const double k = sinhc(z);
  LorentzPoint p;
  p.space.resize(v.space.size());
  for (std::size_t i = 0; i < v.space.size(); ++i) p.space[i] = k * v.space[i];
  p.time = std::sqrt(1.0 / c.value() + dot(p.space, p.space));
  return p;
}

LorentzPoint geodesic_interpolate(const LorentzPoint& x, const LorentzPoint& y, double t, Curvature c) {
  HMID_REQUIRE(x.dim() == y.dim(), "geodesic_interpolate: dimension mismatch");
  const double z = std::max(-c.value() * lorentz_inner(x, y), 1.0);
  const double omega = std::acosh(z);
  LorentzPoint out;
  out.space.resize(x.dim());
  if (omega < 1e-6) {
    for (std::size_t i = 0; i < x.dim(); ++i) out.space[i] = (1.0 - t) * x.space[i] + t * y.space[i];
    return reproject(out, c);
  }
  if (t <= 0.0) return x;
  if (t >= 1.0) return y;
  const double s = std::sinh(omega);
  const double a = std::sinh((1.0 - t) * omega) / s;
  const double b = std::sinh(t * omega) / s;
  for (std::size_t i = 0; i < x.dim(); ++i) out.space[i] = a * x.space[i] + b * y.space[i];
  return reproject(out, c);
}

double half_aperture(const LorentzPoint& x, Curvature c, double K) {
  const double r = x.space_norm();
  if (r <= kRootNorm) throw DomainError("half_aperture: the root entails everything; aperture undefined");
  const double arg = std::min(2.0 * K / (c.sqrt() * r), 1.0 - kTrigEps);
  return std::asin(arg);
}

double exterior_angle(const LorentzPoint& x, const LorentzPoint& y, Curvature c) {
  HMID_REQUIRE(x.dim() == y.dim(), "exterior_angle: dimension mismatch");
  const double r = x.space_norm();
  if (r <= kRootNorm) throw DomainError("exterior_angle: x is the root");
  const double q = c.value() * lorentz_inner(x, y);
  if (-q - 1.0 < 1e-10) throw DegeneracyError("exterior_angle: x and y coincide");
  const double num = y.time + x.time * q;
  const double den = r * std::sqrt(std::max(q * q - 1.0, kDenomFloor));
  const double arg = std::clamp(num / den, -1.0 + kTrigEps, 1.0 - kTrigEps);
  return std::acos(arg);
}

ConeCheck cone_check(const LorentzPoint& x, const LorentzPoint& y, Curvature c, double K) {
  ConeCheck out;
  out.half_aperture = half_aperture(x, c, K);
  out.exterior_angle = exterior_angle(x, y, c);
  out.violation = std::max(0.0, out.exterior_angle - out.half_aperture);
  return out;
}

}  // namespace hmid::lorentz
