#pragma once

// Lorentz-model (hyperboloid) geometry with curvature -c, c > 0.
//
// Points live on the upper sheet {x : <x,x>_L = -1/c, x0 > 0}. A point is stored
// as (time, space); in batched code only the space part is kept and the time
// component is recomputed as sqrt(1/c + |space|^2).

#include <cstddef>
#include <span>
#include <vector>

#include "hmid/errors.hpp"

namespace hmid::lorentz {

// arccosh gradients are zeroed for arguments <= 1 + kAcoshEps; the value itself is
// clamped at exactly 1 so d(x,x) = 0.
inline constexpr double kAcoshEps = 1e-12;
inline constexpr double kTrigEps = 1e-7;         // asin/acos arguments kept in [-1+eps, 1-eps]
inline constexpr double kDenomFloor = 1e-12;     // floor on (c<x,y>)^2 - 1 in the exterior angle
inline constexpr double kSeriesThreshold = 1e-6; // sinh(z)/z -> 1 + z^2/6 below this
inline constexpr double kRootNorm = 1e-8;        // |space| at or below this is treated as the root
inline constexpr double kDefaultConeK = 0.1;
inline constexpr double kManifoldTolF64 = 1e-8;
inline constexpr double kManifoldTolF32 = 1e-3;
inline constexpr double kDefaultCurvatureMax = 10.0;

/// Positive curvature magnitude with an upper bound.
class Curvature {
 public:
  explicit Curvature(double c, double c_max = kDefaultCurvatureMax);
  double value() const noexcept { return c_; }
  double max() const noexcept { return c_max_; }
  double sqrt() const noexcept;

 private:
  double c_;
  double c_max_;
};

struct LorentzPoint {
  double time = 0.0;
  std::vector<double> space;

  std::size_t dim() const noexcept { return space.size(); }
  double space_norm() const noexcept;
};

/// Tangent vector at the origin; the time component is identically zero.
struct TangentVector {
  std::vector<double> space;
};

struct ConeCheck {
  double half_aperture = 0.0;
  double exterior_angle = 0.0;
  double violation = 0.0;
};

double lorentz_inner(double x_time, std::span<const double> x_space, double y_time,
                     std::span<const double> y_space);
double lorentz_inner(const LorentzPoint& x, const LorentzPoint& y);

LorentzPoint origin(std::size_t dim, Curvature c);
LorentzPoint lift_to_hyperboloid(std::span<const double> space, Curvature c);
/// Recomputes the time component so the point sits exactly on the sheet.
LorentzPoint reproject(const LorentzPoint& x, Curvature c);

/// |<x,x>_L + 1/c|
double manifold_defect(const LorentzPoint& x, Curvature c);
/// Throws ContractViolation if the defect exceeds tol scaled by max(1, time^2).
void require_on_manifold(const LorentzPoint& x, Curvature c, double tol = kManifoldTolF64);

double lorentz_distance(const LorentzPoint& x, const LorentzPoint& y, Curvature c);

LorentzPoint exp_map_origin(const TangentVector& v, Curvature c);

/// Point at fraction t of the geodesic from x to y.
LorentzPoint geodesic_interpolate(const LorentzPoint& x, const LorentzPoint& y, double t, Curvature c);

double half_aperture(const LorentzPoint& x, Curvature c, double K = kDefaultConeK);
double exterior_angle(const LorentzPoint& x, const LorentzPoint& y, Curvature c);
ConeCheck cone_check(const LorentzPoint& x, const LorentzPoint& y, Curvature c, double K = kDefaultConeK);

/// sinh(z)/z with the small-argument series, and its derivative.
template <typename T>
T sinhc(T z);
template <typename T>
T sinhc_prime(T z);

}  // namespace hmid::lorentz
