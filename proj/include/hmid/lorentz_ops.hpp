#pragma once

// Differentiable batched Lorentz operations on a Tape. Points are passed as
// their space parts, one per row; the curvature is a [1] tensor so it can be a
// learnable parameter. Every op has a hand-derived backward.

#include <atomic>
#include <cstdint>

#include "hmid/autograd.hpp"
#include "hmid/lorentz.hpp"

namespace hmid::lorentz::ad {

using hmid::ad::Var;

/// Row-wise exp map at the origin: out_i = sinh(z)/z * v_i with z = sqrt(c)|v_i|.
template <typename T>
Var<T> exp_map_origin(Var<T> v, Var<T> c);

/// out[i,j] = <x_i, y_j>_L with time components lifted from the space parts.
template <typename T>
Var<T> pairwise_inner(Var<T> x, Var<T> y, Var<T> c);

/// out[i,j] = d_L(x_i, y_j).
template <typename T>
Var<T> pairwise_distance(Var<T> x, Var<T> y, Var<T> c);

/// Half-aperture of each row's entailment cone, [B,1]. Rows at the root get the
/// clamped aperture asin(1 - eps), no gradient, and bump `root_hits` if given.
template <typename T>
Var<T> half_aperture_rows(Var<T> x, Var<T> c, T K, std::atomic<std::int64_t>* root_hits = nullptr);

/// Exterior angle at x_i of the triangle (root, x_i, y_i), [B,1].
template <typename T>
Var<T> exterior_angle_rows(Var<T> x, Var<T> y, Var<T> c);

}  // namespace hmid::lorentz::ad
