#pragma once

// Finite-difference gradient suites over the tape ops and the training losses
// (float64). Used by the grad-check command and the test suites.

#include <cstdint>
#include <string>
#include <vector>

#include "hmid/autograd.hpp"

namespace hmid::gradcheck {

inline constexpr double kGradTolerance = 1e-4;

struct CheckResult {
  std::string name;
  ad::FdResult fd;
  bool pass = false;
};

/// Every differentiable op, on random well-conditioned inputs.
std::vector<CheckResult> op_suite(std::uint64_t seed);

/// Every loss, differentiated w.r.t. the raw encoder outputs (tangent vectors)
/// and, separately, w.r.t. the scalars tau, c, alpha_img, alpha_txt.
std::vector<CheckResult> loss_suite(std::uint64_t seed, std::int64_t batch = 4, std::int64_t dim = 6);

}  // namespace hmid::gradcheck
