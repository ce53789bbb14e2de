//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "semla/molecule.h"

namespace semla {
using Mat3 = std::array<Vec3, 3>;  // row-major

inline constexpr Mat3 kIdentity3 { { { 1, 0, 0 }, { 0, 1, 0 }, { 0, 0, 1 } } };

Vec3 rotate(const Mat3 &r, const Vec3 &v);

// Mean over atoms of the squared distance |a_i - b_i|^2.
double mean_squared_distance(std::span<const Vec3> a, std::span<const Vec3> b);

// Proper rotation R (det +1) minimizing sum_i |R source_i - target_i|^2.
// Both point sets are used as given (callers zero-center).
Mat3 kabsch(std::span<const Vec3> source, std::span<const Vec3> target);

struct OtOptions {
  std::size_t max_iterations = 50;
  double rel_tolerance = 1e-9;
  // Besides the identity-permutation start, also run the alternation from the
  // 24 proper cube rotations expressed in the principal-axes frames of the two
  // point sets, and keep the cheapest result.
  bool multi_start = true;
};

struct Alignment {
  // aligned[i] = rotation * x0[perm[i]] is matched to x1[i].
  std::vector<std::size_t> perm;
  Mat3 rotation = kIdentity3;
  std::vector<Vec3> aligned;
  double identity_cost = 0;  // MSE(x0, x1) with no permutation or rotation
  double cost = 0;           // MSE(aligned, x1)
  // Cost after every half-step of the winning run, starting with its initial
  // cost (identity_cost for the identity start).
  std::vector<double> cost_trace;
  std::size_t iterations = 0;
  std::size_t starts = 0;
  bool converged = false;
};

// Alternates the closed-form optimal rotation (given the permutation) and an
// exact assignment (given the rotation) until the cost stops decreasing.
// Throws on size mismatch.
Alignment equivariant_ot_align(std::span<const Vec3> x0,
                               std::span<const Vec3> x1,
                               const OtOptions &options = {});
}  // namespace semla
