//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

// Exhaustive reference for rigid-and-permutation alignment. The optimal
// rotation cost uses the quaternion eigenvalue formulation, which shares no
// code with the SVD path in the library.

#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "semla/align.h"

namespace semla::oracle {
// min over proper rotations R of mean_i |R p_i - q_i|^2.
inline double optimal_rotation_cost(std::span<const Vec3> p,
                                    std::span<const Vec3> q) {
  double s[3][3] = {};
  double norms = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      norms += p[i][a] * p[i][a] + q[i][a] * q[i][a];
      for (int b = 0; b < 3; ++b)
        s[a][b] += p[i][a] * q[i][b];
    }
  }
  Eigen::Matrix4d n;
  n << s[0][0] + s[1][1] + s[2][2], s[1][2] - s[2][1], s[2][0] - s[0][2],
      s[0][1] - s[1][0],  //
      s[1][2] - s[2][1], s[0][0] - s[1][1] - s[2][2], s[0][1] + s[1][0],
      s[2][0] + s[0][2],  //
      s[2][0] - s[0][2], s[0][1] + s[1][0], -s[0][0] + s[1][1] - s[2][2],
      s[1][2] + s[2][1],  //
      s[0][1] - s[1][0], s[2][0] + s[0][2], s[1][2] + s[2][1],
      -s[0][0] - s[1][1] + s[2][2];
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(n);
  const double lambda = eig.eigenvalues()(3);
  return std::max(0.0, norms - 2 * lambda) / static_cast<double>(p.size());
}

// Exhaustive minimum over all n! permutations, each with its optimal rotation.
inline double brute_force_ot_cost(std::span<const Vec3> x0,
                                  std::span<const Vec3> x1) {
  const std::size_t n = x0.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<Vec3> ordered(n);
  double best = 1e300;
  do {
    for (std::size_t i = 0; i < n; ++i)
      ordered[i] = x0[perm[i]];
    best = std::min(best, optimal_rotation_cost(ordered, x1));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Exhaustive best permutation for a fixed rotation.
inline double best_assignment_cost(std::span<const Vec3> x0,
                                   std::span<const Vec3> x1, const Mat3 &r) {
  const std::size_t n = x0.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = 1e300;
  do {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 v = semla::rotate(r, x0[perm[i]]);
      for (int k = 0; k < 3; ++k)
        total += (v[k] - x1[i][k]) * (v[k] - x1[i][k]);
    }
    best = std::min(best, total / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// A result is a certified local optimum when neither half-step can improve
// it: its rotation is optimal for its permutation and its permutation is
// optimal for its rotation.
inline bool certified_local_optimum(std::span<const Vec3> x0,
                                    std::span<const Vec3> x1,
                                    const Alignment &a, double tol = 1e-9) {
  std::vector<Vec3> ordered(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i)
    ordered[i] = x0[a.perm[i]];
  return optimal_rotation_cost(ordered, x1) >= a.cost - tol
         && best_assignment_cost(x0, x1, a.rotation) >= a.cost - tol;
}
}  // namespace semla::oracle
