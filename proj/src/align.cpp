//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/align.h"

#include <numeric>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "semla/assignment.h"

namespace semla {
Vec3 rotate(const Mat3 &r, const Vec3 &v) {
  Vec3 out;
  for (int a = 0; a < 3; ++a)
    out[a] = r[a][0] * v[0] + r[a][1] * v[1] + r[a][2] * v[2];
  return out;
}

double mean_squared_distance(std::span<const Vec3> a,
                             std::span<const Vec3> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("mean_squared_distance: size mismatch");
  if (a.empty())
    return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (int k = 0; k < 3; ++k)
      total += (a[i][k] - b[i][k]) * (a[i][k] - b[i][k]);
  return total / static_cast<double>(a.size());
}

Mat3 kabsch(std::span<const Vec3> source, std::span<const Vec3> target) {
  if (source.size() != target.size())
    throw std::invalid_argument("kabsch: size mismatch");
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < source.size(); ++i)
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        h(a, b) += source[i][a] * target[i][b];
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU
                                               | Eigen::ComputeFullV);
  const Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  if ((v * u.transpose()).determinant() < 0)
    d(2, 2) = -1;
  const Eigen::Matrix3d r = v * d * u.transpose();
  Mat3 out;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      out[a][b] = r(a, b);
  return out;
}

namespace {
std::vector<Vec3> permuted_rotated(std::span<const Vec3> x,
                                   const std::vector<std::size_t> &perm,
                                   const Mat3 &r) {
  std::vector<Vec3> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = rotate(r, x[perm[i]]);
  return out;
}
}  // namespace

namespace {
struct Problem {
  std::span<const Vec3> x0, x1;
  const OtOptions &options;
};

// Assignment half-step: best permutation for a fixed rotation.
std::vector<std::size_t> assign(const Problem &p, const Mat3 &r) {
  const std::size_t n = p.x0.size();
  std::vector<Vec3> rotated(n);
  for (std::size_t j = 0; j < n; ++j)
    rotated[j] = rotate(r, p.x0[j]);
  std::vector<double> c(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0;
      for (int k = 0; k < 3; ++k)
        d += (p.x1[i][k] - rotated[j][k]) * (p.x1[i][k] - rotated[j][k]);
      c[i * n + j] = d;
    }
  return solve_assignment(c, n);
}

// Alternation from a given permutation; every half-step is accepted only if
// it lowers the cost, so the trace is non-increasing.
Alignment alternate(const Problem &p, std::vector<std::size_t> perm,
                    const Mat3 &rotation) {
  const std::size_t n = p.x0.size();
  Alignment a;
  a.perm = std::move(perm);
  a.rotation = rotation;
  a.aligned = permuted_rotated(p.x0, a.perm, a.rotation);
  a.cost = mean_squared_distance(a.aligned, p.x1);
  a.cost_trace.push_back(a.cost);

  std::vector<Vec3> ordered(n);
  for (a.iterations = 1; a.iterations <= p.options.max_iterations;
       ++a.iterations) {
    const double before = a.cost;

    for (std::size_t i = 0; i < n; ++i)
      ordered[i] = p.x0[a.perm[i]];
    const Mat3 r = kabsch(ordered, p.x1);
    std::vector<Vec3> candidate = permuted_rotated(p.x0, a.perm, r);
    double cost = mean_squared_distance(candidate, p.x1);
    if (cost < a.cost) {
      a.rotation = r;
      a.aligned = std::move(candidate);
      a.cost = cost;
    }
    a.cost_trace.push_back(a.cost);

    std::vector<std::size_t> next = assign(p, a.rotation);
    candidate = permuted_rotated(p.x0, next, a.rotation);
    cost = mean_squared_distance(candidate, p.x1);
    // Ties keep the current permutation so the iteration cannot cycle.
    if (cost < a.cost) {
      a.perm = std::move(next);
      a.aligned = std::move(candidate);
      a.cost = cost;
    }
    a.cost_trace.push_back(a.cost);

    if (before - a.cost <= p.options.rel_tolerance * std::max(before, 1e-300)) {
      a.converged = true;
      break;
    }
  }
  a.iterations = std::min(a.iterations, p.options.max_iterations);
  return a;
}

Eigen::Matrix3d principal_axes(std::span<const Vec3> x) {
  Eigen::Matrix3d s = Eigen::Matrix3d::Zero();
  for (const Vec3 &v: x)
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        s(a, b) += v[a] * v[b];
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(s);
  return eig.eigenvectors();
}

// The 24 signed permutation matrices with determinant +1.
std::vector<Eigen::Matrix3d> cube_rotations() {
  static const int orders[6][3] = { { 0, 1, 2 }, { 0, 2, 1 }, { 1, 0, 2 },
                                    { 1, 2, 0 }, { 2, 0, 1 }, { 2, 1, 0 } };
  std::vector<Eigen::Matrix3d> out;
  for (const auto &order: orders)
    for (int signs = 0; signs < 8; ++signs) {
      Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
      for (int a = 0; a < 3; ++a)
        m(a, order[a]) = (signs >> a & 1) ? -1.0 : 1.0;
      if (m.determinant() > 0)
        out.push_back(m);
    }
  return out;
}
}  // namespace

Alignment equivariant_ot_align(std::span<const Vec3> x0,
                               std::span<const Vec3> x1,
                               const OtOptions &options) {
  if (x0.size() != x1.size())
    throw std::invalid_argument("equivariant_ot_align: "
                                + std::to_string(x0.size()) + " vs "
                                + std::to_string(x1.size()) + " atoms");
  const std::size_t n = x0.size();
  const Problem p { x0, x1, options };
  std::vector<std::size_t> identity(n);
  std::iota(identity.begin(), identity.end(), 0);

  Alignment best = alternate(p, identity, kIdentity3);
  const double identity_cost = best.cost_trace.front();
  best.starts = 1;
  if (options.multi_start && n > 1) {
    const Eigen::Matrix3d f0 = principal_axes(x0), f1 = principal_axes(x1);
    for (const Eigen::Matrix3d &cube: cube_rotations()) {
      Eigen::Matrix3d r = f1 * cube * f0.transpose();
      if (r.determinant() < 0)
        r = -r;
      Mat3 start;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          start[a][b] = r(a, b);
      Alignment run = alternate(p, assign(p, start), start);
      ++best.starts;
      if (run.cost < best.cost) {
        run.starts = best.starts;
        best = std::move(run);
      }
    }
  }
  best.identity_cost = identity_cost;
  return best;
}
}  // namespace semla
