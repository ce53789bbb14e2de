//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/assignment.h"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace semla {
std::vector<std::size_t> solve_assignment(std::span<const double> cost,
                                          std::size_t n) {
  if (cost.size() != n * n)
    throw std::invalid_argument("assignment: cost has "
                                + std::to_string(cost.size())
                                + " entries, expected n*n with n = "
                                + std::to_string(n));
  for (double c: cost)
    if (!std::isfinite(c))
      throw std::invalid_argument("assignment: non-finite cost");
  if (n == 0)
    return {};

  // 1-based arrays; row 0 / column 0 are sentinels.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t row = 1; row <= n; ++row) {
    match[0] = row;
    std::size_t col0 = 0;
    std::vector<double> min_v(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[col0] = 1;
      const std::size_t i0 = match[col0];
      double delta = inf;
      std::size_t col1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j])
          continue;
        const double reduced = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (reduced < min_v[j]) {
          min_v[j] = reduced;
          way[j] = col0;
        }
        if (min_v[j] < delta) {
          delta = min_v[j];
          col1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          min_v[j] -= delta;
        }
      }
      col0 = col1;
    } while (match[col0] != 0);
    // Augment along the alternating path.
    do {
      const std::size_t prev = way[col0];
      match[col0] = match[prev];
      col0 = prev;
    } while (col0 != 0);
  }

  std::vector<std::size_t> col(n);
  for (std::size_t j = 1; j <= n; ++j)
    col[match[j] - 1] = j - 1;
  return col;
}
}  // namespace semla
