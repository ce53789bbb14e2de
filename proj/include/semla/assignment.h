//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace semla {
// Exact minimum-cost perfect matching on a dense n x n cost matrix (row-major)
// by the Hungarian method with potentials, O(n^3). Returns col[i], the column
// assigned to row i.
std::vector<std::size_t> solve_assignment(std::span<const double> cost,
                                          std::size_t n);
}  // namespace semla
