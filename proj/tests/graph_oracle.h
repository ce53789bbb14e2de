//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

// Exhaustive labelled-graph isomorphism by backtracking over all atom
// bijections. Exponential; meant for N <= 8.

#pragma once

#include <vector>

#include "semla/molecule.h"

namespace semla::oracle {
namespace detail {
inline bool extend(const Molecule &a, const Molecule &b,
                   std::vector<int> &map, std::vector<bool> &used,
                   std::size_t i) {
  const std::size_t n = a.size();
  if (i == n)
    return true;
  for (std::size_t j = 0; j < n; ++j) {
    if (used[j] || a.atom_types[i] != b.atom_types[j]
        || a.charges[i] != b.charges[j])
      continue;
    bool ok = true;
    for (std::size_t k = 0; k < i && ok; ++k)
      ok = a.bond(i, k) == b.bond(j, static_cast<std::size_t>(map[k]));
    if (!ok)
      continue;
    map[i] = static_cast<int>(j);
    used[j] = true;
    if (extend(a, b, map, used, i + 1))
      return true;
    used[j] = false;
  }
  return false;
}
}  // namespace detail

inline bool isomorphic(const Molecule &a, const Molecule &b) {
  if (a.size() != b.size())
    return false;
  std::vector<int> map(a.size(), -1);
  std::vector<bool> used(a.size(), false);
  return detail::extend(a, b, map, used, 0);
}

// Copy with atoms relabelled: new atom i is old atom perm[i].
inline Molecule permuted(const Molecule &m, const std::vector<std::size_t> &perm) {
  Molecule out(m.size());
  out.name = m.name;
  for (std::size_t i = 0; i < m.size(); ++i) {
    out.atom_types[i] = m.atom_types[perm[i]];
    out.charges[i] = m.charges[perm[i]];
    out.coords[i] = m.coords[perm[i]];
  }
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j)
      out.bonds[i * m.size() + j] = m.bond(perm[i], perm[j]);
  return out;
}
}  // namespace semla::oracle
