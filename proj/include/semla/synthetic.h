//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "semla/molecule.h"

namespace semla {
// Random small neutral molecules over C, N, O and explicit H: an acyclic
// heavy-atom skeleton with occasional double bonds, saturated with hydrogens
// so every atom meets its strict valence. Coordinates come from a random
// tree placement relaxed with the surrogate force field.
struct SyntheticOptions {
  std::size_t min_atoms = 6;
  std::size_t max_atoms = 12;
  std::size_t max_heavy = 5;
  double double_bond_prob = 0.2;
};

Molecule random_molecule(std::mt19937_64 &rng, const Vocabulary &vocab,
                         const SyntheticOptions &options = {});

// `count` pairwise non-isomorphic molecules. Throws if the options admit
// too few distinct graphs.
std::vector<Molecule> synthetic_corpus(std::size_t count, std::uint64_t seed,
                                       const Vocabulary &vocab,
                                       const SyntheticOptions &options = {});
}  // namespace semla
