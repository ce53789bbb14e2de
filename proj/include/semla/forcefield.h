//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "semla/molecule.h"

namespace semla {
// Harmonic bond/angle surrogate with a soft clash penalty. Energies are in
// "surrogate" units; they are only meaningful relative to each other.
struct ForceFieldParams {
  static constexpr const char *kVersion = "semla-ff-1";
  double k_bond = 100.0;   // per A^2
  double k_angle = 20.0;   // per rad^2
  double k_clash = 50.0;   // per A^2
  double clash_margin = 0.4;  // r_clash = r_i + r_j + margin

  // Covalent radius in A; unknown elements use 1.0.
  static double covalent_radius(const std::string &element);
  // Ideal length for a bond of the given BondOrder value.
  static double bond_length(const std::string &a, const std::string &b,
                            int order);
};

// Precomputed interaction lists for one molecular graph.
class SurrogateForceField {
public:
  SurrogateForceField(const Molecule &m, const Vocabulary &vocab,
                      const ForceFieldParams &params = {});

  std::size_t size() const { return n_; }

  // Total (not per-atom) energy; fills `grad` (size n) when non-null.
  double energy(std::span<const Vec3> x, std::vector<Vec3> *grad = nullptr) const;

  struct Bond { std::size_t i, j; double r0; };
  struct Angle { std::size_t i, j, k; double theta0; };  // j is the centre
  struct Pair { std::size_t i, j; double r_clash; };

  const std::vector<Bond> &bonds() const { return bonds_; }
  const std::vector<Angle> &angles() const { return angles_; }
  const std::vector<Pair> &clash_pairs() const { return pairs_; }

private:
  std::size_t n_;
  ForceFieldParams params_;
  std::vector<Bond> bonds_;
  std::vector<Angle> angles_;
  std::vector<Pair> pairs_;
};

double surrogate_energy(const Molecule &m, const Vocabulary &vocab,
                        const ForceFieldParams &params = {});

struct MinimizeOptions {
  double grad_tolerance = 1e-6;
  std::size_t max_iterations = 5000;
};

struct Minimization {
  std::vector<Vec3> coords;
  double initial_energy = 0;  // total
  double final_energy = 0;
  double grad_norm = 0;
  std::size_t iterations = 0;
  bool converged = false;
  bool diverged = false;
};

// Gradient descent with Barzilai-Borwein trial steps and non-monotone Armijo
// backtracking. No iterate ends above the starting energy.
Minimization minimize(const SurrogateForceField &ff, std::span<const Vec3> x0,
                      const MinimizeOptions &options = {});

struct Strain {
  double energy_per_atom = 0;
  double strain_per_atom = 0;
  bool converged = false;
  bool diverged = false;
  std::vector<Vec3> relaxed;
};

Strain surrogate_strain(const Molecule &m, const Vocabulary &vocab,
                        const ForceFieldParams &params = {},
                        const MinimizeOptions &options = {});
}  // namespace semla
