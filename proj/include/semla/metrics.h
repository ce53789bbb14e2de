//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "semla/molecule.h"

namespace semla {
// Allowed total bond-order sums per (element, formal charge). Aromatic bonds
// count 1.5; an atom's sum is rounded down to an integer before lookup, so a
// ring carbon with two aromatic bonds and one single bond sums to 4.
class ValenceTable {
public:
  // Strict table: neutral carbon must have exactly 4, nitrogen 3, oxygen 2.
  static ValenceTable strict();

  void allow(const std::string &element, int charge, std::set<int> sums);

  // nullopt when (element, charge) is absent.
  std::optional<std::set<int>> allowed(const std::string &element,
                                       int charge) const;
  // Largest sum allowed for the element under any charge, or nullopt.
  std::optional<int> max_valence(const std::string &element) const;

  const std::string &version() const { return version_; }
  std::string serialize() const;

private:
  std::string version_ = "custom";
  std::map<std::pair<std::string, int>, std::set<int>> sums_;
};

// Sum of bond orders at each atom, doubled so aromatic halves stay integral.
std::vector<int> doubled_valences(const Molecule &m);

struct AtomStability {
  std::vector<bool> stable;
  std::vector<bool> unknown;  // (element, charge) missing from the table
  std::size_t n_stable = 0;
  double fraction() const;
};

AtomStability atom_stability(const Molecule &m, const Vocabulary &vocab,
                             const ValenceTable &table);
bool molecule_stability(const Molecule &m, const Vocabulary &vocab,
                        const ValenceTable &table);

bool is_connected(const Molecule &m);

// Every atom's bond-order sum is at most its element's maximum valence, and
// the bond graph is a single component.
bool validity_lite(const Molecule &m, const Vocabulary &vocab,
                   const ValenceTable &table);

// Canonical string for the labelled graph (element, charge, bond orders);
// equal keys iff the graphs are isomorphic. Coordinates are ignored and the
// key does not depend on vocabulary ordering.
std::string canonical_key(const Molecule &m, const Vocabulary &vocab);

std::string atom_label(const std::string &element, int charge);

double uniqueness(const std::vector<std::string> &keys);
double novelty(const std::vector<std::string> &keys,
               const std::unordered_set<std::string> &reference);

struct MoleculeMetrics {
  std::string name;
  std::size_t n_atoms = 0;
  std::size_t n_stable_atoms = 0;
  bool stable = false;
  bool valid = false;
  std::string key;
  double energy = 0;  // surrogate units per atom
  double strain = 0;
  bool strain_converged = false;
  bool strain_diverged = false;
};

MoleculeMetrics evaluate_molecule(const Molecule &m, const Vocabulary &vocab,
                                  const ValenceTable &table);

struct MetricsReport {
  std::vector<MoleculeMetrics> molecules;
  std::size_t n_parse_errors = 0;
  double atom_stability = 0;
  double mol_stability = 0;
  double validity = 0;
  double uniqueness = 0;
  std::optional<double> novelty;
  double energy_per_atom = 0;
  double strain_per_atom = 0;
  std::size_t strain_excluded = 0;
  std::string table_version;

  std::string csv() const;
  std::string summary(std::optional<double> sample_seconds = {},
                      std::optional<std::size_t> nfe = {}) const;
};

inline constexpr const char *kMetricsCsvHeader =
    "name,n_atoms,n_stable_atoms,atom_stable_fraction,mol_stable,valid,"
    "energy_per_atom,strain_per_atom,strain_converged,key";

// Per-molecule evaluation runs on up to `threads` workers (0 = hardware);
// the aggregate does not depend on the thread count.
MetricsReport evaluate(const std::vector<Molecule> &mols,
                       const Vocabulary &vocab, const ValenceTable &table,
                       const std::unordered_set<std::string> *reference = nullptr,
                       std::size_t threads = 1);
}  // namespace semla
