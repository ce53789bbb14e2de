//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace semla {
using Vec3 = std::array<double, 3>;

enum class BondOrder : int {
  kNone = 0,
  kSingle = 1,
  kDouble = 2,
  kTriple = 3,
  kAromatic = 4,
};

inline constexpr int kNumBondTypes = 5;

// Categorical slot value used for padded positions. It is never a valid index
// into any vocabulary, so a mask violation shows up as an out-of-range error.
inline constexpr int kPadIndex = -1;

// Ordered atom/charge vocabularies. Categorical indices are only meaningful
// together with the vocabulary they were produced with, so it is persisted in
// checkpoints.
struct Vocabulary {
  std::vector<std::string> atoms;
  std::vector<int> charges;

  static Vocabulary default_toy();

  std::size_t n_atom_types() const { return atoms.size(); }
  std::size_t n_charges() const { return charges.size(); }
  static constexpr std::size_t n_bond_types() { return kNumBondTypes; }

  std::optional<int> atom_index(std::string_view symbol) const;
  std::optional<int> charge_index(int charge) const;

  std::string serialize() const;
  static Vocabulary parse(std::string_view text);

  friend bool operator==(const Vocabulary &, const Vocabulary &) = default;
};

// One molecular graph with 3D coordinates. Atom types and charges are indices
// into a Vocabulary; bonds are a dense symmetric n x n matrix of BondOrder
// values with a zero diagonal.
struct Molecule {
  std::string name;
  std::vector<Vec3> coords;
  std::vector<int> atom_types;
  std::vector<int> charges;
  std::vector<int> bonds;

  Molecule() = default;
  explicit Molecule(std::size_t n);

  std::size_t size() const { return atom_types.size(); }

  int bond(std::size_t i, std::size_t j) const { return bonds[i * size() + j]; }
  void set_bond(std::size_t i, std::size_t j, int order);
  std::size_t bond_count() const;

  // Throws std::invalid_argument describing the first violated invariant.
  void validate(const Vocabulary &vocab) const;

  friend bool operator==(const Molecule &, const Molecule &) = default;
};

// Translates unmasked rows so their centroid is the origin; masked rows are
// returned unchanged. Throws when every row is masked.
std::vector<Vec3> zero_center(std::span<const Vec3> coords,
                              std::span<const double> mask = {});

// Padded, size-homogeneous group of molecules. Padded coordinates are zero and
// padded categorical slots hold kPadIndex.
struct MoleculeBatch {
  std::size_t n_atoms = 0;  // padded size
  std::vector<std::size_t> indices;
  std::vector<std::size_t> sizes;
  std::vector<Molecule> molecules;

  std::size_t batch_size() const { return molecules.size(); }
  std::size_t padded_atoms() const { return n_atoms * batch_size(); }
  std::size_t real_atoms() const;

  // Per-molecule padded views.
  std::vector<double> mask(std::size_t b) const;
  std::vector<Vec3> padded_coords(std::size_t b) const;
  std::vector<int> padded_atom_types(std::size_t b) const;
  std::vector<int> padded_charges(std::size_t b) const;
  std::vector<int> padded_bonds(std::size_t b) const;
};

// Groups molecules into size buckets and forms batches inside each bucket.
// The batch size of a bucket is the largest count whose padded atom total
// stays within `atoms_per_batch` (linear cost). Bucket contents and batch
// order are shuffled deterministically from `seed`.
std::vector<MoleculeBatch> bucket_batches(const std::vector<Molecule> &mols,
                                          std::size_t atoms_per_batch,
                                          std::uint64_t seed);

// Draws a molecule size from the empirical size histogram of `mols`.
// `max_size` optionally truncates the histogram.
std::size_t sample_size_distribution(const std::vector<Molecule> &mols,
                                     std::mt19937_64 &rng,
                                     std::optional<std::size_t> max_size = {});
std::size_t sample_size_distribution(std::span<const std::size_t> sizes,
                                     std::mt19937_64 &rng,
                                     std::optional<std::size_t> max_size = {});
}  // namespace semla
