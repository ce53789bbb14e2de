//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/molecule.h"

#include <algorithm>
#include <map>
#include <numeric>
#include <sstream>

namespace semla {
Vocabulary Vocabulary::default_toy() {
  return { { "H", "C", "N", "O", "F", "P", "S", "Cl", "Br" },
           { -2, -1, 0, 1, 2, 3 } };
}

std::optional<int> Vocabulary::atom_index(std::string_view symbol) const {
  for (std::size_t i = 0; i < atoms.size(); ++i)
    if (atoms[i] == symbol)
      return static_cast<int>(i);
  return std::nullopt;
}

std::optional<int> Vocabulary::charge_index(int charge) const {
  for (std::size_t i = 0; i < charges.size(); ++i)
    if (charges[i] == charge)
      return static_cast<int>(i);
  return std::nullopt;
}

std::string Vocabulary::serialize() const {
  std::ostringstream os;
  os << "atoms=";
  for (std::size_t i = 0; i < atoms.size(); ++i)
    os << (i ? "," : "") << atoms[i];
  os << "\ncharges=";
  for (std::size_t i = 0; i < charges.size(); ++i)
    os << (i ? "," : "") << charges[i];
  os << '\n';
  return os.str();
}

namespace {
std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = s.find(sep, start);
    if (end == std::string_view::npos) {
      out.emplace_back(s.substr(start));
      break;
    }
    out.emplace_back(s.substr(start, end - start));
    start = end + 1;
  }
  return out;
}
}  // namespace

Vocabulary Vocabulary::parse(std::string_view text) {
  Vocabulary v;
  bool have_atoms = false, have_charges = false;
  for (const std::string &line: split(text, '\n')) {
    if (line.rfind("atoms=", 0) == 0) {
      v.atoms = split(std::string_view(line).substr(6), ',');
      have_atoms = true;
    } else if (line.rfind("charges=", 0) == 0) {
      for (const std::string &c: split(std::string_view(line).substr(8), ','))
        v.charges.push_back(std::stoi(c));
      have_charges = true;
    }
  }
  if (!have_atoms || !have_charges || v.atoms.empty() || v.charges.empty())
    throw std::invalid_argument("vocabulary text lacks atoms= or charges=");
  return v;
}

Molecule::Molecule(std::size_t n)
    : coords(n, Vec3 { 0, 0, 0 }), atom_types(n, 0), charges(n, 0),
      bonds(n * n, 0) { }

void Molecule::set_bond(std::size_t i, std::size_t j, int order) {
  bonds[i * size() + j] = order;
  bonds[j * size() + i] = order;
}

std::size_t Molecule::bond_count() const {
  std::size_t count = 0;
  for (std::size_t i = 0; i < size(); ++i)
    for (std::size_t j = i + 1; j < size(); ++j)
      if (bond(i, j) != 0)
        ++count;
  return count;
}

void Molecule::validate(const Vocabulary &vocab) const {
  const std::size_t n = size();
  if (n == 0)
    throw std::invalid_argument("molecule has no atoms");
  if (coords.size() != n || charges.size() != n || bonds.size() != n * n)
    throw std::invalid_argument("molecule field lengths are inconsistent");
  for (std::size_t i = 0; i < n; ++i) {
    if (atom_types[i] < 0
        || static_cast<std::size_t>(atom_types[i]) >= vocab.n_atom_types())
      throw std::invalid_argument("atom type index out of range at atom "
                                  + std::to_string(i));
    if (charges[i] < 0
        || static_cast<std::size_t>(charges[i]) >= vocab.n_charges())
      throw std::invalid_argument("charge index out of range at atom "
                                  + std::to_string(i));
    if (bond(i, i) != 0)
      throw std::invalid_argument("nonzero bond on diagonal at atom "
                                  + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) {
      if (bond(i, j) < 0 || bond(i, j) >= kNumBondTypes)
        throw std::invalid_argument("bond type out of range");
      if (bond(i, j) != bond(j, i))
        throw std::invalid_argument("bond matrix is not symmetric");
    }
  }
}

std::vector<Vec3> zero_center(std::span<const Vec3> coords,
                              std::span<const double> mask) {
  if (!mask.empty() && mask.size() != coords.size())
    throw std::invalid_argument("zero_center: mask length mismatch");
  auto on = [&](std::size_t i) { return mask.empty() || mask[i] != 0.0; };

  Vec3 c { 0, 0, 0 };
  std::size_t count = 0;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (!on(i))
      continue;
    for (int k = 0; k < 3; ++k)
      c[k] += coords[i][k];
    ++count;
  }
  if (count == 0)
    throw std::invalid_argument("zero_center: every atom is masked");
  for (double &v: c)
    v /= static_cast<double>(count);

  std::vector<Vec3> out(coords.begin(), coords.end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (on(i))
      for (int k = 0; k < 3; ++k)
        out[i][k] -= c[k];
  return out;
}

std::size_t MoleculeBatch::real_atoms() const {
  return std::accumulate(sizes.begin(), sizes.end(), std::size_t { 0 });
}

std::vector<double> MoleculeBatch::mask(std::size_t b) const {
  std::vector<double> m(n_atoms, 0.0);
  std::fill_n(m.begin(), sizes[b], 1.0);
  return m;
}

std::vector<Vec3> MoleculeBatch::padded_coords(std::size_t b) const {
  std::vector<Vec3> out(n_atoms, Vec3 { 0, 0, 0 });
  std::copy(molecules[b].coords.begin(), molecules[b].coords.end(),
            out.begin());
  return out;
}

std::vector<int> MoleculeBatch::padded_atom_types(std::size_t b) const {
  std::vector<int> out(n_atoms, kPadIndex);
  std::copy(molecules[b].atom_types.begin(), molecules[b].atom_types.end(),
            out.begin());
  return out;
}

std::vector<int> MoleculeBatch::padded_charges(std::size_t b) const {
  std::vector<int> out(n_atoms, kPadIndex);
  std::copy(molecules[b].charges.begin(), molecules[b].charges.end(),
            out.begin());
  return out;
}

std::vector<int> MoleculeBatch::padded_bonds(std::size_t b) const {
  const Molecule &m = molecules[b];
  std::vector<int> out(n_atoms * n_atoms, kPadIndex);
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j)
      out[i * n_atoms + j] = m.bond(i, j);
  return out;
}

std::vector<MoleculeBatch> bucket_batches(const std::vector<Molecule> &mols,
                                          std::size_t atoms_per_batch,
                                          std::uint64_t seed) {
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < mols.size(); ++i) {
    const std::size_t n = mols[i].size();
    if (n == 0)
      throw std::invalid_argument("bucket_batches: empty molecule at index "
                                  + std::to_string(i));
    if (n > atoms_per_batch)
      throw std::invalid_argument(
          "bucket_batches: molecule " + std::to_string(i) + " has "
          + std::to_string(n) + " atoms, more than atoms_per_batch "
          + std::to_string(atoms_per_batch));
    buckets[n].push_back(i);
  }

  std::mt19937_64 rng(seed);
  std::vector<MoleculeBatch> batches;
  for (auto &[n, members]: buckets) {
    std::shuffle(members.begin(), members.end(), rng);
    const std::size_t per_batch = atoms_per_batch / n;
    for (std::size_t start = 0; start < members.size(); start += per_batch) {
      MoleculeBatch batch;
      batch.n_atoms = n;
      const std::size_t end = std::min(members.size(), start + per_batch);
      for (std::size_t k = start; k < end; ++k) {
        batch.indices.push_back(members[k]);
        batch.sizes.push_back(mols[members[k]].size());
        batch.molecules.push_back(mols[members[k]]);
      }
      batches.push_back(std::move(batch));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

std::size_t sample_size_distribution(std::span<const std::size_t> sizes,
                                     std::mt19937_64 &rng,
                                     std::optional<std::size_t> max_size) {
  std::vector<std::size_t> pool;
  for (std::size_t s: sizes)
    if (!max_size || s <= *max_size)
      pool.push_back(s);
  if (pool.empty())
    throw std::invalid_argument(
        "sample_size_distribution: empty reference set");
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  return pool[pick(rng)];
}

std::size_t sample_size_distribution(const std::vector<Molecule> &mols,
                                     std::mt19937_64 &rng,
                                     std::optional<std::size_t> max_size) {
  std::vector<std::size_t> sizes;
  sizes.reserve(mols.size());
  for (const Molecule &m: mols)
    sizes.push_back(m.size());
  return sample_size_distribution(sizes, rng, max_size);
}
}  // namespace semla
