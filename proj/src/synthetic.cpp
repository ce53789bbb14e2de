//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/synthetic.h"

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "semla/forcefield.h"
#include "semla/metrics.h"
#include "semla/random.h"

namespace semla {
namespace {
struct Element {
  const char *symbol;
  int valence;
  double weight;
};

constexpr Element kHeavy[] = { { "C", 4, 0.6 }, { "N", 3, 0.2 }, { "O", 2, 0.2 } };

int index_of(const Vocabulary &vocab, const std::string &symbol) {
  const auto i = vocab.atom_index(symbol);
  if (!i)
    throw std::invalid_argument("synthetic: vocabulary lacks " + symbol);
  return *i;
}

Vec3 random_direction(std::mt19937_64 &rng) {
  for (;;) {
    Vec3 v { sample_normal(rng), sample_normal(rng), sample_normal(rng) };
    const double r = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (r > 1e-6)
      return { v[0] / r, v[1] / r, v[2] / r };
  }
}

// Places each atom next to its first bonded predecessor, rejecting spots
// closer than 1 A to anything already placed.
std::vector<Vec3> place(const Molecule &m, const Vocabulary &vocab,
                        std::mt19937_64 &rng) {
  const std::size_t n = m.size();
  std::vector<Vec3> x(n, Vec3 { 0, 0, 0 });
  for (std::size_t i = 1; i < n; ++i) {
    std::size_t parent = 0;
    while (parent < i && m.bond(parent, i) == 0)
      ++parent;
    if (parent == i)
      throw std::logic_error("synthetic: atom without earlier neighbour");
    const double r0 = ForceFieldParams::bond_length(
        vocab.atoms[m.atom_types[parent]], vocab.atoms[m.atom_types[i]],
        m.bond(parent, i));
    Vec3 best {};
    double best_gap = -1;
    for (int attempt = 0; attempt < 50; ++attempt) {
      const Vec3 d = random_direction(rng);
      const Vec3 p { x[parent][0] + r0 * d[0], x[parent][1] + r0 * d[1],
                     x[parent][2] + r0 * d[2] };
      double gap = 1e300;
      for (std::size_t j = 0; j < i; ++j) {
        if (j == parent)
          continue;
        double s = 0;
        for (int k = 0; k < 3; ++k)
          s += (p[k] - x[j][k]) * (p[k] - x[j][k]);
        gap = std::min(gap, std::sqrt(s));
      }
      if (gap > best_gap) {
        best_gap = gap;
        best = p;
      }
      if (gap > 1.0)
        break;
    }
    x[i] = best;
  }
  return x;
}
}  // namespace

Molecule random_molecule(std::mt19937_64 &rng, const Vocabulary &vocab,
                         const SyntheticOptions &options) {
  if (options.min_atoms > options.max_atoms || options.max_heavy == 0)
    throw std::invalid_argument("synthetic: empty size range");
  const int hydrogen = index_of(vocab, "H");
  const auto neutral = vocab.charge_index(0);
  if (!neutral)
    throw std::invalid_argument("synthetic: vocabulary lacks charge 0");
  std::discrete_distribution<int> pick_element({ kHeavy[0].weight,
                                                 kHeavy[1].weight,
                                                 kHeavy[2].weight });

  for (int attempt = 0; attempt < 10000; ++attempt) {
    const std::size_t heavy =
        1 + std::uniform_int_distribution<std::size_t>(0, options.max_heavy - 1)(rng);
    std::vector<int> element(heavy), free(heavy);
    std::vector<std::array<int, 3>> bonds;
    bool ok = true;
    for (std::size_t i = 0; i < heavy && ok; ++i) {
      element[i] = pick_element(rng);
      free[i] = kHeavy[element[i]].valence;
      if (i == 0)
        continue;
      std::vector<std::size_t> open;
      for (std::size_t j = 0; j < i; ++j)
        if (free[j] > 0)
          open.push_back(j);
      if (open.empty()) {
        ok = false;
        break;
      }
      const std::size_t j =
          open[std::uniform_int_distribution<std::size_t>(0, open.size() - 1)(rng)];
      int order = 1;
      if (free[j] >= 2 && free[i] >= 2
          && sample_uniform(rng) < options.double_bond_prob)
        order = 2;
      free[i] -= order;
      free[j] -= order;
      bonds.push_back({ static_cast<int>(j), static_cast<int>(i), order });
    }
    if (!ok)
      continue;
    std::size_t total = heavy;
    for (int f: free)
      total += static_cast<std::size_t>(f);
    // Every heavy atom needs at least one bond for the graph to be connected.
    if (total < options.min_atoms || total > options.max_atoms || total < 2)
      continue;

    Molecule m(total);
    std::size_t next = heavy;
    for (std::size_t i = 0; i < heavy; ++i) {
      m.atom_types[i] = index_of(vocab, kHeavy[element[i]].symbol);
      for (int h = 0; h < free[i]; ++h) {
        m.atom_types[next] = hydrogen;
        m.set_bond(i, next, 1);
        ++next;
      }
    }
    for (std::size_t i = 0; i < total; ++i)
      m.charges[i] = *neutral;
    for (const auto &b: bonds)
      m.set_bond(b[0], b[1], b[2]);
    if (!is_connected(m))
      continue;

    const SurrogateForceField ff(m, vocab);
    MinimizeOptions opt;
    opt.max_iterations = 20000;
    m.coords = zero_center(minimize(ff, place(m, vocab, rng), opt).coords);
    return m;
  }
  throw std::runtime_error("synthetic: no molecule within the size range");
}

std::vector<Molecule> synthetic_corpus(std::size_t count, std::uint64_t seed,
                                       const Vocabulary &vocab,
                                       const SyntheticOptions &options) {
  std::mt19937_64 rng = derive_rng(seed, 0x53594E54);
  std::vector<Molecule> out;
  std::unordered_set<std::string> seen;
  for (std::size_t attempt = 0; out.size() < count; ++attempt) {
    if (attempt > 1000 * (count + 1))
      throw std::runtime_error("synthetic: too few distinct molecules");
    Molecule m = random_molecule(rng, vocab, options);
    if (!seen.insert(canonical_key(m, vocab)).second)
      continue;
    m.name = "synthetic_" + std::to_string(out.size());
    out.push_back(std::move(m));
  }
  return out;
}
}  // namespace semla
