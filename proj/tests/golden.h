//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

// Hand-labelled 50-molecule corpus (tests/data/golden.sdf) and a checker
// comparing every graph metric against the labels.

#pragma once

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "semla/forcefield.h"
#include "semla/metrics.h"
#include "semla/sdf.h"

#ifndef SEMLA_TEST_DATA_DIR
#error "SEMLA_TEST_DATA_DIR must point at tests/data"
#endif

namespace semla::golden {
struct Label {
  std::string name;
  std::size_t n_atoms = 0, n_stable_atoms = 0;
  bool stable = false, valid = false;
  std::string group;
};

inline std::vector<Molecule> molecules() {
  return read_sdf_subset(read_text_file(SEMLA_TEST_DATA_DIR "/golden.sdf"),
                         Vocabulary::default_toy());
}

inline std::vector<Label> labels() {
  std::istringstream in(read_text_file(SEMLA_TEST_DATA_DIR "/golden_labels.csv"));
  std::string line;
  std::getline(in, line);  // header
  std::vector<Label> out;
  while (std::getline(in, line)) {
    if (line.empty())
      continue;
    std::vector<std::string> f;
    std::istringstream row(line);
    for (std::string cell; std::getline(row, cell, ',');)
      f.push_back(cell);
    if (f.size() != 6)
      throw std::runtime_error("golden labels: bad row '" + line + "'");
    out.push_back({ f[0], std::stoul(f[1]), std::stoul(f[2]), f[3] == "1",
                    f[4] == "1", f[5] });
  }
  return out;
}

struct Result {
  std::vector<std::string> mismatches;
  double uniqueness = 0, expected_uniqueness = 0;
  double min_strain = 0;
  double max_relaxed_strain = 0;  // strain of the already-relaxed geometries
};

inline Result check() {
  const Vocabulary vocab = Vocabulary::default_toy();
  const ValenceTable table = ValenceTable::strict();
  const auto mols = molecules();
  const auto lab = labels();
  Result r;
  if (mols.size() != lab.size()) {
    r.mismatches.push_back("record count " + std::to_string(mols.size())
                           + " vs " + std::to_string(lab.size()) + " labels");
    return r;
  }
  std::vector<std::string> keys;
  std::map<std::string, std::string> group_of_key, key_of_group;
  r.min_strain = 1e300;
  for (std::size_t i = 0; i < mols.size(); ++i) {
    const Molecule &m = mols[i];
    const Label &l = lab[i];
    auto miss = [&](const std::string &what) {
      r.mismatches.push_back(l.name + ": " + what);
    };
    if (m.name != l.name)
      miss("name " + m.name);
    if (m.size() != l.n_atoms)
      miss("atom count");
    if (atom_stability(m, vocab, table).n_stable != l.n_stable_atoms)
      miss("stable atom count");
    if (molecule_stability(m, vocab, table) != l.stable)
      miss("molecule stability");
    if (validity_lite(m, vocab, table) != l.valid)
      miss("validity");
    const std::string key = canonical_key(m, vocab);
    keys.push_back(key);
    // Same group <=> same key.
    if (auto it = group_of_key.find(key); it != group_of_key.end() && it->second != l.group)
      miss("key shared with group " + it->second);
    if (auto it = key_of_group.find(l.group); it != key_of_group.end() && it->second != key)
      miss("key differs within group " + l.group);
    group_of_key[key] = l.group;
    key_of_group[l.group] = key;

    const Strain s = surrogate_strain(m, vocab);
    r.min_strain = std::min(r.min_strain, s.strain_per_atom);
    // Pre-minimise well past the default iteration cap: sp2 planarity is a
    // quartic mode and can need ~1e5 steps to reach the gradient tolerance.
    Molecule relaxed = m;
    relaxed.coords = minimize(SurrogateForceField(m, vocab), m.coords,
                              { .grad_tolerance = 1e-6, .max_iterations = 1000000 })
                         .coords;
    r.max_relaxed_strain = std::max(
        r.max_relaxed_strain, std::abs(surrogate_strain(relaxed, vocab).strain_per_atom));
  }
  r.uniqueness = uniqueness(keys);
  r.expected_uniqueness =
      static_cast<double>(key_of_group.size()) / static_cast<double>(lab.size());
  if (r.uniqueness != r.expected_uniqueness)
    r.mismatches.push_back("uniqueness");
  return r;
}
}  // namespace semla::golden
