//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/metrics.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "semla/forcefield.h"

namespace semla {
ValenceTable ValenceTable::strict() {
  ValenceTable t;
  t.version_ = "strict-1";
  t.allow("H", 0, { 1 });
  t.allow("B", 0, { 3 });
  t.allow("C", 0, { 4 });
  t.allow("C", 1, { 3 });
  t.allow("C", -1, { 3 });
  t.allow("N", 0, { 3 });
  t.allow("N", 1, { 4 });
  t.allow("N", -1, { 2 });
  t.allow("O", 0, { 2 });
  t.allow("O", 1, { 3 });
  t.allow("O", -1, { 1 });
  t.allow("F", 0, { 1 });
  t.allow("Si", 0, { 4 });
  t.allow("P", 0, { 3, 5 });
  t.allow("P", 1, { 4 });
  t.allow("S", 0, { 2, 4, 6 });
  t.allow("S", 1, { 3 });
  t.allow("S", -1, { 1 });
  t.allow("Cl", 0, { 1 });
  t.allow("Br", 0, { 1 });
  t.allow("I", 0, { 1 });
  return t;
}

void ValenceTable::allow(const std::string &element, int charge,
                         std::set<int> sums) {
  sums_[{ element, charge }] = std::move(sums);
}

std::optional<std::set<int>> ValenceTable::allowed(const std::string &element,
                                                   int charge) const {
  const auto it = sums_.find({ element, charge });
  if (it == sums_.end())
    return std::nullopt;
  return it->second;
}

std::optional<int> ValenceTable::max_valence(const std::string &element) const {
  std::optional<int> best;
  for (const auto &[key, sums]: sums_)
    if (key.first == element && !sums.empty())
      best = std::max(best.value_or(0), *sums.rbegin());
  return best;
}

std::string ValenceTable::serialize() const {
  std::ostringstream os;
  os << "version=" << version_ << '\n';
  for (const auto &[key, sums]: sums_) {
    os << key.first << ' ' << key.second;
    for (int s: sums)
      os << ' ' << s;
    os << '\n';
  }
  return os.str();
}

std::vector<int> doubled_valences(const Molecule &m) {
  const std::size_t n = m.size();
  std::vector<int> out(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      switch (static_cast<BondOrder>(m.bond(i, j))) {
      case BondOrder::kNone: break;
      case BondOrder::kSingle: out[i] += 2; break;
      case BondOrder::kDouble: out[i] += 4; break;
      case BondOrder::kTriple: out[i] += 6; break;
      case BondOrder::kAromatic: out[i] += 3; break;
      default: throw std::invalid_argument("unknown bond order");
      }
    }
  return out;
}

namespace {
const std::string &element_of(const Molecule &m, const Vocabulary &vocab,
                              std::size_t i) {
  const int a = m.atom_types[i];
  if (a < 0 || static_cast<std::size_t>(a) >= vocab.n_atom_types())
    throw std::invalid_argument("atom type index out of range");
  return vocab.atoms[a];
}

int charge_of(const Molecule &m, const Vocabulary &vocab, std::size_t i) {
  const int c = m.charges[i];
  if (c < 0 || static_cast<std::size_t>(c) >= vocab.n_charges())
    throw std::invalid_argument("charge index out of range");
  return vocab.charges[c];
}
}  // namespace

double AtomStability::fraction() const {
  return stable.empty() ? 0.0
                        : static_cast<double>(n_stable)
                              / static_cast<double>(stable.size());
}

AtomStability atom_stability(const Molecule &m, const Vocabulary &vocab,
                             const ValenceTable &table) {
  const auto twice = doubled_valences(m);
  AtomStability out;
  out.stable.assign(m.size(), false);
  out.unknown.assign(m.size(), false);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto sums = table.allowed(element_of(m, vocab, i), charge_of(m, vocab, i));
    if (!sums) {
      out.unknown[i] = true;
      continue;
    }
    // Half orders from aromatic bonds round down.
    out.stable[i] = sums->count(twice[i] / 2) > 0;
    out.n_stable += out.stable[i];
  }
  return out;
}

bool molecule_stability(const Molecule &m, const Vocabulary &vocab,
                        const ValenceTable &table) {
  return atom_stability(m, vocab, table).n_stable == m.size();
}

bool is_connected(const Molecule &m) {
  const std::size_t n = m.size();
  if (n == 0)
    return false;
  std::vector<bool> seen(n, false);
  std::vector<std::size_t> stack { 0 };
  seen[0] = true;
  std::size_t count = 1;
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    for (std::size_t j = 0; j < n; ++j)
      if (!seen[j] && m.bond(i, j) != 0) {
        seen[j] = true;
        ++count;
        stack.push_back(j);
      }
  }
  return count == n;
}

bool validity_lite(const Molecule &m, const Vocabulary &vocab,
                   const ValenceTable &table) {
  const auto twice = doubled_valences(m);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto max = table.max_valence(element_of(m, vocab, i));
    if (!max || twice[i] > 2 * *max)
      return false;
  }
  return is_connected(m);
}

std::string atom_label(const std::string &element, int charge) {
  if (charge == 0)
    return element;
  return element + (charge > 0 ? "+" : "-") + std::to_string(std::abs(charge));
}

namespace {
// Individualisation-refinement canonical labelling. Colours are canonical
// ranks; refinement splits cells by the multiset of (bond order, neighbour
// colour) until stable. A leaf (all colours distinct) gives an ordering, and
// the lexicographically smallest certificate over the search tree is the
// canonical form.
class Canonizer {
public:
  Canonizer(const Molecule &m, std::vector<int> initial)
      : m_(m), n_(m.size()), initial_(std::move(initial)) {
    nbr_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < n_; ++j)
        if (i != j && m.bond(i, j) != 0)
          nbr_[i].push_back(j);
  }

  std::vector<int> run() {
    search(initial_);
    return best_;
  }

private:
  static std::vector<int> rank(const std::vector<std::vector<int>> &sig) {
    std::vector<std::vector<int>> sorted = sig;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    std::vector<int> out(sig.size());
    for (std::size_t i = 0; i < sig.size(); ++i)
      out[i] = static_cast<int>(
          std::lower_bound(sorted.begin(), sorted.end(), sig[i]) - sorted.begin());
    return out;
  }

  static std::size_t cells(const std::vector<int> &c) {
    return c.empty() ? 0 : static_cast<std::size_t>(*std::max_element(c.begin(), c.end())) + 1;
  }

  std::vector<int> refine(std::vector<int> colour) const {
    colour = rank(wrap(colour));
    for (;;) {
      std::vector<std::vector<int>> sig(n_);
      for (std::size_t i = 0; i < n_; ++i) {
        std::vector<int> around;
        around.reserve(nbr_[i].size());
        for (std::size_t j: nbr_[i])
          around.push_back(m_.bond(i, j) * static_cast<int>(n_ + 1) + colour[j]);
        std::sort(around.begin(), around.end());
        sig[i].reserve(around.size() + 1);
        sig[i].push_back(colour[i]);
        sig[i].insert(sig[i].end(), around.begin(), around.end());
      }
      std::vector<int> next = rank(sig);
      if (cells(next) == cells(colour))
        return colour;
      colour = std::move(next);
    }
  }

  static std::vector<std::vector<int>> wrap(const std::vector<int> &c) {
    std::vector<std::vector<int>> out(c.size());
    for (std::size_t i = 0; i < c.size(); ++i)
      out[i] = { c[i] };
    return out;
  }

  // Swapping two same-coloured atoms with identical bond rows (outside the
  // pair) is an automorphism fixing everything individualised so far, so
  // only one of them needs a branch.
  bool twins(std::size_t v, std::size_t w) const {
    for (std::size_t u = 0; u < n_; ++u)
      if (u != v && u != w && m_.bond(v, u) != m_.bond(w, u))
        return false;
    return true;
  }

  void search(const std::vector<int> &start) {
    const std::vector<int> colour = refine(start);
    if (cells(colour) == n_) {
      leaf(colour);
      return;
    }
    // First (lowest colour) non-singleton cell.
    std::vector<std::size_t> count(n_, 0);
    for (int c: colour)
      ++count[c];
    int target = 0;
    while (count[target] < 2)
      ++target;
    std::vector<std::size_t> tried;
    for (std::size_t v = 0; v < n_; ++v) {
      if (colour[v] != target)
        continue;
      bool redundant = false;
      for (std::size_t w: tried)
        redundant = redundant || twins(v, w);
      if (redundant)
        continue;
      tried.push_back(v);
      std::vector<int> child(n_);
      for (std::size_t i = 0; i < n_; ++i)
        child[i] = 2 * colour[i] + 1;
      child[v] = 2 * colour[v];
      search(child);
    }
  }

  void leaf(const std::vector<int> &colour) {
    std::vector<std::size_t> at(n_);
    for (std::size_t i = 0; i < n_; ++i)
      at[colour[i]] = i;
    std::vector<int> cert;
    cert.reserve(n_ + n_ * (n_ - 1) / 2);
    for (std::size_t p = 0; p < n_; ++p)
      cert.push_back(initial_[at[p]]);
    for (std::size_t p = 0; p < n_; ++p)
      for (std::size_t q = p + 1; q < n_; ++q)
        cert.push_back(m_.bond(at[p], at[q]));
    if (best_.empty() || cert < best_)
      best_ = std::move(cert);
  }

  const Molecule &m_;
  std::size_t n_;
  std::vector<int> initial_;
  std::vector<std::vector<std::size_t>> nbr_;
  // n initial colours in canonical order, then the upper triangle of the
  // permuted bond matrix.
  std::vector<int> best_;
};
}  // namespace

std::string canonical_key(const Molecule &m, const Vocabulary &vocab) {
  const std::size_t n = m.size();
  if (n == 0)
    return "";
  std::vector<std::string> labels(n);
  for (std::size_t i = 0; i < n; ++i)
    labels[i] = atom_label(element_of(m, vocab, i), charge_of(m, vocab, i));
  std::vector<std::string> distinct = labels;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<int> initial(n);
  for (std::size_t i = 0; i < n; ++i)
    initial[i] = static_cast<int>(
        std::lower_bound(distinct.begin(), distinct.end(), labels[i])
        - distinct.begin());

  const std::vector<int> cert = Canonizer(m, initial).run();
  std::string key;
  for (std::size_t p = 0; p < n; ++p) {
    if (p)
      key += '.';
    key += distinct[cert[p]];
  }
  std::string edges;
  std::size_t k = n;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = p + 1; q < n; ++q, ++k)
      if (cert[k] != 0) {
        edges += edges.empty() ? "|" : ",";
        edges += std::to_string(p) + '-' + std::to_string(q) + ':'
                 + std::to_string(cert[k]);
      }
  return key + edges;
}

double uniqueness(const std::vector<std::string> &keys) {
  if (keys.empty())
    return 0.0;
  const std::unordered_set<std::string> distinct(keys.begin(), keys.end());
  return static_cast<double>(distinct.size()) / static_cast<double>(keys.size());
}

double novelty(const std::vector<std::string> &keys,
               const std::unordered_set<std::string> &reference) {
  if (keys.empty())
    return 0.0;
  std::size_t novel = 0;
  for (const std::string &k: keys)
    novel += reference.count(k) == 0;
  return static_cast<double>(novel) / static_cast<double>(keys.size());
}

MoleculeMetrics evaluate_molecule(const Molecule &m, const Vocabulary &vocab,
                                  const ValenceTable &table) {
  MoleculeMetrics r;
  r.name = m.name;
  r.n_atoms = m.size();
  const AtomStability st = atom_stability(m, vocab, table);
  r.n_stable_atoms = st.n_stable;
  r.stable = st.n_stable == m.size();
  r.valid = validity_lite(m, vocab, table);
  r.key = canonical_key(m, vocab);
  const Strain s = surrogate_strain(m, vocab);
  r.energy = s.energy_per_atom;
  r.strain = s.strain_per_atom;
  r.strain_converged = s.converged;
  r.strain_diverged = s.diverged;
  return r;
}

MetricsReport evaluate(const std::vector<Molecule> &mols,
                       const Vocabulary &vocab, const ValenceTable &table,
                       const std::unordered_set<std::string> *reference,
                       std::size_t threads) {
  MetricsReport rep;
  rep.table_version = table.version();
  rep.molecules.resize(mols.size());
  if (threads == 0)
    threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::max<std::size_t>(1, std::min(threads, mols.size()));
  auto work = [&](std::size_t first) {
    for (std::size_t i = first; i < mols.size(); i += threads)
      rep.molecules[i] = evaluate_molecule(mols[i], vocab, table);
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k)
      pool.emplace_back(work, k);
    for (std::thread &t: pool)
      t.join();
  }

  std::size_t atoms = 0, stable_atoms = 0, stable = 0, valid = 0, used = 0;
  double energy = 0, strain = 0;
  std::vector<std::string> keys;
  for (const MoleculeMetrics &r: rep.molecules) {
    atoms += r.n_atoms;
    stable_atoms += r.n_stable_atoms;
    stable += r.stable;
    valid += r.valid;
    keys.push_back(r.key);
    if (r.strain_diverged) {
      ++rep.strain_excluded;
      continue;
    }
    energy += r.energy;
    strain += r.strain;
    ++used;
  }
  const double n = static_cast<double>(mols.size());
  if (!mols.empty()) {
    rep.atom_stability = atoms ? static_cast<double>(stable_atoms) / atoms : 0.0;
    rep.mol_stability = stable / n;
    rep.validity = valid / n;
    rep.uniqueness = uniqueness(keys);
  }
  if (used) {
    rep.energy_per_atom = energy / used;
    rep.strain_per_atom = strain / used;
  }
  if (reference)
    rep.novelty = novelty(keys, *reference);
  return rep;
}

namespace {
std::string csv_field(const std::string &s) {
  if (s.find_first_of(",\"\n") == std::string::npos)
    return s;
  std::string out = "\"";
  for (char c: s) {
    if (c == '"')
      out += '"';
    out += c;
  }
  return out + '"';
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}
}  // namespace

std::string MetricsReport::csv() const {
  std::string out = std::string(kMetricsCsvHeader) + '\n';
  for (const MoleculeMetrics &r: molecules) {
    const double frac = r.n_atoms ? static_cast<double>(r.n_stable_atoms) / r.n_atoms : 0.0;
    out += csv_field(r.name) + ',' + std::to_string(r.n_atoms) + ','
           + std::to_string(r.n_stable_atoms) + ',' + fmt(frac) + ','
           + (r.stable ? "1" : "0") + ',' + (r.valid ? "1" : "0") + ','
           + (r.strain_diverged ? "nan" : fmt(r.energy)) + ','
           + (r.strain_diverged ? "nan" : fmt(r.strain)) + ','
           + (r.strain_converged ? "1" : "0") + ',' + csv_field(r.key) + '\n';
  }
  return out;
}

std::string MetricsReport::summary(std::optional<double> sample_seconds,
                                   std::optional<std::size_t> nfe) const {
  std::ostringstream os;
  auto row = [&](const std::string &k, const std::string &v) {
    os << k << std::string(k.size() < 18 ? 18 - k.size() : 1, ' ') << v << '\n';
  };
  row("molecules", std::to_string(molecules.size()));
  row("parse_errors", std::to_string(n_parse_errors));
  row("atom_stability", fmt(atom_stability));
  row("mol_stability", fmt(mol_stability));
  row("validity", fmt(validity));
  row("uniqueness", fmt(uniqueness));
  row("novelty", novelty ? fmt(*novelty) : "n/a");
  row("energy", fmt(energy_per_atom) + " surrogate/atom");
  row("strain", fmt(strain_per_atom) + " surrogate/atom");
  row("strain_excluded", std::to_string(strain_excluded));
  row("sample_time_s", sample_seconds ? fmt(*sample_seconds) : "n/a");
  row("nfe", nfe ? std::to_string(*nfe) : "n/a");
  row("valence_table", table_version);
  return os.str();
}
}  // namespace semla
