//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/forcefield.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <stdexcept>

namespace semla {
namespace {
Vec3 sub(const Vec3 &a, const Vec3 &b) {
  return { a[0] - b[0], a[1] - b[1], a[2] - b[2] };
}
double dot(const Vec3 &a, const Vec3 &b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
Vec3 cross(const Vec3 &a, const Vec3 &b) {
  return { a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
           a[0] * b[1] - a[1] * b[0] };
}
void axpy(Vec3 &y, double a, const Vec3 &x) {
  for (int k = 0; k < 3; ++k)
    y[k] += a * x[k];
}
}  // namespace

double ForceFieldParams::covalent_radius(const std::string &element) {
  // Single-bond covalent radii (A).
  static const std::map<std::string, double> radii {
    { "H", 0.31 },  { "B", 0.84 },  { "C", 0.76 },  { "N", 0.71 },
    { "O", 0.66 },  { "F", 0.57 },  { "Si", 1.11 }, { "P", 1.07 },
    { "S", 1.05 },  { "Cl", 1.02 }, { "Br", 1.20 }, { "I", 1.39 },
  };
  const auto it = radii.find(element);
  return it == radii.end() ? 1.0 : it->second;
}

double ForceFieldParams::bond_length(const std::string &a, const std::string &b,
                                     int order) {
  double scale = 1.0;
  switch (static_cast<BondOrder>(order)) {
  case BondOrder::kDouble: scale = 0.87; break;
  case BondOrder::kTriple: scale = 0.78; break;
  case BondOrder::kAromatic: scale = 0.91; break;
  default: break;
  }
  return scale * (covalent_radius(a) + covalent_radius(b));
}

SurrogateForceField::SurrogateForceField(const Molecule &m,
                                         const Vocabulary &vocab,
                                         const ForceFieldParams &params)
    : n_(m.size()), params_(params) {
  std::vector<std::string> element(n_);
  for (std::size_t i = 0; i < n_; ++i) {
    if (m.atom_types[i] < 0
        || static_cast<std::size_t>(m.atom_types[i]) >= vocab.n_atom_types())
      throw std::invalid_argument("force field: atom type out of range");
    element[i] = vocab.atoms[m.atom_types[i]];
  }
  std::vector<std::vector<std::size_t>> nbr(n_);
  for (std::size_t i = 0; i < n_; ++i)
    for (std::size_t j = i + 1; j < n_; ++j)
      if (const int order = m.bond(i, j); order != 0) {
        bonds_.push_back(
            { i, j, ForceFieldParams::bond_length(element[i], element[j], order) });
        nbr[i].push_back(j);
        nbr[j].push_back(i);
      }

  for (std::size_t j = 0; j < n_; ++j) {
    const std::size_t degree = nbr[j].size();
    int doubles = 0, triples = 0, aromatic = 0;
    for (std::size_t i: nbr[j]) {
      const auto order = static_cast<BondOrder>(m.bond(i, j));
      doubles += order == BondOrder::kDouble;
      triples += order == BondOrder::kTriple;
      aromatic += order == BondOrder::kAromatic;
    }
    double theta0 = std::acos(-1.0 / 3.0);
    if (degree == 2 && (triples > 0 || doubles == 2))
      theta0 = std::numbers::pi;
    else if (degree == 3 && (doubles > 0 || aromatic > 0))
      theta0 = 2.0 * std::numbers::pi / 3.0;
    for (std::size_t a = 0; a < degree; ++a)
      for (std::size_t b = a + 1; b < degree; ++b)
        angles_.push_back({ nbr[j][a], j, nbr[j][b], theta0 });
  }

  // Clash pairs: more than two bonds apart (or disconnected).
  for (std::size_t i = 0; i < n_; ++i)
    for (std::size_t j = i + 1; j < n_; ++j) {
      bool near = m.bond(i, j) != 0;
      for (std::size_t k: nbr[i])
        near = near || m.bond(k, j) != 0;
      if (!near)
        pairs_.push_back({ i, j,
                           ForceFieldParams::covalent_radius(element[i])
                               + ForceFieldParams::covalent_radius(element[j])
                               + params_.clash_margin });
    }
}

double SurrogateForceField::energy(std::span<const Vec3> x,
                                   std::vector<Vec3> *grad) const {
  if (x.size() != n_)
    throw std::invalid_argument("force field: coordinate count mismatch");
  if (grad)
    grad->assign(n_, Vec3 { 0, 0, 0 });
  double e = 0;

  for (const Bond &b: bonds_) {
    const Vec3 d = sub(x[b.i], x[b.j]);
    const double r = std::sqrt(dot(d, d));
    const double dr = r - b.r0;
    e += params_.k_bond * dr * dr;
    if (grad && r > 0) {
      const double f = 2 * params_.k_bond * dr / r;
      axpy((*grad)[b.i], f, d);
      axpy((*grad)[b.j], -f, d);
    }
  }

  for (const Angle &a: angles_) {
    const Vec3 u = sub(x[a.i], x[a.j]);
    const Vec3 v = sub(x[a.k], x[a.j]);
    const double lu = std::sqrt(dot(u, u)), lv = std::sqrt(dot(v, v));
    if (lu == 0 || lv == 0)
      continue;
    const double s = std::sqrt(dot(cross(u, v), cross(u, v)));
    const double c = dot(u, v);
    const double theta = std::atan2(s, c);
    const double dtheta = theta - a.theta0;
    e += params_.k_angle * dtheta * dtheta;
    const double sin_t = s / (lu * lv);
    if (!grad || sin_t < 1e-12)
      continue;  // collinear: the direction of steepest change is undefined
    const double cos_t = c / (lu * lv);
    const double f = 2 * params_.k_angle * dtheta / sin_t;
    Vec3 gi, gk;
    for (int q = 0; q < 3; ++q) {
      gi[q] = f * (cos_t * u[q] / lu - v[q] / lv) / lu;
      gk[q] = f * (cos_t * v[q] / lv - u[q] / lu) / lv;
    }
    axpy((*grad)[a.i], 1, gi);
    axpy((*grad)[a.k], 1, gk);
    axpy((*grad)[a.j], -1, gi);
    axpy((*grad)[a.j], -1, gk);
  }

  for (const Pair &p: pairs_) {
    const Vec3 d = sub(x[p.i], x[p.j]);
    const double r = std::sqrt(dot(d, d));
    if (r >= p.r_clash)
      continue;
    const double gap = p.r_clash - r;
    e += params_.k_clash * gap * gap;
    if (grad && r > 0) {
      const double f = -2 * params_.k_clash * gap / r;
      axpy((*grad)[p.i], f, d);
      axpy((*grad)[p.j], -f, d);
    }
  }
  return e;
}

double surrogate_energy(const Molecule &m, const Vocabulary &vocab,
                        const ForceFieldParams &params) {
  if (m.size() == 0)
    return 0.0;
  const SurrogateForceField ff(m, vocab, params);
  return ff.energy(m.coords) / static_cast<double>(m.size());
}

Minimization minimize(const SurrogateForceField &ff, std::span<const Vec3> x0,
                      const MinimizeOptions &options) {
  const std::size_t n = ff.size();
  Minimization out;
  out.coords.assign(x0.begin(), x0.end());
  std::vector<Vec3> g;
  double e = ff.energy(out.coords, &g);
  out.initial_energy = out.final_energy = e;
  auto norm2 = [](const std::vector<Vec3> &v) {
    double s = 0;
    for (const Vec3 &a: v)
      s += dot(a, a);
    return s;
  };
  if (!std::isfinite(e)) {
    out.diverged = true;
    return out;
  }

  // Non-monotone Armijo rule against the largest of the last few energies
  // (Grippo-Lampariello-Lucidi), which lets Barzilai-Borwein steps work.
  // Every iterate still stays at or below the starting energy.
  constexpr std::size_t kMemory = 10;
  std::vector<double> recent { e };
  double alpha = 1e-3;
  std::vector<Vec3> trial(n), g_new;
  for (;;) {
    const double gg = norm2(g);
    out.grad_norm = std::sqrt(gg);
    if (!std::isfinite(gg)) {
      out.diverged = true;
      break;
    }
    if (out.grad_norm < options.grad_tolerance) {
      out.converged = true;
      break;
    }
    if (out.iterations >= options.max_iterations)
      break;

    const double ref = *std::max_element(recent.begin(), recent.end());
    double step = alpha, e_new = 0;
    bool accepted = false;
    for (int b = 0; b < 60 && !accepted; ++b) {
      for (std::size_t i = 0; i < n; ++i)
        for (int q = 0; q < 3; ++q)
          trial[i][q] = out.coords[i][q] - step * g[i][q];
      e_new = ff.energy(trial, &g_new);
      if (std::isfinite(e_new) && e_new <= ref - 1e-4 * step * gg)
        accepted = true;
      else
        step *= 0.5;
    }
    if (!accepted)
      break;  // no descent possible at round-off level

    double sy = 0, ss = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (int q = 0; q < 3; ++q) {
        const double s = trial[i][q] - out.coords[i][q];
        sy += s * (g_new[i][q] - g[i][q]);
        ss += s * s;
      }
    alpha = sy > 0 ? std::clamp(ss / sy, 1e-10, 1e3) : 2 * step;
    out.coords.swap(trial);
    g.swap(g_new);
    e = e_new;
    recent.push_back(e);
    if (recent.size() > kMemory)
      recent.erase(recent.begin());
    ++out.iterations;
  }
  out.final_energy = e;
  return out;
}

Strain surrogate_strain(const Molecule &m, const Vocabulary &vocab,
                        const ForceFieldParams &params,
                        const MinimizeOptions &options) {
  Strain s;
  if (m.size() == 0) {
    s.converged = true;
    return s;
  }
  const SurrogateForceField ff(m, vocab, params);
  const Minimization r = minimize(ff, m.coords, options);
  const double n = static_cast<double>(m.size());
  s.energy_per_atom = r.initial_energy / n;
  s.strain_per_atom = (r.initial_energy - r.final_energy) / n;
  s.converged = r.converged;
  s.diverged = r.diverged || !std::isfinite(s.strain_per_atom);
  s.relaxed = r.coords;
  return s;
}
}  // namespace semla
