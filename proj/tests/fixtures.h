//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dense_oracle.h"
#include "semla/model.h"

namespace semla::testing {
// Random interpolated state with symmetric bonds and, optionally, a random
// self-conditioning payload.
inline NoisyState random_state(std::size_t n, const SemlaConfig &c,
                               std::mt19937_64 &rng, bool self_cond = true) {
  std::uniform_real_distribution<double> u(-1.5, 1.5), p(0.05, 1.0);
  std::uniform_int_distribution<int> atom(0, c.n_atom_types - 1),
      charge(0, c.n_charges - 1), bond(0, c.n_bond_types - 1);
  NoisyState z;
  z.t = p(rng) * 0.9;
  z.coords.resize(n);
  for (auto &v: z.coords)
    for (double &x: v)
      x = u(rng);
  z.coords = zero_center(z.coords);
  for (std::size_t i = 0; i < n; ++i) {
    z.atoms.push_back(atom(rng));
    z.charges.push_back(charge(rng));
  }
  z.bonds.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      z.bonds[i * n + j] = z.bonds[j * n + i] = bond(rng);

  if (self_cond) {
    SelfCondition s;
    s.coords.resize(n);
    for (auto &v: s.coords)
      for (double &x: v)
        x = u(rng);
    s.coords = zero_center(s.coords);
    auto probs = [&](std::size_t rows, std::size_t width) {
      std::vector<double> v(rows * width);
      for (std::size_t r = 0; r < rows; ++r) {
        double total = 0;
        for (std::size_t k = 0; k < width; ++k)
          total += v[r * width + k] = p(rng);
        for (std::size_t k = 0; k < width; ++k)
          v[r * width + k] /= total;
      }
      return v;
    };
    s.atom_probs = probs(n, c.n_atom_types);
    s.charge_probs = probs(n, c.n_charges);
    s.bond_probs = probs(n * n, c.n_bond_types);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j)
        std::copy_n(s.bond_probs.begin() + (j * n + i) * c.n_bond_types,
                    c.n_bond_types,
                    s.bond_probs.begin() + (i * n + j) * c.n_bond_types);
    z.self_cond = s;
  }
  return z;
}

inline std::vector<std::size_t> random_permutation(std::size_t n,
                                                   std::mt19937_64 &rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

// New atom i is old atom perm[i].
inline NoisyState permute_state(const NoisyState &z,
                                const std::vector<std::size_t> &perm,
                                const SemlaConfig &c) {
  const std::size_t n = z.size();
  NoisyState out = z;
  for (std::size_t i = 0; i < n; ++i) {
    out.coords[i] = z.coords[perm[i]];
    out.atoms[i] = z.atoms[perm[i]];
    out.charges[i] = z.charges[perm[i]];
    if (!z.mask.empty())
      out.mask[i] = z.mask[perm[i]];
    for (std::size_t j = 0; j < n; ++j)
      out.bonds[i * n + j] = z.bonds[perm[i] * n + perm[j]];
  }
  if (z.self_cond) {
    const SelfCondition &s = *z.self_cond;
    SelfCondition &o = *out.self_cond;
    const std::size_t A = c.n_atom_types, Q = c.n_charges, B = c.n_bond_types;
    for (std::size_t i = 0; i < n; ++i) {
      o.coords[i] = s.coords[perm[i]];
      std::copy_n(s.atom_probs.begin() + perm[i] * A, A,
                  o.atom_probs.begin() + i * A);
      std::copy_n(s.charge_probs.begin() + perm[i] * Q, Q,
                  o.charge_probs.begin() + i * Q);
      for (std::size_t j = 0; j < n; ++j)
        std::copy_n(s.bond_probs.begin() + (perm[i] * n + perm[j]) * B, B,
                    o.bond_probs.begin() + (i * n + j) * B);
    }
  }
  return out;
}

inline NoisyState transform_state(const NoisyState &z, const oracle::Mat3 &r,
                                  const Vec3 &t) {
  NoisyState out = z;
  for (auto &v: out.coords)
    v = oracle::apply(r, v, t);
  if (out.self_cond)
    for (auto &v: out.self_cond->coords)
      v = oracle::apply(r, v, t);
  return out;
}

// Rows of a (n, ...) tensor reordered so new row i is old row perm[i]; for
// pair tensors both leading axes are permuted.
inline Tensor permute_rows(const Tensor &x,
                           const std::vector<std::size_t> &perm) {
  const std::size_t n = x.dim(0), inner = x.size() / n;
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.data().begin() + perm[i] * inner, inner,
                v.begin() + i * inner);
  return Tensor(x.shape(), v);
}

inline Tensor permute_pairs(const Tensor &x,
                            const std::vector<std::size_t> &perm) {
  const std::size_t n = x.dim(0), inner = x.size() / (n * n);
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(x.data().begin() + (perm[i] * n + perm[j]) * inner, inner,
                  v.begin() + (i * n + j) * inner);
  return Tensor(x.shape(), v);
}

// A subset of model parameters exposed as a flat input list for grad_check.
struct ParamSlice {
  ModelParams base;
  std::vector<std::string> names;
  std::vector<Tensor> values;

  ModelParams with(const std::vector<Tensor> &replacement) const {
    ModelParams p = base;
    std::size_t k = 0;
    p.for_each([&](const std::string &name, Tensor &t) {
      if (k < names.size() && name == names[k])
        t = replacement[k++];
    });
    return p;
  }
};

inline ParamSlice select_params(const ModelParams &params,
                                const std::string &prefix = "") {
  ParamSlice s { params, {}, {} };
  params.for_each([&](const std::string &name, const Tensor &t) {
    if (name.rfind(prefix, 0) == 0) {
      s.names.push_back(name);
      s.values.push_back(t);
    }
  });
  return s;
}
}  // namespace semla::testing
