//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/bench.h"

#include <algorithm>
#include <chrono>
#include <random>
#include <stdexcept>

#include "semla/random.h"

namespace semla {
double median(std::vector<double> values) {
  if (values.empty())
    throw std::invalid_argument("median of an empty set");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1)
    return upper;
  return 0.5 * (upper + *std::max_element(values.begin(), values.begin() + mid));
}

std::vector<double> time_runs(const std::function<void()> &fn,
                              std::size_t repeats, std::size_t warmup) {
  for (std::size_t k = 0; k < warmup; ++k)
    fn();
  std::vector<double> out;
  out.reserve(repeats);
  for (std::size_t k = 0; k < repeats; ++k) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    out.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now()
                                                - start)
                      .count());
  }
  return out;
}

LatentTiming time_latent_attention(const SemlaConfig &config,
                                   std::size_t n_atoms, std::size_t repeats,
                                   std::size_t warmup, std::uint64_t seed,
                                   bool include_forward) {
  config.validate();
  if (n_atoms == 0 || repeats == 0)
    throw std::invalid_argument("time_latent_attention: empty workload");
  const ModelParams params = init_params(config, seed);
  std::mt19937_64 rng = derive_rng(seed, 0x42454E43);

  NoisyState z;
  z.t = 0.5;
  z.coords.resize(n_atoms);
  for (Vec3 &v: z.coords)
    for (double &c: v)
      c = sample_normal(rng);
  z.atoms.resize(n_atoms);
  z.charges.resize(n_atoms);
  for (std::size_t i = 0; i < n_atoms; ++i) {
    z.atoms[i] = static_cast<int>(rng() % config.n_atom_types);
    z.charges[i] = static_cast<int>(rng() % config.n_charges);
  }
  z.bonds.assign(n_atoms * n_atoms, 0);
  for (std::size_t i = 0; i < n_atoms; ++i)
    for (std::size_t j = i + 1; j < n_atoms; ++j)
      z.bonds[i * n_atoms + j] = z.bonds[j * n_atoms + i] =
          static_cast<int>(rng() % config.n_bond_types);

  NoGradScope no_grad;
  const Embedded embedded = embed_inputs(params, z);
  const bool last = config.n_layers == 1;
  const auto pairwise = time_runs(
      [&] {
        latent_messages(params.layers[0], embedded.state, {}, &embedded.edge,
                        last, config.n_heads, config.d_edge);
      },
      repeats, warmup);

  LatentTiming t;
  t.d_l = config.d_l;
  t.d_inv = config.d_inv;
  t.n_atoms = n_atoms;
  t.parameters = params.parameter_count();
  t.pairwise_seconds = median(pairwise);
  if (include_forward)
    t.forward_seconds =
        median(time_runs([&] { forward(params, z); }, repeats, warmup));
  return t;
}
}  // namespace semla
