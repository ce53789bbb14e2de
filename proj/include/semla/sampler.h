//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "semla/model.h"
#include "semla/molecule.h"
#include "semla/random.h"

namespace semla {
inline constexpr double kDefaultScheduleBase = 10.0;
inline constexpr std::size_t kDefaultSampleSteps = 100;

// t_k = log(1 + k (base - 1) / steps) / log(base), k = 0..steps. Step sizes
// shrink towards t = 1. Throws for steps = 0 or base <= 1.
std::vector<double> make_log_schedule(std::size_t steps,
                                      double base = kDefaultScheduleBase);

// x + dt / (1 - t) (x1_hat - x); returns x1_hat exactly when t + dt = 1.
// Throws when t >= 1 or t + dt > 1.
std::vector<Vec3> euler_coord_step(std::span<const Vec3> x,
                                   std::span<const Vec3> x1_hat, double t,
                                   double dt);

// min(1, dt / (1 - t)).
double resample_probability(double t, double dt);

// Keeps `state` or, with resample_probability(t, dt), redraws it from p1.
// Always consumes two uniforms from `rng`. Throws if p1 has negative entries
// or does not sum to 1 within 1e-6.
int dfm_categorical_step(int state, std::span<const double> p1, double t,
                         double dt, std::mt19937_64 &rng);

struct SampleOptions {
  std::size_t steps = kDefaultSampleSteps;
  double schedule_base = kDefaultScheduleBase;
  bool self_cond = true;
};

// Integrates from the prior sample z0 (zero-centered coordinates). Atoms,
// bonds (upper triangle, mirrored) and charges evolve by discrete-flow
// resampling; the returned charges are the argmax of the last prediction.
// One forward pass per schedule step.
Molecule generate_from(const ModelParams &params, const Molecule &z0,
                       std::span<const double> schedule, RngStreams &rng,
                       bool self_cond);

Molecule generate(const ModelParams &params, std::size_t n_atoms,
                  std::span<const double> schedule, RngStreams &rng,
                  bool self_cond);

// Generates one molecule per entry of `sizes`. Molecule i uses its own RNG
// streams derived from (seed, i), so the output does not depend on
// `threads`.
std::vector<Molecule> generate_many(const ModelParams &params,
                                    std::span<const std::size_t> sizes,
                                    std::uint64_t seed,
                                    const SampleOptions &options,
                                    std::size_t threads = 1);
}  // namespace semla
