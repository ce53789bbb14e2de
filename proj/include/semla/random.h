//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace semla {
// Independent generators per purpose so that, e.g., changing how many noise
// values a step draws does not shift the time samples.
struct RngStreams {
  std::mt19937_64 time;
  std::mt19937_64 noise;
  std::mt19937_64 categorical;

  RngStreams(): RngStreams(0) { }
  explicit RngStreams(std::uint64_t seed);

  std::string serialize() const;
  static RngStreams parse(std::string_view text);

  friend bool operator==(const RngStreams &, const RngStreams &) = default;
};

// Derives a generator from (seed, stream tag) through std::seed_seq.
std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t tag);

// Beta(a, b) via the ratio of two gamma draws.
double sample_beta(std::mt19937_64 &rng, double a, double b);

double sample_normal(std::mt19937_64 &rng);
double sample_uniform(std::mt19937_64 &rng);
}  // namespace semla
