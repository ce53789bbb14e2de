//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "semla/model.h"

namespace semla {
double median(std::vector<double> values);

// Runs `fn` `warmup` times untimed, then `repeats` timed runs; returns the
// per-run wall-clock seconds.
std::vector<double> time_runs(const std::function<void()> &fn,
                              std::size_t repeats, std::size_t warmup);

struct LatentTiming {
  std::size_t d_l = 0;
  std::size_t d_inv = 0;
  std::size_t n_atoms = 0;
  std::size_t parameters = 0;
  double pairwise_seconds = 0;  // median of one layer's pairwise messages
  double forward_seconds = 0;   // median of a full forward pass
};

// Times the first layer's latent message computation and the full forward
// pass on a fixed random molecule of `n_atoms` atoms, without gradient
// recording.
LatentTiming time_latent_attention(const SemlaConfig &config,
                                   std::size_t n_atoms, std::size_t repeats,
                                   std::size_t warmup, std::uint64_t seed,
                                   bool include_forward = true);
}  // namespace semla
