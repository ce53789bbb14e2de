//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/random.h"

#include <sstream>
#include <stdexcept>

namespace semla {
std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq { static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag),
                      static_cast<std::uint32_t>(tag >> 32) };
  return std::mt19937_64(seq);
}

RngStreams::RngStreams(std::uint64_t seed)
    : time(derive_rng(seed, 1)), noise(derive_rng(seed, 2)),
      categorical(derive_rng(seed, 3)) { }

std::string RngStreams::serialize() const {
  std::ostringstream os;
  os << time << '\n' << noise << '\n' << categorical << '\n';
  return os.str();
}

RngStreams RngStreams::parse(std::string_view text) {
  RngStreams r;
  std::istringstream is { std::string(text) };
  is >> r.time >> r.noise >> r.categorical;
  if (!is)
    throw std::invalid_argument("malformed RNG state");
  return r;
}

double sample_beta(std::mt19937_64 &rng, double a, double b) {
  if (!(a > 0) || !(b > 0))
    throw std::invalid_argument("sample_beta: parameters must be positive");
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

double sample_normal(std::mt19937_64 &rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  return d(rng);
}

double sample_uniform(std::mt19937_64 &rng) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  return d(rng);
}
}  // namespace semla
