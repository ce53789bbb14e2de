//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/sampler.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>
#include <mutex>
#include <thread>

#include "semla/flow.h"

namespace semla {
std::vector<double> make_log_schedule(std::size_t steps, double base) {
  if (steps == 0)
    throw std::invalid_argument("make_log_schedule: steps must be >= 1");
  if (!(base > 1.0))
    throw std::invalid_argument("make_log_schedule: base must be > 1");
  std::vector<double> t(steps + 1);
  const double log_base = std::log(base);
  for (std::size_t k = 0; k <= steps; ++k)
    t[k] = std::log(1.0 + static_cast<double>(k) * (base - 1.0)
                              / static_cast<double>(steps))
           / log_base;
  t.front() = 0.0;
  t.back() = 1.0;
  return t;
}

std::vector<Vec3> euler_coord_step(std::span<const Vec3> x,
                                   std::span<const Vec3> x1_hat, double t,
                                   double dt) {
  if (!(t < 1.0))
    throw std::invalid_argument("euler_coord_step: t must be < 1");
  if (t + dt > 1.0 + 1e-12)
    throw std::invalid_argument("euler_coord_step: step passes t = 1");
  if (x.size() != x1_hat.size())
    throw std::invalid_argument("euler_coord_step: size mismatch");
  if (t + dt >= 1.0)
    return { x1_hat.begin(), x1_hat.end() };
  const double w = dt / (1.0 - t);
  std::vector<Vec3> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    for (int k = 0; k < 3; ++k)
      out[i][k] = x[i][k] + w * (x1_hat[i][k] - x[i][k]);
  return out;
}

double resample_probability(double t, double dt) {
  if (!(t < 1.0))
    throw std::invalid_argument("resample_probability: t must be < 1");
  return std::clamp(dt / (1.0 - t), 0.0, 1.0);
}

int dfm_categorical_step(int state, std::span<const double> p1, double t,
                         double dt, std::mt19937_64 &rng) {
  double total = 0;
  for (double p: p1) {
    if (!(p >= 0))
      throw std::invalid_argument("dfm_categorical_step: negative probability");
    total += p;
  }
  if (p1.empty() || std::abs(total - 1.0) > 1e-6)
    throw std::invalid_argument("dfm_categorical_step: probabilities sum to "
                                + std::to_string(total));
  const double jump = sample_uniform(rng);
  const double pick = sample_uniform(rng);
  if (jump >= resample_probability(t, dt))
    return state;
  double cum = 0;
  int last = 0;
  for (std::size_t k = 0; k < p1.size(); ++k) {
    if (p1[k] > 0)
      last = static_cast<int>(k);
    cum += p1[k];
    if (pick * total < cum)
      return static_cast<int>(k);
  }
  return last;
}

Molecule generate_from(const ModelParams &params, const Molecule &z0,
                       std::span<const double> schedule, RngStreams &rng,
                       bool self_cond) {
  if (schedule.size() < 2 || schedule.front() != 0.0
      || schedule.back() != 1.0)
    throw std::invalid_argument("generate: schedule must run from 0 to 1");
  const SemlaConfig &c = params.config;
  const std::size_t n = z0.size();
  const std::size_t A = c.n_atom_types, Q = c.n_charges, B = c.n_bond_types;

  NoisyState z;
  z.coords = z0.coords;
  z.atoms = z0.atom_types;
  z.charges = z0.charges;
  z.bonds = z0.bonds;
  Prediction pred;
  NoGradScope no_grad;
  for (std::size_t k = 0; k + 1 < schedule.size(); ++k) {
    const double t = schedule[k], dt = schedule[k + 1] - t;
    z.t = t;
    pred = forward(params, z);
    if (self_cond)
      z.self_cond = pred.to_self_condition();

    const std::vector<double> x1 = pred.coords.to_vector();
    std::vector<Vec3> x1_hat(n);
    for (std::size_t i = 0; i < n; ++i)
      x1_hat[i] = { x1[i * 3], x1[i * 3 + 1], x1[i * 3 + 2] };
    z.coords = euler_coord_step(z.coords, x1_hat, t, dt);

    const auto pa = softmax_rows(pred.atom_logits.data(), A);
    const auto pq = softmax_rows(pred.charge_logits.data(), Q);
    const auto pb = softmax_rows(pred.bond_logits.data(), B);
    for (std::size_t i = 0; i < n; ++i)
      z.atoms[i] = dfm_categorical_step(
          z.atoms[i], std::span(pa).subspan(i * A, A), t, dt, rng.categorical);
    for (std::size_t i = 0; i < n; ++i)
      z.charges[i] = dfm_categorical_step(
          z.charges[i], std::span(pq).subspan(i * Q, Q), t, dt,
          rng.categorical);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        z.bonds[i * n + j] = z.bonds[j * n + i] = dfm_categorical_step(
            z.bonds[i * n + j], std::span(pb).subspan((i * n + j) * B, B), t,
            dt, rng.categorical);
  }

  Molecule out(n);
  out.coords = z.coords;
  out.atom_types = z.atoms;
  out.bonds = z.bonds;
  const auto logits = pred.charge_logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.subspan(i * Q, Q);
    out.charges[i] = static_cast<int>(
        std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

Molecule generate(const ModelParams &params, std::size_t n_atoms,
                  std::span<const double> schedule, RngStreams &rng,
                  bool self_cond) {
  return generate_from(params, sample_prior(n_atoms, params.config, rng),
                       schedule, rng, self_cond);
}

std::vector<Molecule> generate_many(const ModelParams &params,
                                    std::span<const std::size_t> sizes,
                                    std::uint64_t seed,
                                    const SampleOptions &options,
                                    std::size_t threads) {
  const std::vector<double> schedule =
      make_log_schedule(options.steps, options.schedule_base);
  std::vector<Molecule> out(sizes.size());
  std::atomic<std::size_t> next { 0 };
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < sizes.size(); i = next++) {
      try {
        RngStreams rng(derive_rng(seed, 0x5A4D504CULL + i)());
        out[i] = generate(params, sizes[i], schedule, rng, options.self_cond);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure)
          failure = std::current_exception();
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, sizes.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k)
      pool.emplace_back(worker);
    for (auto &th: pool)
      th.join();
  }
  if (failure)
    std::rethrow_exception(failure);
  return out;
}
}  // namespace semla
