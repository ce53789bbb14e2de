//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "semla/align.h"
#include "semla/checkpoint.h"
#include "semla/model.h"
#include "semla/molecule.h"
#include "semla/random.h"

namespace semla {
// Raised for NaN/Inf losses or gradients.
class NumericError: public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct FlowConfig {
  double sigma = 0.2;  // coordinate noise scale
  double beta_alpha = 2.0;
  double beta_beta = 1.0;
  double lambda_x = 1.0;
  double lambda_a = 0.2;
  double lambda_b = 0.5;
  double lambda_c = 1.0;
  double self_cond_prob = 0.5;  // share of batches trained self-conditioned

  void validate() const;
};

// Noise sample: zero-centered Gaussian coordinates and uniform categoricals
// (bonds drawn on the upper triangle and mirrored).
Molecule sample_prior(std::size_t n, const SemlaConfig &config,
                      RngStreams &rng);

double sample_time(const FlowConfig &cfg, RngStreams &rng);

// Permutes and rotates the whole prior sample (coordinates and categorical
// slots) by the optimal-transport alignment of its coordinates onto z1's.
Molecule align_prior(const Molecule &z0, const Molecule &z1,
                     Alignment *info = nullptr);

// Joint interpolant at time t between an aligned prior sample and data:
// coords ~ N(t x1 + (1-t) x0, sigma^2) then zero-centered; each categorical
// slot takes the data value with probability t and otherwise keeps the
// uniform prior draw, which yields P(a_t = a1) = t + (1-t)/|A|.
NoisyState interpolate(const Molecule &z0, const Molecule &z1, double t,
                       const FlowConfig &cfg, RngStreams &rng);

// Prior draw, alignment, time draw and interpolation for one molecule whose
// coordinates are already zero-centered.
NoisyState make_training_state(const Molecule &z1, const SemlaConfig &model,
                               const FlowConfig &cfg, RngStreams &rng);

struct LossBreakdown {
  Tensor total;
  double coord = 0;   // mean squared error per coordinate component
  double atom = 0;    // mean cross entropy per real atom
  double bond = 0;    // mean cross entropy per strict-upper pair
  double charge = 0;  // mean cross entropy per real atom
};

// Weighted flow-matching loss for one molecule. `target` holds the
// zero-centered data sample. Throws NumericError on non-finite inputs.
LossBreakdown flow_loss(const Prediction &pred, const Molecule &target,
                        const FlowConfig &cfg,
                        std::span<const double> mask = {});

// Mean of per-molecule losses; per-term values are averaged the same way.
LossBreakdown batch_loss(const ModelParams &params,
                         const std::vector<NoisyState> &states,
                         const std::vector<Molecule> &targets,
                         const FlowConfig &cfg);

struct TrainConfig {
  FlowConfig flow;
  SemlaConfig model;  // vocabulary sizes are taken from the data
  double lr = 3e-4;
  std::size_t warmup_steps = 2000;
  // Optional cosine decay from lr to lr_final between the end of warm-up and
  // `steps`; off by default.
  bool cosine_decay = false;
  double lr_final = 0.0;
  double grad_clip = 1.0;
  std::size_t atoms_per_batch = 4096;
  bool self_cond = true;
  std::uint64_t seed = 0;
  std::size_t steps = 1000;
  std::size_t checkpoint_every = 0;  // 0: only at the end

  void validate() const;
  std::string serialize() const;  // key = value lines
  // Unknown keys and malformed values throw std::invalid_argument.
  static TrainConfig parse(std::string_view text);
  // Applies key = value lines on top of *this.
  void apply(std::string_view text);
};

// Linear warm-up: lr * min(1, step / warmup_steps) for the 1-based step,
// then constant or, with cosine_decay, annealed to lr_final at `steps`.
double learning_rate(const TrainConfig &cfg, std::size_t step);

// AMSGrad with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
struct AmsGrad {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<std::vector<double>> m, v, v_max;  // parameter order
  std::size_t t = 0;

  void update(ModelParams &params,
              const std::vector<std::vector<double>> &grads, double lr);
};

// Scales gradients in place so their global L2 norm is at most max_norm;
// returns the norm before clipping.
double clip_global_norm(std::vector<std::vector<double>> &grads,
                        double max_norm);

struct StepStats {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  double coord = 0, atom = 0, bond = 0, charge = 0;
  double grad_norm = 0;  // before clipping
  bool self_conditioned = false;
};

// Deterministic sequence of size-bucketed batches: epoch e is
// bucket_batches(mols, atoms_per_batch, seed + e) and steps walk through
// epochs in order, so any step can be reproduced without replaying.
class BatchStream {
public:
  BatchStream(std::vector<Molecule> mols, std::size_t atoms_per_batch,
              std::uint64_t seed);

  // Molecules of the batch used at 1-based `step`.
  std::vector<Molecule> at(std::size_t step);
  std::size_t batches_per_epoch() const { return per_epoch_; }

private:
  std::vector<Molecule> mols_;
  std::size_t atoms_per_batch_;
  std::uint64_t seed_;
  std::size_t per_epoch_ = 0;
  std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  std::vector<MoleculeBatch> cache_;
};

class Trainer {
public:
  Trainer(ModelParams params, Vocabulary vocab, TrainConfig cfg);

  // One optimization step on `batch` (data coordinates need not be
  // centered). Throws NumericError on a non-finite loss or gradient.
  StepStats step(const std::vector<Molecule> &batch);

  const ModelParams &params() const { return params_; }
  const TrainConfig &config() const { return cfg_; }
  const Vocabulary &vocab() const { return vocab_; }
  std::size_t steps_done() const { return optimizer_.t; }

  // Full state: parameters, optimizer moments, RNG streams, config.
  Checkpoint checkpoint() const;
  static Trainer resume(const Checkpoint &ckpt);

private:
  ModelParams params_;
  Vocabulary vocab_;
  TrainConfig cfg_;
  AmsGrad optimizer_;
  RngStreams rng_;
};

// Gradients of `loss_fn(params)` with respect to every parameter, in
// for_each order.
std::vector<std::vector<double>> parameter_gradients(
    const ModelParams &params,
    const std::function<Tensor(const ModelParams &)> &loss_fn);
}  // namespace semla
