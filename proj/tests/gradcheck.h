//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

// Central finite-difference oracle used by the gradient tests. It only calls
// the function under test in no-gradient mode, so it is independent of the
// backward rules it checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "semla/tensor.h"

namespace semla::testing {
using ScalarFn = std::function<Tensor(const std::vector<Tensor> &)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries whose
// true gradient is at the level of finite-difference round-off from
// dominating; above it the comparison is purely relative.
inline double rel_error(double analytic, double numeric, double floor) {
  const double denom = std::max({ std::abs(analytic), std::abs(numeric),
                                  floor });
  return std::abs(analytic - numeric) / denom;
}

inline std::vector<std::vector<double>>
analytic_grads(const ScalarFn &fn, const std::vector<Tensor> &inputs) {
  Tape tape;
  TapeScope scope(tape);
  std::vector<Tensor> watched;
  for (const Tensor &t: inputs)
    watched.push_back(tape.watch(t));
  Tensor out = fn(watched);
  tape.backward(out);
  std::vector<std::vector<double>> grads;
  for (const Tensor &t: watched) {
    auto g = tape.grad(t);
    grads.emplace_back(g.begin(), g.end());
  }
  return grads;
}

inline double eval_scalar(const ScalarFn &fn,
                          const std::vector<Tensor> &inputs) {
  NoGradScope no_grad;
  return fn(inputs).item();
}

inline GradCheckResult grad_check(const ScalarFn &fn,
                                  const std::vector<Tensor> &inputs,
                                  double h = 1e-5, double floor = 1e-4) {
  const auto grads = analytic_grads(fn, inputs);
  GradCheckResult res;
  std::vector<Tensor> probe = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    std::vector<double> values = inputs[t].to_vector();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      probe[t] = Tensor(inputs[t].shape(), values);
      const double up = eval_scalar(fn, probe);
      values[i] = orig - h;
      probe[t] = Tensor(inputs[t].shape(), values);
      const double down = eval_scalar(fn, probe);
      values[i] = orig;
      probe[t] = inputs[t];

      const double numeric = (up - down) / (2.0 * h);
      res.max_rel_error = std::max(res.max_rel_error,
                                   rel_error(grads[t][i], numeric, floor));
      res.max_abs_error = std::max(res.max_abs_error,
                                   std::abs(grads[t][i] - numeric));
      ++res.checked;
    }
  }
  return res;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64 &rng,
                            double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (double &x: v)
    x = dist(rng);
  return { std::move(shape), std::move(v) };
}

// Contracts an arbitrary output with fixed random weights so every output
// entry contributes to the checked scalar.
inline Tensor readout(const Tensor &out, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  return sum_all(mul(out, random_tensor(out.shape(), rng, -1.0, 1.0)));
}
}  // namespace semla::testing
