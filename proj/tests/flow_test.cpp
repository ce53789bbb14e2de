//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "dense_oracle.h"
#include "fixtures.h"
#include "gradcheck.h"
#include "ot_oracle.h"
#include "semla/assignment.h"
#include "semla/flow.h"
#include "toy_molecules.h"

namespace semla {
namespace {
std::vector<Vec3> random_cloud(std::size_t n, std::mt19937_64 &rng) {
  std::normal_distribution<double> g;
  std::vector<Vec3> x(n);
  for (auto &v: x)
    for (double &c: v)
      c = g(rng);
  return zero_center(x);
}

SemlaConfig toy_config() { return SemlaConfig::toy(Vocabulary::default_toy()); }

// Pearson statistic against a uniform histogram. With 8 degrees of freedom
// (nine categories) the 0.999 quantile is 26.12.
double chi_square_uniform(const std::vector<double> &counts) {
  double total = 0;
  for (double k: counts)
    total += k;
  const double expected = total / counts.size();
  double chi2 = 0;
  for (double k: counts)
    chi2 += (k - expected) * (k - expected) / expected;
  return chi2;
}
constexpr double kChi2Dof8Q999 = 26.12;

// --- assignment ------------------------------------------------------------------

TEST(Assignment, SmallExample) {
  // Optimum picks (0,1), (1,0), (2,2) with cost 1 + 2 + 2 = 5.
  const std::vector<double> c { 4, 1, 3, 2, 0, 5, 3, 2, 2 };
  const auto col = solve_assignment(c, 3);
  EXPECT_EQ(col, (std::vector<std::size_t> { 1, 0, 2 }));
}

TEST(Assignment, MatchesBruteForceOnRandomMatrices) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 10);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 7;
    std::vector<double> c(n * n);
    for (double &v: c)
      v = u(rng);
    const auto col = solve_assignment(c, n);
    double got = 0;
    for (std::size_t i = 0; i < n; ++i)
      got += c[i * n + col[i]];
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    double best = 1e300;
    do {
      double total = 0;
      for (std::size_t i = 0; i < n; ++i)
        total += c[i * n + p[i]];
      best = std::min(best, total);
    } while (std::next_permutation(p.begin(), p.end()));
    EXPECT_NEAR(got, best, 1e-12);
    std::vector<std::size_t> sorted = col;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> expected(n);
    std::iota(expected.begin(), expected.end(), 0);
    EXPECT_EQ(sorted, expected);
  }
}

TEST(Assignment, RejectsBadInput) {
  EXPECT_THROW(solve_assignment(std::vector<double>(5), 2),
               std::invalid_argument);
  EXPECT_THROW(solve_assignment(std::vector<double> { 0, 1, 2, NAN }, 2),
               std::invalid_argument);
  EXPECT_TRUE(solve_assignment({}, 0).empty());
}

// --- Kabsch and OT --------------------------------------------------------------

TEST(Kabsch, RecoversRandomRotation) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_cloud(7, rng);
    const auto r = oracle::random_orthogonal(rng, false);
    std::vector<Vec3> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
      y[i] = oracle::apply(r, x[i]);
    const Mat3 got = kabsch(x, y);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        EXPECT_NEAR(got[a][b], r[a][b], 1e-10);
  }
}

TEST(Kabsch, ReturnsProperRotationForReflectedInput) {
  std::mt19937_64 rng(3);
  auto x = random_cloud(6, rng);
  const auto r = oracle::random_orthogonal(rng, true);
  std::vector<Vec3> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = oracle::apply(r, x[i]);
  const Mat3 m = kabsch(x, y);
  Eigen::Matrix3d e;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      e(a, b) = m[a][b];
  EXPECT_NEAR(e.determinant(), 1.0, 1e-12);
  EXPECT_NEAR((e * e.transpose() - Eigen::Matrix3d::Identity()).norm(), 0.0,
              1e-12);
}

TEST(EquivariantOt, RecoversNinetyDegreeRotation) {
  std::mt19937_64 rng(4);
  auto x1 = random_cloud(8, rng);
  std::vector<Vec3> x0(x1.size());
  for (std::size_t i = 0; i < x1.size(); ++i)
    x0[i] = { -x1[i][1], x1[i][0], x1[i][2] };  // 90 degrees about z
  const Alignment a = equivariant_ot_align(x0, x1);
  EXPECT_LT(a.cost, 1e-12);
  std::vector<std::size_t> id(x1.size());
  std::iota(id.begin(), id.end(), 0);
  EXPECT_EQ(a.perm, id);
}

TEST(EquivariantOt, RecoversPermutationExactly) {
  std::mt19937_64 rng(6);
  auto x1 = random_cloud(9, rng);
  const auto perm = testing::random_permutation(x1.size(), rng);
  // x0[perm[i]] = x1[i], so the recovered matching must be perm itself.
  std::vector<Vec3> x0(x1.size());
  for (std::size_t i = 0; i < x1.size(); ++i)
    x0[perm[i]] = x1[i];
  const Alignment a = equivariant_ot_align(x0, x1);
  EXPECT_LT(a.cost, 1e-12);
  EXPECT_EQ(a.perm, perm);
}

TEST(EquivariantOt, CostTraceIsNonIncreasingAndBeatsIdentity) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto x0 = random_cloud(3 + trial % 10, rng);
    auto x1 = random_cloud(x0.size(), rng);
    const Alignment a = equivariant_ot_align(x0, x1);
    for (std::size_t k = 1; k < a.cost_trace.size(); ++k)
      EXPECT_LE(a.cost_trace[k], a.cost_trace[k - 1]);
    EXPECT_LE(a.cost, a.identity_cost);
    EXPECT_NEAR(a.cost, mean_squared_distance(a.aligned, x1), 1e-12);
    EXPECT_NEAR(a.identity_cost, mean_squared_distance(x0, x1), 1e-12);
  }
}

TEST(EquivariantOt, IdentityStartAloneIsNonIncreasingToo) {
  std::mt19937_64 rng(9);
  auto x0 = random_cloud(6, rng), x1 = random_cloud(6, rng);
  const Alignment a = equivariant_ot_align(x0, x1, { .multi_start = false });
  EXPECT_EQ(a.starts, 1u);
  EXPECT_EQ(a.cost_trace.front(), a.identity_cost);
  for (std::size_t k = 1; k < a.cost_trace.size(); ++k)
    EXPECT_LE(a.cost_trace[k], a.cost_trace[k - 1]);
  EXPECT_TRUE(a.converged);
}

TEST(EquivariantOt, MatchesExhaustiveOracleOrIsCertifiedLocalOptimum) {
  std::mt19937_64 rng(10);
  int optimal = 0;
  const int trials = 60;
  for (int trial = 0; trial < trials; ++trial) {
    auto x0 = random_cloud(2 + trial % 5, rng);
    auto x1 = random_cloud(x0.size(), rng);
    const Alignment a = equivariant_ot_align(x0, x1);
    const double best = oracle::brute_force_ot_cost(x0, x1);
    EXPECT_GE(a.cost, best - 1e-9);
    if (a.cost - best <= 1e-9)
      ++optimal;
    else
      EXPECT_TRUE(oracle::certified_local_optimum(x0, x1, a));
  }
  EXPECT_GE(optimal, trials - 2);
}

TEST(EquivariantOt, SizeMismatchThrows) {
  std::vector<Vec3> a(3), b(4);
  EXPECT_THROW(equivariant_ot_align(a, b), std::invalid_argument);
}

// --- prior and time ---------------------------------------------------------------

TEST(Prior, CentroidIsZeroAndBondsSymmetric) {
  RngStreams rng(1);
  const SemlaConfig c = toy_config();
  for (std::size_t n: { 1, 2, 7, 15 }) {
    Molecule z = sample_prior(n, c, rng);
    Vec3 sum { 0, 0, 0 };
    for (const Vec3 &v: z.coords)
      for (int k = 0; k < 3; ++k)
        sum[k] += v[k];
    for (double s: sum)
      EXPECT_NEAR(s, 0.0, 1e-12);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(z.bond(i, i), 0);
      for (std::size_t j = 0; j < n; ++j)
        EXPECT_EQ(z.bond(i, j), z.bond(j, i));
    }
  }
  Molecule single = sample_prior(1, c, rng);
  EXPECT_EQ(single.coords[0], (Vec3 { 0, 0, 0 }));
  EXPECT_THROW(sample_prior(0, c, rng), std::invalid_argument);
}

TEST(Prior, AtomHistogramIsUniform) {
  RngStreams rng(2);
  const SemlaConfig c = toy_config();
  std::vector<double> counts(c.n_atom_types, 0);
  const std::size_t draws = 100000;
  for (std::size_t d = 0; d < draws / 10; ++d)
    for (int a: sample_prior(10, c, rng).atom_types)
      ++counts[a];
  ASSERT_EQ(counts.size(), 9u);
  EXPECT_LT(chi_square_uniform(counts), kChi2Dof8Q999);
}

TEST(Time, BetaTwoOneMomentsAndCdf) {
  RngStreams rng(3);
  FlowConfig cfg;
  const int draws = 100000;
  double mean = 0;
  int below_half = 0;
  for (int i = 0; i < draws; ++i) {
    const double t = sample_time(cfg, rng);
    ASSERT_GE(t, 0.0);
    ASSERT_LE(t, 1.0);
    mean += t / draws;
    below_half += t <= 0.5;
  }
  EXPECT_NEAR(mean, 2.0 / 3.0, 0.01);
  EXPECT_NEAR(below_half / double(draws), 0.25, 0.01);
}

// --- interpolation ----------------------------------------------------------------

TEST(Interpolate, EndpointsAndErrors) {
  RngStreams rng(4);
  const SemlaConfig c = toy_config();
  Molecule z1 = testing::formaldehyde();
  z1.coords = zero_center(z1.coords);
  Molecule z0 = align_prior(sample_prior(z1.size(), c, rng), z1);
  FlowConfig tiny;
  tiny.sigma = 1e-12;
  NoisyState at_one = interpolate(z0, z1, 1.0, tiny, rng);
  for (std::size_t i = 0; i < z1.size(); ++i)
    for (int k = 0; k < 3; ++k)
      EXPECT_NEAR(at_one.coords[i][k], z1.coords[i][k], 1e-10);
  EXPECT_EQ(at_one.atoms, z1.atom_types);
  EXPECT_EQ(at_one.charges, z1.charges);
  EXPECT_EQ(at_one.bonds, z1.bonds);

  NoisyState at_zero = interpolate(z0, z1, 0.0, tiny, rng);
  EXPECT_EQ(at_zero.atoms, z0.atom_types);
  EXPECT_EQ(at_zero.bonds, z0.bonds);

  EXPECT_THROW(interpolate(z0, z1, 1.5, tiny, rng), std::invalid_argument);
  EXPECT_THROW(interpolate(z0, z1, -0.1, tiny, rng), std::invalid_argument);
  EXPECT_THROW(interpolate(sample_prior(2, c, rng), z1, 0.5, tiny, rng),
               std::invalid_argument);
}

TEST(Interpolate, HalfwayFrequencyWithFiveTypes) {
  // |A| = 5, t = 0.5: P(a_t = a1) = 0.5 + 0.5 / 5 = 0.6.
  SemlaConfig c = toy_config();
  c.n_atom_types = 5;
  RngStreams rng(5);
  Molecule z1(1);
  z1.atom_types[0] = 3;
  FlowConfig cfg;
  const int draws = 100000;
  int hits = 0;
  for (int d = 0; d < draws; ++d) {
    Molecule z0 = sample_prior(1, c, rng);
    hits += interpolate(z0, z1, 0.5, cfg, rng).atoms[0] == 3;
  }
  EXPECT_NEAR(hits / double(draws), 0.6, 0.005);
}

TEST(Interpolate, UniformMarginalAtTimeZero) {
  const SemlaConfig c = toy_config();
  RngStreams rng(6);
  Molecule z1(1);
  z1.atom_types[0] = 1;
  FlowConfig cfg;
  std::vector<double> counts(c.n_atom_types, 0);
  const int draws = 50000;
  for (int d = 0; d < draws; ++d)
    ++counts[interpolate(sample_prior(1, c, rng), z1, 0.0, cfg, rng).atoms[0]];
  ASSERT_EQ(counts.size(), 9u);
  EXPECT_LT(chi_square_uniform(counts), kChi2Dof8Q999);
}

TEST(Interpolate, BondsStaySymmetric) {
  const SemlaConfig c = toy_config();
  RngStreams rng(7);
  Molecule z1 = testing::methane();
  z1.coords = zero_center(z1.coords);
  for (int d = 0; d < 20; ++d) {
    NoisyState z = make_training_state(z1, c, FlowConfig {}, rng);
    const std::size_t n = z.size();
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(z.bonds[i * n + i], 0);
      for (std::size_t j = 0; j < n; ++j)
        EXPECT_EQ(z.bonds[i * n + j], z.bonds[j * n + i]);
    }
    EXPECT_GE(z.t, 0.0);
    EXPECT_LE(z.t, 1.0);
  }
}

// --- loss -------------------------------------------------------------------------

// Independent scalar recomputation of the weighted loss.
double loss_oracle(const Prediction &p, const Molecule &m, const FlowConfig &cfg,
                   const std::vector<double> &mask) {
  const std::size_t n = m.size();
  auto real = [&](std::size_t i) { return mask.empty() || mask[i] != 0; };
  auto ce = [](const std::vector<double> &logits, int target) {
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l: logits)
      z += std::exp(l - mx);
    return -(logits[target] - mx - std::log(z));
  };
  auto row = [](const Tensor &t, std::size_t r) {
    const std::size_t w = t.dim(t.rank() - 1);
    return std::vector<double>(t.data().begin() + r * w,
                               t.data().begin() + (r + 1) * w);
  };
  double mse = 0, atom = 0, charge = 0, bond = 0;
  std::size_t count = 0, pairs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!real(i))
      continue;
    ++count;
    for (int k = 0; k < 3; ++k)
      mse += std::pow(p.coords[i * 3 + k] - m.coords[i][k], 2);
    atom += ce(row(p.atom_logits, i), m.atom_types[i]);
    charge += ce(row(p.charge_logits, i), m.charges[i]);
    for (std::size_t j = i + 1; j < n; ++j)
      if (real(j)) {
        bond += ce(row(p.bond_logits, i * n + j), m.bond(i, j));
        ++pairs;
      }
  }
  return cfg.lambda_x * mse / (3.0 * count) + cfg.lambda_a * atom / count
         + cfg.lambda_c * charge / count
         + (pairs ? cfg.lambda_b * bond / pairs : 0.0);
}

TEST(Loss, MatchesScalarOracle) {
  const SemlaConfig c = toy_config();
  std::mt19937_64 rng(8);
  ModelParams params = init_params(c, 3, { .randomize_everything = true });
  FlowConfig cfg;
  for (int trial = 0; trial < 5; ++trial) {
    Molecule target = trial % 2 ? testing::formaldehyde() : testing::ammonia();
    target.coords = zero_center(target.coords);
    NoisyState z = testing::random_state(target.size(), c, rng);
    std::vector<double> mask;
    if (trial == 4) {
      // Pad one extra masked atom onto the state and target.
      mask.assign(target.size(), 1.0);
      mask.push_back(0.0);
      const std::size_t n = target.size() + 1;
      NoisyState big = testing::random_state(n, c, rng);
      big.t = z.t;
      big.mask = mask;
      big.coords.back() = { 0, 0, 0 };
      z = big;
      Molecule padded(n);
      for (std::size_t i = 0; i + 1 < n; ++i) {
        padded.coords[i] = target.coords[i];
        padded.atom_types[i] = target.atom_types[i];
        padded.charges[i] = target.charges[i];
        for (std::size_t j = 0; j + 1 < n; ++j)
          padded.bonds[i * n + j] = target.bond(i, j);
      }
      target = padded;
    }
    const Prediction pred = forward(params, z);
    const LossBreakdown l = flow_loss(pred, target, cfg, mask);
    EXPECT_NEAR(l.total.item(), loss_oracle(pred, target, cfg, mask), 1e-10);
  }
}

TEST(Loss, PerfectPredictionApproachesZero) {
  Molecule m = testing::formaldehyde();
  m.coords = zero_center(m.coords);
  const SemlaConfig c = toy_config();
  const std::size_t n = m.size();
  auto one_hot = [](std::size_t rows, std::size_t width,
                    const std::vector<int> &hot, double big) {
    std::vector<double> v(rows * width, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      v[r * width + hot[r]] = big;
    return Tensor({ rows, width }, v);
  };
  Prediction p;
  std::vector<double> xs;
  for (const Vec3 &v: m.coords)
    xs.insert(xs.end(), v.begin(), v.end());
  p.coords = Tensor({ n, 3 }, xs);
  p.atom_logits = one_hot(n, c.n_atom_types, m.atom_types, 50);
  p.charge_logits = one_hot(n, c.n_charges, m.charges, 50);
  p.bond_logits = reshape(one_hot(n * n, c.n_bond_types, m.bonds, 50),
                          { n, n, c.n_bond_types });
  const LossBreakdown l = flow_loss(p, m, FlowConfig {});
  EXPECT_EQ(l.coord, 0.0);
  EXPECT_LT(l.total.item(), 1e-18);

  FlowConfig zero;
  zero.lambda_x = zero.lambda_a = zero.lambda_b = zero.lambda_c = 0;
  p.atom_logits = one_hot(n, c.n_atom_types, std::vector<int>(n, 0), 3);
  EXPECT_EQ(flow_loss(p, m, zero).total.item(), 0.0);
}

TEST(Loss, NonFiniteInputsFailFast) {
  const SemlaConfig c = toy_config();
  std::mt19937_64 rng(9);
  ModelParams params = init_params(c, 1);
  Molecule m = testing::water();
  m.coords = zero_center(m.coords);
  Prediction p = forward(params, testing::random_state(3, c, rng));
  std::vector<double> bad = p.coords.to_vector();
  bad[4] = std::numeric_limits<double>::quiet_NaN();
  Prediction q = p;
  q.coords = Tensor(p.coords.shape(), bad);
  EXPECT_THROW(flow_loss(q, m, FlowConfig {}), NumericError);
  m.coords[1][0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(flow_loss(p, m, FlowConfig {}), NumericError);
}

TEST(Loss, GradientMatchesFiniteDifferencesOnSampledParameters) {
  const SemlaConfig c = toy_config();
  ModelParams params = init_params(c, 11, { .randomize_everything = true });
  RngStreams rng(12);
  Molecule target = testing::formaldehyde();
  target.coords = zero_center(target.coords);
  std::vector<NoisyState> states { make_training_state(target, c, {}, rng) };
  states[0].self_cond = forward(params, states[0]).to_self_condition();
  const std::vector<Molecule> targets { target };
  FlowConfig cfg;

  const auto grads = parameter_gradients(params, [&](const ModelParams &p) {
    return batch_loss(p, states, targets, cfg).total;
  });
  std::mt19937_64 pick(13);
  std::size_t k = 0;
  double worst = 0;
  params.for_each([&](const std::string &name, const Tensor &t) {
    std::uniform_int_distribution<std::size_t> idx(0, t.size() - 1);
    for (int s = 0; s < 3; ++s) {
      const std::size_t e = idx(pick);
      auto eval = [&](double delta) {
        ModelParams q = params;
        q.for_each([&](const std::string &n2, Tensor &u) {
          if (n2 == name) {
            auto v = u.to_vector();
            v[e] += delta;
            u = Tensor(u.shape(), v);
          }
        });
        NoGradScope ng;
        return batch_loss(q, states, targets, cfg).total.item();
      };
      const double h = 1e-5;
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      const double err = testing::rel_error(grads[k][e], numeric, 1e-4);
      worst = std::max(worst, err);
      EXPECT_LT(err, 1e-4) << name << "[" << e << "]";
    }
    ++k;
  });
  RecordProperty("max_rel_error", std::to_string(worst));
}

// --- optimizer and config ----------------------------------------------------------

TEST(Training, WarmupLearningRate) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 1000), 0.00015);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 2000), 3e-4);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 5000), 3e-4);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 1), 3e-4 / 2000);
  cfg.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 1), 3e-4);
}

TEST(Training, CosineDecayLearningRate) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.lr_final = 1e-4;
  cfg.warmup_steps = 100;
  cfg.steps = 1100;
  cfg.cosine_decay = true;
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 50), 5e-4);  // warm-up unchanged
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 100), 1e-3);
  EXPECT_NEAR(learning_rate(cfg, 600), 5.5e-4, 1e-15);  // halfway: midpoint
  EXPECT_NEAR(learning_rate(cfg, 1100), 1e-4, 1e-15);
  EXPECT_NEAR(learning_rate(cfg, 5000), 1e-4, 1e-15);  // held after `steps`
  double prev = learning_rate(cfg, 100);
  for (std::size_t s = 101; s <= 1100; ++s) {
    EXPECT_LE(learning_rate(cfg, s), prev);
    prev = learning_rate(cfg, s);
  }
  EXPECT_THROW(TrainConfig::parse("lr = 1e-3\nlr_final = 2e-3\n"),
               std::invalid_argument);
  const TrainConfig back = TrainConfig::parse(cfg.serialize());
  EXPECT_TRUE(back.cosine_decay);
  EXPECT_DOUBLE_EQ(back.lr_final, 1e-4);
}

TEST(Training, ZeroGradientsLeaveParametersUnchanged) {
  ModelParams params = init_params(toy_config(), 2);
  const ModelParams before = params;
  std::vector<std::vector<double>> zeros;
  params.for_each([&](const std::string &, const Tensor &t) {
    zeros.emplace_back(t.size(), 0.0);
  });
  AmsGrad opt;
  for (int s = 0; s < 3; ++s)
    opt.update(params, zeros, 1e-3);
  std::vector<std::vector<double>> a, b;
  params.for_each([&](const std::string &, const Tensor &t) {
    a.push_back(t.to_vector());
  });
  before.for_each([&](const std::string &, const Tensor &t) {
    b.push_back(t.to_vector());
  });
  EXPECT_EQ(a, b);
}

TEST(Training, AmsGradMatchesHandComputation) {
  // A single scalar parameter driven by gradients 1, then 0.1.
  ModelParams params = init_params(toy_config(), 2);
  std::vector<std::vector<double>> g;
  params.for_each([&](const std::string &, const Tensor &t) {
    g.emplace_back(t.size(), 0.0);
  });
  const double p0 = params.embed.coord_mix[0];
  AmsGrad opt;
  std::vector<std::string> names;
  params.for_each([&](const std::string &n, const Tensor &) {
    names.push_back(n);
  });
  const std::size_t k =
      std::find(names.begin(), names.end(), "embed.coord_mix") - names.begin();
  ASSERT_LT(k, names.size());
  g[k][0] = 1.0;
  opt.update(params, g, 0.1);
  // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 -> step 0.1 / (1 + 1e-8).
  const double p1 = p0 - 0.1 / (1.0 + 1e-8);
  EXPECT_NEAR(params.embed.coord_mix[0], p1, 1e-15);
  g[k][0] = 0.1;
  opt.update(params, g, 0.1);
  const double m = 0.9 * 0.1 + 0.1 * 0.1;
  const double v = 0.999 * 0.001 + 0.001 * 0.01;
  const double vmax = std::max(0.001, v);
  const double expected = p1
                          - 0.1 / (1 - 0.81) * m
                                / (std::sqrt(vmax) / std::sqrt(1 - 0.998001)
                                   + 1e-8);
  EXPECT_NEAR(params.embed.coord_mix[0], expected, 1e-15);
}

TEST(Training, GlobalNormClipping) {
  std::vector<std::vector<double>> g { { 3, 0 }, { 4 } };
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  EXPECT_NEAR(g[1][0], 0.8, 1e-15);
  std::vector<std::vector<double>> small { { 0.3 } };
  clip_global_norm(small, 1.0);
  EXPECT_EQ(small[0][0], 0.3);
}

TEST(TrainConfigText, RoundTripAndErrors) {
  TrainConfig cfg = TrainConfig::parse(
      "# toy run\nsigma = 0.3\nlambda_b = 1.0\nself_cond = false\n"
      "steps = 42\nd_l = 16\nseed = 9\n");
  EXPECT_DOUBLE_EQ(cfg.flow.sigma, 0.3);
  EXPECT_DOUBLE_EQ(cfg.flow.lambda_b, 1.0);
  EXPECT_FALSE(cfg.self_cond);
  EXPECT_EQ(cfg.steps, 42u);
  EXPECT_EQ(cfg.model.d_l, 16u);
  EXPECT_DOUBLE_EQ(cfg.lr, 3e-4);
  EXPECT_EQ(cfg.warmup_steps, 2000u);
  EXPECT_DOUBLE_EQ(cfg.grad_clip, 1.0);
  EXPECT_EQ(cfg.atoms_per_batch, 4096u);
  const TrainConfig back = TrainConfig::parse(cfg.serialize());
  EXPECT_EQ(back.serialize(), cfg.serialize());

  EXPECT_THROW(TrainConfig::parse("bogus = 1\n"), std::invalid_argument);
  EXPECT_THROW(TrainConfig::parse("sigma = abc\n"), std::invalid_argument);
  EXPECT_THROW(TrainConfig::parse("sigma = -1\n"), std::invalid_argument);
  EXPECT_THROW(TrainConfig::parse("steps = -3\n"), std::invalid_argument);
  EXPECT_THROW(TrainConfig::parse("just text\n"), std::invalid_argument);
}

// --- trainer ------------------------------------------------------------------------

TrainConfig smoke_config() {
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.warmup_steps = 10;
  cfg.atoms_per_batch = 40;
  cfg.seed = 21;
  return cfg;
}

TEST(Trainer, SmoothedLossDecreasesOverTwoHundredSteps) {
  const Vocabulary vocab = Vocabulary::default_toy();
  const TrainConfig cfg = smoke_config();
  Trainer trainer(init_params(SemlaConfig::toy(vocab), cfg.seed), vocab, cfg);
  BatchStream batches(testing::toy_set(), cfg.atoms_per_batch, cfg.seed);
  std::vector<double> losses;
  for (std::size_t s = 1; s <= 200; ++s)
    losses.push_back(trainer.step(batches.at(s)).loss);
  auto window = [&](std::size_t begin) {
    return std::accumulate(losses.begin() + begin, losses.begin() + begin + 50,
                           0.0)
           / 50.0;
  };
  EXPECT_GT(window(0), window(50));
  EXPECT_GT(window(50), window(100));
  EXPECT_GT(window(100), window(150));
  EXPECT_EQ(trainer.steps_done(), 200u);
}

TEST(Trainer, ResumeReproducesNextStepBitForBit) {
  const Vocabulary vocab = Vocabulary::default_toy();
  const TrainConfig cfg = smoke_config();
  Trainer a(init_params(SemlaConfig::toy(vocab), cfg.seed), vocab, cfg);
  BatchStream batches(testing::toy_set(), cfg.atoms_per_batch, cfg.seed);
  for (std::size_t s = 1; s <= 5; ++s)
    a.step(batches.at(s));
  Trainer b = Trainer::resume(decode_checkpoint(encode_checkpoint(a.checkpoint())));
  EXPECT_EQ(b.steps_done(), 5u);
  const StepStats sa = a.step(batches.at(6));
  const StepStats sb = b.step(batches.at(6));
  EXPECT_EQ(sa.loss, sb.loss);
  EXPECT_EQ(sa.grad_norm, sb.grad_norm);
  EXPECT_EQ(sa.self_conditioned, sb.self_conditioned);
  EXPECT_EQ(encode_checkpoint(a.checkpoint()), encode_checkpoint(b.checkpoint()));
}

TEST(Trainer, SelfConditioningShareIsAboutHalf) {
  const Vocabulary vocab = Vocabulary::default_toy();
  TrainConfig cfg = smoke_config();
  Trainer trainer(init_params(SemlaConfig::toy(vocab), 1), vocab, cfg);
  const std::vector<Molecule> batch { testing::hydrogen_fluoride() };
  int conditioned = 0;
  for (int s = 0; s < 200; ++s)
    conditioned += trainer.step(batch).self_conditioned;
  EXPECT_NEAR(conditioned, 100, 3 * std::sqrt(50.0));

  cfg.self_cond = false;
  Trainer plain(init_params(SemlaConfig::toy(vocab), 1), vocab, cfg);
  for (int s = 0; s < 20; ++s)
    EXPECT_FALSE(plain.step(batch).self_conditioned);
}

TEST(BatchStreamTest, DeterministicAndCoversEveryMoleculeEachEpoch) {
  const auto mols = testing::toy_set();
  BatchStream a(mols, 12, 4), b(mols, 12, 4);
  std::size_t atoms = 0;
  for (std::size_t s = 1; s <= a.batches_per_epoch(); ++s) {
    const auto x = a.at(s), y = b.at(s);
    EXPECT_EQ(x, y);
    for (const Molecule &m: x)
      atoms += m.size();
  }
  std::size_t total = 0;
  for (const Molecule &m: mols)
    total += m.size();
  EXPECT_EQ(atoms, total);
  EXPECT_THROW(a.at(0), std::invalid_argument);
}
}  // namespace
}  // namespace semla
