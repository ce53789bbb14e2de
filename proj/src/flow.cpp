//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/flow.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>

namespace semla {
namespace {
bool finite_all(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(),
                     [](double x) { return std::isfinite(x); });
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string &key, const std::string &value) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (used == 0 || used != value.size())
    throw std::invalid_argument("config key " + key + ": not a number: '"
                                + value + "'");
  return v;
}

std::uint64_t parse_unsigned(const std::string &key, const std::string &value) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    if (!value.empty() && value[0] != '-')
      v = std::stoull(value, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (used == 0 || used != value.size())
    throw std::invalid_argument("config key " + key
                                + ": not a non-negative integer: '" + value
                                + "'");
  return v;
}

bool parse_bool(const std::string &key, const std::string &value) {
  if (value == "true" || value == "1")
    return true;
  if (value == "false" || value == "0")
    return false;
  throw std::invalid_argument("config key " + key + ": expected true/false, got '"
                              + value + "'");
}

Tensor coords_tensor(std::span<const Vec3> coords) {
  std::vector<double> v;
  v.reserve(coords.size() * 3);
  for (const Vec3 &c: coords)
    v.insert(v.end(), c.begin(), c.end());
  return Tensor({ coords.size(), 3 }, std::move(v));
}

int uniform_index(std::mt19937_64 &rng, std::size_t count) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(count) - 1);
  return d(rng);
}
}  // namespace

void FlowConfig::validate() const {
  if (!(sigma > 0) || !std::isfinite(sigma))
    throw std::invalid_argument("flow config: sigma must be positive");
  if (!(beta_alpha > 0) || !(beta_beta > 0))
    throw std::invalid_argument("flow config: Beta parameters must be positive");
  for (double l: { lambda_x, lambda_a, lambda_b, lambda_c })
    if (!(l >= 0) || !std::isfinite(l))
      throw std::invalid_argument("flow config: loss weights must be >= 0");
  if (!(self_cond_prob >= 0 && self_cond_prob <= 1))
    throw std::invalid_argument("flow config: self_cond_prob outside [0, 1]");
}

Molecule sample_prior(std::size_t n, const SemlaConfig &config,
                      RngStreams &rng) {
  if (n == 0)
    throw std::invalid_argument("sample_prior: n must be >= 1");
  Molecule z(n);
  for (Vec3 &c: z.coords)
    for (double &v: c)
      v = sample_normal(rng.noise);
  z.coords = zero_center(z.coords);
  for (std::size_t i = 0; i < n; ++i)
    z.atom_types[i] = uniform_index(rng.categorical, config.n_atom_types);
  for (std::size_t i = 0; i < n; ++i)
    z.charges[i] = uniform_index(rng.categorical, config.n_charges);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      z.set_bond(i, j, uniform_index(rng.categorical, config.n_bond_types));
  return z;
}

double sample_time(const FlowConfig &cfg, RngStreams &rng) {
  return sample_beta(rng.time, cfg.beta_alpha, cfg.beta_beta);
}

Molecule align_prior(const Molecule &z0, const Molecule &z1, Alignment *info) {
  Alignment a = equivariant_ot_align(z0.coords, z1.coords);
  const std::size_t n = z0.size();
  Molecule out(n);
  out.coords = a.aligned;
  for (std::size_t i = 0; i < n; ++i) {
    out.atom_types[i] = z0.atom_types[a.perm[i]];
    out.charges[i] = z0.charges[a.perm[i]];
    for (std::size_t j = 0; j < n; ++j)
      out.bonds[i * n + j] = z0.bond(a.perm[i], a.perm[j]);
  }
  if (info)
    *info = std::move(a);
  return out;
}

NoisyState interpolate(const Molecule &z0, const Molecule &z1, double t,
                       const FlowConfig &cfg, RngStreams &rng) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument("interpolate: t = " + format_double(t)
                                + " outside [0, 1]");
  const std::size_t n = z1.size();
  if (z0.size() != n)
    throw std::invalid_argument("interpolate: prior has "
                                + std::to_string(z0.size())
                                + " atoms, data has " + std::to_string(n));
  NoisyState z;
  z.t = t;
  z.coords.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k)
      z.coords[i][k] = t * z1.coords[i][k] + (1 - t) * z0.coords[i][k]
                       + cfg.sigma * sample_normal(rng.noise);
  z.coords = zero_center(z.coords);

  auto pick = [&](int data, int prior) {
    return sample_uniform(rng.categorical) < t ? data : prior;
  };
  z.atoms.resize(n);
  z.charges.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    z.atoms[i] = pick(z1.atom_types[i], z0.atom_types[i]);
  for (std::size_t i = 0; i < n; ++i)
    z.charges[i] = pick(z1.charges[i], z0.charges[i]);
  z.bonds.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      z.bonds[i * n + j] = z.bonds[j * n + i] =
          pick(z1.bond(i, j), z0.bond(i, j));
  return z;
}

NoisyState make_training_state(const Molecule &z1, const SemlaConfig &model,
                               const FlowConfig &cfg, RngStreams &rng) {
  Molecule z0 = sample_prior(z1.size(), model, rng);
  Molecule aligned = align_prior(z0, z1);
  const double t = sample_time(cfg, rng);
  return interpolate(aligned, z1, t, cfg, rng);
}

LossBreakdown flow_loss(const Prediction &pred, const Molecule &target,
                        const FlowConfig &cfg, std::span<const double> mask) {
  const std::size_t n = target.size();
  if (pred.coords.shape() != Shape { n, 3 } || pred.atom_logits.rank() != 2
      || pred.atom_logits.dim(0) != n || pred.charge_logits.rank() != 2
      || pred.charge_logits.dim(0) != n || pred.bond_logits.rank() != 3
      || pred.bond_logits.dim(0) != n || pred.bond_logits.dim(1) != n)
    throw DimensionError("flow_loss: prediction does not match a molecule of "
                         + std::to_string(n) + " atoms");
  if (!mask.empty() && mask.size() != n)
    throw DimensionError("flow_loss: mask length mismatch");
  for (const Tensor *t: { &pred.coords, &pred.atom_logits, &pred.charge_logits,
                          &pred.bond_logits })
    if (!finite_all(t->data()))
      throw NumericError("flow_loss: non-finite prediction");
  for (const Vec3 &c: target.coords)
    if (!finite_all(c))
      throw NumericError("flow_loss: non-finite target coordinates");

  auto real = [&](std::size_t i) { return mask.empty() || mask[i] != 0; };
  std::vector<std::size_t> rows;
  std::vector<int> atom_t, charge_t;
  for (std::size_t i = 0; i < n; ++i)
    if (real(i)) {
      rows.push_back(i);
      atom_t.push_back(target.atom_types[i]);
      charge_t.push_back(target.charges[i]);
    }
  if (rows.empty())
    throw std::invalid_argument("flow_loss: every atom is masked");

  Tensor sq = square(sub(pred.coords, coords_tensor(target.coords)));
  if (!mask.empty())
    sq = scale_rows(sq, Tensor({ n }, { mask.begin(), mask.end() }));
  Tensor coord = scale(sum_all(sq), 1.0 / (3.0 * rows.size()));

  Tensor atom = cross_entropy(gather_rows(pred.atom_logits, rows), atom_t);
  Tensor charge = cross_entropy(gather_rows(pred.charge_logits, rows),
                                charge_t);

  std::vector<std::size_t> pairs;
  std::vector<int> bond_t;
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b) {
      pairs.push_back(rows[a] * n + rows[b]);
      bond_t.push_back(target.bond(rows[a], rows[b]));
    }
  Tensor bond = Tensor::scalar(0.0);
  if (!pairs.empty()) {
    const Tensor flat = reshape(pred.bond_logits,
                                { n * n, pred.bond_logits.dim(2) });
    bond = cross_entropy(gather_rows(flat, pairs), bond_t);
  }

  LossBreakdown out;
  out.coord = coord.item();
  out.atom = atom.item();
  out.bond = bond.item();
  out.charge = charge.item();
  out.total = add(add(scale(coord, cfg.lambda_x), scale(atom, cfg.lambda_a)),
                  add(scale(bond, cfg.lambda_b), scale(charge, cfg.lambda_c)));
  return out;
}

LossBreakdown batch_loss(const ModelParams &params,
                         const std::vector<NoisyState> &states,
                         const std::vector<Molecule> &targets,
                         const FlowConfig &cfg) {
  if (states.empty() || states.size() != targets.size())
    throw std::invalid_argument("batch_loss: need one target per state");
  LossBreakdown sum;
  const double w = 1.0 / static_cast<double>(states.size());
  for (std::size_t b = 0; b < states.size(); ++b) {
    const Prediction pred = forward(params, states[b]);
    LossBreakdown l = flow_loss(pred, targets[b], cfg, states[b].mask);
    sum.total = b == 0 ? scale(l.total, w) : add(sum.total, scale(l.total, w));
    sum.coord += w * l.coord;
    sum.atom += w * l.atom;
    sum.bond += w * l.bond;
    sum.charge += w * l.charge;
  }
  return sum;
}

// --- training configuration ---------------------------------------------------

namespace {
using Setter = std::function<void(TrainConfig &, const std::string &,
                                  const std::string &)>;

const std::map<std::string, Setter> &train_setters() {
  auto dbl = [](double TrainConfig::*m) {
    return Setter([m](TrainConfig &c, const std::string &k,
                      const std::string &v) { c.*m = parse_double(k, v); });
  };
  auto flow = [](double FlowConfig::*m) {
    return Setter([m](TrainConfig &c, const std::string &k,
                      const std::string &v) {
      c.flow.*m = parse_double(k, v);
    });
  };
  auto count = [](std::size_t TrainConfig::*m) {
    return Setter([m](TrainConfig &c, const std::string &k,
                      const std::string &v) { c.*m = parse_unsigned(k, v); });
  };
  auto model = [](std::size_t SemlaConfig::*m) {
    return Setter([m](TrainConfig &c, const std::string &k,
                      const std::string &v) {
      c.model.*m = parse_unsigned(k, v);
    });
  };
  static const std::map<std::string, Setter> setters {
    { "sigma", flow(&FlowConfig::sigma) },
    { "beta_alpha", flow(&FlowConfig::beta_alpha) },
    { "beta_beta", flow(&FlowConfig::beta_beta) },
    { "lambda_x", flow(&FlowConfig::lambda_x) },
    { "lambda_a", flow(&FlowConfig::lambda_a) },
    { "lambda_b", flow(&FlowConfig::lambda_b) },
    { "lambda_c", flow(&FlowConfig::lambda_c) },
    { "self_cond_prob", flow(&FlowConfig::self_cond_prob) },
    { "lr", dbl(&TrainConfig::lr) },
    { "lr_final", dbl(&TrainConfig::lr_final) },
    { "cosine_decay",
      [](TrainConfig &c, const std::string &k, const std::string &v) {
        c.cosine_decay = parse_bool(k, v);
      } },
    { "warmup_steps", count(&TrainConfig::warmup_steps) },
    { "grad_clip", dbl(&TrainConfig::grad_clip) },
    { "atoms_per_batch", count(&TrainConfig::atoms_per_batch) },
    { "self_cond",
      [](TrainConfig &c, const std::string &k, const std::string &v) {
        c.self_cond = parse_bool(k, v);
      } },
    { "seed",
      [](TrainConfig &c, const std::string &k, const std::string &v) {
        c.seed = parse_unsigned(k, v);
      } },
    { "steps", count(&TrainConfig::steps) },
    { "checkpoint_every", count(&TrainConfig::checkpoint_every) },
    { "n_layers", model(&SemlaConfig::n_layers) },
    { "d_inv", model(&SemlaConfig::d_inv) },
    { "d_equi", model(&SemlaConfig::d_equi) },
    { "d_l", model(&SemlaConfig::d_l) },
    { "n_heads", model(&SemlaConfig::n_heads) },
    { "d_edge", model(&SemlaConfig::d_edge) },
  };
  return setters;
}
}  // namespace

void TrainConfig::validate() const {
  flow.validate();
  model.validate();
  if (!(lr > 0) || !std::isfinite(lr))
    throw std::invalid_argument("train config: lr must be positive");
  if (!(lr_final >= 0) || lr_final > lr)
    throw std::invalid_argument("train config: lr_final must lie in [0, lr]");
  if (!(grad_clip > 0))
    throw std::invalid_argument("train config: grad_clip must be positive");
  if (atoms_per_batch == 0)
    throw std::invalid_argument("train config: atoms_per_batch must be >= 1");
}

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  os << "sigma = " << format_double(flow.sigma) << '\n'
     << "beta_alpha = " << format_double(flow.beta_alpha) << '\n'
     << "beta_beta = " << format_double(flow.beta_beta) << '\n'
     << "lambda_x = " << format_double(flow.lambda_x) << '\n'
     << "lambda_a = " << format_double(flow.lambda_a) << '\n'
     << "lambda_b = " << format_double(flow.lambda_b) << '\n'
     << "lambda_c = " << format_double(flow.lambda_c) << '\n'
     << "self_cond_prob = " << format_double(flow.self_cond_prob) << '\n'
     << "lr = " << format_double(lr) << '\n'
     << "warmup_steps = " << warmup_steps << '\n'
     << "cosine_decay = " << (cosine_decay ? "true" : "false") << '\n'
     << "lr_final = " << format_double(lr_final) << '\n'
     << "grad_clip = " << format_double(grad_clip) << '\n'
     << "atoms_per_batch = " << atoms_per_batch << '\n'
     << "self_cond = " << (self_cond ? "true" : "false") << '\n'
     << "seed = " << seed << '\n'
     << "steps = " << steps << '\n'
     << "checkpoint_every = " << checkpoint_every << '\n'
     << "n_layers = " << model.n_layers << '\n'
     << "d_inv = " << model.d_inv << '\n'
     << "d_equi = " << model.d_equi << '\n'
     << "d_l = " << model.d_l << '\n'
     << "n_heads = " << model.n_heads << '\n'
     << "d_edge = " << model.d_edge << '\n';
  return os.str();
}

void TrainConfig::apply(std::string_view text) {
  std::istringstream is { std::string(text) };
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos)
      line.resize(hash);
    line = trim(line);
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no)
                                  + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto &setters = train_setters();
    auto it = setters.find(key);
    if (it == setters.end())
      throw std::invalid_argument("config line " + std::to_string(line_no)
                                  + ": unknown key '" + key + "'");
    it->second(*this, key, value);
  }
}

TrainConfig TrainConfig::parse(std::string_view text) {
  TrainConfig c;
  c.apply(text);
  c.validate();
  return c;
}

double learning_rate(const TrainConfig &cfg, std::size_t step) {
  if (step < cfg.warmup_steps)
    return cfg.lr * (static_cast<double>(step)
                     / static_cast<double>(cfg.warmup_steps));
  if (!cfg.cosine_decay || cfg.steps <= cfg.warmup_steps)
    return cfg.lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - cfg.warmup_steps)
                        / static_cast<double>(cfg.steps - cfg.warmup_steps));
  return cfg.lr_final
         + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * progress));
}

// --- optimization -------------------------------------------------------------

void AmsGrad::update(ModelParams &params,
                     const std::vector<std::vector<double>> &grads,
                     double lr) {
  if (m.empty()) {
    for (const auto &g: grads) {
      m.emplace_back(g.size(), 0.0);
      v.emplace_back(g.size(), 0.0);
      v_max.emplace_back(g.size(), 0.0);
    }
  }
  if (grads.size() != m.size())
    throw std::invalid_argument("AmsGrad: gradient count changed");
  ++t;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
  const double step_size = lr / bc1;
  const double root_bc2 = std::sqrt(bc2);

  std::size_t k = 0;
  params.for_each([&](const std::string &name, Tensor &p) {
    const auto &g = grads[k];
    if (g.size() != p.size())
      throw std::invalid_argument("AmsGrad: gradient size mismatch for "
                                  + name);
    std::vector<double> value = p.to_vector();
    for (std::size_t e = 0; e < value.size(); ++e) {
      m[k][e] = kBeta1 * m[k][e] + (1 - kBeta1) * g[e];
      v[k][e] = kBeta2 * v[k][e] + (1 - kBeta2) * g[e] * g[e];
      v_max[k][e] = std::max(v_max[k][e], v[k][e]);
      const double denom = std::sqrt(v_max[k][e]) / root_bc2 + kEps;
      value[e] -= step_size * m[k][e] / denom;
    }
    p = Tensor(p.shape(), std::move(value));
    ++k;
  });
}

double clip_global_norm(std::vector<std::vector<double>> &grads,
                        double max_norm) {
  double sq = 0;
  for (const auto &g: grads)
    for (double x: g)
      sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto &g: grads)
      for (double &x: g)
        x *= s;
  }
  return norm;
}

std::vector<std::vector<double>> parameter_gradients(
    const ModelParams &params,
    const std::function<Tensor(const ModelParams &)> &loss_fn) {
  Tape tape;
  TapeScope scope(tape);
  ModelParams watched = params;
  watched.for_each(
      [&](const std::string &, Tensor &t) { t = tape.watch(t); });
  const Tensor loss = loss_fn(watched);
  tape.backward(loss);
  std::vector<std::vector<double>> grads;
  watched.for_each([&](const std::string &, const Tensor &t) {
    const auto g = tape.grad(t);
    grads.emplace_back(g.begin(), g.end());
  });
  return grads;
}

// --- batches --------------------------------------------------------------------

BatchStream::BatchStream(std::vector<Molecule> mols,
                         std::size_t atoms_per_batch, std::uint64_t seed)
    : mols_(std::move(mols)), atoms_per_batch_(atoms_per_batch), seed_(seed) {
  if (mols_.empty())
    throw std::invalid_argument("BatchStream: no molecules");
  per_epoch_ = bucket_batches(mols_, atoms_per_batch_, seed_).size();
}

std::vector<Molecule> BatchStream::at(std::size_t step) {
  if (step == 0)
    throw std::invalid_argument("BatchStream: steps are 1-based");
  const std::size_t index = step - 1, epoch = index / per_epoch_;
  if (epoch != cached_epoch_) {
    cache_ = bucket_batches(mols_, atoms_per_batch_, seed_ + epoch);
    cached_epoch_ = epoch;
  }
  return cache_.at(index % per_epoch_).molecules;
}

// --- trainer ----------------------------------------------------------------------

Trainer::Trainer(ModelParams params, Vocabulary vocab, TrainConfig cfg)
    : params_(std::move(params)), vocab_(std::move(vocab)),
      cfg_(std::move(cfg)), rng_(cfg_.seed) {
  params_.check_shapes();
  cfg_.model = params_.config;
  cfg_.validate();
  if (vocab_.n_atom_types() != params_.config.n_atom_types
      || vocab_.n_charges() != params_.config.n_charges)
    throw std::invalid_argument("Trainer: vocabulary does not match model");
}

StepStats Trainer::step(const std::vector<Molecule> &batch) {
  if (batch.empty())
    throw std::invalid_argument("Trainer::step: empty batch");
  StepStats stats;
  stats.step = optimizer_.t + 1;
  stats.self_conditioned = cfg_.self_cond
                           && sample_uniform(rng_.categorical)
                                  < cfg_.flow.self_cond_prob;

  std::vector<Molecule> targets;
  std::vector<NoisyState> states;
  for (const Molecule &m: batch) {
    Molecule centered = m;
    centered.coords = zero_center(m.coords);
    states.push_back(
        make_training_state(centered, params_.config, cfg_.flow, rng_));
    targets.push_back(std::move(centered));
  }
  if (stats.self_conditioned) {
    NoGradScope no_grad;
    for (NoisyState &z: states)
      z.self_cond = forward(params_, z).to_self_condition();
  }

  LossBreakdown loss;
  auto grads = parameter_gradients(params_, [&](const ModelParams &p) {
    loss = batch_loss(p, states, targets, cfg_.flow);
    return loss.total;
  });
  stats.loss = loss.total.item();
  stats.coord = loss.coord;
  stats.atom = loss.atom;
  stats.bond = loss.bond;
  stats.charge = loss.charge;
  if (!std::isfinite(stats.loss))
    throw NumericError("non-finite loss at step " + std::to_string(stats.step)
                       + " (coord " + format_double(loss.coord) + ", atom "
                       + format_double(loss.atom) + ", bond "
                       + format_double(loss.bond) + ", charge "
                       + format_double(loss.charge) + ")");
  for (const auto &g: grads)
    if (!finite_all(g))
      throw NumericError("non-finite gradient at step "
                         + std::to_string(stats.step));

  stats.grad_norm = clip_global_norm(grads, cfg_.grad_clip);
  stats.lr = learning_rate(cfg_, stats.step);
  optimizer_.update(params_, grads, stats.lr);
  return stats;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  ckpt.vocab = vocab_;
  ckpt.params = params_;
  ckpt.train_state = "[train]\n" + cfg_.serialize() + "[optimizer]\nt = "
                     + std::to_string(optimizer_.t) + "\n[rng]\n"
                     + rng_.serialize();
  if (optimizer_.t > 0) {
    std::size_t k = 0;
    params_.for_each([&](const std::string &name, const Tensor &p) {
      ckpt.extra.emplace_back("optim.m." + name,
                              Tensor(p.shape(), optimizer_.m[k]));
      ckpt.extra.emplace_back("optim.v." + name,
                              Tensor(p.shape(), optimizer_.v[k]));
      ckpt.extra.emplace_back("optim.v_max." + name,
                              Tensor(p.shape(), optimizer_.v_max[k]));
      ++k;
    });
  }
  return ckpt;
}

Trainer Trainer::resume(const Checkpoint &ckpt) {
  const std::string &s = ckpt.train_state;
  const auto train = s.find("[train]\n"), optim = s.find("[optimizer]\n"),
             rng = s.find("[rng]\n");
  if (train != 0 || optim == std::string::npos || rng == std::string::npos
      || rng < optim)
    throw CheckpointError("checkpoint has no resumable training state");
  TrainConfig cfg;
  cfg.apply(s.substr(8, optim - 8));
  Trainer trainer(ckpt.params, ckpt.vocab, cfg);

  std::string t_line = trim(s.substr(optim + 12, rng - optim - 12));
  if (t_line.rfind("t =", 0) != 0)
    throw CheckpointError("checkpoint optimizer section is malformed");
  trainer.optimizer_.t = parse_unsigned("t", trim(t_line.substr(3)));
  trainer.rng_ = RngStreams::parse(s.substr(rng + 6));

  if (trainer.optimizer_.t > 0) {
    std::map<std::string, const Tensor *> extra;
    for (const auto &[name, t]: ckpt.extra)
      extra[name] = &t;
    auto take = [&](const std::string &name, const Tensor &p) {
      auto it = extra.find(name);
      if (it == extra.end() || it->second->shape() != p.shape())
        throw CheckpointError("checkpoint lacks optimizer tensor " + name);
      return it->second->to_vector();
    };
    trainer.params_.for_each([&](const std::string &name, const Tensor &p) {
      trainer.optimizer_.m.push_back(take("optim.m." + name, p));
      trainer.optimizer_.v.push_back(take("optim.v." + name, p));
      trainer.optimizer_.v_max.push_back(take("optim.v_max." + name, p));
    });
  }
  return trainer;
}
}  // namespace semla
