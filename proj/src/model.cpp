//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/model.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace semla {
// --- config ----------------------------------------------------------------

void SemlaConfig::validate() const {
  auto fail = [](const std::string &what) {
    throw std::invalid_argument("invalid model config: " + what);
  };
  if (n_layers == 0 || d_inv == 0 || d_equi == 0 || d_l == 0 || n_heads == 0
      || d_edge == 0)
    fail("all dimensions must be positive");
  if (n_atom_types == 0 || n_charges == 0 || n_bond_types == 0)
    fail("vocabulary sizes must be positive");
  if (d_inv % n_heads != 0)
    fail("d_inv (" + std::to_string(d_inv) + ") not divisible by n_heads ("
         + std::to_string(n_heads) + ")");
  if (d_equi % n_heads != 0)
    fail("d_equi (" + std::to_string(d_equi) + ") not divisible by n_heads ("
         + std::to_string(n_heads) + ")");
  if (d_l > d_inv)
    fail("d_l must not exceed d_inv");
}

SemlaConfig SemlaConfig::toy(const Vocabulary &vocab) {
  SemlaConfig c;
  c.n_atom_types = vocab.n_atom_types();
  c.n_charges = vocab.n_charges();
  return c;
}

namespace {
std::vector<std::pair<const char *, std::size_t SemlaConfig::*>>
config_fields() {
  return {
    { "n_layers", &SemlaConfig::n_layers },
    { "d_inv", &SemlaConfig::d_inv },
    { "d_equi", &SemlaConfig::d_equi },
    { "d_l", &SemlaConfig::d_l },
    { "n_heads", &SemlaConfig::n_heads },
    { "d_edge", &SemlaConfig::d_edge },
    { "n_atom_types", &SemlaConfig::n_atom_types },
    { "n_charges", &SemlaConfig::n_charges },
    { "n_bond_types", &SemlaConfig::n_bond_types },
  };
}
}  // namespace

std::string SemlaConfig::serialize() const {
  std::ostringstream os;
  for (const auto &[key, field]: config_fields())
    os << key << '=' << this->*field << '\n';
  return os.str();
}

SemlaConfig SemlaConfig::parse(std::string_view text) {
  SemlaConfig c;
  const auto fields = config_fields();
  std::istringstream is { std::string(text) };
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("model config line without '=': " + line);
    const std::string key = line.substr(0, eq);
    auto it = std::find_if(fields.begin(), fields.end(),
                           [&](const auto &f) { return key == f.first; });
    if (it == fields.end())
      throw std::invalid_argument("unknown model config key: " + key);
    c.*(it->second) = std::stoul(line.substr(eq + 1));
  }
  c.validate();
  return c;
}

// --- parameter containers ----------------------------------------------------

Tensor Linear::operator()(const Tensor &x) const {
  Tensor y = matmul(x, weight);
  return bias.empty() ? y : add(y, bias);
}

Tensor Mlp::operator()(const Tensor &x) const { return l2(silu(l1(x))); }

namespace {
using Visitor = std::function<void(const std::string &, Tensor &)>;

void visit(const std::string &name, Linear &l, const Visitor &fn) {
  fn(name + ".weight", l.weight);
  if (!l.bias.empty())
    fn(name + ".bias", l.bias);
}

void visit(const std::string &name, Mlp &m, const Visitor &fn) {
  visit(name + ".l1", m.l1, fn);
  visit(name + ".l2", m.l2, fn);
}

void visit(const std::string &name, LayerNormParams &p, const Visitor &fn) {
  fn(name + ".gain", p.gain);
  fn(name + ".bias", p.bias);
}

void visit(const std::string &name, EquiNormParams &p, const Visitor &fn) {
  fn(name + ".gain", p.gain);
}

Linear make_linear(std::size_t in, std::size_t out, bool bias = true) {
  return { Tensor::zeros({ in, out }),
           bias ? Tensor::zeros({ out }) : Tensor() };
}

Mlp make_mlp(std::size_t in, std::size_t hidden, std::size_t out) {
  return { make_linear(in, hidden), make_linear(hidden, out) };
}

LayerNormParams make_ln(std::size_t d) {
  return { Tensor::full({ d }, 1.0), Tensor::zeros({ d }) };
}

EquiNormParams make_en(std::size_t c) { return { Tensor::full({ c }, 1.0) }; }

// Allocates every tensor at its configured shape with placeholder values.
ModelParams allocate(const SemlaConfig &c) {
  c.validate();
  const std::size_t D = c.d_inv, C = c.d_equi, L = c.d_l, K = c.n_heads,
                    E = c.d_edge;
  ModelParams p;
  p.config = c;
  const std::size_t atom_in = 2 * c.n_atom_types + 2 * c.n_charges + 1;
  p.embed.atom = make_mlp(atom_in, D, D);
  p.embed.coord_mix = Tensor::zeros({ C, 2 });
  p.embed.bond = make_linear(2 * c.n_bond_types, E);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const bool first = l == 0, last = l + 1 == c.n_layers;
    LayerParams lp;
    lp.ln_ff = make_ln(D);
    lp.en_ff = make_en(C);
    lp.w1 = Tensor::zeros({ C, C });
    lp.phi = make_mlp(D + C, 4 * D, D);
    lp.psi = make_mlp(D, D, C);
    lp.w2 = Tensor::zeros({ C, C });
    lp.ln_att = make_ln(D);
    lp.en_att = make_en(C);
    lp.w3 = Tensor::zeros({ D, L });
    lp.omega = make_mlp(2 * L + C + (first ? E : 0), L,
                        2 * K + (last ? E : 0));
    lp.w4 = Tensor::zeros({ D, D });
    lp.w5 = Tensor::zeros({ D, D });
    lp.w6 = Tensor::zeros({ C, C });
    lp.w7 = Tensor::zeros({ C, C });
    p.layers.push_back(std::move(lp));
  }

  p.heads.ln_out = make_ln(D);
  p.heads.en_out = make_en(C);
  p.heads.coord_out = Tensor::zeros({ 1, C });
  p.heads.atom = make_mlp(D, D, c.n_atom_types);
  p.heads.charge = make_mlp(D, D, c.n_charges);
  p.heads.bond_proj = Tensor::zeros({ D, L });
  p.heads.bond = make_mlp(2 * L + 1 + C + E, L, c.n_bond_types);
  return p;
}

bool ends_with(const std::string &s, std::string_view suffix) {
  return s.size() >= suffix.size()
         && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Channel mixes are stored (out, in); everything else (in, out).
bool is_channel_mix(const std::string &name) {
  for (const char *s: { ".w1", ".w2", ".w6", ".w7", "coord_mix", "coord_out" })
    if (ends_with(name, s))
      return true;
  return false;
}

bool is_residual_output(const std::string &name) {
  for (const char *s: { ".w2", ".w5", ".w7", ".phi.l2.weight" })
    if (ends_with(name, s))
      return true;
  return false;
}
}  // namespace

void ModelParams::for_each(const Visitor &fn) {
  visit("embed.atom", embed.atom, fn);
  fn("embed.coord_mix", embed.coord_mix);
  visit("embed.bond", embed.bond, fn);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    LayerParams &lp = layers[l];
    const std::string pre = "layers." + std::to_string(l);
    visit(pre + ".ln_ff", lp.ln_ff, fn);
    visit(pre + ".en_ff", lp.en_ff, fn);
    fn(pre + ".w1", lp.w1);
    visit(pre + ".phi", lp.phi, fn);
    visit(pre + ".psi", lp.psi, fn);
    fn(pre + ".w2", lp.w2);
    visit(pre + ".ln_att", lp.ln_att, fn);
    visit(pre + ".en_att", lp.en_att, fn);
    fn(pre + ".w3", lp.w3);
    visit(pre + ".omega", lp.omega, fn);
    fn(pre + ".w4", lp.w4);
    fn(pre + ".w5", lp.w5);
    fn(pre + ".w6", lp.w6);
    fn(pre + ".w7", lp.w7);
  }
  visit("heads.ln_out", heads.ln_out, fn);
  visit("heads.en_out", heads.en_out, fn);
  fn("heads.coord_out", heads.coord_out);
  visit("heads.atom", heads.atom, fn);
  visit("heads.charge", heads.charge, fn);
  fn("heads.bond_proj", heads.bond_proj);
  visit("heads.bond", heads.bond, fn);
}

void ModelParams::for_each(
    const std::function<void(const std::string &, const Tensor &)> &fn) const {
  const_cast<ModelParams *>(this)->for_each(
      [&](const std::string &name, Tensor &t) { fn(name, t); });
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string &, const Tensor &t) { n += t.size(); });
  return n;
}

void ModelParams::check_shapes() const {
  ModelParams expected = allocate(config);
  std::vector<std::pair<std::string, Shape>> want, have;
  expected.for_each([&](const std::string &name, const Tensor &t) {
    want.emplace_back(name, t.shape());
  });
  for_each([&](const std::string &name, const Tensor &t) {
    have.emplace_back(name, t.shape());
  });
  if (want.size() != have.size())
    throw std::invalid_argument("parameter count mismatch: expected "
                                + std::to_string(want.size()) + " tensors, got "
                                + std::to_string(have.size()));
  for (std::size_t i = 0; i < want.size(); ++i)
    if (want[i] != have[i])
      throw std::invalid_argument(
          "parameter " + have[i].first + " has shape "
          + shape_str(have[i].second) + ", config expects " + want[i].first
          + " " + shape_str(want[i].second));
}

ModelParams init_params(const SemlaConfig &config, std::uint64_t seed,
                        const InitOptions &options) {
  ModelParams p = allocate(config);
  std::mt19937_64 rng(seed);
  p.for_each([&](const std::string &name, Tensor &t) {
    std::vector<double> v(t.size());
    auto uniform = [&](double lo, double hi) {
      std::uniform_real_distribution<double> u(lo, hi);
      for (double &x: v)
        x = u(rng);
    };
    const bool gain = ends_with(name, ".gain");
    const bool bias = ends_with(name, ".bias");
    if (options.randomize_everything && gain) {
      uniform(0.5, 1.5);
    } else if (options.randomize_everything && bias) {
      uniform(-0.5, 0.5);
    } else if (gain) {
      std::fill(v.begin(), v.end(), 1.0);
    } else if (bias) {
      std::fill(v.begin(), v.end(), 0.0);
    } else if (options.zero_residual_outputs && !options.randomize_everything
               && is_residual_output(name)) {
      std::fill(v.begin(), v.end(), 0.0);
    } else {
      const std::size_t fan_in = is_channel_mix(name) ? t.dim(1) : t.dim(0);
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      uniform(-bound, bound);
    }
    t = Tensor(t.shape(), std::move(v));
  });
  return p;
}

// --- self-conditioning -------------------------------------------------------

SelfCondition SelfCondition::neutral(std::size_t n, const SemlaConfig &c) {
  SelfCondition s;
  s.coords.assign(n, Vec3 { 0, 0, 0 });
  s.atom_probs.assign(n * c.n_atom_types, 1.0 / c.n_atom_types);
  s.charge_probs.assign(n * c.n_charges, 1.0 / c.n_charges);
  s.bond_probs.assign(n * n * c.n_bond_types, 1.0 / c.n_bond_types);
  return s;
}

std::vector<double> softmax_rows(std::span<const double> logits,
                                 std::size_t width) {
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r * width < logits.size(); ++r) {
    const double *row = logits.data() + r * width;
    const double mx = *std::max_element(row, row + width);
    double total = 0;
    for (std::size_t k = 0; k < width; ++k)
      total += out[r * width + k] = std::exp(row[k] - mx);
    for (std::size_t k = 0; k < width; ++k)
      out[r * width + k] /= total;
  }
  return out;
}

SelfCondition Prediction::to_self_condition() const {
  SelfCondition s;
  const std::size_t n = coords.dim(0);
  s.coords.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k)
      s.coords[i][k] = coords[i * 3 + k];
  s.atom_probs = softmax_rows(atom_logits.data(), atom_logits.dim(1));
  s.charge_probs = softmax_rows(charge_logits.data(), charge_logits.dim(1));
  s.bond_probs = softmax_rows(bond_logits.data(), bond_logits.dim(2));
  return s;
}

// --- building blocks ---------------------------------------------------------

namespace {
std::vector<double> full_mask(std::span<const double> mask, std::size_t n) {
  if (mask.empty())
    return std::vector<double>(n, 1.0);
  if (mask.size() != n)
    throw DimensionError("mask has length " + std::to_string(mask.size())
                         + " for " + std::to_string(n) + " atoms");
  return { mask.begin(), mask.end() };
}

bool has_padding(std::span<const double> mask) {
  return std::any_of(mask.begin(), mask.end(),
                     [](double m) { return m == 0.0; });
}

// (c) -> (c, 3) by repeating each entry along a new trailing axis.
Tensor repeat3(const Tensor &v) {
  Tensor col = reshape(v, { v.size(), 1 });
  const Tensor parts[] = { col, col, col };
  return concat_last(parts);
}
}  // namespace

Tensor norm_inv(const LayerNormParams &p, const Tensor &h) {
  return add(mul(layer_norm_core(h), p.gain), p.bias);
}

Tensor norm_equi(const EquiNormParams &p, const Tensor &x,
                 std::span<const double> mask) {
  if (x.rank() != 3 || x.dim(2) != 3)
    throw DimensionError("norm_equi expects (n, c, 3), got "
                         + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::vector<double> m = full_mask(mask, n);
  if (std::none_of(m.begin(), m.end(), [](double v) { return v != 0.0; }))
    throw std::invalid_argument("norm_equi: every atom is masked");

  Tensor centered = sub(x, masked_mean_rows(x, m));
  if (has_padding(m))
    centered = scale_rows(centered, Tensor({ n }, m));
  Tensor mean_norm = masked_mean_rows(norm_last(centered), m);
  Tensor factor = div(p.gain, add(mean_norm, Tensor::full({ c }, kEquiNormEps)));
  return mul(centered, repeat3(factor));
}

Tensor channel_mix(const Tensor &w, const Tensor &x) { return matmul(w, x); }

NodeState feed_forward(const LayerParams &p, const NodeState &s,
                       std::span<const double> mask) {
  Tensor hn = norm_inv(p.ln_ff, s.h);
  Tensor xn = norm_equi(p.en_ff, s.x, mask);
  Tensor xt = channel_mix(p.w1, xn);

  const Tensor phi_in[] = { hn, norm_last(xn) };
  Tensor h_ff = add(s.h, p.phi(concat_last(phi_in)));

  Tensor summed = sum_axis(xt, 1);  // (n, 3)
  Tensor x_ff = add(s.x, channel_mix(p.w2, outer_vec(p.psi(hn), summed)));
  return { h_ff, x_ff };
}

Messages latent_messages(const LayerParams &p, const NodeState &s,
                         std::span<const double> mask, const Tensor *edge_in,
                         bool emit_edges, std::size_t n_heads,
                         std::size_t d_edge) {
  const std::size_t n = s.h.dim(0);
  Tensor hl = matmul(norm_inv(p.ln_att, s.h), p.w3);
  Tensor xa = norm_equi(p.en_att, s.x, mask);

  std::vector<Tensor> parts { expand_pairs_rows(hl), expand_pairs_cols(hl),
                              pair_dots(xa) };
  if (edge_in)
    parts.push_back(*edge_in);
  Tensor in = concat_last(parts);
  const std::size_t width = in.dim(2);
  Tensor out = p.omega(reshape(in, { n * n, width }));
  out = reshape(out, { n, n, out.dim(1) });

  const std::size_t expect = 2 * n_heads + (emit_edges ? d_edge : 0);
  if (out.dim(2) != expect)
    throw DimensionError("message MLP produces " + std::to_string(out.dim(2))
                         + " features, expected " + std::to_string(expect));
  Messages m;
  m.inv = slice_last(out, 0, n_heads);
  m.equi = slice_last(out, n_heads, 2 * n_heads);
  if (emit_edges)
    m.edge = slice_last(out, 2 * n_heads, expect);
  return m;
}

Tensor variance_preserving_weights(const Tensor &alpha) {
  return sqrt(sum_axis(square(alpha), 1));
}

Tensor attend_invariant(const LayerParams &p, const NodeState &s,
                        const Tensor &m_inv, std::span<const double> mask) {
  const std::size_t n = s.h.dim(0), d = s.h.dim(1), k = m_inv.dim(2);
  if (d % k != 0)
    throw DimensionError("attend_invariant: d_inv " + std::to_string(d)
                         + " not divisible by " + std::to_string(k)
                         + " heads");
  Tensor alpha = softmax(m_inv, 1, mask);
  Tensor values = reshape(matmul(norm_inv(p.ln_att, s.h), p.w4),
                          { n, k, d / k });
  Tensor att = scale_rows(attend(alpha, values),
                          variance_preserving_weights(alpha));
  return add(s.h, matmul(reshape(att, { n, d }), p.w5));
}

Tensor attend_equivariant(const LayerParams &p, const NodeState &s,
                          const Tensor &m_equi, std::span<const double> mask) {
  const std::size_t n = s.x.dim(0), c = s.x.dim(1), k = m_equi.dim(2);
  if (c % k != 0)
    throw DimensionError("attend_equivariant: d_equi " + std::to_string(c)
                         + " not divisible by " + std::to_string(k)
                         + " heads");
  Tensor xe = channel_mix(p.w6, norm_equi(p.en_att, s.x, mask));
  Tensor dirs = reshape(pair_directions(xe), { n, n, k, (c / k) * 3 });
  Tensor alpha = softmax(m_equi, 1, mask);
  Tensor att = scale_rows(attend_pairwise(alpha, dirs),
                          variance_preserving_weights(alpha));
  return add(s.x, channel_mix(p.w7, reshape(att, { n, c, 3 })));
}

LayerOutput semla_layer(const LayerParams &p, const SemlaConfig &config,
                        const NodeState &s, std::span<const double> mask,
                        const Tensor *edge_in, bool emit_edges) {
  NodeState ff = feed_forward(p, s, mask);
  Messages m = latent_messages(p, ff, mask, edge_in, emit_edges,
                               config.n_heads, config.d_edge);
  LayerOutput out;
  out.state.h = attend_invariant(p, ff, m.inv, mask);
  out.state.x = attend_equivariant(p, ff, m.equi, mask);
  out.edge = m.edge;
  return out;
}

// --- embedding and heads -----------------------------------------------------

namespace {
void check_index(int v, std::size_t limit, bool padded, const char *what,
                 std::size_t at) {
  if (padded && v == kPadIndex)
    return;
  if (v < 0 || static_cast<std::size_t>(v) >= limit)
    throw std::invalid_argument(std::string(what) + " index "
                                + std::to_string(v) + " out of range at "
                                + std::to_string(at));
}
}  // namespace

Embedded embed_inputs(const ModelParams &params, const NoisyState &z) {
  const SemlaConfig &c = params.config;
  const std::size_t n = z.size();
  if (n == 0)
    throw std::invalid_argument("embed_inputs: empty molecule");
  if (z.coords.size() != n || z.charges.size() != n || z.bonds.size() != n * n)
    throw DimensionError("embed_inputs: inconsistent state sizes");
  if (!(z.t >= 0.0 && z.t <= 1.0))
    throw std::invalid_argument("embed_inputs: t outside [0, 1]");
  const std::vector<double> mask = full_mask(z.mask, n);

  const SelfCondition sc =
      z.self_cond ? *z.self_cond : SelfCondition::neutral(n, c);
  if (sc.coords.size() != n || sc.atom_probs.size() != n * c.n_atom_types
      || sc.charge_probs.size() != n * c.n_charges
      || sc.bond_probs.size() != n * n * c.n_bond_types)
    throw DimensionError("embed_inputs: self-conditioning sizes mismatch");

  const std::size_t A = c.n_atom_types, Q = c.n_charges, B = c.n_bond_types;
  const std::size_t width = 2 * A + 2 * Q + 1;
  std::vector<double> feat(n * width, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const bool pad = mask[i] == 0.0;
    check_index(z.atoms[i], A, pad, "atom type", i);
    check_index(z.charges[i], Q, pad, "charge", i);
    double *row = feat.data() + i * width;
    if (z.atoms[i] != kPadIndex)
      row[z.atoms[i]] = 1.0;
    if (z.charges[i] != kPadIndex)
      row[A + z.charges[i]] = 1.0;
    row[A + Q] = z.t;
    std::copy_n(sc.atom_probs.begin() + i * A, A, row + A + Q + 1);
    std::copy_n(sc.charge_probs.begin() + i * Q, Q, row + 2 * A + Q + 1);
  }

  std::vector<double> xin(n * 6);
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) {
      xin[i * 6 + k] = z.coords[i][k];
      xin[i * 6 + 3 + k] = sc.coords[i][k];
    }

  std::vector<double> bond_feat(n * n * 2 * B, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t ij = i * n + j;
      const int b = z.bonds[ij];
      check_index(b, B, mask[i] == 0.0 || mask[j] == 0.0, "bond", ij);
      double *row = bond_feat.data() + ij * 2 * B;
      if (b != kPadIndex)
        row[b] = 1.0;
      std::copy_n(sc.bond_probs.begin() + ij * B, B, row + B);
    }

  Embedded e;
  e.state.h = params.embed.atom(Tensor({ n, width }, std::move(feat)));
  e.state.x = channel_mix(params.embed.coord_mix,
                          Tensor({ n, 2, 3 }, std::move(xin)));
  e.edge = reshape(params.embed.bond(Tensor({ n * n, 2 * B },
                                            std::move(bond_feat))),
                   { n, n, c.d_edge });
  return e;
}

Tensor refine_bonds(const ModelParams &params, const Tensor &h_final,
                    const Tensor &x_final, const Tensor &coords,
                    const Tensor &edge, std::span<const double> mask) {
  const HeadParams &hp = params.heads;
  const std::size_t n = h_final.dim(0), B = params.config.n_bond_types;
  Tensor hb = matmul(norm_inv(hp.ln_out, h_final), hp.bond_proj);
  Tensor dots = pair_dots(norm_equi(hp.en_out, x_final, mask));
  Tensor diff = sub(expand_pairs_rows(coords), expand_pairs_cols(coords));
  Tensor dist2 = reshape(sum_axis(square(diff), 2), { n, n, 1 });

  const Tensor parts[] = { expand_pairs_rows(hb), expand_pairs_cols(hb), dist2,
                           dots, edge };
  Tensor in = concat_last(parts);
  const std::size_t width = in.dim(2);
  Tensor logits = reshape(hp.bond(reshape(in, { n * n, width })), { n, n, B });
  Tensor sym = scale(add(logits, swap_pair_axes(logits)), 0.5);

  std::vector<double> keep(n * n * B, 1.0), pin(n * n * B, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < B; ++b) {
      keep[(i * n + i) * B + b] = 0.0;
      pin[(i * n + i) * B + b] = b == 0 ? 0.0 : kForbiddenLogit;
    }
  return add(mul(sym, Tensor({ n, n, B }, std::move(keep))),
             Tensor({ n, n, B }, std::move(pin)));
}

Prediction forward(const ModelParams &params, const NoisyState &z) {
  const SemlaConfig &c = params.config;
  if (params.layers.size() != c.n_layers)
    throw std::invalid_argument("forward: parameter stack has "
                                + std::to_string(params.layers.size())
                                + " layers, config says "
                                + std::to_string(c.n_layers));
  const std::size_t n = z.size();
  const std::vector<double> mask = full_mask(z.mask, n);

  Embedded e = embed_inputs(params, z);
  NodeState s = e.state;
  Tensor edge;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerOutput out = semla_layer(params.layers[l], c, s, mask,
                                  l == 0 ? &e.edge : nullptr,
                                  l + 1 == c.n_layers);
    s = out.state;
    edge = out.edge;
  }

  Prediction pred;
  Tensor coords = reshape(channel_mix(params.heads.coord_out, s.x), { n, 3 });
  coords = sub(coords, masked_mean_rows(coords, mask));
  if (has_padding(mask))
    coords = scale_rows(coords, Tensor({ n }, mask));
  pred.coords = coords;

  Tensor hf = norm_inv(params.heads.ln_out, s.h);
  pred.atom_logits = params.heads.atom(hf);
  pred.charge_logits = params.heads.charge(hf);
  pred.bond_logits = refine_bonds(params, s.h, s.x, coords, edge, mask);
  return pred;
}
}  // namespace semla
