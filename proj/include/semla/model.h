//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "semla/molecule.h"
#include "semla/tensor.h"

namespace semla {
// Shape of a SEMLA stack. Invariant features h are (n, d_inv); equivariant
// features x are (n, d_equi, 3).
struct SemlaConfig {
  std::size_t n_layers = 2;
  std::size_t d_inv = 32;
  std::size_t d_equi = 8;
  std::size_t d_l = 8;
  std::size_t n_heads = 4;
  std::size_t d_edge = 8;
  std::size_t n_atom_types = 9;
  std::size_t n_charges = 6;
  std::size_t n_bond_types = kNumBondTypes;

  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;

  static SemlaConfig toy(const Vocabulary &vocab);

  std::string serialize() const;  // key=value lines
  static SemlaConfig parse(std::string_view text);

  friend bool operator==(const SemlaConfig &, const SemlaConfig &) = default;
};

// Weight is (in, out) so that y = x W + b.
struct Linear {
  Tensor weight;
  Tensor bias;  // empty when the layer has no bias

  Tensor operator()(const Tensor &x) const;
};

// Linear -> SiLU -> Linear.
struct Mlp {
  Linear l1;
  Linear l2;

  Tensor operator()(const Tensor &x) const;
};

struct LayerNormParams {
  Tensor gain;  // (d)
  Tensor bias;  // (d)
};

struct EquiNormParams {
  Tensor gain;  // (channels)
};

struct LayerParams {
  // feed-forward
  LayerNormParams ln_ff;
  EquiNormParams en_ff;
  Tensor w1;  // (d_equi, d_equi)
  Mlp phi;    // d_inv + d_equi -> 4 d_inv -> d_inv
  Mlp psi;    // d_inv -> d_inv -> d_equi
  Tensor w2;  // (d_equi, d_equi)

  // attention
  LayerNormParams ln_att;
  EquiNormParams en_att;
  Tensor w3;    // (d_inv, d_l)
  Mlp omega;    // 2 d_l + d_equi [+ d_edge] -> d_l -> 2K [+ d_edge]
  Tensor w4;    // (d_inv, d_inv)
  Tensor w5;    // (d_inv, d_inv)
  Tensor w6;    // (d_equi, d_equi)
  Tensor w7;    // (d_equi, d_equi)
};

struct EmbedParams {
  Mlp atom;          // one-hot atom | one-hot charge | t | sc atom | sc charge
  Tensor coord_mix;  // (d_equi, 2): [x_t, sc coords] -> channels
  Linear bond;       // one-hot bond | sc bond -> d_edge
};

struct HeadParams {
  LayerNormParams ln_out;
  EquiNormParams en_out;
  Tensor coord_out;  // (1, d_equi)
  Mlp atom;          // d_inv -> d_inv -> |A|
  Mlp charge;        // d_inv -> d_inv -> |C|
  Tensor bond_proj;  // (d_inv, d_l)
  Mlp bond;          // 2 d_l + 1 + d_equi + d_edge -> d_l -> |B|
};

struct ModelParams {
  SemlaConfig config;
  EmbedParams embed;
  std::vector<LayerParams> layers;
  HeadParams heads;

  // Visits every tensor with a stable, unique name in a fixed order.
  void for_each(const std::function<void(const std::string &, Tensor &)> &fn);
  void for_each(const std::function<void(const std::string &, const Tensor &)>
                    &fn) const;

  std::size_t parameter_count() const;

  // Throws std::invalid_argument when a tensor does not match the config.
  void check_shapes() const;
};

struct InitOptions {
  // Zero the residual output projections (W2, W5, W7 and the final layer of
  // Phi) so each layer starts as the identity map.
  bool zero_residual_outputs = true;
  // Also randomize gains, biases and zeroed weights; used by gradient tests
  // so that no parameter sits at a degenerate point.
  bool randomize_everything = false;
};

ModelParams init_params(const SemlaConfig &config, std::uint64_t seed,
                        const InitOptions &options = {});

// Output of a previous forward pass fed back as input.
struct SelfCondition {
  std::vector<Vec3> coords;
  std::vector<double> atom_probs;    // n * |A|
  std::vector<double> charge_probs;  // n * |C|
  std::vector<double> bond_probs;    // n * n * |B|

  // Zero coordinates and uniform distributions.
  static SelfCondition neutral(std::size_t n, const SemlaConfig &config);
};

// Time-indexed interpolated molecule given to the network.
struct NoisyState {
  double t = 0.0;
  std::vector<Vec3> coords;
  std::vector<int> atoms;
  std::vector<int> bonds;  // n * n
  std::vector<int> charges;
  std::optional<SelfCondition> self_cond;
  std::vector<double> mask;  // empty means every atom is real

  std::size_t size() const { return atoms.size(); }
};

struct Prediction {
  Tensor coords;         // (n, 3), zero-centered over real atoms
  Tensor atom_logits;    // (n, |A|)
  Tensor charge_logits;  // (n, |C|)
  Tensor bond_logits;    // (n, n, |B|), symmetric

  SelfCondition to_self_condition() const;
};

struct NodeState {
  Tensor h;  // (n, d_inv)
  Tensor x;  // (n, d_equi, 3)
};

// --- building blocks -------------------------------------------------------

Tensor norm_inv(const LayerNormParams &p, const Tensor &h);

// Per-channel centering over real atoms, division by the mean vector norm of
// the channel, then a learnable per-channel gain. Padded rows become zero.
inline constexpr double kEquiNormEps = 1e-6;
Tensor norm_equi(const EquiNormParams &p, const Tensor &x,
                 std::span<const double> mask);

// Applies a (c_out, c_in) channel mix to (n, c_in, 3) features.
Tensor channel_mix(const Tensor &w, const Tensor &x);

NodeState feed_forward(const LayerParams &p, const NodeState &s,
                       std::span<const double> mask);

struct Messages {
  Tensor inv;   // (n, n, K)
  Tensor equi;  // (n, n, K)
  Tensor edge;  // (n, n, d_edge) on the last layer, else empty
};

// `edge_in` is supplied to the first layer only; `emit_edges` on the last.
Messages latent_messages(const LayerParams &p, const NodeState &s,
                         std::span<const double> mask, const Tensor *edge_in,
                         bool emit_edges, std::size_t n_heads,
                         std::size_t d_edge);

// sqrt(sum_j alpha_ij^2) for alpha (n, n, K) -> (n, K).
Tensor variance_preserving_weights(const Tensor &alpha);

Tensor attend_invariant(const LayerParams &p, const NodeState &s,
                        const Tensor &m_inv, std::span<const double> mask);
Tensor attend_equivariant(const LayerParams &p, const NodeState &s,
                          const Tensor &m_equi, std::span<const double> mask);

struct LayerOutput {
  NodeState state;
  Tensor edge;  // only from the last layer
};

LayerOutput semla_layer(const LayerParams &p, const SemlaConfig &config,
                        const NodeState &s, std::span<const double> mask,
                        const Tensor *edge_in, bool emit_edges);

struct Embedded {
  NodeState state;
  Tensor edge;  // (n, n, d_edge)
};

Embedded embed_inputs(const ModelParams &params, const NoisyState &z);

Tensor refine_bonds(const ModelParams &params, const Tensor &h_final,
                    const Tensor &x_final, const Tensor &coords,
                    const Tensor &edge, std::span<const double> mask);

// Large negative logit used to pin the diagonal of bond logits to "none".
inline constexpr double kForbiddenLogit = -1e9;

Prediction forward(const ModelParams &params, const NoisyState &z);

// Row-wise softmax of (rows, v) logits; plain values, no tape.
std::vector<double> softmax_rows(std::span<const double> logits,
                                 std::size_t width);
}  // namespace semla
