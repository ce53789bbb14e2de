//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

// Straightforward loop implementations of the layer equations, written
// without the tensor engine. Used as reference values in tests.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "semla/model.h"

namespace semla::oracle {
using Mat = std::vector<std::vector<double>>;
using Equi = std::vector<std::vector<Vec3>>;  // [atom][channel]

inline Mat to_mat(const Tensor &t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j)
      m[i][j] = t[i * t.dim(1) + j];
  return m;
}

inline Equi to_equi(const Tensor &t) {
  Equi e(t.dim(0), std::vector<Vec3>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t c = 0; c < t.dim(1); ++c)
      for (int k = 0; k < 3; ++k)
        e[i][c][k] = t[(i * t.dim(1) + c) * 3 + k];
  return e;
}

inline double at(const Tensor &t, std::size_t i, std::size_t j) {
  return t[i * t.dim(1) + j];
}

inline std::vector<double> linear(const std::vector<double> &x,
                                  const Linear &l) {
  std::vector<double> y(l.weight.dim(1), 0.0);
  for (std::size_t o = 0; o < y.size(); ++o) {
    for (std::size_t i = 0; i < x.size(); ++i)
      y[o] += x[i] * at(l.weight, i, o);
    if (!l.bias.empty())
      y[o] += l.bias[o];
  }
  return y;
}

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }

inline std::vector<double> mlp(const std::vector<double> &x, const Mlp &m) {
  std::vector<double> hidden = linear(x, m.l1);
  for (double &v: hidden)
    v = silu(v);
  return linear(hidden, m.l2);
}

inline std::vector<double> vec_mat(const std::vector<double> &x,
                                   const Tensor &w) {
  std::vector<double> y(w.dim(1), 0.0);
  for (std::size_t o = 0; o < y.size(); ++o)
    for (std::size_t i = 0; i < x.size(); ++i)
      y[o] += x[i] * at(w, i, o);
  return y;
}

inline Mat layer_norm(const Mat &h, const LayerNormParams &p) {
  Mat out = h;
  for (auto &row: out) {
    double mean = 0, var = 0;
    for (double v: row)
      mean += v;
    mean /= row.size();
    for (double v: row)
      var += (v - mean) * (v - mean);
    var /= row.size();
    for (std::size_t d = 0; d < row.size(); ++d)
      row[d] = (row[d] - mean) / std::sqrt(var + kLayerNormEps) * p.gain[d]
               + p.bias[d];
  }
  return out;
}

inline double norm3(const Vec3 &v) {
  return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

inline Equi norm_equi(const Equi &x, const EquiNormParams &p,
                      const std::vector<double> &mask) {
  const std::size_t n = x.size(), c = x[0].size();
  double count = 0;
  for (double m: mask)
    count += m != 0;
  Equi out(n, std::vector<Vec3>(c, Vec3 { 0, 0, 0 }));
  for (std::size_t ch = 0; ch < c; ++ch) {
    Vec3 mean { 0, 0, 0 };
    for (std::size_t i = 0; i < n; ++i)
      if (mask[i] != 0)
        for (int k = 0; k < 3; ++k)
          mean[k] += x[i][ch][k] / count;
    double mean_norm = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask[i] != 0) {
        for (int k = 0; k < 3; ++k)
          out[i][ch][k] = x[i][ch][k] - mean[k];
        mean_norm += norm3(out[i][ch]) / count;
      }
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k)
        out[i][ch][k] *= p.gain[ch] / (mean_norm + kEquiNormEps);
  }
  return out;
}

// W is (out, in).
inline Equi mix(const Tensor &w, const Equi &x) {
  Equi out(x.size(), std::vector<Vec3>(w.dim(0), Vec3 { 0, 0, 0 }));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < w.dim(0); ++o)
      for (std::size_t c = 0; c < w.dim(1); ++c)
        for (int k = 0; k < 3; ++k)
          out[i][o][k] += at(w, o, c) * x[i][c][k];
  return out;
}

using Pair3 = std::vector<std::vector<std::vector<double>>>;  // [i][j][k]

inline Pair3 to_pair(const Tensor &t) {
  const std::size_t n = t.dim(0), k = t.dim(2);
  Pair3 p(n, Mat(n, std::vector<double>(k)));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t h = 0; h < k; ++h)
        p[i][j][h] = t[(i * n + j) * k + h];
  return p;
}

// alpha[i][j][k] = exp(m_ijk) / sum_j' exp(m_ij'k) over unmasked j.
inline Pair3 attention(const Pair3 &m, const std::vector<double> &mask) {
  Pair3 a = m;
  const std::size_t n = m.size(), K = m[0][0].size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      double total = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (mask[j] != 0)
          total += std::exp(m[i][j][k]);
      for (std::size_t j = 0; j < n; ++j)
        a[i][j][k] = mask[j] != 0 ? std::exp(m[i][j][k]) / total : 0.0;
    }
  return a;
}

inline Mat vp_weights(const Pair3 &alpha) {
  const std::size_t n = alpha.size(), K = alpha[0][0].size();
  Mat w(n, std::vector<double>(K, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t j = 0; j < n; ++j)
        w[i][k] += alpha[i][j][k] * alpha[i][j][k];
      w[i][k] = std::sqrt(w[i][k]);
    }
  return w;
}

inline Mat attend_invariant(const LayerParams &p, const Mat &h,
                            const Pair3 &m_inv,
                            const std::vector<double> &mask) {
  const std::size_t n = h.size(), D = h[0].size(), K = m_inv[0][0].size();
  const std::size_t seg = D / K;
  Mat hn = layer_norm(h, p.ln_att);
  Mat ht(n);
  for (std::size_t i = 0; i < n; ++i)
    ht[i] = vec_mat(hn[i], p.w4);
  Pair3 alpha = attention(m_inv, mask);
  Mat w = vp_weights(alpha);
  Mat out = h;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> cat(D, 0.0);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t s = 0; s < seg; ++s) {
        double a = 0;
        for (std::size_t j = 0; j < n; ++j)
          a += alpha[i][j][k] * ht[j][k * seg + s];
        cat[k * seg + s] = w[i][k] * a;
      }
    std::vector<double> upd = vec_mat(cat, p.w5);
    for (std::size_t d = 0; d < D; ++d)
      out[i][d] += upd[d];
  }
  return out;
}

inline Equi attend_equivariant(const LayerParams &p, const Equi &x,
                               const Pair3 &m_equi,
                               const std::vector<double> &mask) {
  const std::size_t n = x.size(), C = x[0].size(), K = m_equi[0][0].size();
  const std::size_t seg = C / K;
  Equi xt = mix(p.w6, norm_equi(x, p.en_att, mask));
  Pair3 alpha = attention(m_equi, mask);
  Mat w = vp_weights(alpha);
  Equi agg(n, std::vector<Vec3>(C, Vec3 { 0, 0, 0 }));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t k = c / seg;
      for (std::size_t j = 0; j < n; ++j) {
        Vec3 d;
        for (int q = 0; q < 3; ++q)
          d[q] = xt[j][c][q] - xt[i][c][q];
        const double len = norm3(d);
        if (i == j || len < kDirectionMinDist)
          continue;
        for (int q = 0; q < 3; ++q)
          agg[i][c][q] += alpha[i][j][k] * d[q] / len;
      }
      for (int q = 0; q < 3; ++q)
        agg[i][c][q] *= w[i][k];
    }
  Equi upd = mix(p.w7, agg);
  Equi out = x;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < C; ++c)
      for (int q = 0; q < 3; ++q)
        out[i][c][q] += upd[i][c][q];
  return out;
}

inline Tensor equi_tensor(const Equi &e) {
  std::vector<double> v;
  for (const auto &row: e)
    for (const auto &c: row)
      v.insert(v.end(), c.begin(), c.end());
  return Tensor({ e.size(), e[0].size(), 3 }, v);
}

inline Tensor mat_tensor(const Mat &m) {
  std::vector<double> v;
  for (const auto &row: m)
    v.insert(v.end(), row.begin(), row.end());
  return Tensor({ m.size(), m[0].size() }, v);
}

// --- rigid motions -----------------------------------------------------------

using Mat3 = std::array<std::array<double, 3>, 3>;

// Uniform random rotation from a normalized Gaussian quaternion, optionally
// composed with a point reflection so that det = -1.
inline Mat3 random_orthogonal(std::mt19937_64 &rng, bool reflect) {
  std::normal_distribution<double> g(0.0, 1.0);
  double q[4];
  double len = 0;
  for (double &v: q) {
    v = g(rng);
    len += v * v;
  }
  len = std::sqrt(len);
  for (double &v: q)
    v /= len;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r { { { 1 - 2 * (y * y + z * z), 2 * (x * y - w * z),
               2 * (x * z + w * y) },
             { 2 * (x * y + w * z), 1 - 2 * (x * x + z * z),
               2 * (y * z - w * x) },
             { 2 * (x * z - w * y), 2 * (y * z + w * x),
               1 - 2 * (x * x + y * y) } } };
  if (reflect)
    for (auto &row: r)
      for (double &v: row)
        v = -v;
  return r;
}

inline Vec3 apply(const Mat3 &r, const Vec3 &v, const Vec3 &t = { 0, 0, 0 }) {
  Vec3 out;
  for (int a = 0; a < 3; ++a)
    out[a] = r[a][0] * v[0] + r[a][1] * v[1] + r[a][2] * v[2] + t[a];
  return out;
}

// Applies r to every trailing 3-vector of a tensor.
inline Tensor rotate(const Mat3 &r, const Tensor &x) {
  std::vector<double> v = x.to_vector();
  for (std::size_t i = 0; i + 2 < v.size(); i += 3) {
    Vec3 p = apply(r, { v[i], v[i + 1], v[i + 2] });
    std::copy(p.begin(), p.end(), v.begin() + i);
  }
  return Tensor(x.shape(), v);
}

inline double max_abs_diff(const Tensor &a, const Tensor &b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Mat &a, const Tensor &b) {
  return max_abs_diff(mat_tensor(a), b);
}

inline double max_abs_diff(const Equi &a, const Tensor &b) {
  return max_abs_diff(equi_tensor(a), b);
}
}  // namespace semla::oracle
