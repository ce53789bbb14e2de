//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/tensor.h"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

namespace semla {
std::size_t shape_size(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t { 1 },
                         std::multiplies<> {});
}

std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0)
      os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)) {
  if (shape_size(shape_) != data.size())
    throw DimensionError("tensor data length " + std::to_string(data.size())
                         + " does not match shape " + shape_str(shape_));
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) {
  const std::size_t n = shape_size(shape);
  return { std::move(shape), std::vector<double>(n, 0.0) };
}

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_size(shape);
  return { std::move(shape), std::vector<double>(n, value) };
}

Tensor Tensor::scalar(double value) { return { {}, { value } }; }

double Tensor::item() const {
  if (size() != 1)
    throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape *g_active_tape = nullptr;
}  // namespace

Tape *active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape &tape): previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope(): previous_(g_active_tape) {
  g_active_tape = nullptr;
}

NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tensor Tape::watch(const Tensor &leaf) {
  Tensor t = leaf;
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back({ leaf.size(), {}, nullptr });
  return t;
}

Tensor Tape::record(Shape shape, std::vector<double> value,
                    Backward backward) {
  Tensor t(std::move(shape), std::move(value));
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back({ t.size(), {}, std::move(backward) });
  return t;
}

void Tape::backward(const Tensor &loss) {
  if (!owns(loss))
    throw std::invalid_argument("backward: loss is not recorded on this tape");
  if (loss.size() != 1)
    throw DimensionError("backward: loss must be a scalar, got shape "
                         + shape_str(loss.shape()));

  for (Node &n: nodes_)
    n.grad.assign(n.size, 0.0);
  nodes_[loss.node()].grad[0] = 1.0;

  for (int i = loss.node(); i >= 0; --i) {
    Node &n = nodes_[i];
    if (!n.backward)
      continue;
    if (std::all_of(n.grad.begin(), n.grad.end(),
                    [](double g) { return g == 0.0; }))
      continue;
    n.backward(n.grad);
  }
}

std::span<const double> Tape::grad(const Tensor &t) const {
  if (!owns(t))
    throw std::invalid_argument("grad: tensor is not recorded on this tape");
  const Node &n = nodes_[t.node()];
  return { n.grad.data(), n.grad.size() };
}

std::span<double> Tape::grad_buffer(int node) {
  Node &n = nodes_[node];
  if (n.grad.size() != n.size)
    n.grad.assign(n.size, 0.0);
  return { n.grad.data(), n.grad.size() };
}

// ---------------------------------------------------------------------------
// Primitives

namespace {
Tape *recording_tape(std::initializer_list<const Tensor *> inputs) {
  Tape *tape = g_active_tape;
  if (tape == nullptr)
    return nullptr;
  for (const Tensor *t: inputs)
    if (tape->owns(*t))
      return tape;
  return nullptr;
}

Tape *recording_tape(std::span<const Tensor> inputs) {
  Tape *tape = g_active_tape;
  if (tape == nullptr)
    return nullptr;
  for (const Tensor &t: inputs)
    if (tape->owns(t))
      return tape;
  return nullptr;
}

// Returns an accumulation buffer when `t` participates in `tape`.
std::span<double> grad_of(Tape *tape, const Tensor &t) {
  if (!tape->owns(t))
    return {};
  return tape->grad_buffer(t.node());
}

bool is_suffix(const Shape &whole, const Shape &part) {
  if (part.size() > whole.size())
    return false;
  return std::equal(part.rbegin(), part.rend(), whole.rbegin());
}

bool is_prefix(const Shape &whole, const Shape &part) {
  if (part.size() > whole.size())
    return false;
  return std::equal(part.begin(), part.end(), whole.begin());
}

void require_suffix(const char *op, const Tensor &a, const Tensor &b) {
  if (!is_suffix(a.shape(), b.shape()))
    throw DimensionError(std::string(op) + ": cannot combine shapes "
                         + shape_str(a.shape()) + " and "
                         + shape_str(b.shape()));
}

void require_rank(const char *op, const Tensor &x, std::size_t rank) {
  if (x.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank "
                         + std::to_string(rank) + ", got shape "
                         + shape_str(x.shape()));
}

Tensor finish(Tape *tape, Shape shape, std::vector<double> out,
              Tape::Backward backward) {
  if (tape == nullptr)
    return { std::move(shape), std::move(out) };
  return tape->record(std::move(shape), std::move(out), std::move(backward));
}

// Splits `shape` around `axis` into (outer, len, inner) extents.
struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape &shape, std::size_t axis) {
  AxisSplit s { 1, shape[axis], 1 };
  for (std::size_t i = 0; i < axis; ++i)
    s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i)
    s.inner *= shape[i];
  return s;
}
}  // namespace

Tensor add(const Tensor &a, const Tensor &b) {
  require_suffix("add", a, b);
  const auto x = a.data(), y = b.data();
  const std::size_t inner = b.size();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x[i] + y[i % inner];

  Tape *tape = recording_tape({ &a, &b });
  return finish(tape, a.shape(), std::move(out),
                [tape, a, b, inner](std::span<const double> g) {
                  if (auto ga = grad_of(tape, a); !ga.empty())
                    for (std::size_t i = 0; i < g.size(); ++i)
                      ga[i] += g[i];
                  if (auto gb = grad_of(tape, b); !gb.empty())
                    for (std::size_t i = 0; i < g.size(); ++i)
                      gb[i % inner] += g[i];
                });
}

Tensor sub(const Tensor &a, const Tensor &b) {
  require_suffix("sub", a, b);
  const auto x = a.data(), y = b.data();
  const std::size_t inner = b.size();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x[i] - y[i % inner];

  Tape *tape = recording_tape({ &a, &b });
  return finish(tape, a.shape(), std::move(out),
                [tape, a, b, inner](std::span<const double> g) {
                  if (auto ga = grad_of(tape, a); !ga.empty())
                    for (std::size_t i = 0; i < g.size(); ++i)
                      ga[i] += g[i];
                  if (auto gb = grad_of(tape, b); !gb.empty())
                    for (std::size_t i = 0; i < g.size(); ++i)
                      gb[i % inner] -= g[i];
                });
}

Tensor mul(const Tensor &a, const Tensor &b) {
  require_suffix("mul", a, b);
  const auto x = a.data(), y = b.data();
  const std::size_t inner = b.size();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x[i] * y[i % inner];

  Tape *tape = recording_tape({ &a, &b });
  return finish(tape, a.shape(), std::move(out),
                [tape, a, b, inner](std::span<const double> g) {
                  const auto x = a.data(), y = b.data();
                  if (auto ga = grad_of(tape, a); !ga.empty())
                    for (std::size_t i = 0; i < g.size(); ++i)
                      ga[i] += g[i] * y[i % inner];
                  if (auto gb = grad_of(tape, b); !gb.empty())
                    for (std::size_t i = 0; i < g.size(); ++i)
                      gb[i % inner] += g[i] * x[i];
                });
}

Tensor div(const Tensor &a, const Tensor &b) {
  require_suffix("div", a, b);
  const auto x = a.data(), y = b.data();
  const std::size_t inner = b.size();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x[i] / y[i % inner];

  Tape *tape = recording_tape({ &a, &b });
  return finish(tape, a.shape(), std::move(out),
                [tape, a, b, inner](std::span<const double> g) {
                  const auto x = a.data(), y = b.data();
                  if (auto ga = grad_of(tape, a); !ga.empty())
                    for (std::size_t i = 0; i < g.size(); ++i)
                      ga[i] += g[i] / y[i % inner];
                  if (auto gb = grad_of(tape, b); !gb.empty())
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      const double yi = y[i % inner];
                      gb[i % inner] -= g[i] * x[i] / (yi * yi);
                    }
                });
}

Tensor scale(const Tensor &a, double s) {
  const auto x = a.data();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x[i] * s;

  Tape *tape = recording_tape({ &a });
  return finish(tape, a.shape(), std::move(out),
                [tape, a, s](std::span<const double> g) {
                  auto ga = grad_of(tape, a);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    ga[i] += g[i] * s;
                });
}

Tensor scale_rows(const Tensor &a, const Tensor &w) {
  if (!is_prefix(a.shape(), w.shape()) || w.size() == 0)
    throw DimensionError("scale_rows: cannot scale shape "
                         + shape_str(a.shape()) + " by "
                         + shape_str(w.shape()));
  const std::size_t inner = a.size() / w.size();
  const auto x = a.data(), y = w.data();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x[i] * y[i / inner];

  Tape *tape = recording_tape({ &a, &w });
  return finish(tape, a.shape(), std::move(out),
                [tape, a, w, inner](std::span<const double> g) {
                  const auto x = a.data(), y = w.data();
                  if (auto ga = grad_of(tape, a); !ga.empty())
                    for (std::size_t i = 0; i < g.size(); ++i)
                      ga[i] += g[i] * y[i / inner];
                  if (auto gw = grad_of(tape, w); !gw.empty())
                    for (std::size_t i = 0; i < g.size(); ++i)
                      gw[i / inner] += g[i] * x[i];
                });
}

namespace {
// c(m,n) += a(m,k) * b(k,n)
void gemm_nn(const double *a, const double *b, double *c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double *ci = c + i * n;
    const double *ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0)
        continue;
      const double *bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j)
        ci[j] += av * bp[j];
    }
  }
}

// c(m,k) += g(m,n) * b(k,n)^T
void gemm_nt(const double *g, const double *b, double *c, std::size_t m,
             std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double *gi = g + i * n;
    double *ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double *bp = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        acc += gi[j] * bp[j];
      ci[p] += acc;
    }
  }
}

// c(k,n) += a(m,k)^T * g(m,n)
void gemm_tn(const double *a, const double *g, double *c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double *ai = a + i * k;
    const double *gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0)
        continue;
      double *cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j)
        cp[j] += av * gi[j];
    }
  }
}
}  // namespace

Tensor matmul(const Tensor &a, const Tensor &b) {
  if (a.rank() != 2 || (b.rank() != 2 && b.rank() != 3)
      || a.dim(1) != b.dim(b.rank() - 2))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape())
                         + " and " + shape_str(b.shape()));

  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(b.rank() - 1);
  Tape *tape = recording_tape({ &a, &b });

  if (b.rank() == 2) {
    std::vector<double> out(m * n, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return finish(tape, { m, n }, std::move(out),
                  [tape, a, b, m, k, n](std::span<const double> g) {
                    if (auto ga = grad_of(tape, a); !ga.empty())
                      gemm_nt(g.data(), b.data().data(), ga.data(), m, n, k);
                    if (auto gb = grad_of(tape, b); !gb.empty())
                      gemm_tn(a.data().data(), g.data(), gb.data(), m, k, n);
                  });
  }

  const std::size_t batch = b.dim(0);
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t s = 0; s < batch; ++s)
    gemm_nn(a.data().data(), b.data().data() + s * k * n,
            out.data() + s * m * n, m, k, n);
  return finish(tape, { batch, m, n }, std::move(out),
                [tape, a, b, batch, m, k, n](std::span<const double> g) {
                  auto ga = grad_of(tape, a);
                  auto gb = grad_of(tape, b);
                  for (std::size_t s = 0; s < batch; ++s) {
                    const double *gs = g.data() + s * m * n;
                    if (!ga.empty())
                      gemm_nt(gs, b.data().data() + s * k * n, ga.data(), m,
                              n, k);
                    if (!gb.empty())
                      gemm_tn(a.data().data(), gs, gb.data() + s * k * n, m,
                              k, n);
                  }
                });
}

Tensor silu(const Tensor &x) {
  const auto v = x.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = v[i] / (1.0 + std::exp(-v[i]));

  Tape *tape = recording_tape({ &x });
  return finish(tape, x.shape(), std::move(out),
                [tape, x](std::span<const double> g) {
                  const auto v = x.data();
                  auto gx = grad_of(tape, x);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const double s = 1.0 / (1.0 + std::exp(-v[i]));
                    gx[i] += g[i] * s * (1.0 + v[i] * (1.0 - s));
                  }
                });
}

Tensor sqrt(const Tensor &x) {
  const auto v = x.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (v[i] < 0.0)
      throw std::domain_error("sqrt: negative input");
    out[i] = std::sqrt(v[i]);
  }

  Tape *tape = recording_tape({ &x });
  if (tape == nullptr)
    return { x.shape(), std::move(out) };
  auto y = std::make_shared<std::vector<double>>(out);
  return tape->record(x.shape(), std::move(out),
                      [tape, x, y](std::span<const double> g) {
                        auto gx = grad_of(tape, x);
                        for (std::size_t i = 0; i < g.size(); ++i)
                          if ((*y)[i] > 0.0)
                            gx[i] += g[i] * 0.5 / (*y)[i];
                      });
}

Tensor square(const Tensor &x) {
  const auto v = x.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = v[i] * v[i];

  Tape *tape = recording_tape({ &x });
  return finish(tape, x.shape(), std::move(out),
                [tape, x](std::span<const double> g) {
                  const auto v = x.data();
                  auto gx = grad_of(tape, x);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    gx[i] += 2.0 * v[i] * g[i];
                });
}

Tensor softmax(const Tensor &x, std::size_t axis,
               std::span<const double> mask) {
  if (axis >= x.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis)
                         + " out of range for shape " + shape_str(x.shape()));
  const auto [outer, len, inner] = split_axis(x.shape(), axis);
  if (len == 0)
    throw DimensionError("softmax: empty axis");
  if (!mask.empty() && mask.size() != len)
    throw DimensionError("softmax: mask length does not match axis");
  if (!mask.empty()
      && std::none_of(mask.begin(), mask.end(),
                      [](double m) { return m != 0.0; }))
    throw std::invalid_argument("softmax: mask excludes every position");

  const auto v = x.data();
  std::vector<double> out(x.size(), 0.0);
  auto keep = [&](std::size_t l) { return mask.empty() || mask[l] != 0.0; };

  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < len; ++l)
        if (keep(l))
          mx = std::max(mx, v[base + l * inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        if (!keep(l))
          continue;
        const double e = std::exp(v[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < len; ++l)
        out[base + l * inner] /= total;
    }
  }

  Tape *tape = recording_tape({ &x });
  if (tape == nullptr)
    return { x.shape(), std::move(out) };
  auto y = std::make_shared<std::vector<double>>(out);
  return tape->record(
      x.shape(), std::move(out),
      [tape, x, y, outer = outer, len = len,
       inner = inner](std::span<const double> g) {
        auto gx = grad_of(tape, x);
        const auto &p = *y;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double dot = 0.0;
            for (std::size_t l = 0; l < len; ++l)
              dot += g[base + l * inner] * p[base + l * inner];
            for (std::size_t l = 0; l < len; ++l) {
              const std::size_t i = base + l * inner;
              gx[i] += p[i] * (g[i] - dot);
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor &logits, std::span<const int> targets) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t m = logits.dim(0), v = logits.dim(1);
  if (m == 0 || v == 0)
    throw DimensionError("cross_entropy: empty logits");
  if (targets.size() != m)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size())
                         + " targets for " + std::to_string(m) + " rows");
  for (int t: targets)
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw std::out_of_range("cross_entropy: target index out of range");

  const auto l = logits.data();
  auto probs = std::make_shared<std::vector<double>>(m * v);
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const double *row = l.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c)
      z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[targets[r]];
    for (std::size_t c = 0; c < v; ++c)
      (*probs)[r * v + c] = std::exp(row[c] - lse);
  }

  Tape *tape = recording_tape({ &logits });
  std::vector<int> tgt(targets.begin(), targets.end());
  return finish(tape, {}, { total / static_cast<double>(m) },
                [tape, logits, probs, tgt = std::move(tgt), m,
                 v](std::span<const double> g) {
                  auto gl = grad_of(tape, logits);
                  const double s = g[0] / static_cast<double>(m);
                  for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t c = 0; c < v; ++c)
                      gl[r * v + c] += s * (*probs)[r * v + c];
                    gl[r * v + tgt[r]] -= s;
                  }
                });
}

Tensor norm_last(const Tensor &x) {
  if (x.rank() == 0)
    throw DimensionError("norm_last: scalar input");
  const std::size_t len = x.shape().back();
  const std::size_t rows = len == 0 ? 0 : x.size() / len;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  const auto v = x.data();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < len; ++c)
      s += v[r * len + c] * v[r * len + c];
    out[r] = std::sqrt(s);
  }

  Tape *tape = recording_tape({ &x });
  if (tape == nullptr)
    return { std::move(shape), std::move(out) };
  auto y = std::make_shared<std::vector<double>>(out);
  return tape->record(std::move(shape), std::move(out),
                      [tape, x, y, rows, len](std::span<const double> g) {
                        const auto v = x.data();
                        auto gx = grad_of(tape, x);
                        for (std::size_t r = 0; r < rows; ++r) {
                          if ((*y)[r] == 0.0)
                            continue;
                          const double s = g[r] / (*y)[r];
                          for (std::size_t c = 0; c < len; ++c)
                            gx[r * len + c] += s * v[r * len + c];
                        }
                      });
}

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty())
    throw DimensionError("concat_last: no inputs");
  const Shape &first = parts[0].shape();
  if (first.empty())
    throw DimensionError("concat_last: scalar input");
  Shape shape = first;
  shape.back() = 0;
  std::vector<std::size_t> widths;
  for (const Tensor &p: parts) {
    if (p.rank() != first.size()
        || !std::equal(first.begin(), first.end() - 1, p.shape().begin()))
      throw DimensionError("concat_last: cannot concatenate "
                           + shape_str(first) + " and "
                           + shape_str(p.shape()));
    widths.push_back(p.shape().back());
    shape.back() += p.shape().back();
  }
  const std::size_t total = shape.back();
  const std::size_t rows = shape_size(shape) == 0 ? 0 : shape_size(shape) / total;

  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].data();
    const std::size_t w = widths[p];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data() + r * w, w, out.data() + r * total + offset);
    offset += w;
  }

  Tape *tape = recording_tape(parts);
  std::vector<Tensor> saved(parts.begin(), parts.end());
  return finish(tape, std::move(shape), std::move(out),
                [tape, saved = std::move(saved), widths, rows,
                 total](std::span<const double> g) {
                  std::size_t offset = 0;
                  for (std::size_t p = 0; p < saved.size(); ++p) {
                    const std::size_t w = widths[p];
                    if (auto gp = grad_of(tape, saved[p]); !gp.empty())
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < w; ++c)
                          gp[r * w + c] += g[r * total + offset + c];
                    offset += w;
                  }
                });
}

Tensor slice_last(const Tensor &x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.shape().back())
    throw DimensionError("slice_last: range [" + std::to_string(begin) + ","
                         + std::to_string(end) + ") invalid for shape "
                         + shape_str(x.shape()));
  const std::size_t len = x.shape().back();
  const std::size_t rows = len == 0 ? 0 : x.size() / len;
  const std::size_t w = end - begin;
  Shape shape = x.shape();
  shape.back() = w;
  const auto v = x.data();
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(v.data() + r * len + begin, w, out.data() + r * w);

  Tape *tape = recording_tape({ &x });
  return finish(tape, std::move(shape), std::move(out),
                [tape, x, rows, len, w, begin](std::span<const double> g) {
                  auto gx = grad_of(tape, x);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < w; ++c)
                      gx[r * len + begin + c] += g[r * w + c];
                });
}

Tensor reshape(const Tensor &x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape())
                         + " as " + shape_str(shape));
  Tape *tape = recording_tape({ &x });
  if (tape == nullptr) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = x.data_;
    return t;
  }
  return tape->record(std::move(shape), x.to_vector(),
                      [tape, x](std::span<const double> g) {
                        auto gx = grad_of(tape, x);
                        for (std::size_t i = 0; i < g.size(); ++i)
                          gx[i] += g[i];
                      });
}

Tensor sum_axis(const Tensor &x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("sum_axis: axis out of range for shape "
                         + shape_str(x.shape()));
  const auto [outer, len, inner] = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const auto v = x.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t in = 0; in < inner; ++in)
        out[o * inner + in] += v[(o * len + l) * inner + in];

  Tape *tape = recording_tape({ &x });
  return finish(tape, std::move(shape), std::move(out),
                [tape, x, outer = outer, len = len,
                 inner = inner](std::span<const double> g) {
                  auto gx = grad_of(tape, x);
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t l = 0; l < len; ++l)
                      for (std::size_t in = 0; in < inner; ++in)
                        gx[(o * len + l) * inner + in] += g[o * inner + in];
                });
}

Tensor sum_all(const Tensor &x) {
  const auto v = x.data();
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  Tape *tape = recording_tape({ &x });
  return finish(tape, {}, { s }, [tape, x](std::span<const double> g) {
    auto gx = grad_of(tape, x);
    for (double &e: gx)
      e += g[0];
  });
}

Tensor mean_all(const Tensor &x) {
  if (x.size() == 0)
    throw DimensionError("mean_all: empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

Tensor variance_last(const Tensor &x) {
  if (x.rank() == 0 || x.shape().back() == 0)
    throw DimensionError("variance_last: empty last axis");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.size() / len;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  const auto v = x.data();
  std::vector<double> out(rows);
  auto means = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < len; ++c)
      mu += v[r * len + c];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t c = 0; c < len; ++c) {
      const double d = v[r * len + c] - mu;
      var += d * d;
    }
    (*means)[r] = mu;
    out[r] = var / static_cast<double>(len);
  }

  Tape *tape = recording_tape({ &x });
  return finish(tape, std::move(shape), std::move(out),
                [tape, x, means, rows, len](std::span<const double> g) {
                  const auto v = x.data();
                  auto gx = grad_of(tape, x);
                  const double inv = 2.0 / static_cast<double>(len);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < len; ++c)
                      gx[r * len + c] += g[r] * inv
                                         * (v[r * len + c] - (*means)[r]);
                });
}

Tensor masked_mean_rows(const Tensor &x, std::span<const double> mask) {
  if (x.rank() == 0 || mask.size() != x.dim(0))
    throw DimensionError("masked_mean_rows: mask length does not match "
                         + shape_str(x.shape()));
  const double count = std::accumulate(mask.begin(), mask.end(), 0.0);
  if (count <= 0.0)
    throw std::invalid_argument("masked_mean_rows: every row is masked");
  const std::size_t rows = x.dim(0);
  const std::size_t inner = rows == 0 ? 0 : x.size() / rows;
  Shape shape(x.shape().begin() + 1, x.shape().end());
  const auto v = x.data();
  std::vector<double> out(inner, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask[r] == 0.0)
      continue;
    for (std::size_t c = 0; c < inner; ++c)
      out[c] += mask[r] * v[r * inner + c];
  }
  for (double &o: out)
    o /= count;

  Tape *tape = recording_tape({ &x });
  std::vector<double> m(mask.begin(), mask.end());
  return finish(tape, std::move(shape), std::move(out),
                [tape, x, m = std::move(m), rows, inner,
                 count](std::span<const double> g) {
                  auto gx = grad_of(tape, x);
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (m[r] == 0.0)
                      continue;
                    const double s = m[r] / count;
                    for (std::size_t c = 0; c < inner; ++c)
                      gx[r * inner + c] += s * g[c];
                  }
                });
}

Tensor layer_norm_core(const Tensor &x, double eps) {
  if (x.rank() == 0 || x.shape().back() == 0)
    throw DimensionError("layer_norm_core: empty last axis");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.size() / len;
  const auto v = x.data();
  std::vector<double> out(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double *row = v.data() + r * len;
    double mu = 0.0;
    for (std::size_t c = 0; c < len; ++c)
      mu += row[c];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t c = 0; c < len; ++c)
      var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < len; ++c)
      out[r * len + c] = (row[c] - mu) * is;
  }

  Tape *tape = recording_tape({ &x });
  if (tape == nullptr)
    return { x.shape(), std::move(out) };
  auto y = std::make_shared<std::vector<double>>(out);
  return tape->record(
      x.shape(), std::move(out),
      [tape, x, y, inv_std, rows, len](std::span<const double> g) {
        auto gx = grad_of(tape, x);
        const double n = static_cast<double>(len);
        for (std::size_t r = 0; r < rows; ++r) {
          const double *gr = g.data() + r * len;
          const double *yr = y->data() + r * len;
          double gmean = 0.0, gy = 0.0;
          for (std::size_t c = 0; c < len; ++c) {
            gmean += gr[c];
            gy += gr[c] * yr[c];
          }
          gmean /= n;
          gy /= n;
          for (std::size_t c = 0; c < len; ++c)
            gx[r * len + c] += (*inv_std)[r] * (gr[c] - gmean - yr[c] * gy);
        }
      });
}

Tensor pair_dots(const Tensor &x) {
  require_rank("pair_dots", x, 3);
  const std::size_t n = x.dim(0), c = x.dim(1), d = x.dim(2);
  const auto v = x.data();
  std::vector<double> out(n * n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double *a = v.data() + (i * c + ch) * d;
        const double *b = v.data() + (j * c + ch) * d;
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k)
          s += a[k] * b[k];
        out[(i * n + j) * c + ch] = s;
      }

  Tape *tape = recording_tape({ &x });
  return finish(tape, { n, n, c }, std::move(out),
                [tape, x, n, c, d](std::span<const double> g) {
                  const auto v = x.data();
                  auto gx = grad_of(tape, x);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        const double gij = g[(i * n + j) * c + ch];
                        if (gij == 0.0)
                          continue;
                        const std::size_t ai = (i * c + ch) * d;
                        const std::size_t bj = (j * c + ch) * d;
                        for (std::size_t k = 0; k < d; ++k) {
                          gx[ai + k] += gij * v[bj + k];
                          gx[bj + k] += gij * v[ai + k];
                        }
                      }
                });
}

Tensor expand_pairs_rows(const Tensor &a) {
  require_rank("expand_pairs_rows", a, 2);
  const std::size_t n = a.dim(0), f = a.dim(1);
  const auto v = a.data();
  std::vector<double> out(n * n * f);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(v.data() + i * f, f, out.data() + (i * n + j) * f);

  Tape *tape = recording_tape({ &a });
  return finish(tape, { n, n, f }, std::move(out),
                [tape, a, n, f](std::span<const double> g) {
                  auto ga = grad_of(tape, a);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      for (std::size_t k = 0; k < f; ++k)
                        ga[i * f + k] += g[(i * n + j) * f + k];
                });
}

Tensor expand_pairs_cols(const Tensor &a) {
  require_rank("expand_pairs_cols", a, 2);
  const std::size_t n = a.dim(0), f = a.dim(1);
  const auto v = a.data();
  std::vector<double> out(n * n * f);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(v.data() + j * f, f, out.data() + (i * n + j) * f);

  Tape *tape = recording_tape({ &a });
  return finish(tape, { n, n, f }, std::move(out),
                [tape, a, n, f](std::span<const double> g) {
                  auto ga = grad_of(tape, a);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      for (std::size_t k = 0; k < f; ++k)
                        ga[j * f + k] += g[(i * n + j) * f + k];
                });
}

Tensor swap_pair_axes(const Tensor &x) {
  if (x.rank() < 2 || x.dim(0) != x.dim(1))
    throw DimensionError("swap_pair_axes: expected (n,n,...), got "
                         + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t inner = n == 0 ? 0 : x.size() / (n * n);
  const auto v = x.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(v.data() + (j * n + i) * inner, inner,
                  out.data() + (i * n + j) * inner);

  Tape *tape = recording_tape({ &x });
  return finish(tape, x.shape(), std::move(out),
                [tape, x, n, inner](std::span<const double> g) {
                  auto gx = grad_of(tape, x);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      for (std::size_t k = 0; k < inner; ++k)
                        gx[(j * n + i) * inner + k] +=
                            g[(i * n + j) * inner + k];
                });
}

Tensor outer_vec(const Tensor &a, const Tensor &v) {
  require_rank("outer_vec", a, 2);
  require_rank("outer_vec", v, 2);
  if (a.dim(0) != v.dim(0))
    throw DimensionError("outer_vec: row mismatch " + shape_str(a.shape())
                         + " vs " + shape_str(v.shape()));
  const std::size_t n = a.dim(0), c = a.dim(1), d = v.dim(1);
  const auto av = a.data(), vv = v.data();
  std::vector<double> out(n * c * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < d; ++k)
        out[(i * c + ch) * d + k] = av[i * c + ch] * vv[i * d + k];

  Tape *tape = recording_tape({ &a, &v });
  return finish(tape, { n, c, d }, std::move(out),
                [tape, a, v, n, c, d](std::span<const double> g) {
                  const auto av = a.data(), vv = v.data();
                  auto ga = grad_of(tape, a);
                  auto gv = grad_of(tape, v);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch)
                      for (std::size_t k = 0; k < d; ++k) {
                        const double gg = g[(i * c + ch) * d + k];
                        if (!ga.empty())
                          ga[i * c + ch] += gg * vv[i * d + k];
                        if (!gv.empty())
                          gv[i * d + k] += gg * av[i * c + ch];
                      }
                });
}

Tensor attend(const Tensor &alpha, const Tensor &values) {
  require_rank("attend", alpha, 3);
  require_rank("attend", values, 3);
  const std::size_t n = alpha.dim(0), k = alpha.dim(2), s = values.dim(2);
  if (alpha.dim(1) != n || values.dim(0) != n || values.dim(1) != k)
    throw DimensionError("attend: incompatible shapes "
                         + shape_str(alpha.shape()) + " and "
                         + shape_str(values.shape()));
  const auto a = alpha.data(), v = values.data();
  std::vector<double> out(n * k * s, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t h = 0; h < k; ++h) {
        const double w = a[(i * n + j) * k + h];
        if (w == 0.0)
          continue;
        const double *vj = v.data() + (j * k + h) * s;
        double *oi = out.data() + (i * k + h) * s;
        for (std::size_t e = 0; e < s; ++e)
          oi[e] += w * vj[e];
      }

  Tape *tape = recording_tape({ &alpha, &values });
  return finish(tape, { n, k, s }, std::move(out),
                [tape, alpha, values, n, k, s](std::span<const double> g) {
                  const auto a = alpha.data(), v = values.data();
                  auto ga = grad_of(tape, alpha);
                  auto gv = grad_of(tape, values);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      for (std::size_t h = 0; h < k; ++h) {
                        const double *gi = g.data() + (i * k + h) * s;
                        const std::size_t vj = (j * k + h) * s;
                        const std::size_t aij = (i * n + j) * k + h;
                        if (!ga.empty()) {
                          double dot = 0.0;
                          for (std::size_t e = 0; e < s; ++e)
                            dot += gi[e] * v[vj + e];
                          ga[aij] += dot;
                        }
                        if (!gv.empty())
                          for (std::size_t e = 0; e < s; ++e)
                            gv[vj + e] += a[aij] * gi[e];
                      }
                });
}

Tensor attend_pairwise(const Tensor &alpha, const Tensor &values) {
  require_rank("attend_pairwise", alpha, 3);
  require_rank("attend_pairwise", values, 4);
  const std::size_t n = alpha.dim(0), k = alpha.dim(2), s = values.dim(3);
  if (alpha.dim(1) != n || values.dim(0) != n || values.dim(1) != n
      || values.dim(2) != k)
    throw DimensionError("attend_pairwise: incompatible shapes "
                         + shape_str(alpha.shape()) + " and "
                         + shape_str(values.shape()));
  const auto a = alpha.data(), v = values.data();
  std::vector<double> out(n * k * s, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t h = 0; h < k; ++h) {
        const double w = a[(i * n + j) * k + h];
        if (w == 0.0)
          continue;
        const double *vij = v.data() + ((i * n + j) * k + h) * s;
        double *oi = out.data() + (i * k + h) * s;
        for (std::size_t e = 0; e < s; ++e)
          oi[e] += w * vij[e];
      }

  Tape *tape = recording_tape({ &alpha, &values });
  return finish(tape, { n, k, s }, std::move(out),
                [tape, alpha, values, n, k, s](std::span<const double> g) {
                  const auto a = alpha.data(), v = values.data();
                  auto ga = grad_of(tape, alpha);
                  auto gv = grad_of(tape, values);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      for (std::size_t h = 0; h < k; ++h) {
                        const double *gi = g.data() + (i * k + h) * s;
                        const std::size_t aij = (i * n + j) * k + h;
                        const std::size_t vij = aij * s;
                        if (!ga.empty()) {
                          double dot = 0.0;
                          for (std::size_t e = 0; e < s; ++e)
                            dot += gi[e] * v[vij + e];
                          ga[aij] += dot;
                        }
                        if (!gv.empty())
                          for (std::size_t e = 0; e < s; ++e)
                            gv[vij + e] += a[aij] * gi[e];
                      }
                });
}

Tensor pair_directions(const Tensor &x, double min_dist) {
  require_rank("pair_directions", x, 3);
  const std::size_t n = x.dim(0), c = x.dim(1), d = x.dim(2);
  const auto v = x.data();
  std::vector<double> out(n * n * c * d, 0.0);
  auto inv_len = std::make_shared<std::vector<double>>(n * n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j)
        continue;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double *xi = v.data() + (i * c + ch) * d;
        const double *xj = v.data() + (j * c + ch) * d;
        double r2 = 0.0;
        for (std::size_t k = 0; k < d; ++k)
          r2 += (xj[k] - xi[k]) * (xj[k] - xi[k]);
        const double r = std::sqrt(r2);
        if (r < min_dist)
          continue;
        const std::size_t p = (i * n + j) * c + ch;
        (*inv_len)[p] = 1.0 / r;
        for (std::size_t k = 0; k < d; ++k)
          out[p * d + k] = (xj[k] - xi[k]) / r;
      }
    }

  Tape *tape = recording_tape({ &x });
  if (tape == nullptr)
    return { { n, n, c, d }, std::move(out) };
  auto u = std::make_shared<std::vector<double>>(out);
  return tape->record(
      { n, n, c, d }, std::move(out),
      [tape, x, u, inv_len, n, c, d](std::span<const double> g) {
        auto gx = grad_of(tape, x);
        std::vector<double> gd(d);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t p = (i * n + j) * c + ch;
              const double il = (*inv_len)[p];
              if (il == 0.0)
                continue;
              const double *up = u->data() + p * d;
              const double *gp = g.data() + p * d;
              double ug = 0.0;
              for (std::size_t k = 0; k < d; ++k)
                ug += up[k] * gp[k];
              for (std::size_t k = 0; k < d; ++k) {
                const double gk = (gp[k] - up[k] * ug) * il;
                gx[(j * c + ch) * d + k] += gk;
                gx[(i * c + ch) * d + k] -= gk;
              }
            }
      });
}

Tensor gather_rows(const Tensor &x, std::span<const std::size_t> rows) {
  if (x.rank() == 0)
    throw DimensionError("gather_rows: scalar input");
  const std::size_t m = x.dim(0);
  const std::size_t inner = m == 0 ? shape_size(Shape(x.shape().begin() + 1,
                                                      x.shape().end()))
                                   : x.size() / m;
  Shape shape = x.shape();
  shape[0] = rows.size();
  const auto v = x.data();
  std::vector<double> out(rows.size() * inner);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m)
      throw std::out_of_range("gather_rows: row index out of range");
    std::copy_n(v.data() + rows[r] * inner, inner, out.data() + r * inner);
  }

  Tape *tape = recording_tape({ &x });
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return finish(tape, std::move(shape), std::move(out),
                [tape, x, idx = std::move(idx), inner](
                    std::span<const double> g) {
                  auto gx = grad_of(tape, x);
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t c = 0; c < inner; ++c)
                      gx[idx[r] * inner + c] += g[r * inner + c];
                });
}

Tensor scatter_rows(const Tensor &x, std::span<const std::size_t> rows,
                    std::size_t n_rows) {
  if (x.rank() == 0 || x.dim(0) != rows.size())
    throw DimensionError("scatter_rows: index count does not match "
                         + shape_str(x.shape()));
  const std::size_t inner = shape_size(Shape(x.shape().begin() + 1,
                                             x.shape().end()));
  Shape shape = x.shape();
  shape[0] = n_rows;
  const auto v = x.data();
  std::vector<double> out(n_rows * inner, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n_rows)
      throw std::out_of_range("scatter_rows: row index out of range");
    for (std::size_t c = 0; c < inner; ++c)
      out[rows[r] * inner + c] += v[r * inner + c];
  }

  Tape *tape = recording_tape({ &x });
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return finish(tape, std::move(shape), std::move(out),
                [tape, x, idx = std::move(idx), inner](
                    std::span<const double> g) {
                  auto gx = grad_of(tape, x);
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t c = 0; c < inner; ++c)
                      gx[r * inner + c] += g[idx[r] * inner + c];
                });
}
}  // namespace semla
