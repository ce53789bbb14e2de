//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace semla {
using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape &shape);
std::string shape_str(const Shape &shape);

class DimensionError: public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class Tape;

// Dense row-major float64 array. Values are immutable once constructed; a
// tensor produced while a Tape is active on the current thread carries the
// id of its node in that tape so gradients can flow back to its inputs.
class Tensor {
public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool empty() const { return size() == 0; }

  std::span<const double> data() const {
    if (!data_)
      return {};
    return { data_->data(), data_->size() };
  }
  const double &operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;

  std::vector<double> to_vector() const {
    return data_ ? *data_ : std::vector<double> {};
  }

  bool tracked() const { return tape_ != nullptr && node_ >= 0; }
  Tape *tape() const { return tape_; }
  int node() const { return node_; }

  // Same values, no tape connection.
  Tensor detach() const;

private:
  friend class Tape;
  friend Tensor reshape(const Tensor &x, Shape shape);

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape *tape_ = nullptr;
  int node_ = -1;
};

// Computation record for reverse-mode differentiation. Nodes are appended in
// evaluation order, so the record is topologically sorted by construction.
class Tape {
public:
  using Backward = std::function<void(std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  // Registers a leaf; the returned tensor shares storage with `leaf`.
  Tensor watch(const Tensor &leaf);

  // Appends a node produced by a primitive. `backward` must accumulate into
  // the gradient buffers of the node's inputs via grad_buffer().
  Tensor record(Shape shape, std::vector<double> value, Backward backward);

  void backward(const Tensor &loss);

  // Gradient of the last backward pass with respect to `t` (zeros when `t` is
  // not reachable from the loss).
  std::span<const double> grad(const Tensor &t) const;

  std::span<double> grad_buffer(int node);

  std::size_t size() const { return nodes_.size(); }
  bool owns(const Tensor &t) const { return t.tape_ == this && t.node_ >= 0; }

private:
  struct Node {
    std::size_t size;
    std::vector<double> grad;
    Backward backward;
  };

  std::vector<Node> nodes_;
};

// Tape active on this thread, or nullptr when running without gradients.
Tape *active_tape();

class TapeScope {
public:
  explicit TapeScope(Tape &tape);
  ~TapeScope();
  TapeScope(const TapeScope &) = delete;
  TapeScope &operator=(const TapeScope &) = delete;

private:
  Tape *previous_;
};

// Suspends recording on this thread, e.g. for the self-conditioning pass.
class NoGradScope {
public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope &) = delete;
  NoGradScope &operator=(const NoGradScope &) = delete;

private:
  Tape *previous_;
};

// ---------------------------------------------------------------------------
// Primitives. Broadcasting is explicit: add/sub/mul accept a right operand
// whose shape is a trailing suffix of the left operand's shape (bias style);
// scale_rows accepts a leading prefix (row scaling). Nothing else broadcasts.
// ---------------------------------------------------------------------------

Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor div(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &a, double s);
Tensor scale_rows(const Tensor &a, const Tensor &w);

// (m,k)x(k,n) -> (m,n) and (m,k)x(b,k,n) -> (b,m,n).
Tensor matmul(const Tensor &a, const Tensor &b);

Tensor silu(const Tensor &x);
Tensor sqrt(const Tensor &x);
Tensor square(const Tensor &x);

// Softmax along `axis`. When `mask` is non-empty it has length dim(axis) and
// zero entries are excluded (treated as -inf logits).
Tensor softmax(const Tensor &x, std::size_t axis,
               std::span<const double> mask = {});

// Mean cross entropy of rows of (m,v) logits against integer targets.
Tensor cross_entropy(const Tensor &logits, std::span<const int> targets);

// Euclidean norm over the last axis; the subgradient at zero is zero.
Tensor norm_last(const Tensor &x);

Tensor concat_last(std::span<const Tensor> parts);
Tensor slice_last(const Tensor &x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor &x, Shape shape);

Tensor sum_axis(const Tensor &x, std::size_t axis);
Tensor sum_all(const Tensor &x);
Tensor mean_all(const Tensor &x);
Tensor variance_last(const Tensor &x);

// Mean over axis 0 restricted to rows with nonzero mask weight.
Tensor masked_mean_rows(const Tensor &x, std::span<const double> mask);

// (x - mean) / sqrt(var + eps) over the last axis.
inline constexpr double kLayerNormEps = 1e-10;
Tensor layer_norm_core(const Tensor &x, double eps = kLayerNormEps);

// (n,c,3) -> (n,n,c): channel-aligned dot products x_i^c . x_j^c.
Tensor pair_dots(const Tensor &x);

// (n,f) -> (n,n,f) with out[i][j] = a[i] (rows) or a[j] (cols).
Tensor expand_pairs_rows(const Tensor &a);
Tensor expand_pairs_cols(const Tensor &a);

// (n,n,...) -> (n,n,...) swapping the two pair axes.
Tensor swap_pair_axes(const Tensor &x);

// (n,c) x (n,3) -> (n,c,3), out[i][c] = a[i][c] * v[i].
Tensor outer_vec(const Tensor &a, const Tensor &v);

// alpha (n,n,k), values (n,k,s) -> (n,k,s):
// out[i][k] = sum_j alpha[i][j][k] * values[j][k].
Tensor attend(const Tensor &alpha, const Tensor &values);

// alpha (n,n,k), values (n,n,k,s) -> (n,k,s):
// out[i][k] = sum_j alpha[i][j][k] * values[i][j][k].
Tensor attend_pairwise(const Tensor &alpha, const Tensor &values);

// (n,c,3) -> (n,n,c,3) unit vectors (x_j - x_i)/|x_j - x_i|; zero when the
// distance is below `min_dist` (and on the diagonal).
inline constexpr double kDirectionMinDist = 1e-8;
Tensor pair_directions(const Tensor &x, double min_dist = kDirectionMinDist);

Tensor gather_rows(const Tensor &x, std::span<const std::size_t> rows);
Tensor scatter_rows(const Tensor &x, std::span<const std::size_t> rows,
                    std::size_t n_rows);
}  // namespace semla
