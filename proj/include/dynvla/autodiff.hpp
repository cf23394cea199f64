// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace dynvla {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Handle to a node on a Graph tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Per-row additive perturbation applied to post-softmax attention probabilities.
///
/// `key_values[j]` is added to key `key_offset + j` of every row, then each row is
/// divided by its new total. With `causal_query_offset` set, row r may only receive
/// additions at keys k <= r + causal_query_offset.
template <typename T>
struct AttentionInjection {
  std::vector<T> key_values;
  int key_offset = 0;
  bool causal = false;
  int causal_query_offset = 0;
};

/// Reverse-mode tape over dense row-major matrices.
///
/// Nodes are appended in evaluation order, so the tape itself is a topological
/// order and backward() is a single reverse sweep. A Graph is single-use: build,
/// call backward() once, read gradients.
template <typename T>
class Graph {
 public:
  using Mat = Matrix<T>;

  Graph() { nodes_.reserve(512); }

  /// A leaf holding its own value. `requires_grad` makes grad(v) available after backward().
  Var leaf(Mat value, bool requires_grad = false);
  /// A leaf that references external storage. When `grad_sink` is non-null the
  /// gradient is accumulated (+=) into it during backward().
  Var parameter(const Mat* value, Mat* grad_sink = nullptr);

  const Mat& value(Var v) const;
  /// Gradient after backward(); a zero matrix if no gradient reached the node.
  Mat grad(Var v) const;
  T scalar(Var v) const { return value(v)(0, 0); }

  void backward(Var loss);

  Var matmul(Var a, Var b);     // a * b
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var add(Var a, Var b);
  Var add_row(Var a, Var row);  // broadcast a 1 x C row over every row of a
  Var scale(Var a, T factor);
  Var gelu(Var a);
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5));
  /// Row softmax. With `causal`, entry (r, c) is masked when c > r + query_offset.
  Var softmax_rows(Var a, bool causal = false, int query_offset = 0);
  Var inject_attention(Var probs, const AttentionInjection<T>& injection);
  Var slice_cols(Var a, int start, int count);
  Var slice_rows(Var a, int start, int count);
  Var concat_cols(std::span<const Var> parts);
  Var concat_rows(std::span<const Var> parts);
  /// Rows of `table` selected by `ids`.
  Var gather_rows(Var table, std::span<const int> ids);
  /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
  Var cross_entropy(Var logits, std::span<const int> targets);
  Var sum(Var a);

  /// Generic node: `backward(out_grad, out_value)` must accumulate into parents via accumulate().
  Var custom(Mat value, std::vector<Var> parents, std::function<void(const Mat&, const Mat&)> backward);
  void accumulate(Var v, const Mat& g);
  bool needs_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat owned;
    const Mat* external = nullptr;
    Mat grad;
    bool has_grad = false;
    bool needs_grad = false;
    Mat* grad_sink = nullptr;
    std::function<void(const Mat&, const Mat&)> backward;
  };

  Var push(Node node);
  Node& node(Var v) { return nodes_[static_cast<size_t>(v.id)]; }
  const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.id)]; }

  std::vector<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace dynvla
