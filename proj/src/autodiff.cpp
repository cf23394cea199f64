// SPDX-License-Identifier: Apache-2.0
#include "dynvla/autodiff.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace dynvla {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

template <typename T>
Var Graph<T>::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::leaf(Mat value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.needs_grad = requires_grad;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::parameter(const Mat* value, Mat* grad_sink) {
  Node n;
  n.external = value;
  n.grad_sink = grad_sink;
  n.needs_grad = grad_sink != nullptr;
  return push(std::move(n));
}

template <typename T>
const typename Graph<T>::Mat& Graph<T>::value(Var v) const {
  const Node& n = node(v);
  return n.external ? *n.external : n.owned;
}

template <typename T>
typename Graph<T>::Mat Graph<T>::grad(Var v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.grad;
  const Mat& val = value(v);
  return Mat::Zero(val.rows(), val.cols());
}

template <typename T>
void Graph<T>::accumulate(Var v, const Mat& g) {
  Node& n = node(v);
  if (!n.needs_grad) return;
  if (n.has_grad) {
    n.grad += g;
  } else {
    n.grad = g;
    n.has_grad = true;
  }
}

template <typename T>
void Graph<T>::backward(Var loss) {
  require(value(loss).size() == 1, "backward() needs a scalar node");
  if (!node(loss).needs_grad) return;
  accumulate(loss, Mat::Constant(1, 1, T(1)));
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.has_grad) continue;
    if (n.backward) {
      // the closure may accumulate into nodes with lower ids only
      n.backward(n.grad, n.owned);
    } else if (n.grad_sink) {
      *n.grad_sink += n.grad;
    }
  }
}

template <typename T>
Var Graph<T>::custom(Mat value, std::vector<Var> parents, std::function<void(const Mat&, const Mat&)> backward) {
  Node n;
  n.owned = std::move(value);
  for (Var p : parents) n.needs_grad = n.needs_grad || node(p).needs_grad;
  if (n.needs_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::matmul(Var a, Var b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  require(av.cols() == bv.rows(), "matmul: inner dimensions differ");
  Mat out = av * bv;
  return custom(std::move(out), {a, b}, [this, a, b](const Mat& g, const Mat& /*out*/) {
    if (needs_grad(a)) accumulate(a, g * value(b).transpose());
    if (needs_grad(b)) accumulate(b, value(a).transpose() * g);
  });
}

template <typename T>
Var Graph<T>::matmul_nt(Var a, Var b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  require(av.cols() == bv.cols(), "matmul_nt: inner dimensions differ");
  Mat out = av * bv.transpose();
  return custom(std::move(out), {a, b}, [this, a, b](const Mat& g, const Mat& /*out*/) {
    if (needs_grad(a)) accumulate(a, g * value(b));
    if (needs_grad(b)) accumulate(b, g.transpose() * value(a));
  });
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "add: shape mismatch");
  Mat out = av + bv;
  return custom(std::move(out), {a, b}, [this, a, b](const Mat& g, const Mat& /*out*/) {
    accumulate(a, g);
    accumulate(b, g);
  });
}

template <typename T>
Var Graph<T>::add_row(Var a, Var row) {
  const Mat& av = value(a);
  const Mat& rv = value(row);
  require(rv.rows() == 1 && rv.cols() == av.cols(), "add_row: bias shape mismatch");
  Mat out = av.rowwise() + rv.row(0);
  return custom(std::move(out), {a, row}, [this, a, row](const Mat& g, const Mat& /*out*/) {
    accumulate(a, g);
    if (needs_grad(row)) accumulate(row, g.colwise().sum());
  });
}

template <typename T>
Var Graph<T>::scale(Var a, T factor) {
  Mat out = value(a) * factor;
  return custom(std::move(out), {a}, [this, a, factor](const Mat& g, const Mat& /*out*/) { accumulate(a, g * factor); });
}

template <typename T>
Var Graph<T>::gelu(Var a) {
  // tanh approximation
  const T k0 = T(0.7978845608028654);
  const T k1 = T(0.044715);
  const Mat& x = value(a);
  Mat t = (k0 * (x.array() + k1 * x.array().cube())).tanh().matrix();
  Mat out = (T(0.5) * x.array() * (T(1) + t.array())).matrix();
  return custom(std::move(out), {a}, [this, a, k0, k1, t = std::move(t)](const Mat& g, const Mat& /*out*/) {
    const Mat& xv = value(a);
    auto x2 = xv.array().square();
    auto dt = k0 * (T(1) + T(3) * k1 * x2) * (T(1) - t.array().square());
    Mat d = (g.array() * (T(0.5) * (T(1) + t.array()) + T(0.5) * xv.array() * dt)).matrix();
    accumulate(a, d);
  });
}

template <typename T>
Var Graph<T>::layer_norm(Var x, Var gamma, Var beta, T eps) {
  const Mat& xv = value(x);
  const Mat& gv = value(gamma);
  const Mat& bv = value(beta);
  const auto cols = xv.cols();
  require(gv.rows() == 1 && gv.cols() == cols && bv.rows() == 1 && bv.cols() == cols,
          "layer_norm: affine shape mismatch");
  Mat xhat(xv.rows(), cols);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * gv.row(0).array()).matrix();
  out.rowwise() += bv.row(0);
  return custom(std::move(out), {x, gamma, beta},
                [this, x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Mat& g, const Mat& /*out*/) {
                  if (needs_grad(gamma)) accumulate(gamma, (g.array() * xhat.array()).colwise().sum().matrix());
                  if (needs_grad(beta)) accumulate(beta, g.colwise().sum());
                  if (!needs_grad(x)) return;
                  const Mat& gv2 = value(gamma);
                  Mat dxhat = (g.array().rowwise() * gv2.row(0).array()).matrix();
                  Mat dx(g.rows(), g.cols());
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    const T m1 = dxhat.row(r).mean();
                    const T m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
                    dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                  }
                  accumulate(x, dx);
                });
}

template <typename T>
Var Graph<T>::softmax_rows(Var a, bool causal, int query_offset) {
  const Mat& x = value(a);
  Mat out = Mat::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Eigen::Index limit =
        causal ? std::min<Eigen::Index>(x.cols(), r + query_offset + 1) : x.cols();
    require(limit > 0, "softmax_rows: fully masked row");
    auto in = x.row(r).head(limit);
    const T mx = in.maxCoeff();
    auto o = out.row(r).head(limit);
    o = (in.array() - mx).exp().matrix();
    o /= o.sum();
  }
  return custom(std::move(out), {a}, [this, a](const Mat& g, const Mat& y) {
    Eigen::Matrix<T, Eigen::Dynamic, 1> dots = (g.array() * y.array()).rowwise().sum();
    Mat d = (y.array() * (g.colwise() - dots).array()).matrix();
    accumulate(a, d);
  });
}

template <typename T>
Var Graph<T>::inject_attention(Var probs, const AttentionInjection<T>& inj) {
  const Mat& p = value(probs);
  const int span = static_cast<int>(inj.key_values.size());
  require(inj.key_offset >= 0 && inj.key_offset + span <= p.cols(), "inject_attention: key span outside map");
  Mat out = p;
  Eigen::Matrix<T, Eigen::Dynamic, 1> totals(p.rows());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    int stop = span;
    if (inj.causal) {
      const int last_key = static_cast<int>(r) + inj.causal_query_offset;
      stop = std::clamp(last_key - inj.key_offset + 1, 0, span);
    }
    T added = 0;
    for (int j = 0; j < stop; ++j) {
      const T k = inj.key_values[static_cast<size_t>(j)];
      out(r, inj.key_offset + j) += k;
      added += k;
    }
    // rows that receive nothing stay bit-identical to the input
    if (added == T(0)) {
      totals(r) = T(0);
      continue;
    }
    totals(r) = out.row(r).sum();
    out.row(r) /= totals(r);
  }
  return custom(std::move(out), {probs}, [this, probs, totals = std::move(totals)](const Mat& g, const Mat& out) {
    // y = (p + k) / S with S = sum(p + k): dp = (g - <g, y>) / S
    Mat d(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (totals(r) == T(0)) {
        d.row(r) = g.row(r);
        continue;
      }
      const T dot = g.row(r).dot(out.row(r));
      d.row(r) = (g.row(r).array() - dot) / totals(r);
    }
    accumulate(probs, d);
  });
}

template <typename T>
Var Graph<T>::slice_cols(Var a, int start, int count) {
  const Mat& x = value(a);
  require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols: out of range");
  Mat out = x.middleCols(start, count);
  const auto rows = x.rows();
  const auto cols = x.cols();
  return custom(std::move(out), {a}, [this, a, start, count, rows, cols](const Mat& g, const Mat& /*out*/) {
    Mat d = Mat::Zero(rows, cols);
    d.middleCols(start, count) = g;
    accumulate(a, d);
  });
}

template <typename T>
Var Graph<T>::slice_rows(Var a, int start, int count) {
  const Mat& x = value(a);
  require(start >= 0 && count >= 0 && start + count <= x.rows(), "slice_rows: out of range");
  Mat out = x.middleRows(start, count);
  const auto rows = x.rows();
  const auto cols = x.cols();
  return custom(std::move(out), {a}, [this, a, start, count, rows, cols](const Mat& g, const Mat& /*out*/) {
    Mat d = Mat::Zero(rows, cols);
    d.middleRows(start, count) = g;
    accumulate(a, d);
  });
}

template <typename T>
Var Graph<T>::concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const auto rows = value(parts[0]).rows();
  Eigen::Index total = 0;
  for (Var p : parts) {
    require(value(p).rows() == rows, "concat_cols: row mismatch");
    total += value(p).cols();
  }
  Mat out(rows, total);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, value(p).cols()) = value(p);
    at += value(p).cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return custom(std::move(out), ps, [this, ps](const Mat& g, const Mat& /*out*/) {
    Eigen::Index off = 0;
    for (Var p : ps) {
      const auto c = value(p).cols();
      if (needs_grad(p)) accumulate(p, g.middleCols(off, c));
      off += c;
    }
  });
}

template <typename T>
Var Graph<T>::concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const auto cols = value(parts[0]).cols();
  Eigen::Index total = 0;
  for (Var p : parts) {
    require(value(p).cols() == cols, "concat_rows: column mismatch");
    total += value(p).rows();
  }
  Mat out(total, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleRows(at, value(p).rows()) = value(p);
    at += value(p).rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return custom(std::move(out), ps, [this, ps](const Mat& g, const Mat& /*out*/) {
    Eigen::Index off = 0;
    for (Var p : ps) {
      const auto r = value(p).rows();
      if (needs_grad(p)) accumulate(p, g.middleRows(off, r));
      off += r;
    }
  });
}

template <typename T>
Var Graph<T>::gather_rows(Var table, std::span<const int> ids) {
  const Mat& tv = value(table);
  Mat out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < tv.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return custom(std::move(out), {table}, [this, table, idx = std::move(idx)](const Mat& g, const Mat& /*out*/) {
    const Mat& t = value(table);
    Mat d = Mat::Zero(t.rows(), t.cols());
    for (size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    accumulate(table, d);
  });
}

template <typename T>
Var Graph<T>::cross_entropy(Var logits, std::span<const int> targets) {
  const Mat& z = value(logits);
  require(z.rows() == static_cast<Eigen::Index>(targets.size()) && !targets.empty(),
          "cross_entropy: one target per logit row required");
  Mat probs(z.rows(), z.cols());
  T loss = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int t = targets[static_cast<size_t>(r)];
    require(t >= 0 && t < z.cols(), "cross_entropy: target out of range");
    const T mx = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - mx).exp().matrix();
    const T total = probs.row(r).sum();
    probs.row(r) /= total;
    loss += -(z(r, t) - mx - std::log(total));
  }
  const T count = static_cast<T>(z.rows());
  Mat out = Mat::Constant(1, 1, loss / count);
  std::vector<int> tg(targets.begin(), targets.end());
  return custom(std::move(out), {logits}, [this, logits, probs = std::move(probs), tg = std::move(tg), count](const Mat& g, const Mat& /*out*/) {
    Mat d = probs;
    for (size_t r = 0; r < tg.size(); ++r) d(static_cast<Eigen::Index>(r), tg[r]) -= T(1);
    accumulate(logits, d * (g(0, 0) / count));
  });
}

template <typename T>
Var Graph<T>::sum(Var a) {
  Mat out = Mat::Constant(1, 1, value(a).sum());
  return custom(std::move(out), {a}, [this, a](const Mat& g, const Mat& /*out*/) {
    const Mat& x = value(a);
    accumulate(a, Mat::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

template class Graph<float>;
template class Graph<double>;

}  // namespace dynvla
