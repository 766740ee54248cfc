#pragma once

// Dense reverse-mode differentiation over rank-2 Eigen matrices. A Tape records
// every operation of one forward pass; backward() replays it in reverse.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace tapnet::ad {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Edge indices grouped by segment (destination of an aggregation), CSR layout.
struct SegmentMap {
  std::vector<int> offset{0};
  std::vector<int> index;

  int num_segments() const { return static_cast<int>(offset.size()) - 1; }
  int num_edges() const { return static_cast<int>(index.size()); }
  bool empty(int s) const { return offset[s] == offset[s + 1]; }

  /// Segment of edge e is key[e]; edge order inside a segment follows e.
  static SegmentMap from_keys(const std::vector<int>& key, int num_segments) {
    SegmentMap m;
    m.offset.assign(num_segments + 1, 0);
    for (int k : key) {
      if (k < 0 || k >= num_segments) throw ShapeError("segment key out of range");
      ++m.offset[k + 1];
    }
    for (int s = 0; s < num_segments; ++s) m.offset[s + 1] += m.offset[s];
    m.index.resize(key.size());
    std::vector<int> fill(m.offset.begin(), m.offset.end() - 1);
    for (std::size_t e = 0; e < key.size(); ++e) m.index[fill[key[e]]++] = static_cast<int>(e);
    return m;
  }
};

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return id_; }
  const Matrix& value() const { return tape_->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using V = Var<Scalar>;
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  V constant(Matrix value) { return push(std::move(value), false, nullptr); }
  V parameter(Matrix value) { return push(std::move(value), true, nullptr); }

  /// Records an op result. `backward` receives the output gradient.
  V record(Matrix value, std::initializer_list<V> inputs, Backward backward) {
    bool needs = false;
    for (const V& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Matrix& value(const V& v) const { return nodes_[v.id()].value; }
  bool requires_grad(const V& v) const { return nodes_[v.id()].requires_grad; }

  /// Gradient slot of v; zero matrix when nothing flowed into it.
  Matrix grad(const V& v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Adds g into the gradient slot of v (no-op for constants).
  template <typename Derived>
  void accumulate(const V& v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Reverse sweep from a 1x1 output.
  void backward(const V& out) {
    if (value(out).size() != 1) throw ShapeError("backward() needs a scalar output");
    for (Node& n : nodes_) n.grad.resize(0, 0);
    if (!nodes_[out.id()].requires_grad) return;
    nodes_[out.id()].grad = Matrix::Ones(1, 1);
    for (int i = out.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      const Matrix g = n.grad;
      n.backward(*this, g);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  /// Smallest distance of any relu/abs/clamp input to its breakpoint so far.
  Scalar kink_margin() const { return kink_margin_; }
  template <typename Derived>
  void note_kink(const Eigen::MatrixBase<Derived>& distance) {
    if (distance.size() > 0) kink_margin_ = std::min(kink_margin_, Scalar(distance.cwiseAbs().minCoeff()));
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  V push(Matrix value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(backward)});
    return V(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
  Scalar kink_margin_ = std::numeric_limits<Scalar>::infinity();
};

namespace detail {

template <typename Scalar>
[[noreturn]] void shape_fail(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << a.rows() << "x" << a.cols() << " and " << b.rows()
     << "x" << b.cols();
  throw ShapeError(os.str());
}

template <typename Scalar>
void same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail(op, a, b);
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) detail::shape_fail("matmul", a, b);
  auto* t = a.tape();
  return t->record(a.value() * b.value(), {a, b}, [a, b](Tape<Scalar>& tp, const auto& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * b.value().transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, a.value().transpose() * g);
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_shape("add", a, b);
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape<Scalar>& tp, const auto& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_shape("sub", a, b);
  return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape<Scalar>& tp, const auto& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }

template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_shape("hadamard", a, b);
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                          [a, b](Tape<Scalar>& tp, const auto& g) {
                            if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(b.value()));
                            if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(a.value()));
                          });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  return a.tape()->record(a.value() * s, {a},
                          [a, s](Tape<Scalar>& tp, const auto& g) { tp.accumulate(a, g * s); });
}

/// a[m x n] + row[1 x n] broadcast over rows.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) detail::shape_fail("add_row", a, row);
  typename Tape<Scalar>::Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [a, row](Tape<Scalar>& tp, const auto& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

/// a[m x n] * row[1 x n] broadcast over rows.
template <typename Scalar>
Var<Scalar> mul_row(const Var<Scalar>& a, const Var<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) detail::shape_fail("mul_row", a, row);
  typename Tape<Scalar>::Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape()->record(std::move(out), {a, row}, [a, row](Tape<Scalar>& tp, const auto& g) {
    if (tp.requires_grad(a))
      tp.accumulate(a, (g.array().rowwise() * row.value().row(0).array()).matrix());
    if (tp.requires_grad(row))
      tp.accumulate(row, g.cwiseProduct(a.value()).colwise().sum());
  });
}

/// a[m x n] * w[m x 1] broadcast over columns.
template <typename Scalar>
Var<Scalar> scale_rows(const Var<Scalar>& a, const Var<Scalar>& w) {
  if (w.cols() != 1 || w.rows() != a.rows()) detail::shape_fail("scale_rows", a, w);
  typename Tape<Scalar>::Matrix out = a.value().array().colwise() * w.value().col(0).array();
  return a.tape()->record(std::move(out), {a, w}, [a, w](Tape<Scalar>& tp, const auto& g) {
    if (tp.requires_grad(a))
      tp.accumulate(a, (g.array().colwise() * w.value().col(0).array()).matrix());
    if (tp.requires_grad(w)) tp.accumulate(w, g.cwiseProduct(a.value()).rowwise().sum());
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) detail::shape_fail("concat_cols", parts[0], p);
    cols += p.cols();
  }
  typename Tape<Scalar>::Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  auto* t = parts[0].tape();
  bool needs = false;
  for (const auto& p : parts) needs = needs || t->requires_grad(p);
  // record() takes an initializer list; route through the first input and capture the rest.
  auto back = [parts](Tape<Scalar>& tp, const auto& g) {
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  };
  if (!needs) return t->constant(std::move(out));
  const Var<Scalar> anchor = *std::find_if(parts.begin(), parts.end(),
                                           [t](const auto& p) { return t->requires_grad(p); });
  return t->record(std::move(out), {anchor}, back);
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw ShapeError("slice_cols: range outside input");
  typename Tape<Scalar>::Matrix out = a.value().middleCols(start, count);
  return a.tape()->record(std::move(out), {a},
                          [a, start, count](Tape<Scalar>& tp, const auto& g) {
                            typename Tape<Scalar>::Matrix full =
                                Tape<Scalar>::Matrix::Zero(a.rows(), a.cols());
                            full.middleCols(start, count) = g;
                            tp.accumulate(a, full);
                          });
}

/// out.row(i) = a.row(index[i]).
template <typename Scalar>
Var<Scalar> row_gather(const Var<Scalar>& a, const std::vector<int>& index) {
  typename Tape<Scalar>::Matrix out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw ShapeError("row_gather: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return a.tape()->record(std::move(out), {a}, [a, index](Tape<Scalar>& tp, const auto& g) {
    typename Tape<Scalar>::Matrix acc = Tape<Scalar>::Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i)
      acc.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accumulate(a, acc);
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  typename Tape<Scalar>::Matrix out = a.value().cwiseMax(Scalar(0));
  a.tape()->note_kink(a.value());
  return a.tape()->record(std::move(out), {a}, [a](Tape<Scalar>& tp, const auto& g) {
    tp.accumulate(a, (a.value().array() > Scalar(0)).select(g, Scalar(0)));
  });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope) {
  typename Tape<Scalar>::Matrix out =
      (a.value().array() > Scalar(0)).select(a.value(), a.value() * slope);
  a.tape()->note_kink(a.value());
  return a.tape()->record(std::move(out), {a}, [a, slope](Tape<Scalar>& tp, const auto& g) {
    tp.accumulate(a, (a.value().array() > Scalar(0)).select(g, g * slope));
  });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  typename Tape<Scalar>::Matrix out = a.value().array().exp().matrix();
  auto result = a.tape()->record(out, {a}, [a, out](Tape<Scalar>& tp, const auto& g) {
    tp.accumulate(a, g.cwiseProduct(out));
  });
  return result;
}

template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& a) {
  typename Tape<Scalar>::Matrix out = a.value().cwiseAbs();
  a.tape()->note_kink(a.value());
  return a.tape()->record(std::move(out), {a}, [a](Tape<Scalar>& tp, const auto& g) {
    tp.accumulate(a, g.cwiseProduct(a.value().unaryExpr([](Scalar x) {
      return x > Scalar(0) ? Scalar(1) : (x < Scalar(0) ? Scalar(-1) : Scalar(0));
    })));
  });
}

/// Values outside [lo, hi] are clipped and pass no gradient.
template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& a, Scalar lo, Scalar hi) {
  typename Tape<Scalar>::Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  a.tape()->note_kink((a.value().array() - lo).matrix());
  a.tape()->note_kink((a.value().array() - hi).matrix());
  return a.tape()->record(std::move(out), {a}, [a, lo, hi](Tape<Scalar>& tp, const auto& g) {
    tp.accumulate(a, ((a.value().array() >= lo) && (a.value().array() <= hi)).select(g, Scalar(0)));
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  typename Tape<Scalar>::Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record(std::move(out), {a}, [a](Tape<Scalar>& tp, const auto& g) {
    tp.accumulate(a, Tape<Scalar>::Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

/// Mean of all entries; 0 for an empty input.
template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  const Scalar n = static_cast<Scalar>(a.value().size());
  if (n == Scalar(0)) return a.tape()->constant(Tape<Scalar>::Matrix::Zero(1, 1));
  return scale(sum(a), Scalar(1) / n);
}

/// Row-wise normalization over consecutive column blocks of width `block`:
/// (x - mean) / sqrt(var + eps), biased variance, no affine.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& a, Eigen::Index block = -1, Scalar eps = Scalar(1e-5)) {
  using Matrix = typename Tape<Scalar>::Matrix;
  if (block <= 0) block = a.cols();
  if (a.cols() % block != 0) throw ShapeError("layer_norm: width not divisible by block");
  const Eigen::Index blocks = a.cols() / block;
  Matrix y(a.rows(), a.cols());
  Matrix inv_std(a.rows(), blocks);
  for (Eigen::Index b = 0; b < blocks; ++b) {
    auto x = a.value().middleCols(b * block, block);
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      const Scalar mu = x.row(r).mean();
      const Scalar var = (x.row(r).array() - mu).square().mean();
      const Scalar is = Scalar(1) / std::sqrt(var + eps);
      inv_std(r, b) = is;
      y.row(r).segment(b * block, block) = (x.row(r).array() - mu) * is;
    }
  }
  return a.tape()->record(y, {a}, [a, y, inv_std, block, blocks](Tape<Scalar>& tp, const auto& g) {
    Matrix dx(a.rows(), a.cols());
    for (Eigen::Index b = 0; b < blocks; ++b)
      for (Eigen::Index r = 0; r < a.rows(); ++r) {
        auto gy = g.row(r).segment(b * block, block).array();
        auto yy = y.row(r).segment(b * block, block).array();
        dx.row(r).segment(b * block, block) =
            inv_std(r, b) * (gy - gy.mean() - yy * (gy * yy).mean());
      }
    tp.accumulate(a, dx);
  });
}

/// Per-head dot products of matching rows: out(e, h) = <a_e,h , b_e,h> over blocks of width cols/heads.
template <typename Scalar>
Var<Scalar> head_dot(const Var<Scalar>& a, const Var<Scalar>& b, int heads) {
  detail::same_shape("head_dot", a, b);
  if (heads <= 0 || a.cols() % heads != 0) throw ShapeError("head_dot: width not divisible by heads");
  const Eigen::Index d = a.cols() / heads;
  typename Tape<Scalar>::Matrix out(a.rows(), heads);
  for (int h = 0; h < heads; ++h)
    out.col(h) = a.value().middleCols(h * d, d).cwiseProduct(b.value().middleCols(h * d, d)).rowwise().sum();
  return a.tape()->record(std::move(out), {a, b}, [a, b, heads, d](Tape<Scalar>& tp, const auto& g) {
    typename Tape<Scalar>::Matrix ga(a.rows(), a.cols()), gb(a.rows(), a.cols());
    for (int h = 0; h < heads; ++h) {
      ga.middleCols(h * d, d) = b.value().middleCols(h * d, d).array().colwise() * g.col(h).array();
      gb.middleCols(h * d, d) = a.value().middleCols(h * d, d).array().colwise() * g.col(h).array();
    }
    tp.accumulate(a, ga);
    tp.accumulate(b, gb);
  });
}

/// Block-diagonal projection: out block h = z block h * w block h, with
/// z[N x H*d_in], w[d_in x H*d_out].
template <typename Scalar>
Var<Scalar> head_linear(const Var<Scalar>& z, const Var<Scalar>& w, int heads) {
  if (heads <= 0 || z.cols() % heads != 0 || w.cols() % heads != 0 ||
      w.rows() * heads != z.cols())
    detail::shape_fail("head_linear", z, w);
  const Eigen::Index din = z.cols() / heads;
  const Eigen::Index dout = w.cols() / heads;
  typename Tape<Scalar>::Matrix out(z.rows(), heads * dout);
  for (int h = 0; h < heads; ++h)
    out.middleCols(h * dout, dout).noalias() =
        z.value().middleCols(h * din, din) * w.value().middleCols(h * dout, dout);
  return z.tape()->record(std::move(out), {z, w},
                          [z, w, heads, din, dout](Tape<Scalar>& tp, const auto& g) {
    if (tp.requires_grad(z)) {
      typename Tape<Scalar>::Matrix gz(z.rows(), z.cols());
      for (int h = 0; h < heads; ++h)
        gz.middleCols(h * din, din).noalias() =
            g.middleCols(h * dout, dout) * w.value().middleCols(h * dout, dout).transpose();
      tp.accumulate(z, gz);
    }
    if (tp.requires_grad(w)) {
      typename Tape<Scalar>::Matrix gw(w.rows(), w.cols());
      for (int h = 0; h < heads; ++h)
        gw.middleCols(h * dout, dout).noalias() =
            z.value().middleCols(h * din, din).transpose() * g.middleCols(h * dout, dout);
      tp.accumulate(w, gw);
    }
  });
}

/// Normalized weighted mean per segment and head:
///   out(s, head h) = sum_{e in s} w(e,h) v(e, h) / sum_{e in s} w(e,h).
/// values[E x H*d], weights[E x H] (positive), fallback[S x H*d] used verbatim for empty segments.
template <typename Scalar>
Var<Scalar> segment_weighted_mean(const Var<Scalar>& values, const Var<Scalar>& weights,
                                  const SegmentMap& seg, const Var<Scalar>& fallback,
                                  int heads = 1) {
  using Matrix = typename Tape<Scalar>::Matrix;
  if (values.rows() != seg.num_edges() || weights.rows() != seg.num_edges())
    detail::shape_fail("segment_weighted_mean", values, weights);
  if (weights.cols() != heads || values.cols() % heads != 0)
    detail::shape_fail("segment_weighted_mean", values, weights);
  if (fallback.rows() != seg.num_segments() || fallback.cols() != values.cols())
    detail::shape_fail("segment_weighted_mean", values, fallback);
  const Eigen::Index d = values.cols() / heads;
  const int S = seg.num_segments();

  Matrix out(S, values.cols());
  Matrix totals = Matrix::Zero(S, heads);
  const Matrix& v = values.value();
  const Matrix& w = weights.value();
  for (int s = 0; s < S; ++s) {
    if (seg.empty(s)) {
      out.row(s) = fallback.value().row(s);
      continue;
    }
    out.row(s).setZero();
    for (int i = seg.offset[s]; i < seg.offset[s + 1]; ++i) {
      const int e = seg.index[i];
      for (int h = 0; h < heads; ++h) {
        totals(s, h) += w(e, h);
        out.row(s).segment(h * d, d) += w(e, h) * v.row(e).segment(h * d, d);
      }
    }
    for (int h = 0; h < heads; ++h) out.row(s).segment(h * d, d) /= totals(s, h);
  }

  auto* t = values.tape();
  bool needs = t->requires_grad(values) || t->requires_grad(weights) || t->requires_grad(fallback);
  if (!needs) return t->constant(std::move(out));
  const Var<Scalar> anchor = t->requires_grad(values)    ? values
                             : t->requires_grad(weights) ? weights
                                                         : fallback;
  return t->record(out, {anchor}, [values, weights, fallback, seg, out, totals, heads, d](
                                      Tape<Scalar>& tp, const auto& g) {
    const Matrix& v = values.value();
    const Matrix& w = weights.value();
    const bool gv = tp.requires_grad(values), gw = tp.requires_grad(weights);
    Matrix dv = gv ? Matrix::Zero(v.rows(), v.cols()) : Matrix();
    Matrix dw = gw ? Matrix::Zero(w.rows(), w.cols()) : Matrix();
    Matrix df = Matrix::Zero(fallback.rows(), fallback.cols());
    for (int s = 0; s < seg.num_segments(); ++s) {
      if (seg.empty(s)) {
        df.row(s) = g.row(s);
        continue;
      }
      for (int i = seg.offset[s]; i < seg.offset[s + 1]; ++i) {
        const int e = seg.index[i];
        for (int h = 0; h < heads; ++h) {
          auto gs = g.row(s).segment(h * d, d);
          if (gv) dv.row(e).segment(h * d, d) += (w(e, h) / totals(s, h)) * gs;
          if (gw)
            dw(e, h) += gs.dot(v.row(e).segment(h * d, d) - out.row(s).segment(h * d, d)) /
                        totals(s, h);
        }
      }
    }
    if (gv) tp.accumulate(values, dv);
    if (gw) tp.accumulate(weights, dw);
    tp.accumulate(fallback, df);
  });
}

/// Constant sparse matrix times a: out = S a.
template <typename Scalar>
Var<Scalar> sparse_matmul(const Eigen::SparseMatrix<Scalar>& s, const Var<Scalar>& a) {
  if (s.cols() != a.rows()) throw ShapeError("sparse_matmul: inner dimensions differ");
  typename Tape<Scalar>::Matrix out = s * a.value();
  return a.tape()->record(std::move(out), {a}, [s, a](Tape<Scalar>& tp, const auto& g) {
    tp.accumulate(a, s.transpose() * g);
  });
}

// ---------------------------------------------------------------------------
// Validation and optimization

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Builds a scalar loss on `tape` from parameter leaves registered in order.
template <typename Scalar>
using LossFn = std::function<Var<Scalar>(Tape<Scalar>&, const std::vector<Var<Scalar>>&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  int coordinates_checked = 0;
};

/// Compares reverse-mode gradients with central differences on up to
/// `max_coordinates` randomly chosen parameter entries.
template <typename Scalar>
GradCheckResult grad_check(const LossFn<Scalar>& loss, std::vector<Matrix<Scalar>> params,
                           Scalar eps, int max_coordinates = 200, unsigned seed = 7) {
  auto evaluate = [&](const std::vector<Matrix<Scalar>>& p, std::vector<Matrix<Scalar>>* grads) {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> leaves;
    for (const auto& m : p) leaves.push_back(tape.parameter(m));
    Var<Scalar> out = loss(tape, leaves);
    const Scalar value = out.value()(0, 0);
    if (!std::isfinite(static_cast<double>(value))) throw std::runtime_error("grad_check: non-finite loss");
    if (grads) {
      tape.backward(out);
      grads->clear();
      for (const auto& l : leaves) grads->push_back(tape.grad(l));
    }
    return value;
  };

  GradCheckResult result;
  if (params.empty()) return result;
  std::vector<Matrix<Scalar>> analytic;
  const double f0 = static_cast<double>(evaluate(params, &analytic));
  // Central differences resolve gradients only down to about ulp(f) / eps; below a
  // loss-scaled floor the comparison is effectively absolute.
  const double floor = std::max(1e-8, 1e-7 * std::max(1.0, std::abs(f0)));

  std::vector<std::pair<int, Eigen::Index>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (Eigen::Index i = 0; i < params[p].size(); ++i) coords.emplace_back(static_cast<int>(p), i);
  std::mt19937 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  if (static_cast<int>(coords.size()) > max_coordinates) coords.resize(max_coordinates);

  for (auto [p, i] : coords) {
    Scalar& x = params[p].data()[i];
    const Scalar saved = x;
    x = saved + eps;
    const Scalar up = evaluate(params, nullptr);
    x = saved - eps;
    const Scalar down = evaluate(params, nullptr);
    x = saved;
    const double numeric = static_cast<double>((up - down) / (2 * eps));
    const double exact = static_cast<double>(analytic[p].data()[i]);
    const double denom = std::max({std::abs(numeric), std::abs(exact), floor});
    result.max_relative_error = std::max(result.max_relative_error, std::abs(numeric - exact) / denom);
    ++result.coordinates_checked;
  }
  return result;
}

template <typename Scalar>
struct AdamState {
  std::vector<Matrix<Scalar>> m;
  std::vector<Matrix<Scalar>> v;
  long step = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// In-place Adam update with bias correction. State is lazily sized on first use.
template <typename Scalar>
void adam_step(std::vector<Matrix<Scalar>>& params, const std::vector<Matrix<Scalar>>& grads,
               AdamState<Scalar>& state, const AdamConfig& cfg = {}) {
  if (grads.size() != params.size()) throw ShapeError("adam_step: gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
      state.v.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state does not match params");
  ++state.step;
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar c1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(state.step));
  const Scalar c2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(state.step));
  const Scalar lr = static_cast<Scalar>(cfg.lr), eps = static_cast<Scalar>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params[i].rows() || grads[i].cols() != params[i].cols())
      throw ShapeError("adam_step: gradient shape mismatch");
    state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * grads[i];
    state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * grads[i].cwiseAbs2();
    params[i].array() -=
        lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + eps);
  }
}

}  // namespace tapnet::ad
