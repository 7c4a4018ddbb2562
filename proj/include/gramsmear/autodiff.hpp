#pragma once

// Tape-based reverse-mode differentiation over Tensor<T>. Every recorded op
// checks its output for NaN/Inf and throws NumericalError naming the op.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "gramsmear/kernels.hpp"
#include "gramsmear/tensor.hpp"

namespace gramsmear::ad {

struct Var {
  int id = -1;
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Var constant(Tensor<T> v) { return leaf(std::move(v), false, -1, "constant"); }

  /// Leaf that receives a gradient but is not bound to a parameter store.
  Var input(Tensor<T> v) { return leaf(std::move(v), true, -1, "input"); }

  Var parameter(const ParamStore<T>& store, std::size_t index) {
    return leaf(store.value(index), true, static_cast<int>(index), "parameter");
  }

  Var record(const char* op, Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(op, std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(const char* op, Tensor<T> value, const std::vector<Var>& inputs, BackwardFn fn) {
    if (!value.all_finite()) throw NumericalError(std::string("non-finite output in op '") + op + "'");
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    n.op = op;
    if (needs) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor<T>& value(int id) const { return nodes_.at(id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor<T>& grad(int id) {
    Node& n = nodes_.at(id);
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  Tensor<T>& grad(Var v) { return grad(v.id); }

  /// Backpropagates from a scalar and returns one gradient per store entry
  /// (zeros for parameters the loss does not reach).
  std::vector<Tensor<T>> backward(Var loss, const ParamStore<T>& store) {
    backward(loss);
    std::vector<Tensor<T>> out;
    out.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) out.emplace_back(store.value(i).shape());
    for (const Node& n : nodes_) {
      if (n.param < 0 || !n.requires_grad || n.grad.shape() != n.value.shape()) continue;
      auto& g = out.at(static_cast<std::size_t>(n.param));
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    }
    return out;
  }

  void backward(Var loss) {
    if (value(loss).size() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + shape_str(value(loss).shape()));
    }
    grad(loss.id).fill(T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || !n.backward || n.grad.shape() != n.value.shape()) continue;
      n.backward(*this, i);
      if (!n.grad.all_finite()) throw NumericalError(std::string("non-finite gradient through op '") + n.op + "'");
      if (n.param < 0 && n.op != std::string("input")) n.grad = Tensor<T>();
    }
  }

  /// Gradient of a leaf after backward(); zeros if it was not reached.
  Tensor<T> leaf_grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.shape() == n.value.shape()) return n.grad;
    return Tensor<T>(n.value.shape());
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    int param = -1;
    bool requires_grad = false;
    const char* op = "";
  };

  Var leaf(Tensor<T> v, bool requires_grad, int param, const char* op) {
    if (!v.all_finite()) throw NumericalError(std::string("non-finite value in ") + op + " leaf");
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    n.param = param;
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// [m,k] x [k,n]
template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0),
                  "matmul: incompatible shapes " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<T> C({m, n});
  kernels::gemm<T>(false, false, m, n, k, A.data(), B.data(), C.data(), false);
  return t.record("matmul", std::move(C), {a, b}, [a, b, m, n, k](Tape<T>& tp, int self) {
    const auto& dC = tp.grad(self);
    if (tp.requires_grad(a)) kernels::gemm<T>(false, true, m, k, n, dC.data(), tp.value(b).data(), tp.grad(a).data(), true);
    if (tp.requires_grad(b)) kernels::gemm<T>(true, false, k, n, m, tp.value(a).data(), dC.data(), tp.grad(b).data(), true);
  });
}

/// [m,k] x [n,k]^T
template <class T>
Var matmul_nt(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(1),
                  "matmul_nt: incompatible shapes " + shape_str(A.shape()) + " x " + shape_str(B.shape()) + "^T");
  const int m = A.dim(0), k = A.dim(1), n = B.dim(0);
  Tensor<T> C({m, n});
  kernels::gemm<T>(false, true, m, n, k, A.data(), B.data(), C.data(), false);
  return t.record("matmul_nt", std::move(C), {a, b}, [a, b, m, n, k](Tape<T>& tp, int self) {
    const auto& dC = tp.grad(self);
    if (tp.requires_grad(a)) kernels::gemm<T>(false, false, m, k, n, dC.data(), tp.value(b).data(), tp.grad(a).data(), true);
    if (tp.requires_grad(b)) kernels::gemm<T>(true, false, n, k, m, dC.data(), tp.value(a).data(), tp.grad(b).data(), true);
  });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::require(A.shape() == B.shape(), "add: shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor<T> C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  return t.record("add", std::move(C), {a, b}, [a, b](Tape<T>& tp, int self) {
    const auto& dC = tp.grad(self);
    if (tp.requires_grad(a)) detail::accumulate(tp.grad(a), dC);
    if (tp.requires_grad(b)) detail::accumulate(tp.grad(b), dC);
  });
}

/// a[m,n] + b[n] broadcast over rows.
template <class T>
Var add_row(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::require(A.rank() == 2 && static_cast<int>(B.size()) == A.dim(1),
                  "add_row: shape mismatch " + shape_str(A.shape()) + " + " + shape_str(B.shape()));
  const int m = A.dim(0), n = A.dim(1);
  Tensor<T> C = A;
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < n; ++c) C.at(r, c) += B[c];
  }
  return t.record("add_row", std::move(C), {a, b}, [a, b, m, n](Tape<T>& tp, int self) {
    const auto& dC = tp.grad(self);
    if (tp.requires_grad(a)) detail::accumulate(tp.grad(a), dC);
    if (tp.requires_grad(b)) {
      auto& dB = tp.grad(b);
      for (int r = 0; r < m; ++r) {
        for (int c = 0; c < n; ++c) dB[c] += dC.at(r, c);
      }
    }
  });
}

/// Elementwise product.
template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::require(A.shape() == B.shape(), "mul: shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor<T> C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  return t.record("mul", std::move(C), {a, b}, [a, b](Tape<T>& tp, int self) {
    const auto& dC = tp.grad(self);
    if (tp.requires_grad(a)) {
      auto& dA = tp.grad(a);
      const auto& Bv = tp.value(b);
      for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += dC[i] * Bv[i];
    }
    if (tp.requires_grad(b)) {
      auto& dB = tp.grad(b);
      const auto& Av = tp.value(a);
      for (std::size_t i = 0; i < dB.size(); ++i) dB[i] += dC[i] * Av[i];
    }
  });
}

template <class T>
Var scalar_mul(Tape<T>& t, Var a, T s) {
  Tensor<T> C = t.value(a);
  for (auto& v : C.values()) v *= s;
  return t.record("scalar_mul", std::move(C), {a}, [a, s](Tape<T>& tp, int self) {
    const auto& dC = tp.grad(self);
    auto& dA = tp.grad(a);
    for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += s * dC[i];
  });
}

/// Sum of all elements, shape [1].
template <class T>
Var sum(Tape<T>& t, Var a) {
  T s = 0;
  for (T v : t.value(a).values()) s += v;
  return t.record("sum", Tensor<T>({1}, std::vector<T>{s}), {a}, [a](Tape<T>& tp, int self) {
    const T g = tp.grad(self)[0];
    for (auto& v : tp.grad(a).values()) v += g;
  });
}

template <class T>
Var relu(Tape<T>& t, Var a) {
  Tensor<T> C = t.value(a);
  for (auto& v : C.values()) v = v > T(0) ? v : T(0);
  return t.record("relu", std::move(C), {a}, [a](Tape<T>& tp, int self) {
    const auto& dC = tp.grad(self);
    const auto& X = tp.value(a);
    auto& dA = tp.grad(a);
    for (std::size_t i = 0; i < dA.size(); ++i) {
      if (X[i] > T(0)) dA[i] += dC[i];
    }
  });
}

template <class T>
Var tanh(Tape<T>& t, Var a) {
  Tensor<T> C = t.value(a);
  for (auto& v : C.values()) v = std::tanh(v);
  return t.record("tanh", std::move(C), {a}, [a](Tape<T>& tp, int self) {
    const auto& dC = tp.grad(self);
    const auto& Y = tp.value(self);
    auto& dA = tp.grad(a);
    for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += dC[i] * (T(1) - Y[i] * Y[i]);
  });
}

/// Softmax along the last axis of a rank-1 or rank-2 tensor.
template <class T>
Var softmax_rows(Tape<T>& t, Var a) {
  const auto& X = t.value(a);
  detail::require(X.rank() == 1 || X.rank() == 2, "softmax_rows: expected rank 1 or 2, got " + shape_str(X.shape()));
  const int cols = X.shape().back();
  detail::require(cols >= 1, "softmax_rows: empty rows");
  const int rows = static_cast<int>(X.size() / cols);
  Tensor<T> Y = X;
  for (int r = 0; r < rows; ++r) {
    T* y = Y.data() + static_cast<std::size_t>(r) * cols;
    const T mx = *std::max_element(y, y + cols);
    T s = 0;
    for (int c = 0; c < cols; ++c) {
      y[c] = std::exp(y[c] - mx);
      s += y[c];
    }
    for (int c = 0; c < cols; ++c) y[c] /= s;
  }
  return t.record("softmax_rows", std::move(Y), {a}, [a, rows, cols](Tape<T>& tp, int self) {
    const auto& dY = tp.grad(self);
    const auto& Yv = tp.value(self);
    auto& dA = tp.grad(a);
    for (int r = 0; r < rows; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * cols;
      T dot = 0;
      for (int c = 0; c < cols; ++c) dot += dY[o + c] * Yv[o + c];
      for (int c = 0; c < cols; ++c) dA[o + c] += Yv[o + c] * (dY[o + c] - dot);
    }
  });
}

template <class T>
Var reshape(Tape<T>& t, Var a, Shape shape) {
  Tensor<T> C = t.value(a).reshaped(std::move(shape));
  return t.record("reshape", std::move(C), {a}, [a](Tape<T>& tp, int self) {
    const auto& dC = tp.grad(self);
    auto& dA = tp.grad(a);
    for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += dC[i];
  });
}

/// Concatenates rank-2 tensors with equal row counts along the last axis.
template <class T>
Var concat(Tape<T>& t, const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat: no inputs");
  const int rows = t.value(parts[0]).rank() == 2 ? t.value(parts[0]).dim(0) : -1;
  std::vector<int> widths;
  int total = 0;
  for (Var p : parts) {
    const auto& v = t.value(p);
    detail::require(v.rank() == 2 && v.dim(0) == rows, "concat: inputs must be rank 2 with equal rows, got " + shape_str(v.shape()));
    widths.push_back(v.dim(1));
    total += v.dim(1);
  }
  Tensor<T> C({rows, total});
  int off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = t.value(parts[k]);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < widths[k]; ++c) C.at(r, off + c) = v.at(r, c);
    }
    off += widths[k];
  }
  return t.record("concat", std::move(C), parts, [parts, widths, rows](Tape<T>& tp, int self) {
    const auto& dC = tp.grad(self);
    int off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (tp.requires_grad(parts[k])) {
        auto& dA = tp.grad(parts[k]);
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < widths[k]; ++c) dA.at(r, c) += dC.at(r, off + c);
        }
      }
      off += widths[k];
    }
  });
}

/// Rows of a rank-2 tensor picked by index (repeats allowed).
template <class T>
Var gather_rows(Tape<T>& t, Var a, std::vector<int> indices) {
  const auto& X = t.value(a);
  detail::require(X.rank() == 2, "gather_rows: expected rank 2, got " + shape_str(X.shape()));
  const int d = X.dim(1);
  Tensor<T> C({static_cast<int>(indices.size()), d});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    detail::require(indices[k] >= 0 && indices[k] < X.dim(0), "gather_rows: index out of range");
    std::copy_n(X.data() + static_cast<std::size_t>(indices[k]) * d, d, C.data() + k * d);
  }
  return t.record("gather_rows", std::move(C), {a}, [a, indices, d](Tape<T>& tp, int self) {
    const auto& dC = tp.grad(self);
    auto& dA = tp.grad(a);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      for (int j = 0; j < d; ++j) dA[static_cast<std::size_t>(indices[k]) * d + j] += dC[k * d + j];
    }
  });
}

namespace detail {

// col[(c*9 + ky*3 + kx), y*w + x] = img[c, y+ky-1, x+kx-1], zero outside.
template <class T>
void im2col3x3(const T* img, int channels, int h, int w, T* col) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    const T* src = img + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        const int dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          T* row = dst + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill_n(row, w, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          std::fill(row, row + x0, T(0));
          std::copy(srow + x0 + dx, srow + x1 + dx, row + x0);
          std::fill(row + x1, row + w, T(0));
        }
      }
    }
  }
}

template <class T>
void col2im3x3(const T* col, int channels, int h, int w, T* img) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    T* dst = img + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        const int dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const T* row = src + static_cast<std::size_t>(y) * w;
          T* drow = dst + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int x = x0; x < x1; ++x) drow[x + dx] += row[x];
        }
      }
    }
  }
}

}  // namespace detail

/// 3x3 convolution, stride 1, zero padding 1: x[N,C,H,W], w[O,C,3,3], b[O] -> [N,O,H,W].
template <class T>
Var conv2d(Tape<T>& t, Var x, Var w, Var b) {
  const auto& X = t.value(x);
  const auto& Wt = t.value(w);
  const auto& B = t.value(b);
  detail::require(X.rank() == 4 && Wt.rank() == 4 && Wt.dim(1) == X.dim(1) && Wt.dim(2) == 3 && Wt.dim(3) == 3 &&
                      static_cast<int>(B.size()) == Wt.dim(0),
                  "conv2d: incompatible shapes x" + shape_str(X.shape()) + " w" + shape_str(Wt.shape()) + " b" +
                      shape_str(B.shape()));
  const int n = X.dim(0), c = X.dim(1), h = X.dim(2), wd = X.dim(3), o = Wt.dim(0);
  const int hw = h * wd, ck = c * 9;
  Tensor<T> Y({n, o, h, wd});
  std::vector<T> col(static_cast<std::size_t>(ck) * hw);
  for (int i = 0; i < n; ++i) {
    detail::im2col3x3(X.data() + static_cast<std::size_t>(i) * c * hw, c, h, wd, col.data());
    T* out = Y.data() + static_cast<std::size_t>(i) * o * hw;
    kernels::gemm<T>(false, false, o, hw, ck, Wt.data(), col.data(), out, false);
    for (int oc = 0; oc < o; ++oc) {
      T* row = out + static_cast<std::size_t>(oc) * hw;
      for (int p = 0; p < hw; ++p) row[p] += B[oc];
    }
  }
  return t.record("conv2d", std::move(Y), {x, w, b}, [x, w, b, n, c, h, wd, o, hw, ck](Tape<T>& tp, int self) {
    const auto& dY = tp.grad(self);
    const auto& Xv = tp.value(x);
    const auto& Wv = tp.value(w);
    const bool gx = tp.requires_grad(x), gw = tp.requires_grad(w), gb = tp.requires_grad(b);
    std::vector<T> col(static_cast<std::size_t>(ck) * hw);
    for (int i = 0; i < n; ++i) {
      const T* dy = dY.data() + static_cast<std::size_t>(i) * o * hw;
      if (gw) {
        detail::im2col3x3(Xv.data() + static_cast<std::size_t>(i) * c * hw, c, h, wd, col.data());
        kernels::gemm<T>(false, true, o, ck, hw, dy, col.data(), tp.grad(w).data(), true);
      }
      if (gb) {
        auto& dB = tp.grad(b);
        for (int oc = 0; oc < o; ++oc) {
          T s = 0;
          const T* row = dy + static_cast<std::size_t>(oc) * hw;
          for (int p = 0; p < hw; ++p) s += row[p];
          dB[oc] += s;
        }
      }
      if (gx) {
        kernels::gemm<T>(true, false, ck, hw, o, Wv.data(), dy, col.data(), false);
        detail::col2im3x3(col.data(), c, h, wd, tp.grad(x).data() + static_cast<std::size_t>(i) * c * hw);
      }
    }
  });
}

/// 2x2 max pooling, stride 2 (odd trailing rows/cols are dropped). Ties go to
/// the first element in row-major window order.
template <class T>
Var maxpool2d(Tape<T>& t, Var x) {
  const auto& X = t.value(x);
  detail::require(X.rank() == 4 && X.dim(2) >= 2 && X.dim(3) >= 2, "maxpool2d: expected [N,C,H>=2,W>=2], got " + shape_str(X.shape()));
  const int n = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
  const int oh = h / 2, ow = w / 2;
  Tensor<T> Y({n, c, oh, ow});
  std::vector<std::uint32_t> argmax(Y.size());
  for (int p = 0; p < n * c; ++p) {
    const T* src = X.data() + static_cast<std::size_t>(p) * h * w;
    const std::size_t obase = static_cast<std::size_t>(p) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        std::size_t best = static_cast<std::size_t>(2 * y) * w + 2 * xx;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t q : cand) {
          if (src[q] > src[best]) best = q;
        }
        Y[obase + static_cast<std::size_t>(y) * ow + xx] = src[best];
        argmax[obase + static_cast<std::size_t>(y) * ow + xx] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return t.record("maxpool2d", std::move(Y), {x}, [x, argmax = std::move(argmax), h, w, oh, ow](Tape<T>& tp, int self) {
    const auto& dY = tp.grad(self);
    auto& dX = tp.grad(x);
    const std::size_t planes = dY.size() / (static_cast<std::size_t>(oh) * ow);
    for (std::size_t p = 0; p < planes; ++p) {
      const std::size_t ib = p * h * w, ob = p * oh * ow;
      for (std::size_t q = 0; q < static_cast<std::size_t>(oh) * ow; ++q) dX[ib + argmax[ob + q]] += dY[ob + q];
    }
  });
}

/// [N,C,H,W] -> [N,C], mean over spatial positions.
template <class T>
Var global_avg_pool(Tape<T>& t, Var x) {
  const auto& X = t.value(x);
  detail::require(X.rank() == 4, "global_avg_pool: expected rank 4, got " + shape_str(X.shape()));
  const int n = X.dim(0), c = X.dim(1);
  const std::size_t hw = static_cast<std::size_t>(X.dim(2)) * X.dim(3);
  detail::require(hw > 0, "global_avg_pool: empty spatial extent");
  Tensor<T> Y({n, c});
  for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p) {
    T s = 0;
    const T* src = X.data() + p * hw;
    for (std::size_t q = 0; q < hw; ++q) s += src[q];
    Y[p] = s / static_cast<T>(hw);
  }
  return t.record("global_avg_pool", std::move(Y), {x}, [x, hw](Tape<T>& tp, int self) {
    const auto& dY = tp.grad(self);
    auto& dX = tp.grad(x);
    for (std::size_t p = 0; p < dY.size(); ++p) {
      const T g = dY[p] / static_cast<T>(hw);
      T* dst = dX.data() + p * hw;
      for (std::size_t q = 0; q < hw; ++q) dst[q] += g;
    }
  });
}

/// -log softmax(logits)[label] for a logits vector of C entries (any shape).
template <class T>
Var cross_entropy(Tape<T>& t, Var logits, int label) {
  const auto& Z = t.value(logits);
  const int c = static_cast<int>(Z.size());
  if (label < 0 || label >= c) {
    throw DataError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(c) + ")");
  }
  const T mx = *std::max_element(Z.values().begin(), Z.values().end());
  T s = 0;
  for (T v : Z.values()) s += std::exp(v - mx);
  const T lse = mx + std::log(s);
  return t.record("cross_entropy", Tensor<T>({1}, std::vector<T>{lse - Z[label]}), {logits},
                  [logits, label, lse](Tape<T>& tp, int self) {
                    const T g = tp.grad(self)[0];
                    const auto& Zv = tp.value(logits);
                    auto& dZ = tp.grad(logits);
                    for (std::size_t i = 0; i < dZ.size(); ++i) {
                      const T p = std::exp(Zv[i] - lse);
                      dZ[i] += g * (p - (static_cast<int>(i) == label ? T(1) : T(0)));
                    }
                  });
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Builds the graph for a scalar loss on a fresh tape.
using LossFn = std::function<Var(Tape<double>&, const ParamStore<double>&)>;

/// Compares reverse-mode gradients with central differences for every
/// parameter element. Relative error is |a - n| / max(|a|, |n|, floor); the
/// floor keeps round-off on near-zero gradients from dominating.
GradCheckReport grad_check(const LossFn& fn, ParamStore<double>& params, double eps, double tol, double floor = 1e-6);

}  // namespace gramsmear::ad
