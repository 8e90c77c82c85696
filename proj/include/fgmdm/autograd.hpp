#pragma once

// Reverse-mode autodiff on an append-only tape, plus the parameter store and
// Adam update used by the training loop. Templated on the scalar type so the
// gradient-check tests can run the exact same graph code in double precision.
//
// Every reduction loops in fixed index order, so results are bit-stable for a
// given input regardless of how the caller schedules work around the tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fgmdm/common.hpp"
#include "fgmdm/tensor.hpp"

namespace fgmdm {

// ---------------------------------------------------------------------------
// Raw matmul kernels (also used by inference paths that skip the tape)
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n]
template <typename T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) c[i * n + j] = T(0);
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      T* crow = c + i * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m,n] = A[m,k] * B[n,k]^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] = acc;
    }
  }
}

/// C[m,n] = A[k,m]^T * B[k,n]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) c[i * n + j] = T(0);
  for (int p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename T>
class TapeT {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  /// Leaf that participates in gradients.
  Var input(TensorT<T> value) {
    return push(std::move(value), {}, nullptr, /*needs=*/true);
  }

  /// Leaf excluded from gradients.
  Var constant(TensorT<T> value) {
    return push(std::move(value), {}, nullptr, /*needs=*/false);
  }

  const TensorT<T>& value(Var v) const { return node(v).val; }

  /// Gradient of the last backward() target w.r.t. this var.
  const TensorT<T>& grad(Var v) const {
    const Node& n = node(v);
    if (!n.needs) throw ContractError("grad: var does not require gradients");
    return n.grad;
  }

  /// Mutable gradient accumulator, for custom-op backward closures.
  TensorT<T>& grad_acc(Var v) { return node(v).grad; }

  bool needs_grad(Var v) const { return node(v).needs; }

  std::size_t size() const { return nodes_.size(); }

  /// Registers a node with an externally supplied backward closure. The
  /// closure receives the tape and the node's own id; it should read
  /// grad_acc(self) and accumulate into grad_acc(parent) for each parent
  /// that needs_grad(). Parents must already be on this tape.
  Var make_node(TensorT<T> value, const std::vector<Var>& parents,
                std::function<void(TapeT&, Var)> backward) {
    bool needs = false;
    std::vector<int> pids;
    pids.reserve(parents.size());
    for (Var p : parents) {
      check(p);
      pids.push_back(p.id);
      needs = needs || nodes_[p.id].needs;
    }
    return push(std::move(value), std::move(pids),
                needs ? std::move(backward) : nullptr, needs);
  }

  /// Reverse pass from a scalar target. Gradients of earlier backward()
  /// calls on the same tape are discarded.
  void backward(Var target) {
    const Node& t = node(target);
    if (t.val.numel() != 1)
      throw ContractError("backward: target must be scalar");
    if (!t.needs)
      throw ContractError("backward: target does not depend on any input");
    for (Node& n : nodes_) {
      if (n.needs)
        n.grad = TensorT<T>::zeros(n.val.shape);
      else
        n.grad = TensorT<T>();
    }
    nodes_[target.id].grad.data[0] = T(1);
    for (int i = target.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.needs && n.back) n.back(*this, Var{i});
    }
  }

  // ---- elementwise -------------------------------------------------------

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    TensorT<T> out = value(a);
    const TensorT<T>& bv = value(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
    return make_node(std::move(out), {a, b}, [a, b](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      t.accumulate(a, g.data.data(), g.numel());
      t.accumulate(b, g.data.data(), g.numel());
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    TensorT<T> out = value(a);
    const TensorT<T>& bv = value(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= bv.data[i];
    return make_node(std::move(out), {a, b}, [a, b](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      t.accumulate(a, g.data.data(), g.numel());
      if (t.needs_grad(b)) {
        TensorT<T>& gb = t.grad_acc(b);
        for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] -= g.data[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    TensorT<T> out = value(a);
    const TensorT<T>& bv = value(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= bv.data[i];
    return make_node(std::move(out), {a, b}, [a, b](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      const TensorT<T>& av = t.value(a);
      const TensorT<T>& bv2 = t.value(b);
      if (t.needs_grad(a)) {
        TensorT<T>& ga = t.grad_acc(a);
        for (std::size_t i = 0; i < g.numel(); ++i)
          ga.data[i] += g.data[i] * bv2.data[i];
      }
      if (t.needs_grad(b)) {
        TensorT<T>& gb = t.grad_acc(b);
        for (std::size_t i = 0; i < g.numel(); ++i)
          gb.data[i] += g.data[i] * av.data[i];
      }
    });
  }

  Var scale(Var a, T s) {
    TensorT<T> out = value(a);
    for (auto& x : out.data) x *= s;
    return make_node(std::move(out), {a}, [a, s](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      TensorT<T>& ga = t.grad_acc(a);
      for (std::size_t i = 0; i < g.numel(); ++i)
        ga.data[i] += s * g.data[i];
    });
  }

  // ---- broadcast over rows ----------------------------------------------

  /// out[i,j] = m[i,j] + r[j]; r has cols(m) elements.
  Var add_row(Var m, Var r) {
    const TensorT<T>& mv = value(m);
    const TensorT<T>& rv = value(r);
    const int rows = mv.rows(), cols = mv.cols();
    if (static_cast<int>(rv.numel()) != cols)
      throw ContractError("add_row: row length must equal matrix cols");
    TensorT<T> out = mv;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) out.data[i * cols + j] += rv.data[j];
    return make_node(std::move(out), {m, r},
                     [m, r, rows, cols](TapeT& t, Var self) {
                       const TensorT<T>& g = t.grad_acc(self);
                       t.accumulate(m, g.data.data(), g.numel());
                       if (t.needs_grad(r)) {
                         TensorT<T>& gr = t.grad_acc(r);
                         for (int i = 0; i < rows; ++i)
                           for (int j = 0; j < cols; ++j)
                             gr.data[j] += g.data[i * cols + j];
                       }
                     });
  }

  /// out[i,j] = m[i,j] * r[j]
  Var mul_row(Var m, Var r) {
    const TensorT<T>& mv = value(m);
    const TensorT<T>& rv = value(r);
    const int rows = mv.rows(), cols = mv.cols();
    if (static_cast<int>(rv.numel()) != cols)
      throw ContractError("mul_row: row length must equal matrix cols");
    TensorT<T> out = mv;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) out.data[i * cols + j] *= rv.data[j];
    return make_node(
        std::move(out), {m, r}, [m, r, rows, cols](TapeT& t, Var self) {
          const TensorT<T>& g = t.grad_acc(self);
          const TensorT<T>& mv2 = t.value(m);
          const TensorT<T>& rv2 = t.value(r);
          if (t.needs_grad(m)) {
            TensorT<T>& gm = t.grad_acc(m);
            for (int i = 0; i < rows; ++i)
              for (int j = 0; j < cols; ++j)
                gm.data[i * cols + j] += g.data[i * cols + j] * rv2.data[j];
          }
          if (t.needs_grad(r)) {
            TensorT<T>& gr = t.grad_acc(r);
            for (int i = 0; i < rows; ++i)
              for (int j = 0; j < cols; ++j)
                gr.data[j] += g.data[i * cols + j] * mv2.data[i * cols + j];
          }
        });
  }

  // ---- matmul ------------------------------------------------------------

  /// out = a[m,k] * b[k,n]
  Var matmul(Var a, Var b) {
    const TensorT<T>& av = value(a);
    const TensorT<T>& bv = value(b);
    const int m = av.rows(), k = av.cols(), n = bv.cols();
    if (bv.rows() != k)
      throw ContractError("matmul: inner dims differ " + av.shape_str() +
                          " x " + bv.shape_str());
    TensorT<T> out = TensorT<T>::zeros({m, n});
    mm_nn(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    return make_node(
        std::move(out), {a, b}, [a, b, m, k, n](TapeT& t, Var self) {
          const TensorT<T>& g = t.grad_acc(self);
          if (t.needs_grad(a)) {
            TensorT<T> da = TensorT<T>::zeros({m, k});
            mm_nt(g.data.data(), t.value(b).data.data(), da.data.data(), m, n,
                  k);
            t.accumulate(a, da.data.data(), da.numel());
          }
          if (t.needs_grad(b)) {
            TensorT<T> db = TensorT<T>::zeros({k, n});
            mm_tn(t.value(a).data.data(), g.data.data(), db.data.data(), k, m,
                  n);
            t.accumulate(b, db.data.data(), db.numel());
          }
        });
  }

  /// out = a[m,k] * b[n,k]^T  (row-by-row dot products, used for attention)
  Var matmul_nt(Var a, Var b) {
    const TensorT<T>& av = value(a);
    const TensorT<T>& bv = value(b);
    const int m = av.rows(), k = av.cols(), n = bv.rows();
    if (bv.cols() != k)
      throw ContractError("matmul_nt: inner dims differ " + av.shape_str() +
                          " x " + bv.shape_str() + "^T");
    TensorT<T> out = TensorT<T>::zeros({m, n});
    mm_nt(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    return make_node(
        std::move(out), {a, b}, [a, b, m, k, n](TapeT& t, Var self) {
          const TensorT<T>& g = t.grad_acc(self);
          if (t.needs_grad(a)) {
            TensorT<T> da = TensorT<T>::zeros({m, k});
            mm_nn(g.data.data(), t.value(b).data.data(), da.data.data(), m, n,
                  k);
            t.accumulate(a, da.data.data(), da.numel());
          }
          if (t.needs_grad(b)) {
            TensorT<T> db = TensorT<T>::zeros({n, k});
            mm_tn(g.data.data(), t.value(a).data.data(), db.data.data(), n, m,
                  k);
            t.accumulate(b, db.data.data(), db.numel());
          }
        });
  }

  // ---- structure ---------------------------------------------------------

  Var row_slice(Var a, int r0, int r1) {
    const TensorT<T>& av = value(a);
    const int rows = av.rows(), cols = av.cols();
    if (r0 < 0 || r1 > rows || r0 >= r1)
      throw ContractError("row_slice: bad range");
    TensorT<T> out = TensorT<T>::zeros({r1 - r0, cols});
    std::copy(av.data.begin() + static_cast<std::size_t>(r0) * cols,
              av.data.begin() + static_cast<std::size_t>(r1) * cols,
              out.data.begin());
    return make_node(std::move(out), {a},
                     [a, r0, cols](TapeT& t, Var self) {
                       const TensorT<T>& g = t.grad_acc(self);
                       TensorT<T>& ga = t.grad_acc(a);
                       T* dst = ga.data.data() +
                                static_cast<std::size_t>(r0) * cols;
                       for (std::size_t i = 0; i < g.numel(); ++i)
                         dst[i] += g.data[i];
                     });
  }

  Var col_slice(Var a, int c0, int c1) {
    const TensorT<T>& av = value(a);
    const int rows = av.rows(), cols = av.cols();
    if (c0 < 0 || c1 > cols || c0 >= c1)
      throw ContractError("col_slice: bad range");
    const int w = c1 - c0;
    TensorT<T> out = TensorT<T>::zeros({rows, w});
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < w; ++j)
        out.data[i * w + j] = av.data[i * cols + c0 + j];
    return make_node(std::move(out), {a},
                     [a, c0, cols, w](TapeT& t, Var self) {
                       const TensorT<T>& g = t.grad_acc(self);
                       TensorT<T>& ga = t.grad_acc(a);
                       const int rows2 = g.rows();
                       for (int i = 0; i < rows2; ++i)
                         for (int j = 0; j < w; ++j)
                           ga.data[i * cols + c0 + j] += g.data[i * w + j];
                     });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const int cols = value(parts[0]).cols();
    int rows = 0;
    for (Var p : parts) {
      if (value(p).cols() != cols)
        throw ContractError("concat_rows: column counts differ");
      rows += value(p).rows();
    }
    TensorT<T> out = TensorT<T>::zeros({rows, cols});
    std::size_t off = 0;
    for (Var p : parts) {
      const TensorT<T>& pv = value(p);
      std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + off);
      off += pv.numel();
    }
    return make_node(std::move(out), parts, [parts](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      std::size_t off2 = 0;
      for (Var p : parts) {
        const std::size_t n = t.value(p).numel();
        if (t.needs_grad(p)) {
          TensorT<T>& gp = t.grad_acc(p);
          for (std::size_t i = 0; i < n; ++i) gp.data[i] += g.data[off2 + i];
        }
        off2 += n;
      }
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const int rows = value(parts[0]).rows();
    int cols = 0;
    for (Var p : parts) {
      if (value(p).rows() != rows)
        throw ContractError("concat_cols: row counts differ");
      cols += value(p).cols();
    }
    TensorT<T> out = TensorT<T>::zeros({rows, cols});
    int off = 0;
    for (Var p : parts) {
      const TensorT<T>& pv = value(p);
      const int w = pv.cols();
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < w; ++j)
          out.data[static_cast<std::size_t>(i) * cols + off + j] =
              pv.data[static_cast<std::size_t>(i) * w + j];
      off += w;
    }
    return make_node(std::move(out), parts,
                     [parts, cols](TapeT& t, Var self) {
                       const TensorT<T>& g = t.grad_acc(self);
                       const int rows2 = g.rows();
                       int off2 = 0;
                       for (Var p : parts) {
                         const int w = t.value(p).cols();
                         if (t.needs_grad(p)) {
                           TensorT<T>& gp = t.grad_acc(p);
                           for (int i = 0; i < rows2; ++i)
                             for (int j = 0; j < w; ++j)
                               gp.data[static_cast<std::size_t>(i) * w + j] +=
                                   g.data[static_cast<std::size_t>(i) * cols +
                                          off2 + j];
                         }
                         off2 += w;
                       }
                     });
  }

  Var reshape(Var a, std::vector<int> shape) {
    const TensorT<T>& av = value(a);
    if (TensorT<T>::numel_of(shape) != av.numel())
      throw ContractError("reshape: element counts differ");
    TensorT<T> out = av;
    out.shape = std::move(shape);
    return make_node(std::move(out), {a}, [a](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      t.accumulate(a, g.data.data(), g.numel());
    });
  }

  Var transpose(Var a) {
    const TensorT<T>& av = value(a);
    const int m = av.rows(), n = av.cols();
    TensorT<T> out = TensorT<T>::zeros({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.data[j * m + i] = av.data[i * n + j];
    return make_node(std::move(out), {a}, [a, m, n](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      TensorT<T>& ga = t.grad_acc(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga.data[i * n + j] += g.data[j * m + i];
    });
  }

  // ---- reductions (fixed left-to-right order) ---------------------------

  Var sum(Var a) {
    const TensorT<T>& av = value(a);
    T acc = T(0);
    for (std::size_t i = 0; i < av.numel(); ++i) acc += av.data[i];
    return make_node(TensorT<T>::from({1}, {acc}), {a},
                     [a](TapeT& t, Var self) {
                       const T g = t.grad_acc(self).data[0];
                       TensorT<T>& ga = t.grad_acc(a);
                       for (auto& x : ga.data) x += g;
                     });
  }

  Var mean(Var a) {
    const TensorT<T>& av = value(a);
    if (av.numel() == 0) throw ContractError("mean: empty tensor");
    T acc = T(0);
    for (std::size_t i = 0; i < av.numel(); ++i) acc += av.data[i];
    const T inv = T(1) / static_cast<T>(av.numel());
    return make_node(TensorT<T>::from({1}, {acc * inv}), {a},
                     [a, inv](TapeT& t, Var self) {
                       const T g = t.grad_acc(self).data[0] * inv;
                       TensorT<T>& ga = t.grad_acc(a);
                       for (auto& x : ga.data) x += g;
                     });
  }

  /// Column means: [m,n] -> [1,n].
  Var mean_rows(Var a) {
    const TensorT<T>& av = value(a);
    const int m = av.rows(), n = av.cols();
    if (m == 0) throw ContractError("mean_rows: empty tensor");
    TensorT<T> out = TensorT<T>::zeros({1, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.data[j] += av.data[i * n + j];
    const T inv = T(1) / static_cast<T>(m);
    for (auto& x : out.data) x *= inv;
    return make_node(std::move(out), {a}, [a, m, n, inv](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      TensorT<T>& ga = t.grad_acc(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga.data[i * n + j] += g.data[j] * inv;
    });
  }

  // ---- nonlinearities ----------------------------------------------------

  Var softmax_rows(Var a) {
    const TensorT<T>& av = value(a);
    const int m = av.rows(), n = av.cols();
    TensorT<T> out = TensorT<T>::zeros({m, n});
    for (int i = 0; i < m; ++i) {
      const T* x = av.data.data() + i * n;
      T* y = out.data.data() + i * n;
      T mx = x[0];
      for (int j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
      T z = T(0);
      for (int j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        z += y[j];
      }
      const T inv = T(1) / z;
      for (int j = 0; j < n; ++j) y[j] *= inv;
    }
    return make_node(std::move(out), {a}, [a, m, n](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      const TensorT<T>& y = t.value(self);
      TensorT<T>& ga = t.grad_acc(a);
      for (int i = 0; i < m; ++i) {
        const T* gi = g.data.data() + i * n;
        const T* yi = y.data.data() + i * n;
        T dot = T(0);
        for (int j = 0; j < n; ++j) dot += gi[j] * yi[j];
        T* da = ga.data.data() + i * n;
        for (int j = 0; j < n; ++j) da[j] += yi[j] * (gi[j] - dot);
      }
    });
  }

  Var log_softmax_rows(Var a) {
    const TensorT<T>& av = value(a);
    const int m = av.rows(), n = av.cols();
    TensorT<T> out = TensorT<T>::zeros({m, n});
    for (int i = 0; i < m; ++i) {
      const T* x = av.data.data() + i * n;
      T* y = out.data.data() + i * n;
      T mx = x[0];
      for (int j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
      T z = T(0);
      for (int j = 0; j < n; ++j) z += std::exp(x[j] - mx);
      const T lz = std::log(z) + mx;
      for (int j = 0; j < n; ++j) y[j] = x[j] - lz;
    }
    return make_node(std::move(out), {a}, [a, m, n](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      const TensorT<T>& y = t.value(self);
      TensorT<T>& ga = t.grad_acc(a);
      for (int i = 0; i < m; ++i) {
        const T* gi = g.data.data() + i * n;
        const T* yi = y.data.data() + i * n;
        T gsum = T(0);
        for (int j = 0; j < n; ++j) gsum += gi[j];
        T* da = ga.data.data() + i * n;
        for (int j = 0; j < n; ++j) da[j] += gi[j] - std::exp(yi[j]) * gsum;
      }
    });
  }

  /// Per-row layer norm with learned gain/bias (each of length cols).
  Var layer_norm_rows(Var a, Var gain, Var bias, T eps = T(1e-5)) {
    const TensorT<T>& av = value(a);
    const int m = av.rows(), n = av.cols();
    if (static_cast<int>(value(gain).numel()) != n ||
        static_cast<int>(value(bias).numel()) != n)
      throw ContractError("layer_norm_rows: gain/bias length mismatch");
    TensorT<T> out = TensorT<T>::zeros({m, n});
    // save normalized activations and inverse std for the backward pass
    auto xhat = std::make_shared<TensorT<T>>(TensorT<T>::zeros({m, n}));
    auto istd = std::make_shared<std::vector<T>>(m);
    const TensorT<T>& gv = value(gain);
    const TensorT<T>& bv = value(bias);
    for (int i = 0; i < m; ++i) {
      const T* x = av.data.data() + i * n;
      T mu = T(0);
      for (int j = 0; j < n; ++j) mu += x[j];
      mu /= static_cast<T>(n);
      T var = T(0);
      for (int j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
      var /= static_cast<T>(n);
      const T is = T(1) / std::sqrt(var + eps);
      (*istd)[i] = is;
      T* xh = xhat->data.data() + i * n;
      T* y = out.data.data() + i * n;
      for (int j = 0; j < n; ++j) {
        xh[j] = (x[j] - mu) * is;
        y[j] = xh[j] * gv.data[j] + bv.data[j];
      }
    }
    return make_node(
        std::move(out), {a, gain, bias},
        [a, gain, bias, m, n, xhat, istd](TapeT& t, Var self) {
          const TensorT<T>& g = t.grad_acc(self);
          const TensorT<T>& gv2 = t.value(gain);
          for (int i = 0; i < m; ++i) {
            const T* gi = g.data.data() + i * n;
            const T* xh = xhat->data.data() + i * n;
            if (t.needs_grad(a)) {
              // dL/dx = istd/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
              T s1 = T(0), s2 = T(0);
              std::vector<T> dxh(n);
              for (int j = 0; j < n; ++j) {
                dxh[j] = gi[j] * gv2.data[j];
                s1 += dxh[j];
                s2 += dxh[j] * xh[j];
              }
              const T is = (*istd)[i];
              T* da = t.grad_acc(a).data.data() + i * n;
              const T invn = T(1) / static_cast<T>(n);
              for (int j = 0; j < n; ++j)
                da[j] += is * (dxh[j] - invn * s1 - xh[j] * invn * s2);
            }
            if (t.needs_grad(gain)) {
              T* dg = t.grad_acc(gain).data.data();
              for (int j = 0; j < n; ++j) dg[j] += gi[j] * xh[j];
            }
            if (t.needs_grad(bias)) {
              T* db = t.grad_acc(bias).data.data();
              for (int j = 0; j < n; ++j) db[j] += gi[j];
            }
          }
        });
  }

  /// Exact-erf GELU: 0.5 x (1 + erf(x / sqrt(2)))
  Var gelu(Var a) {
    const TensorT<T>& av = value(a);
    TensorT<T> out = av;
    for (auto& x : out.data) {
      const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475)));
      x = x * cdf;
    }
    return make_node(std::move(out), {a}, [a](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      const TensorT<T>& av2 = t.value(a);
      TensorT<T>& ga = t.grad_acc(a);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        const T x = av2.data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475)));
        const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
        ga.data[i] += g.data[i] * (cdf + x * pdf);
      }
    });
  }

  /// Inverted dropout; mask is drawn from rng at call time, so call order on
  /// the tape fixes the stream. No-op when p == 0.
  Var dropout(Var a, T p, Rng& rng) {
    if (p < T(0) || p >= T(1)) throw ContractError("dropout: p must be in [0,1)");
    if (p == T(0)) return a;
    const TensorT<T>& av = value(a);
    auto mask = std::make_shared<std::vector<T>>(av.numel());
    const T keep_scale = T(1) / (T(1) - p);
    TensorT<T> out = av;
    for (std::size_t i = 0; i < av.numel(); ++i) {
      const T m = rng.uniform() < static_cast<double>(p) ? T(0) : keep_scale;
      (*mask)[i] = m;
      out.data[i] *= m;
    }
    return make_node(std::move(out), {a}, [a, mask](TapeT& t, Var self) {
      const TensorT<T>& g = t.grad_acc(self);
      TensorT<T>& ga = t.grad_acc(a);
      for (std::size_t i = 0; i < g.numel(); ++i)
        ga.data[i] += g.data[i] * (*mask)[i];
    });
  }

  /// Rows scaled to unit L2 norm; smooth at zero via y = x / sqrt(|x|^2+eps).
  Var l2_normalize_rows(Var a, T eps = T(1e-12)) {
    const TensorT<T>& av = value(a);
    const int m = av.rows(), n = av.cols();
    TensorT<T> out = TensorT<T>::zeros({m, n});
    auto inv_norm = std::make_shared<std::vector<T>>(m);
    for (int i = 0; i < m; ++i) {
      const T* x = av.data.data() + i * n;
      T ss = T(0);
      for (int j = 0; j < n; ++j) ss += x[j] * x[j];
      const T in = T(1) / std::sqrt(ss + eps);
      (*inv_norm)[i] = in;
      T* y = out.data.data() + i * n;
      for (int j = 0; j < n; ++j) y[j] = x[j] * in;
    }
    return make_node(
        std::move(out), {a}, [a, m, n, inv_norm](TapeT& t, Var self) {
          const TensorT<T>& g = t.grad_acc(self);
          const TensorT<T>& y = t.value(self);
          TensorT<T>& ga = t.grad_acc(a);
          for (int i = 0; i < m; ++i) {
            const T* gi = g.data.data() + i * n;
            const T* yi = y.data.data() + i * n;
            T dot = T(0);
            for (int j = 0; j < n; ++j) dot += gi[j] * yi[j];
            const T in = (*inv_norm)[i];
            T* da = ga.data.data() + i * n;
            for (int j = 0; j < n; ++j) da[j] += in * (gi[j] - yi[j] * dot);
          }
        });
  }

  /// Adds src into the gradient accumulator of v when it needs gradients.
  void accumulate(Var v, const T* src, std::size_t n) {
    Node& nd = node(v);
    if (!nd.needs) return;
    if (nd.grad.numel() != n)
      throw ContractError("accumulate: gradient size mismatch");
    for (std::size_t i = 0; i < n; ++i) nd.grad.data[i] += src[i];
  }

 private:
  struct Node {
    TensorT<T> val;
    TensorT<T> grad;
    bool needs = false;
    std::vector<int> parents;
    std::function<void(TapeT&, Var)> back;
  };

  Var push(TensorT<T> val, std::vector<int> parents,
           std::function<void(TapeT&, Var)> back, bool needs) {
    Node n;
    n.val = std::move(val);
    n.needs = needs;
    n.parents = std::move(parents);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(Var v) {
    check(v);
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    check(v);
    return nodes_[v.id];
  }

  void check(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw ContractError("tape: var not on this tape");
  }

  void check_same_shape(Var a, Var b, const char* op) const {
    if (!node(a).val.same_shape(node(b).val))
      throw ContractError(std::string(op) + ": shape mismatch " +
                          node(a).val.shape_str() + " vs " +
                          node(b).val.shape_str());
  }

  std::vector<Node> nodes_;
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// Named parameters in fixed insertion order. The order defines the layout of
/// optimizer state and checkpoint files, so it must be identical across runs.
template <typename T>
class ParamStoreT {
 public:
  void add(const std::string& name, TensorT<T> value) {
    if (index_.count(name))
      throw ContractError("param store: duplicate name " + name);
    index_[name] = items_.size();
    items_.push_back({name, std::move(value)});
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  TensorT<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ContractError("param store: unknown name " + name);
    return items_[it->second].second;
  }

  const TensorT<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ContractError("param store: unknown name " + name);
    return items_[it->second].second;
  }

  std::size_t size() const { return items_.size(); }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ContractError("param store: unknown name " + name);
    return it->second;
  }

  const std::string& name_at(std::size_t i) const { return items_[i].first; }
  TensorT<T>& value_at(std::size_t i) { return items_[i].second; }
  const TensorT<T>& value_at(std::size_t i) const { return items_[i].second; }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, TensorT<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore = ParamStoreT<float>;

/// Gradients aligned with a ParamStore, one tensor per parameter.
template <typename T>
std::vector<TensorT<T>> zero_grads_like(const ParamStoreT<T>& params) {
  std::vector<TensorT<T>> g;
  g.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    g.push_back(TensorT<T>::zeros(params.value_at(i).shape));
  return g;
}

/// Parameters mounted on a tape as gradient-tracked inputs, addressable by
/// their store names. Binding order equals store order, so gradients
/// collected from a bound tape line up with the store and its Adam state.
template <typename T>
struct BoundParamsT {
  const ParamStoreT<T>* store = nullptr;
  std::vector<typename TapeT<T>::Var> vars;

  typename TapeT<T>::Var at(const std::string& name) const {
    return vars[store->index_of(name)];
  }
};

template <typename T>
BoundParamsT<T> bind_params(TapeT<T>& tape, const ParamStoreT<T>& params) {
  BoundParamsT<T> b;
  b.store = &params;
  b.vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    b.vars.push_back(tape.input(params.value_at(i)));
  return b;
}

/// Read the accumulated parameter gradients off a tape after backward().
template <typename T>
std::vector<TensorT<T>> collect_grads(const TapeT<T>& tape,
                                      const BoundParamsT<T>& bound) {
  std::vector<TensorT<T>> g;
  g.reserve(bound.vars.size());
  for (const auto& v : bound.vars) g.push_back(tape.grad(v));
  return g;
}

using BoundParams = BoundParamsT<float>;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamConfigT {
  T lr = T(1e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

using AdamConfig = AdamConfigT<float>;

template <typename T>
struct AdamStateT {
  long long t = 0;  // completed update count
  std::vector<TensorT<T>> m;
  std::vector<TensorT<T>> v;

  static AdamStateT init(const ParamStoreT<T>& params) {
    AdamStateT s;
    s.m = zero_grads_like(params);
    s.v = zero_grads_like(params);
    return s;
  }
};

using AdamState = AdamStateT<float>;

/// Global L2 norm over a gradient set, summed in parameter order.
template <typename T>
T global_grad_norm(const std::vector<TensorT<T>>& grads) {
  double ss = 0.0;
  for (const auto& g : grads)
    for (T x : g.data) ss += static_cast<double>(x) * static_cast<double>(x);
  return static_cast<T>(std::sqrt(ss));
}

/// Scales all gradients so the global norm does not exceed max_norm.
/// Returns the pre-clip norm.
template <typename T>
T clip_grad_norm(std::vector<TensorT<T>>& grads, T max_norm) {
  const T norm = global_grad_norm(grads);
  if (norm > max_norm && norm > T(0)) {
    const T s = max_norm / norm;
    for (auto& g : grads)
      for (T& x : g.data) x *= s;
  }
  return norm;
}

/// One Adam update with bias correction. Mutates params and state in place.
template <typename T>
void adam_step(ParamStoreT<T>& params, const std::vector<TensorT<T>>& grads,
               AdamStateT<T>& state, const AdamConfigT<T>& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw ContractError("adam_step: parameter/gradient/state count mismatch");
  state.t += 1;
  const T b1t = static_cast<T>(
      1.0 - std::pow(static_cast<double>(cfg.beta1), double(state.t)));
  const T b2t = static_cast<T>(
      1.0 - std::pow(static_cast<double>(cfg.beta2), double(state.t)));
  for (std::size_t p = 0; p < params.size(); ++p) {
    TensorT<T>& w = params.value_at(p);
    const TensorT<T>& g = grads[p];
    if (!w.same_shape(g))
      throw ContractError("adam_step: gradient shape mismatch for " +
                          params.name_at(p));
    TensorT<T>& m = state.m[p];
    TensorT<T>& v = state.v[p];
    for (std::size_t i = 0; i < w.numel(); ++i) {
      m.data[i] = cfg.beta1 * m.data[i] + (T(1) - cfg.beta1) * g.data[i];
      v.data[i] =
          cfg.beta2 * v.data[i] + (T(1) - cfg.beta2) * g.data[i] * g.data[i];
      const T mhat = m.data[i] / b1t;
      const T vhat = v.data[i] / b2t;
      w.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace fgmdm
