#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace occloff::ad {

using Index = std::ptrdiff_t;

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

/// Dense row-major tensor with an optional gradient buffer. Rank is 1 or 2 in
/// practice; higher-rank data is carried as [rows, cols] with the extra
/// structure tracked by the caller (grids, pyramids, head counts).
template <typename T>
struct Tensor {
  std::vector<Index> shape;
  std::vector<T> val;
  std::vector<T> grad;
  bool needs_grad = false;

  Index size() const { return static_cast<Index>(val.size()); }
  Index rows() const { return shape.empty() ? 0 : shape[0]; }
  Index cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T scalar() const {
    check(val.size() == 1, "Tensor::scalar: not a scalar");
    return val[0];
  }
};

template <typename T>
using Ptr = std::shared_ptr<Tensor<T>>;

template <typename T>
using MatM = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMatM = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
MatM<T> as_mat(Tensor<T>& t) {
  return MatM<T>(t.val.data(), t.rows(), t.cols());
}
template <typename T>
CMatM<T> as_cmat(const Tensor<T>& t) {
  return CMatM<T>(t.val.data(), t.rows(), t.cols());
}
template <typename T>
MatM<T> grad_mat(Tensor<T>& t) {
  return MatM<T>(t.grad.data(), t.rows(), t.cols());
}

inline Index numel(const std::vector<Index>& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

/// Reverse-mode tape. Ops evaluate eagerly and push a closure that propagates
/// gradients from the output to the inputs. `backward(root)` runs the
/// closures in reverse order. One tape per forward pass; parameters live
/// outside and keep their gradients across `reset()`.
template <typename T>
class Tape {
 public:
  /// When false, no closures are recorded (cheap inference-only forward).
  bool recording = true;

  Ptr<T> tensor(std::vector<Index> shape, bool needs_grad = false) {
    auto t = std::make_shared<Tensor<T>>();
    t->shape = std::move(shape);
    t->val.assign(static_cast<size_t>(numel(t->shape)), T(0));
    t->needs_grad = needs_grad;
    if (needs_grad) t->grad.assign(t->val.size(), T(0));
    return t;
  }

  Ptr<T> constant(std::vector<Index> shape, const std::vector<T>& data) {
    auto t = tensor(std::move(shape), false);
    check(static_cast<Index>(data.size()) == t->size(), "constant: size mismatch");
    t->val = data;
    return t;
  }

  Ptr<T> scalar_const(T v) { return constant({1}, {v}); }

  // ---------------------------------------------------------------- elementwise

  Ptr<T> add(const Ptr<T>& a, const Ptr<T>& b) {
    check(a->shape == b->shape, "add: shape mismatch");
    auto out = result(a->shape, {a, b});
    for (Index i = 0; i < a->size(); ++i) out->val[i] = a->val[i] + b->val[i];
    record(out, [a, b, out] {
      accum(a, [&](Index i) { return out->grad[i]; });
      accum(b, [&](Index i) { return out->grad[i]; });
    });
    return out;
  }

  Ptr<T> sub(const Ptr<T>& a, const Ptr<T>& b) {
    check(a->shape == b->shape, "sub: shape mismatch");
    auto out = result(a->shape, {a, b});
    for (Index i = 0; i < a->size(); ++i) out->val[i] = a->val[i] - b->val[i];
    record(out, [a, b, out] {
      accum(a, [&](Index i) { return out->grad[i]; });
      accum(b, [&](Index i) { return -out->grad[i]; });
    });
    return out;
  }

  Ptr<T> mul(const Ptr<T>& a, const Ptr<T>& b) {
    check(a->shape == b->shape, "mul: shape mismatch");
    auto out = result(a->shape, {a, b});
    for (Index i = 0; i < a->size(); ++i) out->val[i] = a->val[i] * b->val[i];
    record(out, [a, b, out] {
      accum(a, [&](Index i) { return b->val[i] * out->grad[i]; });
      accum(b, [&](Index i) { return a->val[i] * out->grad[i]; });
    });
    return out;
  }

  Ptr<T> scale(const Ptr<T>& a, T c) {
    auto out = result(a->shape, {a});
    for (Index i = 0; i < a->size(); ++i) out->val[i] = c * a->val[i];
    record(out, [a, out, c] { accum(a, [&](Index i) { return c * out->grad[i]; }); });
    return out;
  }

  /// c - a, elementwise against a scalar constant.
  Ptr<T> const_minus(T c, const Ptr<T>& a) {
    auto out = result(a->shape, {a});
    for (Index i = 0; i < a->size(); ++i) out->val[i] = c - a->val[i];
    record(out, [a, out] { accum(a, [&](Index i) { return -out->grad[i]; }); });
    return out;
  }

  /// m⊙a + k with constant coefficient vectors (same size as a).
  Ptr<T> affine(const Ptr<T>& a, std::vector<T> m, std::vector<T> k) {
    check(static_cast<Index>(m.size()) == a->size() && m.size() == k.size(),
          "affine: coefficient size mismatch");
    auto out = result(a->shape, {a});
    for (Index i = 0; i < a->size(); ++i) out->val[i] = m[i] * a->val[i] + k[i];
    auto mm = std::make_shared<std::vector<T>>(std::move(m));
    record(out, [a, out, mm] { accum(a, [&](Index i) { return (*mm)[i] * out->grad[i]; }); });
    return out;
  }

  Ptr<T> silu(const Ptr<T>& a) {
    auto out = result(a->shape, {a});
    for (Index i = 0; i < a->size(); ++i) {
      T s = sigmoid(a->val[i]);
      out->val[i] = a->val[i] * s;
    }
    record(out, [a, out] {
      accum(a, [&](Index i) {
        T s = sigmoid(a->val[i]);
        return (s + a->val[i] * s * (T(1) - s)) * out->grad[i];
      });
    });
    return out;
  }

  /// sqrt(max(x, 0)); zero gradient where x <= 0.
  Ptr<T> sqrt_pos(const Ptr<T>& a) {
    auto out = result(a->shape, {a});
    for (Index i = 0; i < a->size(); ++i)
      out->val[i] = a->val[i] > T(0) ? std::sqrt(a->val[i]) : T(0);
    record(out, [a, out] {
      accum(a, [&](Index i) {
        return (a->val[i] > T(0) && out->val[i] > T(0))
                   ? out->grad[i] / (T(2) * out->val[i])
                   : T(0);
      });
    });
    return out;
  }

  /// Natural log; inputs must be strictly positive.
  Ptr<T> log_elem(const Ptr<T>& a) {
    auto out = result(a->shape, {a});
    for (Index i = 0; i < a->size(); ++i) {
      check(a->val[i] > T(0), "log_elem: non-positive input");
      out->val[i] = std::log(a->val[i]);
    }
    record(out, [a, out] { accum(a, [&](Index i) { return out->grad[i] / a->val[i]; }); });
    return out;
  }

  // ---------------------------------------------------------------- reductions

  Ptr<T> sum(const Ptr<T>& a) {
    auto out = result({1}, {a});
    T s = T(0);
    for (Index i = 0; i < a->size(); ++i) s += a->val[i];
    out->val[0] = s;
    record(out, [a, out] { accum(a, [&](Index) { return out->grad[0]; }); });
    return out;
  }

  Ptr<T> mean(const Ptr<T>& a) {
    check(a->size() > 0, "mean: empty tensor");
    T inv = T(1) / static_cast<T>(a->size());
    return scale(sum(a), inv);
  }

  /// Overflow-safe log(sum(exp(x))) over a vector.
  Ptr<T> logsumexp(const Ptr<T>& a) {
    check(a->size() > 0, "logsumexp: empty tensor");
    auto out = result({1}, {a});
    T mx = a->val[0];
    for (Index i = 1; i < a->size(); ++i) mx = std::max(mx, a->val[i]);
    T s = T(0);
    for (Index i = 0; i < a->size(); ++i) s += std::exp(a->val[i] - mx);
    out->val[0] = mx + std::log(s);
    record(out, [a, out] {
      accum(a, [&](Index i) { return std::exp(a->val[i] - out->val[0]) * out->grad[0]; });
    });
    return out;
  }

  Ptr<T> dot_const(const Ptr<T>& a, std::vector<T> w) {
    check(static_cast<Index>(w.size()) == a->size(), "dot_const: size mismatch");
    auto out = result({1}, {a});
    T s = T(0);
    for (Index i = 0; i < a->size(); ++i) s += a->val[i] * w[i];
    out->val[0] = s;
    auto wp = std::make_shared<std::vector<T>>(std::move(w));
    record(out, [a, out, wp] { accum(a, [&](Index i) { return (*wp)[i] * out->grad[0]; }); });
    return out;
  }

  /// Per-row dot product of two [N,C] tensors -> [N].
  Ptr<T> rowwise_dot(const Ptr<T>& a, const Ptr<T>& b) {
    check(a->shape == b->shape && a->shape.size() == 2, "rowwise_dot: shape mismatch");
    Index n = a->rows(), c = a->cols();
    auto out = result({n}, {a, b});
    for (Index r = 0; r < n; ++r) {
      T s = T(0);
      for (Index j = 0; j < c; ++j) s += a->val[r * c + j] * b->val[r * c + j];
      out->val[r] = s;
    }
    record(out, [a, b, out, n, c] {
      if (a->needs_grad)
        for (Index r = 0; r < n; ++r)
          for (Index j = 0; j < c; ++j) a->grad[r * c + j] += b->val[r * c + j] * out->grad[r];
      if (b->needs_grad)
        for (Index r = 0; r < n; ++r)
          for (Index j = 0; j < c; ++j) b->grad[r * c + j] += a->val[r * c + j] * out->grad[r];
    });
    return out;
  }

  // ---------------------------------------------------------------- matrix

  Ptr<T> matmul(const Ptr<T>& a, const Ptr<T>& b) {
    check(a->cols() == b->rows(), "matmul: inner dim mismatch");
    auto out = result({a->rows(), b->cols()}, {a, b});
    as_mat(*out).noalias() = as_cmat(*a) * as_cmat(*b);
    record(out, [a, b, out] {
      if (a->needs_grad) grad_mat(*a).noalias() += grad_mat(*out) * as_cmat(*b).transpose();
      if (b->needs_grad) grad_mat(*b).noalias() += as_cmat(*a).transpose() * grad_mat(*out);
    });
    return out;
  }

  /// a[N,C] · b[S,C]^T -> [N,S].
  Ptr<T> matmul_nt(const Ptr<T>& a, const Ptr<T>& b) {
    check(a->cols() == b->cols(), "matmul_nt: inner dim mismatch");
    auto out = result({a->rows(), b->rows()}, {a, b});
    as_mat(*out).noalias() = as_cmat(*a) * as_cmat(*b).transpose();
    record(out, [a, b, out] {
      if (a->needs_grad) grad_mat(*a).noalias() += grad_mat(*out) * as_cmat(*b);
      if (b->needs_grad) grad_mat(*b).noalias() += grad_mat(*out).transpose() * as_cmat(*a);
    });
    return out;
  }

  /// x[N,K] · W[K,M] + bias[M]; bias may be null.
  Ptr<T> linear(const Ptr<T>& x, const Ptr<T>& w, const Ptr<T>& bias) {
    check(x->cols() == w->rows(), "linear: dim mismatch");
    auto out = result({x->rows(), w->cols()}, {x, w, bias});
    as_mat(*out).noalias() = as_cmat(*x) * as_cmat(*w);
    if (bias) {
      check(bias->size() == w->cols(), "linear: bias size mismatch");
      as_mat(*out).rowwise() +=
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->val.data(), bias->size());
    }
    record(out, [x, w, bias, out] {
      if (x->needs_grad) grad_mat(*x).noalias() += grad_mat(*out) * as_cmat(*w).transpose();
      if (w->needs_grad) grad_mat(*w).noalias() += as_cmat(*x).transpose() * grad_mat(*out);
      if (bias && bias->needs_grad) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> bg(bias->grad.data(), bias->size());
        bg += grad_mat(*out).colwise().sum();
      }
    });
    return out;
  }

  // ---------------------------------------------------------------- softmax / norm / ce

  Ptr<T> softmax_rows(const Ptr<T>& x) {
    check(x->shape.size() == 2, "softmax_rows: need 2-d tensor");
    Index n = x->rows(), c = x->cols();
    auto out = result(x->shape, {x});
    for (Index r = 0; r < n; ++r) {
      const T* row = x->val.data() + r * c;
      T* orow = out->val.data() + r * c;
      T mx = row[0];
      for (Index j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      T s = T(0);
      for (Index j = 0; j < c; ++j) {
        orow[j] = std::exp(row[j] - mx);
        s += orow[j];
      }
      for (Index j = 0; j < c; ++j) orow[j] /= s;
    }
    record(out, [x, out, n, c] {
      if (!x->needs_grad) return;
      for (Index r = 0; r < n; ++r) {
        const T* s = out->val.data() + r * c;
        const T* g = out->grad.data() + r * c;
        T dot = T(0);
        for (Index j = 0; j < c; ++j) dot += s[j] * g[j];
        for (Index j = 0; j < c; ++j) x->grad[r * c + j] += s[j] * (g[j] - dot);
      }
    });
    return out;
  }

  /// LayerNorm over the channel (last) dimension with learnable gain/bias.
  Ptr<T> layernorm_rows(const Ptr<T>& x, const Ptr<T>& gain, const Ptr<T>& bias, T eps) {
    check(x->shape.size() == 2, "layernorm_rows: need 2-d tensor");
    Index n = x->rows(), c = x->cols();
    check(gain->size() == c && bias->size() == c, "layernorm_rows: affine size mismatch");
    auto out = result(x->shape, {x, gain, bias});
    auto xhat = std::make_shared<std::vector<T>>(x->val.size());
    auto inv_sigma = std::make_shared<std::vector<T>>(n);
    for (Index r = 0; r < n; ++r) {
      const T* row = x->val.data() + r * c;
      T mu = T(0);
      for (Index j = 0; j < c; ++j) mu += row[j];
      mu /= static_cast<T>(c);
      T var = T(0);
      for (Index j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<T>(c);
      T is = T(1) / std::sqrt(var + eps);
      (*inv_sigma)[r] = is;
      for (Index j = 0; j < c; ++j) {
        T xh = (row[j] - mu) * is;
        (*xhat)[r * c + j] = xh;
        out->val[r * c + j] = gain->val[j] * xh + bias->val[j];
      }
    }
    record(out, [x, gain, bias, out, xhat, inv_sigma, n, c] {
      for (Index r = 0; r < n; ++r) {
        const T* g = out->grad.data() + r * c;
        const T* xh = xhat->data() + r * c;
        if (gain->needs_grad)
          for (Index j = 0; j < c; ++j) gain->grad[j] += g[j] * xh[j];
        if (bias->needs_grad)
          for (Index j = 0; j < c; ++j) bias->grad[j] += g[j];
        if (x->needs_grad) {
          T m1 = T(0), m2 = T(0);
          for (Index j = 0; j < c; ++j) {
            T gg = g[j] * gain->val[j];
            m1 += gg;
            m2 += gg * xh[j];
          }
          m1 /= static_cast<T>(c);
          m2 /= static_cast<T>(c);
          for (Index j = 0; j < c; ++j) {
            T gg = g[j] * gain->val[j];
            x->grad[r * c + j] += (gg - m1 - xh[j] * m2) * (*inv_sigma)[r];
          }
        }
      }
    });
    return out;
  }

  /// Mean cross-entropy of integer labels against logits [N,C].
  Ptr<T> cross_entropy_mean(const Ptr<T>& logits, std::vector<int> labels) {
    Index n = logits->rows(), c = logits->cols();
    check(static_cast<Index>(labels.size()) == n, "cross_entropy_mean: label count mismatch");
    auto out = result({1}, {logits});
    T total = T(0);
    for (Index r = 0; r < n; ++r) {
      const T* row = logits->val.data() + r * c;
      check(labels[r] >= 0 && labels[r] < c, "cross_entropy_mean: label out of range");
      T mx = row[0];
      for (Index j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      T s = T(0);
      for (Index j = 0; j < c; ++j) s += std::exp(row[j] - mx);
      total += mx + std::log(s) - row[labels[r]];
    }
    out->val[0] = total / static_cast<T>(n);
    auto lp = std::make_shared<std::vector<int>>(std::move(labels));
    record(out, [logits, out, lp, n, c] {
      if (!logits->needs_grad) return;
      T g0 = out->grad[0] / static_cast<T>(n);
      for (Index r = 0; r < n; ++r) {
        const T* row = logits->val.data() + r * c;
        T mx = row[0];
        for (Index j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T s = T(0);
        for (Index j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        for (Index j = 0; j < c; ++j) {
          T p = std::exp(row[j] - mx) / s;
          logits->grad[r * c + j] += (p - ((*lp)[r] == j ? T(1) : T(0))) * g0;
        }
      }
    });
    return out;
  }

  // ---------------------------------------------------------------- shape / index

  Ptr<T> reshape_copy(const Ptr<T>& a, std::vector<Index> shape) {
    check(numel(shape) == a->size(), "reshape_copy: element count mismatch");
    auto out = result(std::move(shape), {a});
    out->val = a->val;
    record(out, [a, out] { accum(a, [&](Index i) { return out->grad[i]; }); });
    return out;
  }

  Ptr<T> gather_rows(const Ptr<T>& x, std::vector<Index> idx) {
    Index c = x->cols();
    auto out = result({static_cast<Index>(idx.size()), c}, {x});
    for (size_t m = 0; m < idx.size(); ++m) {
      check(idx[m] >= 0 && idx[m] < x->rows(), "gather_rows: index out of range");
      std::copy_n(x->val.data() + idx[m] * c, c, out->val.data() + m * c);
    }
    auto ip = std::make_shared<std::vector<Index>>(std::move(idx));
    record(out, [x, out, ip, c] {
      if (!x->needs_grad) return;
      for (size_t m = 0; m < ip->size(); ++m)
        for (Index j = 0; j < c; ++j)
          x->grad[(*ip)[m] * c + j] += out->grad[static_cast<Index>(m) * c + j];
    });
    return out;
  }

  Ptr<T> gather_elems(const Ptr<T>& x, std::vector<Index> idx) {
    auto out = result({static_cast<Index>(idx.size())}, {x});
    for (size_t m = 0; m < idx.size(); ++m) {
      check(idx[m] >= 0 && idx[m] < x->size(), "gather_elems: index out of range");
      out->val[m] = x->val[idx[m]];
    }
    auto ip = std::make_shared<std::vector<Index>>(std::move(idx));
    record(out, [x, out, ip] {
      if (!x->needs_grad) return;
      for (size_t m = 0; m < ip->size(); ++m) x->grad[(*ip)[m]] += out->grad[m];
    });
    return out;
  }

  /// Column c of x[N,C] as a vector [N].
  Ptr<T> column(const Ptr<T>& x, Index col) {
    Index n = x->rows(), c = x->cols();
    check(col >= 0 && col < c, "column: out of range");
    auto out = result({n}, {x});
    for (Index r = 0; r < n; ++r) out->val[r] = x->val[r * c + col];
    record(out, [x, out, col, n, c] {
      if (!x->needs_grad) return;
      for (Index r = 0; r < n; ++r) x->grad[r * c + col] += out->grad[r];
    });
    return out;
  }

  Ptr<T> concat_rows(const std::vector<Ptr<T>>& parts) {
    check(!parts.empty(), "concat_rows: empty list");
    Index c = parts[0]->cols(), n = 0;
    for (auto& p : parts) {
      check(p->cols() == c, "concat_rows: column mismatch");
      n += p->rows();
    }
    bool ng = false;
    for (auto& p : parts) ng = ng || p->needs_grad;
    auto out = tensor({n, c}, ng);
    Index at = 0;
    for (auto& p : parts) {
      std::copy(p->val.begin(), p->val.end(), out->val.begin() + at);
      at += p->size();
    }
    auto pp = std::make_shared<std::vector<Ptr<T>>>(parts);
    record(out, [pp, out] {
      Index at = 0;
      for (auto& p : *pp) {
        if (p->needs_grad)
          for (Index i = 0; i < p->size(); ++i) p->grad[i] += out->grad[at + i];
        at += p->size();
      }
    });
    return out;
  }

  /// Stack F vectors of length N as the columns of an [N,F] tensor.
  Ptr<T> concat_cols(const std::vector<Ptr<T>>& parts) {
    check(!parts.empty(), "concat_cols: empty list");
    Index n = parts[0]->size();
    Index f = static_cast<Index>(parts.size());
    bool ng = false;
    for (auto& p : parts) {
      check(p->size() == n, "concat_cols: length mismatch");
      ng = ng || p->needs_grad;
    }
    auto out = tensor({n, f}, ng);
    for (Index j = 0; j < f; ++j)
      for (Index r = 0; r < n; ++r) out->val[r * f + j] = parts[j]->val[r];
    auto pp = std::make_shared<std::vector<Ptr<T>>>(parts);
    record(out, [pp, out, n, f] {
      for (Index j = 0; j < f; ++j) {
        auto& p = (*pp)[j];
        if (!p->needs_grad) continue;
        for (Index r = 0; r < n; ++r) p->grad[r] += out->grad[r * f + j];
      }
    });
    return out;
  }

  Ptr<T> broadcast_row(const Ptr<T>& x, Index n) {
    check(x->rows() == 1 && x->shape.size() == 2, "broadcast_row: need [1,C]");
    Index c = x->cols();
    auto out = result({n, c}, {x});
    for (Index r = 0; r < n; ++r) std::copy_n(x->val.data(), c, out->val.data() + r * c);
    record(out, [x, out, n, c] {
      if (!x->needs_grad) return;
      for (Index r = 0; r < n; ++r)
        for (Index j = 0; j < c; ++j) x->grad[j] += out->grad[r * c + j];
    });
    return out;
  }

  /// base with rows[m] added at idx[m] (indices may repeat).
  Ptr<T> scatter_add_rows(const Ptr<T>& base, std::vector<Index> idx, const Ptr<T>& rows) {
    Index c = base->cols();
    check(rows->cols() == c && rows->rows() == static_cast<Index>(idx.size()),
          "scatter_add_rows: shape mismatch");
    auto out = result(base->shape, {base, rows});
    out->val = base->val;
    for (size_t m = 0; m < idx.size(); ++m) {
      check(idx[m] >= 0 && idx[m] < base->rows(), "scatter_add_rows: index out of range");
      for (Index j = 0; j < c; ++j)
        out->val[idx[m] * c + j] += rows->val[static_cast<Index>(m) * c + j];
    }
    auto ip = std::make_shared<std::vector<Index>>(std::move(idx));
    record(out, [base, rows, out, ip, c] {
      accum(base, [&](Index i) { return out->grad[i]; });
      if (rows->needs_grad)
        for (size_t m = 0; m < ip->size(); ++m)
          for (Index j = 0; j < c; ++j)
            rows->grad[static_cast<Index>(m) * c + j] += out->grad[(*ip)[m] * c + j];
    });
    return out;
  }

  /// base with rows[m] replacing row idx[m] (indices must be unique).
  /// Untouched rows are bit-identical copies of base.
  Ptr<T> scatter_replace_rows(const Ptr<T>& base, std::vector<Index> idx, const Ptr<T>& rows) {
    Index c = base->cols();
    check(rows->cols() == c && rows->rows() == static_cast<Index>(idx.size()),
          "scatter_replace_rows: shape mismatch");
    auto out = result(base->shape, {base, rows});
    out->val = base->val;
    for (size_t m = 0; m < idx.size(); ++m) {
      check(idx[m] >= 0 && idx[m] < base->rows(), "scatter_replace_rows: index out of range");
      std::copy_n(rows->val.data() + static_cast<Index>(m) * c, c, out->val.data() + idx[m] * c);
    }
    auto ip = std::make_shared<std::vector<Index>>(std::move(idx));
    record(out, [base, rows, out, ip, c] {
      if (rows->needs_grad)
        for (size_t m = 0; m < ip->size(); ++m)
          for (Index j = 0; j < c; ++j)
            rows->grad[static_cast<Index>(m) * c + j] += out->grad[(*ip)[m] * c + j];
      if (base->needs_grad) {
        std::vector<char> replaced(base->rows(), 0);
        for (Index r : *ip) replaced[r] = 1;
        for (Index r = 0; r < base->rows(); ++r) {
          if (replaced[r]) continue;
          for (Index j = 0; j < c; ++j) base->grad[r * c + j] += out->grad[r * c + j];
        }
      }
    });
    return out;
  }

  /// Row-wise scaling by a differentiable weight vector w[N].
  Ptr<T> mul_rows(const Ptr<T>& x, const Ptr<T>& w) {
    Index n = x->rows(), c = x->cols();
    check(w->size() == n, "mul_rows: weight length mismatch");
    auto out = result(x->shape, {x, w});
    for (Index r = 0; r < n; ++r)
      for (Index j = 0; j < c; ++j) out->val[r * c + j] = w->val[r] * x->val[r * c + j];
    record(out, [x, w, out, n, c] {
      if (x->needs_grad)
        for (Index r = 0; r < n; ++r)
          for (Index j = 0; j < c; ++j) x->grad[r * c + j] += w->val[r] * out->grad[r * c + j];
      if (w->needs_grad)
        for (Index r = 0; r < n; ++r) {
          T s = T(0);
          for (Index j = 0; j < c; ++j) s += x->val[r * c + j] * out->grad[r * c + j];
          w->grad[r] += s;
        }
    });
    return out;
  }

  Ptr<T> scale_rows_const(const Ptr<T>& x, std::vector<T> w) {
    Index n = x->rows(), c = x->cols();
    check(static_cast<Index>(w.size()) == n, "scale_rows_const: weight length mismatch");
    auto out = result(x->shape, {x});
    for (Index r = 0; r < n; ++r)
      for (Index j = 0; j < c; ++j) out->val[r * c + j] = w[r] * x->val[r * c + j];
    auto wp = std::make_shared<std::vector<T>>(std::move(w));
    record(out, [x, out, wp, n, c] {
      if (!x->needs_grad) return;
      for (Index r = 0; r < n; ++r)
        for (Index j = 0; j < c; ++j) x->grad[r * c + j] += (*wp)[r] * out->grad[r * c + j];
    });
    return out;
  }

  /// Sum of consecutive groups of k rows: [G*k, C] -> [G, C].
  Ptr<T> sum_groups(const Ptr<T>& x, Index k) {
    Index n = x->rows(), c = x->cols();
    check(k > 0 && n % k == 0, "sum_groups: row count not divisible");
    Index g = n / k;
    auto out = result({g, c}, {x});
    for (Index r = 0; r < n; ++r)
      for (Index j = 0; j < c; ++j) out->val[(r / k) * c + j] += x->val[r * c + j];
    record(out, [x, out, n, c, k] {
      if (!x->needs_grad) return;
      for (Index r = 0; r < n; ++r)
        for (Index j = 0; j < c; ++j) x->grad[r * c + j] += out->grad[(r / k) * c + j];
    });
    return out;
  }

  /// Gather K rows per output row, flattened to [M, K*C]; idx < 0 reads zeros.
  Ptr<T> gather_rows_padded(const Ptr<T>& x, std::vector<Index> idx, Index k) {
    Index c = x->cols();
    check(static_cast<Index>(idx.size()) % k == 0, "gather_rows_padded: bad index count");
    Index m = static_cast<Index>(idx.size()) / k;
    auto out = result({m, k * c}, {x});
    for (Index r = 0; r < m; ++r)
      for (Index q = 0; q < k; ++q) {
        Index src = idx[r * k + q];
        if (src < 0) continue;
        check(src < x->rows(), "gather_rows_padded: index out of range");
        std::copy_n(x->val.data() + src * c, c, out->val.data() + r * (k * c) + q * c);
      }
    auto ip = std::make_shared<std::vector<Index>>(std::move(idx));
    record(out, [x, out, ip, m, k, c] {
      if (!x->needs_grad) return;
      for (Index r = 0; r < m; ++r)
        for (Index q = 0; q < k; ++q) {
          Index src = (*ip)[r * k + q];
          if (src < 0) continue;
          for (Index j = 0; j < c; ++j)
            x->grad[src * c + j] += out->grad[r * (k * c) + q * c + j];
        }
    });
    return out;
  }

  // ---------------------------------------------------------------- segments

  /// Softmax within segments of a flat score vector. Segments may be
  /// non-contiguous; empty segments are fine (they own no entries).
  Ptr<T> segment_softmax(const Ptr<T>& x, std::vector<Index> seg, Index nseg) {
    Index n = x->size();
    check(static_cast<Index>(seg.size()) == n, "segment_softmax: segment size mismatch");
    auto out = result(x->shape, {x});
    std::vector<T> mx(nseg, std::numeric_limits<T>::lowest());
    for (Index i = 0; i < n; ++i) mx[seg[i]] = std::max(mx[seg[i]], x->val[i]);
    std::vector<T> denom(nseg, T(0));
    for (Index i = 0; i < n; ++i) {
      out->val[i] = std::exp(x->val[i] - mx[seg[i]]);
      denom[seg[i]] += out->val[i];
    }
    for (Index i = 0; i < n; ++i) out->val[i] /= denom[seg[i]];
    auto sp = std::make_shared<std::vector<Index>>(std::move(seg));
    record(out, [x, out, sp, nseg, n] {
      if (!x->needs_grad) return;
      std::vector<T> dots(nseg, T(0));
      for (Index i = 0; i < n; ++i) dots[(*sp)[i]] += out->val[i] * out->grad[i];
      for (Index i = 0; i < n; ++i)
        x->grad[i] += out->val[i] * (out->grad[i] - dots[(*sp)[i]]);
    });
    return out;
  }

  /// Sum rows into their segment: [N,C] -> [nseg, C]. Empty segments are zero.
  Ptr<T> segment_sum_rows(const Ptr<T>& x, std::vector<Index> seg, Index nseg) {
    Index n = x->rows(), c = x->cols();
    check(static_cast<Index>(seg.size()) == n, "segment_sum_rows: segment size mismatch");
    auto out = result({nseg, c}, {x});
    for (Index r = 0; r < n; ++r)
      for (Index j = 0; j < c; ++j) out->val[seg[r] * c + j] += x->val[r * c + j];
    auto sp = std::make_shared<std::vector<Index>>(std::move(seg));
    record(out, [x, out, sp, n, c] {
      if (!x->needs_grad) return;
      for (Index r = 0; r < n; ++r)
        for (Index j = 0; j < c; ++j) x->grad[r * c + j] += out->grad[(*sp)[r] * c + j];
    });
    return out;
  }

  // ---------------------------------------------------------------- sampling

  /// Bilinear interpolation into a [H*W, C] feature map at continuous pixel
  /// positions pos[N,2] = (px, py), px along W. Positions are border-clamped;
  /// the map and the positions both receive gradients.
  Ptr<T> bilinear_sample(const Ptr<T>& map, Index h, Index w, const Ptr<T>& pos) {
    check(map->rows() == h * w, "bilinear_sample: map shape mismatch");
    check(pos->shape.size() == 2 && pos->cols() == 2, "bilinear_sample: pos must be [N,2]");
    Index n = pos->rows(), c = map->cols();
    auto out = result({n, c}, {map, pos});
    auto corners = std::make_shared<std::vector<Index>>(n * 4);
    auto fracs = std::make_shared<std::vector<T>>(n * 2);
    auto live = std::make_shared<std::vector<char>>(n * 2);  // pos gradient gate per axis
    for (Index r = 0; r < n; ++r) {
      T px = pos->val[r * 2 + 0], py = pos->val[r * 2 + 1];
      (*live)[r * 2 + 0] = px > T(0) && px < static_cast<T>(w - 1);
      (*live)[r * 2 + 1] = py > T(0) && py < static_cast<T>(h - 1);
      px = std::min(std::max(px, T(0)), static_cast<T>(w - 1));
      py = std::min(std::max(py, T(0)), static_cast<T>(h - 1));
      Index x0 = static_cast<Index>(std::floor(px));
      Index y0 = static_cast<Index>(std::floor(py));
      x0 = std::min(x0, w - 1);
      y0 = std::min(y0, h - 1);
      Index x1 = std::min(x0 + 1, w - 1);
      Index y1 = std::min(y0 + 1, h - 1);
      T tx = px - static_cast<T>(x0);
      T ty = py - static_cast<T>(y0);
      (*corners)[r * 4 + 0] = y0 * w + x0;
      (*corners)[r * 4 + 1] = y0 * w + x1;
      (*corners)[r * 4 + 2] = y1 * w + x0;
      (*corners)[r * 4 + 3] = y1 * w + x1;
      (*fracs)[r * 2 + 0] = tx;
      (*fracs)[r * 2 + 1] = ty;
      const T* m = map->val.data();
      for (Index j = 0; j < c; ++j) {
        T c00 = m[(*corners)[r * 4 + 0] * c + j];
        T c10 = m[(*corners)[r * 4 + 1] * c + j];
        T c01 = m[(*corners)[r * 4 + 2] * c + j];
        T c11 = m[(*corners)[r * 4 + 3] * c + j];
        out->val[r * c + j] =
            (T(1) - ty) * ((T(1) - tx) * c00 + tx * c10) + ty * ((T(1) - tx) * c01 + tx * c11);
      }
    }
    record(out, [map, pos, out, corners, fracs, live, n, c] {
      for (Index r = 0; r < n; ++r) {
        T tx = (*fracs)[r * 2 + 0], ty = (*fracs)[r * 2 + 1];
        Index i00 = (*corners)[r * 4 + 0], i10 = (*corners)[r * 4 + 1];
        Index i01 = (*corners)[r * 4 + 2], i11 = (*corners)[r * 4 + 3];
        T gpx = T(0), gpy = T(0);
        for (Index j = 0; j < c; ++j) {
          T g = out->grad[r * c + j];
          if (map->needs_grad) {
            map->grad[i00 * c + j] += g * (T(1) - tx) * (T(1) - ty);
            map->grad[i10 * c + j] += g * tx * (T(1) - ty);
            map->grad[i01 * c + j] += g * (T(1) - tx) * ty;
            map->grad[i11 * c + j] += g * tx * ty;
          }
          if (pos->needs_grad) {
            const T* m = map->val.data();
            T c00 = m[i00 * c + j], c10 = m[i10 * c + j];
            T c01 = m[i01 * c + j], c11 = m[i11 * c + j];
            gpx += g * ((T(1) - ty) * (c10 - c00) + ty * (c11 - c01));
            gpy += g * ((T(1) - tx) * (c01 - c00) + tx * (c11 - c10));
          }
        }
        if (pos->needs_grad) {
          if ((*live)[r * 2 + 0]) pos->grad[r * 2 + 0] += gpx;
          if ((*live)[r * 2 + 1]) pos->grad[r * 2 + 1] += gpy;
        }
      }
    });
    return out;
  }

  /// Fixed-coefficient gather: out[n] = sum_k w[n,k] * x[idx[n,k]] with
  /// idx < 0 contributing zero. Backbone of trilinear warps and upsampling.
  Ptr<T> gather_blend(const Ptr<T>& x, std::vector<Index> idx, std::vector<T> w, Index k) {
    Index c = x->cols();
    check(idx.size() == w.size(), "gather_blend: idx/w mismatch");
    check(static_cast<Index>(idx.size()) % k == 0, "gather_blend: bad corner count");
    Index n = static_cast<Index>(idx.size()) / k;
    auto out = result({n, c}, {x});
    for (Index r = 0; r < n; ++r)
      for (Index q = 0; q < k; ++q) {
        Index src = idx[r * k + q];
        if (src < 0) continue;
        check(src < x->rows(), "gather_blend: index out of range");
        T wq = w[r * k + q];
        const T* srcp = x->val.data() + src * c;
        T* dst = out->val.data() + r * c;
        for (Index j = 0; j < c; ++j) dst[j] += wq * srcp[j];
      }
    auto ip = std::make_shared<std::vector<Index>>(std::move(idx));
    auto wp = std::make_shared<std::vector<T>>(std::move(w));
    record(out, [x, out, ip, wp, k, c] {
      if (!x->needs_grad) return;
      Index n = out->rows();
      for (Index r = 0; r < n; ++r)
        for (Index q = 0; q < k; ++q) {
          Index src = (*ip)[r * k + q];
          if (src < 0) continue;
          T wq = (*wp)[r * k + q];
          for (Index j = 0; j < c; ++j) x->grad[src * c + j] += wq * out->grad[r * c + j];
        }
    });
    return out;
  }

  // ---------------------------------------------------------------- convolution

  /// 3x3(x3) convolution over a volume stored as [A*B*C, Cin] rows with
  /// flat index (a*B + b)*C + c. kz selects a 3x3x1 (2-d) or 3x3x3 kernel.
  /// Padding 1 on the 3-extent axes; `stride` applies to all axes.
  /// Weights are [(3*3*kz)*Cin, Cout] with offset-major row blocks.
  Ptr<T> conv3(const Ptr<T>& x, Index a, Index b, Index cdim, Index kz, const Ptr<T>& wgt,
               const Ptr<T>& bias, Index stride = 1) {
    check(x->rows() == a * b * cdim, "conv3: input shape mismatch");
    check(kz == 1 || kz == 3, "conv3: kz must be 1 or 3");
    Index cin = x->cols();
    Index noff = 9 * kz;
    check(wgt->rows() == noff * cin, "conv3: weight shape mismatch");
    Index cout = wgt->cols();
    Index ao = out_dim(a, stride, true), bo = out_dim(b, stride, true),
          co = out_dim(cdim, stride, kz == 3);
    auto out = result({ao * bo * co, cout}, {x, wgt, bias});
    if (bias) {
      check(bias->size() == cout, "conv3: bias size mismatch");
      as_mat(*out).rowwise() +=
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->val.data(), cout);
    }
    std::vector<T> shifted;
    std::vector<Index> srcidx;
    for (Index off = 0; off < noff; ++off) {
      build_shift(a, b, cdim, kz, stride, off, srcidx);
      gather_padded_vals(*x, srcidx, shifted);
      CMatM<T> s(shifted.data(), ao * bo * co, cin);
      CMatM<T> wk(wgt->val.data() + off * cin * cout, cin, cout);
      as_mat(*out).noalias() += s * wk;
    }
    record(out, [x, wgt, bias, out, a, b, cdim, kz, stride, cin, cout, noff] {
      std::vector<T> shifted;
      std::vector<Index> srcidx;
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> tmp;
      for (Index off = 0; off < noff; ++off) {
        build_shift(a, b, cdim, kz, stride, off, srcidx);
        if (wgt->needs_grad) {
          gather_padded_vals(*x, srcidx, shifted);
          CMatM<T> s(shifted.data(), static_cast<Index>(srcidx.size()), cin);
          MatM<T> wg(wgt->grad.data() + off * cin * cout, cin, cout);
          wg.noalias() += s.transpose() * grad_mat(*out);
        }
        if (x->needs_grad) {
          CMatM<T> wk(wgt->val.data() + off * cin * cout, cin, cout);
          tmp.noalias() = grad_mat(*out) * wk.transpose();
          for (size_t r = 0; r < srcidx.size(); ++r) {
            Index src = srcidx[r];
            if (src < 0) continue;
            for (Index j = 0; j < cin; ++j) x->grad[src * cin + j] += tmp(static_cast<Index>(r), j);
          }
        }
      }
      if (bias && bias->needs_grad) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> bg(bias->grad.data(), cout);
        bg += grad_mat(*out).colwise().sum();
      }
    });
    return out;
  }

  /// out[n] = sum_f w[n,f] * frames[f][n,:]; frame-attention combiner.
  Ptr<T> blend_frames(const std::vector<Ptr<T>>& frames, const Ptr<T>& w) {
    check(!frames.empty(), "blend_frames: no frames");
    Index n = frames[0]->rows(), c = frames[0]->cols();
    Index f = static_cast<Index>(frames.size());
    check(w->rows() == n && w->cols() == f, "blend_frames: weight shape mismatch");
    bool ng = w->needs_grad;
    for (auto& fr : frames) {
      check(fr->rows() == n && fr->cols() == c, "blend_frames: frame shape mismatch");
      ng = ng || fr->needs_grad;
    }
    auto out = tensor({n, c}, ng);
    for (Index j = 0; j < f; ++j)
      for (Index r = 0; r < n; ++r) {
        T wv = w->val[r * f + j];
        for (Index q = 0; q < c; ++q) out->val[r * c + q] += wv * frames[j]->val[r * c + q];
      }
    auto fp = std::make_shared<std::vector<Ptr<T>>>(frames);
    record(out, [fp, w, out, n, c, f] {
      for (Index j = 0; j < f; ++j) {
        auto& fr = (*fp)[j];
        if (fr->needs_grad)
          for (Index r = 0; r < n; ++r) {
            T wv = w->val[r * f + j];
            for (Index q = 0; q < c; ++q) fr->grad[r * c + q] += wv * out->grad[r * c + q];
          }
        if (w->needs_grad)
          for (Index r = 0; r < n; ++r) {
            T s = T(0);
            for (Index q = 0; q < c; ++q) s += fr->val[r * c + q] * out->grad[r * c + q];
            w->grad[r * f + j] += s;
          }
      }
    });
    return out;
  }

  // ---------------------------------------------------------------- driver

  void backward(const Ptr<T>& root) {
    check(root->size() == 1, "backward: root must be scalar");
    check(root->needs_grad, "backward: root does not require grad");
    root->grad[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void reset() { ops_.clear(); }
  size_t op_count() const { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;

  static T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

  Ptr<T> result(std::vector<Index> shape, std::initializer_list<Ptr<T>> inputs) {
    bool ng = false;
    for (auto& p : inputs)
      if (p && p->needs_grad) ng = true;
    return tensor(std::move(shape), ng);
  }

  void record(const Ptr<T>& out, std::function<void()> fn) {
    if (recording && out->needs_grad) ops_.push_back(std::move(fn));
  }

  template <typename F>
  static void accum(const Ptr<T>& t, F&& per_elem) {
    if (!t->needs_grad) return;
    for (Index i = 0; i < t->size(); ++i) t->grad[i] += per_elem(i);
  }

  static Index out_dim(Index n, Index stride, bool padded3) {
    // kernel 3 with padding 1, or kernel 1 with padding 0
    Index span = padded3 ? n - 1 : n - 1;
    return span / stride + 1;
  }

  /// Source flat index (or -1) feeding each output site for kernel offset `off`.
  static void build_shift(Index a, Index b, Index cdim, Index kz, Index stride, Index off,
                          std::vector<Index>& srcidx) {
    Index ka = off / (3 * kz) - 1;
    Index kb = (off / kz) % 3 - 1;
    Index kc = kz == 3 ? off % 3 - 1 : 0;
    Index ao = out_dim(a, stride, true), bo = out_dim(b, stride, true),
          co = out_dim(cdim, stride, kz == 3);
    srcidx.assign(static_cast<size_t>(ao * bo * co), -1);
    Index at = 0;
    for (Index ia = 0; ia < ao; ++ia) {
      Index sa = ia * stride + ka;
      for (Index ib = 0; ib < bo; ++ib) {
        Index sb = ib * stride + kb;
        for (Index ic = 0; ic < co; ++ic, ++at) {
          Index sc = ic * stride + kc;
          if (sa < 0 || sa >= a || sb < 0 || sb >= b || sc < 0 || sc >= cdim) continue;
          srcidx[at] = (sa * b + sb) * cdim + sc;
        }
      }
    }
  }

  static void gather_padded_vals(const Tensor<T>& x, const std::vector<Index>& srcidx,
                                 std::vector<T>& out) {
    Index c = x.cols();
    out.assign(srcidx.size() * static_cast<size_t>(c), T(0));
    for (size_t r = 0; r < srcidx.size(); ++r) {
      if (srcidx[r] < 0) continue;
      std::copy_n(x.val.data() + srcidx[r] * c, c, out.data() + static_cast<Index>(r) * c);
    }
  }
};

}  // namespace occloff::ad
