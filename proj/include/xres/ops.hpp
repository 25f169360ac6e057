#pragma once

// Differentiable primitives. Feature maps are channel-last [H, W, C];
// token sequences are [N, C]. Shapes must match exactly except for the
// trailing-dimension bias in add_bias().

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "xres/tensor.hpp"

namespace xres {

namespace detail {

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <class T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
  if (a.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
}

// Adds `g` into the gradient of `s` if it participates in differentiation.
template <class T, class F>
void accumulate(TensorStorage<T>& s, F&& per_element) {
  if (!s.requires_grad) return;
  auto& g = grad_buffer(s);
  per_element(g);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] + bd[i];
  detail::record(
      out,
      [A = a.impl(), B = b.impl(), O = out.impl()] {
        if (O->grad.empty()) return;
        const auto& go = O->grad;
        detail::accumulate(*A, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i]; });
        detail::accumulate(*B, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i]; });
      },
      a, b);
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] - bd[i];
  detail::record(
      out,
      [A = a.impl(), B = b.impl(), O = out.impl()] {
        if (O->grad.empty()) return;
        const auto& go = O->grad;
        detail::accumulate(*A, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i]; });
        detail::accumulate(*B, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i]; });
      },
      a, b);
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * bd[i];
  detail::record(
      out,
      [A = a.impl(), B = b.impl(), O = out.impl()] {
        if (O->grad.empty()) return;
        const auto& go = O->grad;
        detail::accumulate(*A, [&](auto& g) {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * B->data[i];
        });
        detail::accumulate(*B, [&](auto& g) {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * A->data[i];
        });
      },
      a, b);
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto ad = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * s;
  detail::record(
      out,
      [A = a.impl(), O = out.impl(), s] {
        if (O->grad.empty()) return;
        detail::accumulate(*A, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i] * s; });
      },
      a);
  return out;
}

// x[..., C] + b[C]
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() == 0 || b.rank() != 1 || x.shape().back() != b.dim(0))
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const std::size_t c = b.dim(0);
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data(), bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] + bd[i % c];
  detail::record(
      out,
      [X = x.impl(), B = b.impl(), O = out.impl(), c] {
        if (O->grad.empty()) return;
        const auto& go = O->grad;
        detail::accumulate(*X, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i]; });
        detail::accumulate(*B, [&](auto& g) { for (std::size_t i = 0; i < go.size(); ++i) g[i % c] += go[i]; });
      },
      x, b);
  return out;
}

namespace detail {

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd f, Deriv df) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(xd[i]);
  detail::record(
      out,
      [X = x.impl(), O = out.impl(), df] {
        if (O->grad.empty()) return;
        detail::accumulate(*X, [&](auto& g) {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i] * df(X->data[i], O->data[i]);
        });
      },
      x);
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

// ------------------------------------------------------------------ reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::record(
      out,
      [X = x.impl(), O = out.impl()] {
        if (O->grad.empty()) return;
        const T g0 = O->grad[0];
        detail::accumulate(*X, [&](auto& g) { for (auto& v : g) v += g0; });
      },
      x);
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------- shape ops

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  detail::record(
      out,
      [X = x.impl(), O = out.impl()] {
        if (O->grad.empty()) return;
        detail::accumulate(*X, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i]; });
      },
      x);
  return out;
}

// Swaps the last two axes.
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2 " + shape_str(x.shape()));
  Shape s = x.shape();
  const std::size_t r = s[s.size() - 2], c = s[s.size() - 1];
  const std::size_t batch = x.numel() / (r * c);
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  Tensor<T> out(s);
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) o[b * r * c + j * r + i] = xd[b * r * c + i * c + j];
  detail::record(
      out,
      [X = x.impl(), O = out.impl(), r, c, batch] {
        if (O->grad.empty()) return;
        detail::accumulate(*X, [&](auto& g) {
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += O->grad[b * r * c + j * r + i];
        });
      },
      x);
  return out;
}

// Rows of x (axis 0) selected by `index`, in order. Repeated rows are allowed;
// their gradients add up at the source.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::size_t> index) {
  if (x.rank() == 0) throw DimensionError("gather_rows: scalar input");
  const std::size_t n = x.dim(0);
  const std::size_t row = n == 0 ? 0 : x.numel() / n;
  for (std::size_t i : index)
    if (i >= n) throw DimensionError("gather_rows: index " + std::to_string(i) + " out of " + std::to_string(n));
  Shape s = x.shape();
  s[0] = index.size();
  Tensor<T> out(s);
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(xd.begin() + index[r] * row, row, o.begin() + r * row);
  detail::record(
      out,
      [X = x.impl(), O = out.impl(), idx = std::move(index), row] {
        if (O->grad.empty()) return;
        detail::accumulate(*X, [&](auto& g) {
          for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < row; ++j) g[idx[r] * row + j] += O->grad[r * row + j];
        });
      },
      x);
  return out;
}

// Concatenation along the last axis; leading extents must agree.
template <class T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape l = p.shape();
    const std::size_t w = l.back();
    l.pop_back();
    if (l != lead)
      throw DimensionError("concat_last: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    widths.push_back(w);
    total += w;
  }
  const std::size_t rows = shape_numel(lead);
  Shape s = lead;
  s.push_back(total);
  Tensor<T> out(s);
  auto o = out.mutable_data();
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto pd = parts[p].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pd.begin() + r * widths[p], widths[p], o.begin() + r * total + off);
    off += widths[p];
  }
  Tape<T>* tape = Tape<T>::active();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape != nullptr && any) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorStorage<T>>> ins;
    for (const auto& p : parts) {
      if (p.requires_grad()) detail::grad_buffer(*p.impl());
      ins.push_back(p.impl());
    }
    tape->record([ins = std::move(ins), O = out.impl(), widths, rows, total] {
      if (O->grad.empty()) return;
      std::size_t off = 0;
      for (std::size_t p = 0; p < ins.size(); ++p) {
        detail::accumulate(*ins[p], [&](auto& g) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < widths[p]; ++j) g[r * widths[p] + j] += O->grad[r * total + off + j];
        });
        off += widths[p];
      }
    });
  }
  return out;
}

// x[..., start:start+len] along the last axis.
template <class T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t len) {
  const std::size_t c = x.shape().back();
  if (start + len > c)
    throw DimensionError("slice_last: [" + std::to_string(start) + ", +" + std::to_string(len) + ") of " +
                         shape_str(x.shape()));
  Shape s = x.shape();
  s.back() = len;
  const std::size_t rows = x.numel() / c;
  Tensor<T> out(s);
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xd.begin() + r * c + start, len, o.begin() + r * len);
  detail::record(
      out,
      [X = x.impl(), O = out.impl(), rows, c, start, len] {
        if (O->grad.empty()) return;
        detail::accumulate(*X, [&](auto& g) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) g[r * c + start + j] += O->grad[r * len + j];
        });
      },
      x);
  return out;
}

// ------------------------------------------------------------------- matmul

// a[..., M, K] · b[..., K, N] with identical leading (batch) extents.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank())
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t r = a.rank();
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 1);
  bool ok = b.dim(r - 2) == k;
  for (std::size_t i = 0; i + 2 < r; ++i) ok = ok && a.dim(i) == b.dim(i);
  if (!ok)
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t batch = a.numel() / (m * k);
  Shape s = a.shape();
  s.back() = n;
  Tensor<T> out(s);
  auto o = out.mutable_data();
  auto ad = a.data(), bd = b.data();
  for (std::size_t bt = 0; bt < batch; ++bt) {
    const T* A = ad.data() + bt * m * k;
    const T* B = bd.data() + bt * k * n;
    T* O = o.data() + bt * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T av = A[i * k + p];
        if (av == T(0)) continue;
        const T* brow = B + p * n;
        T* orow = O + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  }
  detail::record(
      out,
      [A = a.impl(), B = b.impl(), O = out.impl(), m, k, n, batch] {
        if (O->grad.empty()) return;
        const T* go = O->grad.data();
        // dA = dO · Bᵀ
        detail::accumulate(*A, [&](auto& g) {
          for (std::size_t bt = 0; bt < batch; ++bt) {
            const T* Bp = B->data.data() + bt * k * n;
            const T* G = go + bt * m * n;
            T* ga = g.data() + bt * m * k;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                T acc = 0;
                for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * Bp[p * n + j];
                ga[i * k + p] += acc;
              }
          }
        });
        // dB = Aᵀ · dO
        detail::accumulate(*B, [&](auto& g) {
          for (std::size_t bt = 0; bt < batch; ++bt) {
            const T* Ap = A->data.data() + bt * m * k;
            const T* G = go + bt * m * n;
            T* gb = g.data() + bt * k * n;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                const T av = Ap[i * k + p];
                if (av == T(0)) continue;
                for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * G[i * n + j];
              }
          }
        });
      },
      a, b);
  return out;
}

// ------------------------------------------------------------------ softmax

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (T v : xd)
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = a * len * inner + c;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xd[base + i * inner]);
      T z = 0;
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(xd[base + i * inner] - mx);
        o[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < len; ++i) o[base + i * inner] /= z;
    }
  detail::record(
      out,
      [X = x.impl(), O = out.impl(), outer, inner, len] {
        if (O->grad.empty()) return;
        detail::accumulate(*X, [&](auto& g) {
          for (std::size_t a = 0; a < outer; ++a)
            for (std::size_t c = 0; c < inner; ++c) {
              const std::size_t base = a * len * inner + c;
              T dot = 0;
              for (std::size_t i = 0; i < len; ++i) dot += O->grad[base + i * inner] * O->data[base + i * inner];
              for (std::size_t i = 0; i < len; ++i) {
                const std::size_t q = base + i * inner;
                g[q] += O->data[q] * (O->grad[q] - dot);
              }
            }
        });
      },
      x);
  return out;
}

// ------------------------------------------------------------- normalization

// Normalizes over the last axis, then applies gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c)
    throw ConfigError("layer_norm: " + std::to_string(c) + " channels vs parameters of " +
                      std::to_string(gamma.numel()));
  const std::size_t rows = x.numel() / c;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel()), inv_std(rows);
  auto o = out.mutable_data();
  auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xd[r * c + j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T d = xd[r * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(c);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xd[r * c + j] - mu) * inv_std[r];
      xhat[r * c + j] = h;
      o[r * c + j] = h * gd[j] + bd[j];
    }
  }
  detail::record(
      out,
      [X = x.impl(), G = gamma.impl(), B = beta.impl(), O = out.impl(), xhat = std::move(xhat),
       inv_std = std::move(inv_std), rows, c] {
        if (O->grad.empty()) return;
        const auto& go = O->grad;
        detail::accumulate(*G, [&](auto& g) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) g[j] += go[r * c + j] * xhat[r * c + j];
        });
        detail::accumulate(*B, [&](auto& g) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) g[j] += go[r * c + j];
        });
        detail::accumulate(*X, [&](auto& g) {
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const T dh = go[r * c + j] * G->data[j];
              m1 += dh;
              m2 += dh * xhat[r * c + j];
            }
            m1 /= static_cast<T>(c);
            m2 /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const T dh = go[r * c + j] * G->data[j];
              g[r * c + j] += inv_std[r] * (dh - m1 - xhat[r * c + j] * m2);
            }
          }
        });
      },
      x, gamma, beta);
  return out;
}

// Divides each row of x[N, D] by its L2 norm. Zero rows map to zero.
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  detail::require_rank("l2_normalize_rows", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<T> out(x.shape());
  std::vector<T> norms(n);
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += xd[i * d + j] * xd[i * d + j];
    norms[i] = std::sqrt(s);
    if (norms[i] > T(0))
      for (std::size_t j = 0; j < d; ++j) o[i * d + j] = xd[i * d + j] / norms[i];
  }
  detail::record(
      out,
      [X = x.impl(), O = out.impl(), norms = std::move(norms), n, d] {
        if (O->grad.empty()) return;
        detail::accumulate(*X, [&](auto& g) {
          for (std::size_t i = 0; i < n; ++i) {
            if (norms[i] == T(0)) continue;
            T dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += O->grad[i * d + j] * O->data[i * d + j];
            for (std::size_t j = 0; j < d; ++j)
              g[i * d + j] += (O->grad[i * d + j] - O->data[i * d + j] * dot) / norms[i];
          }
        });
      },
      x);
  return out;
}

// -------------------------------------------------------------- convolution

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
};

// x[H, W, Cin] * w[k, k, Cin/groups, Cout] (+ bias[Cout]) -> [H', W', Cout]
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, Conv2dSpec spec) {
  detail::require_rank("conv2d", x, 3);
  detail::require_rank("conv2d weight", w, 4);
  const std::size_t H = x.dim(0), W = x.dim(1), cin = x.dim(2);
  const std::size_t k = w.dim(0), cout = w.dim(3), groups = spec.groups;
  if (groups == 0 || cin % groups != 0 || cout % groups != 0)
    throw ConfigError("conv2d: groups " + std::to_string(groups) + " must divide channels " +
                      std::to_string(cin) + " -> " + std::to_string(cout));
  if (w.dim(1) != k || k % 2 == 0) throw ConfigError("conv2d: kernel must be square and odd");
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;
  if (w.dim(2) != cin_g)
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  if (bias != nullptr && bias->numel() != cout) throw DimensionError("conv2d: bias size");
  if (spec.stride == 0 || H + 2 * spec.pad < k || W + 2 * spec.pad < k)
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  const std::size_t oh = (H + 2 * spec.pad - k) / spec.stride + 1;
  const std::size_t ow = (W + 2 * spec.pad - k) / spec.stride + 1;
  Tensor<T> out(Shape{oh, ow, cout});
  auto o = out.mutable_data();
  auto xd = x.data(), wd = w.data();

  // Visits (output pixel, input pixel, kernel tap) triples inside the image.
  auto for_taps = [H, W, k, oh, ow, s = spec.stride, p = spec.pad](auto&& fn) {
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - static_cast<std::ptrdiff_t>(p);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - static_cast<std::ptrdiff_t>(p);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            fn(oy * ow + ox, static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix), ky * k + kx);
          }
        }
  };

  for_taps([&](std::size_t opix, std::size_t ipix, std::size_t tap) {
    const T* xrow = xd.data() + ipix * cin;
    T* orow = o.data() + opix * cout;
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t ci = 0; ci < cin_g; ++ci) {
        const T xv = xrow[g * cin_g + ci];
        const T* wrow = wd.data() + (tap * cin_g + ci) * cout + g * cout_g;
        T* og = orow + g * cout_g;
        for (std::size_t co = 0; co < cout_g; ++co) og[co] += xv * wrow[co];
      }
  });
  if (bias != nullptr) {
    auto bd = bias->data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i % cout];
  }

  auto fn = [X = x.impl(), Wt = w.impl(), Bs = bias ? bias->impl() : nullptr, O = out.impl(), for_taps, cin,
             cout, groups, cin_g, cout_g] {
    if (O->grad.empty()) return;
    const auto& go = O->grad;
    const bool gx = X->requires_grad, gw = Wt->requires_grad;
    T* dx = gx ? detail::grad_buffer(*X).data() : nullptr;
    T* dw = gw ? detail::grad_buffer(*Wt).data() : nullptr;
    if (gx || gw)
      for_taps([&](std::size_t opix, std::size_t ipix, std::size_t tap) {
        const T* grow = go.data() + opix * cout;
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t ci = 0; ci < cin_g; ++ci) {
            const std::size_t xi = ipix * cin + g * cin_g + ci;
            const std::size_t wbase = (tap * cin_g + ci) * cout + g * cout_g;
            const T* gg = grow + g * cout_g;
            if (gw) {
              const T xv = X->data[xi];
              for (std::size_t co = 0; co < cout_g; ++co) dw[wbase + co] += xv * gg[co];
            }
            if (gx) {
              T acc = 0;
              for (std::size_t co = 0; co < cout_g; ++co) acc += Wt->data[wbase + co] * gg[co];
              dx[xi] += acc;
            }
          }
      });
    if (Bs)
      detail::accumulate(*Bs, [&](auto& g) { for (std::size_t i = 0; i < go.size(); ++i) g[i % cout] += go[i]; });
  };
  if (bias != nullptr)
    detail::record(out, std::move(fn), x, w, *bias);
  else
    detail::record(out, std::move(fn), x, w);
  return out;
}

// ------------------------------------------------------------------ pooling

enum class PoolMode { avg, max };

// Pools x[H, W, C] with a k×k window. Max-pool routes gradient to the first
// (lowest linear index) maximum of each window.
template <class T>
Tensor<T> pool2d(const Tensor<T>& x, PoolMode mode, std::size_t k, std::size_t stride) {
  detail::require_rank("pool2d", x, 3);
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (k == 0 || stride == 0 || H < k || W < k)
    throw DimensionError("pool2d: window " + std::to_string(k) + " on " + shape_str(x.shape()));
  if ((H - k) % stride != 0 || (W - k) % stride != 0)
    throw DimensionError("pool2d: extent " + shape_str(x.shape()) + " not divisible by stride " +
                         std::to_string(stride));
  const std::size_t oh = (H - k) / stride + 1, ow = (W - k) / stride + 1;
  Tensor<T> out(Shape{oh, ow, C});
  auto o = out.mutable_data();
  auto xd = x.data();
  std::vector<std::size_t> argmax;
  if (mode == PoolMode::max) argmax.resize(oh * ow * C);
  const T inv = T(1) / static_cast<T>(k * k);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t oi = (oy * ow + ox) * C + c;
        if (mode == PoolMode::avg) {
          T acc = 0;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) acc += xd[((oy * stride + dy) * W + ox * stride + dx) * C + c];
          o[oi] = acc * inv;
        } else {
          std::size_t best = ((oy * stride) * W + ox * stride) * C + c;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) {
              const std::size_t q = ((oy * stride + dy) * W + ox * stride + dx) * C + c;
              if (xd[q] > xd[best]) best = q;
            }
          o[oi] = xd[best];
          argmax[oi] = best;
        }
      }
  detail::record(
      out,
      [X = x.impl(), O = out.impl(), argmax = std::move(argmax), mode, k, stride, oh, ow, C, W, inv] {
        if (O->grad.empty()) return;
        detail::accumulate(*X, [&](auto& g) {
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox)
              for (std::size_t c = 0; c < C; ++c) {
                const std::size_t oi = (oy * ow + ox) * C + c;
                if (mode == PoolMode::max) {
                  g[argmax[oi]] += O->grad[oi];
                } else {
                  for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx)
                      g[((oy * stride + dy) * W + ox * stride + dx) * C + c] += O->grad[oi] * inv;
                }
              }
        });
      },
      x);
  return out;
}

// ---------------------------------------------------------------- resampling

// Bilinear resize of x[H, W, C] with half-pixel centers (edge-clamped).
template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
  detail::require_rank("upsample_bilinear", x, 3);
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  struct Tap {
    std::size_t i0, i1;
    T w1;
  };
  auto taps = [](std::size_t in, std::size_t outn) {
    std::vector<Tap> t(outn);
    const double sc = static_cast<double>(in) / static_cast<double>(outn);
    for (std::size_t d = 0; d < outn; ++d) {
      double src = (static_cast<double>(d) + 0.5) * sc - 0.5;
      if (src < 0) src = 0;
      std::size_t i0 = static_cast<std::size_t>(src);
      if (i0 > in - 1) i0 = in - 1;
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[d] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
    }
    return t;
  };
  auto ty = taps(H, oh), tx = taps(W, ow);
  Tensor<T> out(Shape{oh, ow, C});
  auto o = out.mutable_data();
  auto xd = x.data();
  auto visit = [ty, tx, ow, W, C](auto&& fn) {
    for (std::size_t y = 0; y < ty.size(); ++y)
      for (std::size_t xx = 0; xx < tx.size(); ++xx) {
        const Tap a = ty[y], b = tx[xx];
        const std::size_t opix = (y * ow + xx) * C;
        fn(opix, (a.i0 * W + b.i0) * C, (T(1) - a.w1) * (T(1) - b.w1));
        fn(opix, (a.i0 * W + b.i1) * C, (T(1) - a.w1) * b.w1);
        fn(opix, (a.i1 * W + b.i0) * C, a.w1 * (T(1) - b.w1));
        fn(opix, (a.i1 * W + b.i1) * C, a.w1 * b.w1);
      }
  };
  visit([&](std::size_t op, std::size_t ip, T wgt) {
    for (std::size_t c = 0; c < C; ++c) o[op + c] += wgt * xd[ip + c];
  });
  detail::record(
      out,
      [X = x.impl(), O = out.impl(), visit, C] {
        if (O->grad.empty()) return;
        detail::accumulate(*X, [&](auto& g) {
          visit([&](std::size_t op, std::size_t ip, T wgt) {
            for (std::size_t c = 0; c < C; ++c) g[ip + c] += wgt * O->grad[op + c];
          });
        });
      },
      x);
  return out;
}

// ------------------------------------------------------------------- losses

// Σ_i w_i · (logsumexp(z_i) − z_i[y_i]) over rows of logits[N, K].
template <class T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& logits, std::span<const int> labels, std::span<const T> weights) {
  detail::require_rank("weighted_cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), K = logits.dim(1);
  if (labels.size() != n || weights.size() != n)
    throw DimensionError("weighted_cross_entropy: " + std::to_string(n) + " rows vs " +
                         std::to_string(labels.size()) + " labels / " + std::to_string(weights.size()) + " weights");
  auto z = logits.data();
  std::vector<T> prob(n * K);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K)
      throw DataError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(K) + " classes");
    T mx = z[i * K];
    for (std::size_t c = 1; c < K; ++c) mx = std::max(mx, z[i * K + c]);
    T s = 0;
    for (std::size_t c = 0; c < K; ++c) {
      prob[i * K + c] = std::exp(z[i * K + c] - mx);
      s += prob[i * K + c];
    }
    for (std::size_t c = 0; c < K; ++c) prob[i * K + c] /= s;
    if (weights[i] != T(0)) total += weights[i] * (mx + std::log(s) - z[i * K + labels[i]]);
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::record(
      out,
      [Z = logits.impl(), O = out.impl(), prob = std::move(prob), lab = std::vector<int>(labels.begin(), labels.end()),
       wt = std::vector<T>(weights.begin(), weights.end()), n, K] {
        if (O->grad.empty()) return;
        const T g0 = O->grad[0];
        detail::accumulate(*Z, [&](auto& g) {
          for (std::size_t i = 0; i < n; ++i) {
            if (wt[i] == T(0)) continue;
            const T s = g0 * wt[i];
            for (std::size_t c = 0; c < K; ++c)
              g[i * K + c] += s * (prob[i * K + c] - (static_cast<int>(c) == lab[i] ? T(1) : T(0)));
          }
        });
      },
      logits);
  return out;
}

}  // namespace xres
