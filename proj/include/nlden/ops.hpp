#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "nlden/autograd.hpp"

namespace nlden {

namespace detail {

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Elementwise unary op with a derivative expressed through input and output.
template <class T, class F, class D>
Var<T> unary(const Var<T>& x, const char* tag, F f, D dfdx) {
  BasicTensor<T> y(x->value.shape());
  const auto xs = x->value.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  return make_node<T>(std::move(y), tag, {x}, [dfdx](Node<T>& n) {
    auto& xin = n.parents[0];
    if (!xin->requires_grad) return;
    auto& g = xin->grad_buffer();
    const auto xs = xin->value.data();
    const auto ys = n.value.data();
    const auto gy = n.grad->data();
    auto gx = g.data();
    for (std::size_t i = 0; i < xs.size(); ++i) gx[i] += gy[i] * dfdx(xs[i], ys[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a->value, b->value, "add");
  BasicTensor<T> y = a->value;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b->value[i];
  return make_node<T>(std::move(y), "add", {a, b}, [](Node<T>& n) {
    for (auto& p : n.parents)
      if (p->requires_grad) p->accumulate(*n.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a->value, b->value, "sub");
  BasicTensor<T> y = a->value;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b->value[i];
  return make_node<T>(std::move(y), "sub", {a, b}, [](Node<T>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(*n.grad);
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= (*n.grad)[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a->value, b->value, "mul");
  BasicTensor<T> y = a->value;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b->value[i];
  return make_node<T>(std::move(y), "mul", {a, b}, [](Node<T>& n) {
    for (int k = 0; k < 2; ++k) {
      auto& p = n.parents[k];
      if (!p->requires_grad) continue;
      const auto& other = n.parents[1 - k]->value;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*n.grad)[i] * other[i];
    }
  });
}

// Multiplication by a compile-time-free constant.
template <class T>
Var<T> scale(const Var<T>& a, double s) {
  BasicTensor<T> y = a->value;
  for (auto& v : y.data()) v = T(v * s);
  return make_node<T>(std::move(y), "scale", {a}, [s](Node<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T((*n.grad)[i] * s);
  });
}

// gamma (shape [1]) times x.
template <class T>
Var<T> scale_by(const Var<T>& gamma, const Var<T>& x) {
  if (gamma->value.size() != 1) throw DimensionError("scale_by expects a scalar factor");
  const T s = gamma->value[0];
  BasicTensor<T> y = x->value;
  for (auto& v : y.data()) v *= s;
  return make_node<T>(std::move(y), "scale_by", {gamma, x}, [](Node<T>& n) {
    const auto& gm = n.parents[0];
    const auto& xin = n.parents[1];
    const auto& gy = *n.grad;
    if (gm->requires_grad) {
      double acc = 0;
      for (std::size_t i = 0; i < gy.size(); ++i) acc += double(gy[i]) * double(xin->value[i]);
      gm->grad_buffer()[0] += T(acc);
    }
    if (xin->requires_grad) {
      auto& g = xin->grad_buffer();
      const T s = gm->value[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * s;
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary<T>(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, double slope) {
  const T s = T(slope);
  return detail::unary<T>(
      x, "leaky_relu", [s](T v) { return v > T(0) ? v : s * v; }, [s](T v, T) { return v > T(0) ? T(1) : s; });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary<T>(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// Sum of all elements, shape [1]. Accumulates in double.
template <class T>
Var<T> sum(const Var<T>& x) {
  double acc = 0;
  for (T v : x->value.data()) acc += v;
  return make_node<T>(BasicTensor<T>({1}, {T(acc)}), "sum", {x}, [](Node<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->grad_buffer();
    const T gy = (*n.grad)[0];
    for (auto& v : g.data()) v += gy;
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), 1.0 / double(x->value.size()));
}

// Mean over every axis but the first: [N, ...] -> [N, 1, 1, 1].
template <class T>
Var<T> mean_per_sample(const Var<T>& x) {
  require_4d(x->value, "mean_per_sample");
  const std::size_t n = x->value.dim(0), m = x->value.size() / n;
  BasicTensor<T> y({n, 1, 1, 1});
  for (std::size_t b = 0; b < n; ++b) {
    double acc = 0;
    for (std::size_t i = 0; i < m; ++i) acc += x->value[b * m + i];
    y[b] = T(acc / double(m));
  }
  return make_node<T>(std::move(y), "mean_per_sample", {x}, [n, m](Node<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->grad_buffer();
    for (std::size_t b = 0; b < n; ++b) {
      const T gy = T((*nd.grad)[b] / double(m));
      for (std::size_t i = 0; i < m; ++i) g[b * m + i] += gy;
    }
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  BasicTensor<T> y = x->value.reshaped(std::move(s));
  return make_node<T>(std::move(y), "reshape", {x}, [](Node<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->accumulate(n.grad->reshaped(p->value.shape()));
  });
}

// [N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W]
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_4d(a->value, "concat_channels");
  require_4d(b->value, "concat_channels");
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw DimensionError("concat_channels: " + shape_str(sa) + " vs " + shape_str(sb));
  const std::size_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
  BasicTensor<T> y({n, ca + cb, sa[2], sa[3]});
  for (std::size_t b0 = 0; b0 < n; ++b0) {
    std::copy_n(a->value.ptr() + b0 * ca * hw, ca * hw, y.ptr() + b0 * (ca + cb) * hw);
    std::copy_n(b->value.ptr() + b0 * cb * hw, cb * hw, y.ptr() + (b0 * (ca + cb) + ca) * hw);
  }
  return make_node<T>(std::move(y), "concat_channels", {a, b}, [n, ca, cb, hw](Node<T>& nd) {
    const T* gy = nd.grad->ptr();
    for (int k = 0; k < 2; ++k) {
      auto& p = nd.parents[k];
      if (!p->requires_grad) continue;
      const std::size_t c = k == 0 ? ca : cb, off = k == 0 ? 0 : ca;
      T* g = p->grad_buffer().ptr();
      for (std::size_t b0 = 0; b0 < n; ++b0)
        for (std::size_t i = 0; i < c * hw; ++i) g[b0 * c * hw + i] += gy[(b0 * (ca + cb) + off) * hw + i];
    }
  });
}

// Channels [start, start+count) of a 4-D tensor.
template <class T>
Var<T> slice_channels(const Var<T>& x, std::size_t start, std::size_t count) {
  require_4d(x->value, "slice_channels");
  const auto& s = x->value.shape();
  if (count == 0 || start + count > s[1]) throw DimensionError("slice_channels out of range");
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  BasicTensor<T> y({n, count, s[2], s[3]});
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(x->value.ptr() + (b * c + start) * hw, count * hw, y.ptr() + b * count * hw);
  return make_node<T>(std::move(y), "slice_channels", {x}, [n, c, hw, start, count](Node<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    T* g = p->grad_buffer().ptr();
    const T* gy = nd.grad->ptr();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < count * hw; ++i) g[(b * c + start) * hw + i] += gy[b * count * hw + i];
  });
}

// Softmax along one axis with max subtraction; exponent sums in double.
template <class T>
BasicTensor<T> softmax_values(const BasicTensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax axis out of range");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  BasicTensor<T> y(s);
  std::vector<double> e(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, double(x[base + k * inner]));
      double z = 0;
      for (std::size_t k = 0; k < len; ++k) z += e[k] = std::exp(double(x[base + k * inner]) - mx);
      for (std::size_t k = 0; k < len; ++k) y[base + k * inner] = T(e[k] / z);
    }
  return y;
}

template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  BasicTensor<T> y = softmax_values(x->value, axis);
  const auto& s = x->value.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  return make_node<T>(std::move(y), "softmax", {x}, [outer, inner, len](Node<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->grad_buffer();
    const auto& y = n.value;
    const auto& gy = *n.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0;
        for (std::size_t k = 0; k < len; ++k) dot += double(gy[base + k * inner]) * double(y[base + k * inner]);
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          g[i] += T(double(y[i]) * (double(gy[i]) - dot));
        }
      }
  });
}

// [B,M,N] -> [B,N,M]
template <class T>
Var<T> transpose_last2(const Var<T>& x) {
  if (x->value.rank() != 3) throw DimensionError("transpose_last2 expects rank 3");
  const std::size_t b = x->value.dim(0), m = x->value.dim(1), k = x->value.dim(2);
  auto tr = [](const BasicTensor<T>& src, std::size_t b, std::size_t m, std::size_t k) {
    BasicTensor<T> out({b, k, m});
    for (std::size_t z = 0; z < b; ++z)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) out[(z * k + j) * m + i] = src[(z * m + i) * k + j];
    return out;
  };
  return make_node<T>(tr(x->value, b, m, k), "transpose", {x}, [tr, b, m, k](Node<T>& n) {
    auto& p = n.parents[0];
    if (p->requires_grad) p->accumulate(tr(*n.grad, b, k, m));
  });
}

namespace detail {
// c[M,N] (+)= a[M,K] * b[K,N], double accumulation per output row.
template <class T>
void matmul_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t q = 0; q < k; ++q) {
      const double av = a[i * k + q];
      const T* br = b + q * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * double(br[j]);
    }
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += T(row[j]);
  }
}
}  // namespace detail

// Batched matrix product [B,M,K] x [B,K,N] -> [B,M,N].
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
    throw DimensionError("bmm: " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t B = sa[0], M = sa[1], K = sa[2], N = sb[2];
  BasicTensor<T> y({B, M, N});
  for (std::size_t z = 0; z < B; ++z)
    detail::matmul_acc(a->value.ptr() + z * M * K, b->value.ptr() + z * K * N, y.ptr() + z * M * N, M, K, N);
  return make_node<T>(std::move(y), "bmm", {a, b}, [B, M, K, N](Node<T>& n) {
    const auto& A = n.parents[0];
    const auto& Bm = n.parents[1];
    const T* gy = n.grad->ptr();
    if (A->requires_grad) {
      // dA = dY * B^T
      T* ga = A->grad_buffer().ptr();
      for (std::size_t z = 0; z < B; ++z)
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t q = 0; q < K; ++q) {
            double acc = 0;
            const T* br = Bm->value.ptr() + z * K * N + q * N;
            const T* gr = gy + z * M * N + i * N;
            for (std::size_t j = 0; j < N; ++j) acc += double(gr[j]) * double(br[j]);
            ga[z * M * K + i * K + q] += T(acc);
          }
    }
    if (Bm->requires_grad) {
      // dB = A^T * dY
      T* gb = Bm->grad_buffer().ptr();
      std::vector<double> row(N);
      for (std::size_t z = 0; z < B; ++z)
        for (std::size_t q = 0; q < K; ++q) {
          std::fill(row.begin(), row.end(), 0.0);
          for (std::size_t i = 0; i < M; ++i) {
            const double av = A->value[z * M * K + i * K + q];
            const T* gr = gy + z * M * N + i * N;
            for (std::size_t j = 0; j < N; ++j) row[j] += av * double(gr[j]);
          }
          for (std::size_t j = 0; j < N; ++j) gb[z * K * N + q * N + j] += T(row[j]);
        }
    }
  });
}

}  // namespace nlden
