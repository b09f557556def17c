#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "nlden/autograd.hpp"

namespace nlden {

enum class PadMode { zero, reflect };

struct Padding {
  PadMode mode = PadMode::zero;
  std::size_t size = 0;

  static Padding zeros(std::size_t p) { return {PadMode::zero, p}; }
  static Padding reflect(std::size_t p) { return {PadMode::reflect, p}; }
  // Pads so that a stride-1 convolution with an odd kernel keeps H and W.
  static Padding same(std::size_t kernel, PadMode m = PadMode::zero) { return {m, kernel / 2}; }
};

// direct: plain cross-correlation loops, the reference path.
// tiled: im2col followed by a register-blocked product, used for training.
enum class ConvAlgo { direct, tiled };

inline ConvAlgo default_conv_algo = ConvAlgo::tiled;

namespace debug {
// Fault injection for the gradient-check harness: scales conv2d's input gradient.
inline float conv2d_backward_input_scale = 1.0f;
}  // namespace debug

namespace detail {

struct ConvGeom {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, hp, wp, ho, wo;
  PadMode mode;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return ho * wo; }
};

inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (i < 0) i = -i;
  if (i >= std::ptrdiff_t(n)) i = 2 * (std::ptrdiff_t(n) - 1) - i;
  return std::size_t(i);
}

// Padded copy of image b: [cin, hp, wp].
template <class T>
std::vector<T> pad_image(const T* x, const ConvGeom& g) {
  std::vector<T> out(g.cin * g.hp * g.wp, T(0));
  const auto p = std::ptrdiff_t(g.pad);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.hp; ++i) {
      const std::ptrdiff_t si = std::ptrdiff_t(i) - p;
      for (std::size_t j = 0; j < g.wp; ++j) {
        const std::ptrdiff_t sj = std::ptrdiff_t(j) - p;
        T v;
        if (g.mode == PadMode::zero) {
          if (si < 0 || sj < 0 || si >= std::ptrdiff_t(g.h) || sj >= std::ptrdiff_t(g.w)) continue;
          v = x[(c * g.h + si) * g.w + sj];
        } else {
          v = x[(c * g.h + reflect_index(si, g.h)) * g.w + reflect_index(sj, g.w)];
        }
        out[(c * g.hp + i) * g.wp + j] = v;
      }
    }
  return out;
}

// Adjoint of pad_image: folds a padded gradient back onto the source image.
template <class T>
void unpad_accumulate(const std::vector<T>& gp, T* gx, const ConvGeom& g) {
  const auto p = std::ptrdiff_t(g.pad);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.hp; ++i) {
      const std::ptrdiff_t si = std::ptrdiff_t(i) - p;
      for (std::size_t j = 0; j < g.wp; ++j) {
        const std::ptrdiff_t sj = std::ptrdiff_t(j) - p;
        std::size_t ti, tj;
        if (g.mode == PadMode::zero) {
          if (si < 0 || sj < 0 || si >= std::ptrdiff_t(g.h) || sj >= std::ptrdiff_t(g.w)) continue;
          ti = std::size_t(si);
          tj = std::size_t(sj);
        } else {
          ti = reflect_index(si, g.h);
          tj = reflect_index(sj, g.w);
        }
        gx[(c * g.h + ti) * g.w + tj] += gp[(c * g.hp + i) * g.wp + j];
      }
    }
}

template <class T>
std::vector<T> im2col(const std::vector<T>& xp, const ConvGeom& g) {
  std::vector<T> col(g.k() * g.p());
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t a = 0; a < g.kh; ++a)
      for (std::size_t b = 0; b < g.kw; ++b) {
        T* dst = col.data() + ((c * g.kh + a) * g.kw + b) * g.p();
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const T* src = xp.data() + (c * g.hp + oh * g.stride + a) * g.wp + b;
          if (g.stride == 1) {
            std::copy_n(src, g.wo, dst + oh * g.wo);
          } else {
            for (std::size_t ow = 0; ow < g.wo; ++ow) dst[oh * g.wo + ow] = src[ow * g.stride];
          }
        }
      }
  return col;
}

template <class T>
void col2im_accumulate(const std::vector<T>& col, std::vector<T>& xp, const ConvGeom& g) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t a = 0; a < g.kh; ++a)
      for (std::size_t b = 0; b < g.kw; ++b) {
        const T* src = col.data() + ((c * g.kh + a) * g.kw + b) * g.p();
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          T* dst = xp.data() + (c * g.hp + oh * g.stride + a) * g.wp + b;
          for (std::size_t ow = 0; ow < g.wo; ++ow) dst[ow * g.stride] += src[oh * g.wo + ow];
        }
      }
}

// out[co, p] = bias[co] + sum_k w[co, k] * col[k, p], blocked over 4 output
// channels and 64 output positions.
template <class T>
void gemm_forward(const T* w, const T* bias, const std::vector<T>& col, T* out, std::size_t co_n, std::size_t kn,
                  std::size_t pn) {
  constexpr std::size_t PB = 64, CB = 4;
  T acc[CB][PB];
  for (std::size_t p0 = 0; p0 < pn; p0 += PB) {
    const std::size_t len = std::min(PB, pn - p0);
    for (std::size_t c0 = 0; c0 < co_n; c0 += CB) {
      const std::size_t cl = std::min(CB, co_n - c0);
      for (std::size_t q = 0; q < CB; ++q)
        for (std::size_t i = 0; i < PB; ++i) acc[q][i] = q < cl ? bias[c0 + q] : T(0);
      for (std::size_t k = 0; k < kn; ++k) {
        const T* cr = col.data() + k * pn + p0;
        T wq[CB];
        for (std::size_t q = 0; q < CB; ++q) wq[q] = q < cl ? w[(c0 + q) * kn + k] : T(0);
        if (len == PB) {
          for (std::size_t q = 0; q < CB; ++q)
            for (std::size_t i = 0; i < PB; ++i) acc[q][i] += wq[q] * cr[i];
        } else {
          for (std::size_t q = 0; q < CB; ++q)
            for (std::size_t i = 0; i < len; ++i) acc[q][i] += wq[q] * cr[i];
        }
      }
      for (std::size_t q = 0; q < cl; ++q) std::copy_n(acc[q], len, out + (c0 + q) * pn + p0);
    }
  }
}

// Dot product with 16 independent lanes so the compiler can vectorize
// without reassociating; lanes are combined in a fixed order.
template <class T>
double lane_dot(const T* a, const T* b, std::size_t n) {
  constexpr std::size_t L = 16;
  T part[L] = {};
  std::size_t i = 0;
  for (; i + L <= n; i += L)
    for (std::size_t l = 0; l < L; ++l) part[l] += a[i + l] * b[i + l];
  double s = 0;
  for (std::size_t l = 0; l < L; ++l) s += part[l];
  for (; i < n; ++i) s += double(a[i]) * double(b[i]);
  return s;
}

template <class T>
void direct_forward(const std::vector<T>& xp, const T* w, const T* bias, T* out, const ConvGeom& g) {
  for (std::size_t co = 0; co < g.cout; ++co)
    for (std::size_t oh = 0; oh < g.ho; ++oh)
      for (std::size_t ow = 0; ow < g.wo; ++ow) {
        double acc = bias[co];
        for (std::size_t ci = 0; ci < g.cin; ++ci)
          for (std::size_t a = 0; a < g.kh; ++a)
            for (std::size_t b = 0; b < g.kw; ++b)
              acc += double(w[((co * g.cin + ci) * g.kh + a) * g.kw + b]) *
                     double(xp[(ci * g.hp + oh * g.stride + a) * g.wp + ow * g.stride + b]);
        out[(co * g.ho + oh) * g.wo + ow] = T(acc);
      }
}

}  // namespace detail

// Cross-correlation. input [N,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout].
template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, std::size_t stride = 1,
              Padding pad = {}, ConvAlgo algo = default_conv_algo) {
  const auto& x = input->value;
  const auto& w = weight->value;
  require_4d(x, "conv2d input");
  require_4d(w, "conv2d weight");
  if (x.dim(1) != w.dim(1))
    throw DimensionError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                         std::to_string(w.dim(1)));
  if (bias->value.rank() != 1 || bias->value.dim(0) != w.dim(0)) throw DimensionError("conv2d: bias shape");
  if (w.dim(2) % 2 == 0 || w.dim(3) % 2 == 0) throw DimensionError("conv2d: kernel sides must be odd");
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  detail::ConvGeom g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad.size;
  g.mode = pad.mode;
  if (pad.mode == PadMode::reflect && (pad.size >= g.h || pad.size >= g.w))
    throw DimensionError("conv2d: reflect padding must be smaller than the image");
  g.hp = g.h + 2 * g.pad;
  g.wp = g.w + 2 * g.pad;
  if (g.hp < g.kh || g.wp < g.kw) throw DimensionError("conv2d: kernel larger than padded input");
  g.ho = (g.hp - g.kh) / stride + 1;
  g.wo = (g.wp - g.kw) / stride + 1;

  BasicTensor<T> y({g.n, g.cout, g.ho, g.wo});
  for (std::size_t b = 0; b < g.n; ++b) {
    auto xp = detail::pad_image(x.ptr() + b * g.cin * g.h * g.w, g);
    T* out = y.ptr() + b * g.cout * g.p();
    if (algo == ConvAlgo::direct) {
      detail::direct_forward(xp, w.ptr(), bias->value.ptr(), out, g);
    } else {
      auto col = detail::im2col(xp, g);
      detail::gemm_forward(w.ptr(), bias->value.ptr(), col, out, g.cout, g.k(), g.p());
    }
  }

  return make_node<T>(std::move(y), "conv2d", {input, weight, bias}, [g](Node<T>& n) {
    const auto& in = n.parents[0];
    const auto& wt = n.parents[1];
    const auto& bs = n.parents[2];
    const T* gy = n.grad->ptr();
    const std::size_t kn = g.k(), pn = g.p();
    if (bs->requires_grad) {
      T* gb = bs->grad_buffer().ptr();
      for (std::size_t co = 0; co < g.cout; ++co) {
        double acc = 0;
        for (std::size_t b = 0; b < g.n; ++b)
          for (std::size_t p = 0; p < pn; ++p) acc += gy[(b * g.cout + co) * pn + p];
        gb[co] += T(acc);
      }
    }
    if (!wt->requires_grad && !in->requires_grad) return;
    std::vector<double> gw(wt->requires_grad ? g.cout * kn : 0, 0.0);
    T* gx = in->requires_grad ? in->grad_buffer().ptr() : nullptr;
    const T* w = wt->value.ptr();
    const T scale_in = T(debug::conv2d_backward_input_scale);
    for (std::size_t b = 0; b < g.n; ++b) {
      const T* gyb = gy + b * g.cout * pn;
      auto xp = detail::pad_image(in->value.ptr() + b * g.cin * g.h * g.w, g);
      auto col = detail::im2col(xp, g);
      if (wt->requires_grad)
        for (std::size_t co = 0; co < g.cout; ++co)
          for (std::size_t k = 0; k < kn; ++k) gw[co * kn + k] += detail::lane_dot(gyb + co * pn, col.data() + k * pn, pn);
      if (gx) {
        std::vector<T> gcol(kn * pn, T(0));
        for (std::size_t k = 0; k < kn; ++k) {
          T* dst = gcol.data() + k * pn;
          for (std::size_t co = 0; co < g.cout; ++co) {
            const T wv = w[co * kn + k];
            const T* src = gyb + co * pn;
            for (std::size_t p = 0; p < pn; ++p) dst[p] += wv * src[p];
          }
        }
        std::vector<T> gxp(g.cin * g.hp * g.wp, T(0));
        detail::col2im_accumulate(gcol, gxp, g);
        if (scale_in != T(1))
          for (auto& v : gxp) v *= scale_in;
        detail::unpad_accumulate(gxp, gx + b * g.cin * g.h * g.w, g);
      }
    }
    if (wt->requires_grad) {
      T* gwt = wt->grad_buffer().ptr();
      for (std::size_t i = 0; i < gw.size(); ++i) gwt[i] += T(gw[i]);
    }
  });
}

// 2x2 max pooling, stride 2. Ties go to the first element in row-major order.
template <class T>
Var<T> maxpool2(const Var<T>& input) {
  const auto& x = input->value;
  require_4d(x, "maxpool2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw DimensionError("maxpool2 needs even H and W, got " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  BasicTensor<T> y({n, c, ho, wo});
  std::vector<std::uint32_t> arg(y.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.ptr() + plane * h * w;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = (2 * i) * w + 2 * j;
        const std::size_t cand[3] = {(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1};
        for (auto q : cand)
          if (src[q] > src[best]) best = q;
        const std::size_t o = plane * ho * wo + i * wo + j;
        y[o] = src[best];
        arg[o] = std::uint32_t(plane * h * w + best);
      }
  }
  return make_node<T>(std::move(y), "maxpool2", {input}, [arg = std::move(arg)](Node<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    T* g = p->grad_buffer().ptr();
    const T* gy = nd.grad->ptr();
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += gy[o];
  });
}

// Nearest-neighbour 2x upsampling.
template <class T>
Var<T> upsample_nearest2(const Var<T>& input) {
  const auto& x = input->value;
  require_4d(x, "upsample_nearest2");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  BasicTensor<T> y({x.dim(0), x.dim(1), 2 * h, 2 * w});
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) y[(pl * 2 * h + i) * 2 * w + j] = x[(pl * h + i / 2) * w + j / 2];
  return make_node<T>(std::move(y), "upsample_nearest2", {input}, [planes, h, w](Node<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    T* g = p->grad_buffer().ptr();
    const T* gy = nd.grad->ptr();
    for (std::size_t pl = 0; pl < planes; ++pl)
      for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < 2 * w; ++j) g[(pl * h + i / 2) * w + j / 2] += gy[(pl * 2 * h + i) * 2 * w + j];
  });
}

}  // namespace nlden
