#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "nlden/conv.hpp"
#include "nlden/ops.hpp"
#include "nlden/rng.hpp"

namespace nlden {

// Half-width of the square neighbourhood, in pixels of the feature map the
// module sees. `full` covers the whole map (plain self-attention).
struct NeighborhoodSpec {
  static constexpr int full = -1;
  int radius_module = 5;
  int downsample_factor = 4;

  bool is_full() const { return radius_module == full; }
  // Radius at input resolution, e.g. 5 at the bottleneck of a x4 generator is 20.
  int radius_fullres() const { return is_full() ? full : radius_module * downsample_factor; }
  std::size_t window_side() const { return std::size_t(2 * radius_module + 1); }

  // Radius clipped to a feature map of the given extent.
  std::size_t effective(std::size_t h, std::size_t w) const {
    if (is_full()) return std::max(h, w);
    if (radius_module < 0) throw ConfigError("neighbourhood radius must be >= 0 or full");
    return std::size_t(radius_module);
  }
};

// Parameter names of one non-local block under `prefix`:
//   theta.w/b, phi.w/b  1x1 embeddings to embed_dim channels
//   g1.w/b, g2.w/b      3x3 conv -> ReLU -> 3x3 conv to g_channels
//   gamma               residual scale (only used by the residual fusion)
struct NonLocalParams {
  std::string prefix;
  std::size_t in_channels = 0;
  std::size_t embed_dim = 0;
  std::size_t g_channels = 0;

  std::string name(const char* leafname) const { return prefix + "." + leafname; }
};

namespace detail {
inline void init_conv(ParamMap<float>& p, const std::string& base, std::size_t cout, std::size_t cin, std::size_t k,
                      Rng& rng) {
  // He-normal for ReLU networks.
  const double stdv = std::sqrt(2.0 / double(cin * k * k));
  Tensor w({cout, cin, k, k});
  for (auto& v : w.data()) v = float(rng.normal() * stdv);
  p.insert_or_assign(base + ".w", std::move(w));
  p.insert_or_assign(base + ".b", Tensor({cout}));
}
}  // namespace detail

inline NonLocalParams init_nonlocal(ParamMap<float>& params, std::string prefix, std::size_t in_channels,
                                    std::size_t embed_dim, std::size_t g_channels, Rng& rng) {
  if (embed_dim == 0 || g_channels == 0) throw ConfigError("non-local widths must be positive");
  NonLocalParams nl{std::move(prefix), in_channels, embed_dim, g_channels};
  detail::init_conv(params, nl.name("theta"), embed_dim, in_channels, 1, rng);
  detail::init_conv(params, nl.name("phi"), embed_dim, in_channels, 1, rng);
  detail::init_conv(params, nl.name("g1"), g_channels, in_channels, 3, rng);
  detail::init_conv(params, nl.name("g2"), g_channels, g_channels, 3, rng);
  params.insert_or_assign(nl.name("gamma"), Tensor({1}));
  return nl;
}

// Supplies the (possibly transformed) weight variable for a parameter name.
// The discriminator uses this hook to spectrally normalize every conv.
template <class T>
using WeightSource = std::function<Var<T>(const std::string&)>;

template <class T>
struct Embeddings {
  Var<T> theta, phi, g;
};

template <class T>
Embeddings<T> nonlocal_embeddings(const Var<T>& x, const NonLocalParams& p, Binding<T>& b,
                                  const WeightSource<T>& weight = {}) {
  auto W = [&](const std::string& n) { return weight ? weight(n) : b(n); };
  const Var<T>& th_w = W(p.name("theta.w"));
  const Var<T>& ph_w = W(p.name("phi.w"));
  if (th_w->value.dim(0) != ph_w->value.dim(0))
    throw DimensionError("theta and phi project to different embedding sizes (" + std::to_string(th_w->value.dim(0)) +
                         " vs " + std::to_string(ph_w->value.dim(0)) + ")");
  Embeddings<T> e;
  e.theta = conv2d(x, th_w, b(p.name("theta.b")));
  e.phi = conv2d(x, ph_w, b(p.name("phi.b")));
  auto h = relu(conv2d(x, W(p.name("g1.w")), b(p.name("g1.b")), 1, Padding::same(3)));
  e.g = conv2d(h, W(p.name("g2.w")), b(p.name("g2.b")), 1, Padding::same(3));
  return e;
}

namespace detail {

// Clipped window bounds of location (h, w) for radius r.
struct Window {
  std::size_t h0, h1, w0, w1;  // inclusive
  std::size_t count() const { return (h1 - h0 + 1) * (w1 - w0 + 1); }
};

inline Window window_at(std::size_t h, std::size_t w, std::size_t r, std::size_t H, std::size_t W) {
  return {h >= r ? h - r : 0, std::min(H - 1, h + r), w >= r ? w - r : 0, std::min(W - 1, w + r)};
}

// Channel-last copy of one image: [C, HW] -> [HW, C].
template <class T>
std::vector<double> to_hwc(const BasicTensor<T>& t, std::size_t n) {
  const std::size_t c = t.dim(1), hw = t.dim(2) * t.dim(3);
  std::vector<double> out(hw * c);
  const T* src = t.ptr() + n * c * hw;
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < hw; ++i) out[i * c + k] = src[k * hw + i];
  return out;
}

// Softmax weights over the clipped window of every location of image n.
// Row i occupies weights[i*kmax, i*kmax + window(i).count()), row-major over the window.
inline void attention_rows(const std::vector<double>& th, const std::vector<double>& ph, std::size_t e,
                           std::size_t H, std::size_t W, std::size_t r, std::size_t kmax,
                           std::vector<double>& weights) {
  weights.assign(H * W * kmax, 0.0);
  std::vector<double> logit(kmax);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      const std::size_t i = h * W + w;
      const auto win = window_at(h, w, r, H, W);
      const double* ti = th.data() + i * e;
      double mx = -std::numeric_limits<double>::infinity();
      std::size_t k = 0;
      for (std::size_t jh = win.h0; jh <= win.h1; ++jh)
        for (std::size_t jw = win.w0; jw <= win.w1; ++jw, ++k) {
          const double* pj = ph.data() + (jh * W + jw) * e;
          double s = 0;
          for (std::size_t q = 0; q < e; ++q) s += ti[q] * pj[q];
          logit[k] = s;
          mx = std::max(mx, s);
        }
      double z = 0;
      for (std::size_t q = 0; q < k; ++q) z += logit[q] = std::exp(logit[q] - mx);
      double* out = weights.data() + i * kmax;
      for (std::size_t q = 0; q < k; ++q) out[q] = logit[q] / z;
    }
}

}  // namespace detail

// y_i = sum_{j in N_i} softmax_j(theta_i . phi_j) g_j with N_i the square
// window of radius r clipped at the borders. theta, phi: [N,E,H,W]; g: [N,Cg,H,W].
template <class T>
Var<T> local_attention(const Var<T>& theta, const Var<T>& phi, const Var<T>& g, const NeighborhoodSpec& spec) {
  const auto& ts = theta->value.shape();
  require_4d(theta->value, "local_attention theta");
  if (phi->value.shape() != ts) throw DimensionError("local_attention: theta/phi shapes differ");
  require_4d(g->value, "local_attention g");
  if (g->value.dim(0) != ts[0] || g->value.dim(2) != ts[2] || g->value.dim(3) != ts[3])
    throw DimensionError("local_attention: g spatial shape differs from embeddings");
  const std::size_t N = ts[0], E = ts[1], H = ts[2], W = ts[3], C = g->value.dim(1), HW = H * W;
  const std::size_t r = spec.effective(H, W);
  const std::size_t kmax = std::min(2 * r + 1, H) * std::min(2 * r + 1, W);

  BasicTensor<T> y({N, C, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    const auto th = detail::to_hwc(theta->value, n);
    const auto ph = detail::to_hwc(phi->value, n);
    const auto gg = detail::to_hwc(g->value, n);
    std::vector<double> a;
    detail::attention_rows(th, ph, E, H, W, r, kmax, a);
    std::vector<double> acc(C);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        const std::size_t i = h * W + w;
        const auto win = detail::window_at(h, w, r, H, W);
        std::fill(acc.begin(), acc.end(), 0.0);
        std::size_t k = 0;
        for (std::size_t jh = win.h0; jh <= win.h1; ++jh)
          for (std::size_t jw = win.w0; jw <= win.w1; ++jw, ++k) {
            const double aj = a[i * kmax + k];
            const double* gj = gg.data() + (jh * W + jw) * C;
            for (std::size_t c = 0; c < C; ++c) acc[c] += aj * gj[c];
          }
        for (std::size_t c = 0; c < C; ++c) y[(n * C + c) * HW + i] = T(acc[c]);
      }
  }

  return make_node<T>(std::move(y), "neighborhood_attention", {theta, phi, g}, [=](Node<T>& nd) {
    const auto& TH = nd.parents[0];
    const auto& PH = nd.parents[1];
    const auto& G = nd.parents[2];
    const T* gy = nd.grad->ptr();
    for (std::size_t n = 0; n < N; ++n) {
      const auto th = detail::to_hwc(TH->value, n);
      const auto ph = detail::to_hwc(PH->value, n);
      const auto gg = detail::to_hwc(G->value, n);
      std::vector<double> a;
      detail::attention_rows(th, ph, E, H, W, r, kmax, a);
      std::vector<double> dth(HW * E, 0.0), dph(HW * E, 0.0), dg(HW * C, 0.0), da(kmax), gyi(C);
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t i = h * W + w;
          const auto win = detail::window_at(h, w, r, H, W);
          for (std::size_t c = 0; c < C; ++c) gyi[c] = gy[(n * C + c) * HW + i];
          const double* ai = a.data() + i * kmax;
          double dot = 0;
          std::size_t k = 0;
          for (std::size_t jh = win.h0; jh <= win.h1; ++jh)
            for (std::size_t jw = win.w0; jw <= win.w1; ++jw, ++k) {
              const std::size_t j = jh * W + jw;
              const double* gj = gg.data() + j * C;
              double s = 0;
              for (std::size_t c = 0; c < C; ++c) {
                s += gyi[c] * gj[c];
                dg[j * C + c] += ai[k] * gyi[c];
              }
              da[k] = s;
              dot += ai[k] * s;
            }
          k = 0;
          const double* ti = th.data() + i * E;
          for (std::size_t jh = win.h0; jh <= win.h1; ++jh)
            for (std::size_t jw = win.w0; jw <= win.w1; ++jw, ++k) {
              const std::size_t j = jh * W + jw;
              const double ds = ai[k] * (da[k] - dot);
              const double* pj = ph.data() + j * E;
              for (std::size_t q = 0; q < E; ++q) {
                dth[i * E + q] += ds * pj[q];
                dph[j * E + q] += ds * ti[q];
              }
            }
        }
      auto scatter = [&](const Var<T>& v, const std::vector<double>& src, std::size_t ch) {
        if (!v->requires_grad) return;
        T* dst = v->grad_buffer().ptr() + n * ch * HW;
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t i = 0; i < HW; ++i) dst[c * HW + i] += T(src[i * ch + c]);
      };
      scatter(TH, dth, E);
      scatter(PH, dph, E);
      scatter(G, dg, C);
    }
  });
}

// The restricted non-local operation on x: [N,C,H,W] -> [N,Cg,H,W].
template <class T>
Var<T> neighborhood_attention(const Var<T>& x, const NonLocalParams& p, const NeighborhoodSpec& spec, Binding<T>& b,
                              const WeightSource<T>& weight = {}) {
  auto e = nonlocal_embeddings(x, p, b, weight);
  return local_attention(e.theta, e.phi, e.g, spec);
}

// Whole-map attention written with dense matrix products:
// y = g * softmax(theta^T phi)^T, computed independently of local_attention.
template <class T>
Var<T> full_attention(const Var<T>& theta, const Var<T>& phi, const Var<T>& g) {
  const auto& s = theta->value.shape();
  const std::size_t N = s[0], E = s[1], H = s[2], W = s[3], C = g->value.dim(1);
  auto th = transpose_last2(reshape(theta, {N, E, H * W}));      // [N,HW,E]
  auto scores = bmm(th, reshape(phi, {N, E, H * W}));             // [N,HW,HW]
  auto attn = softmax(scores, 2);                                  // rows over j
  auto y = bmm(reshape(g, {N, C, H * W}), transpose_last2(attn));  // [N,C,HW]
  return reshape(y, {N, C, H, W});
}

// z = gamma * y + x with y the whole-map attention response.
template <class T>
Var<T> self_attention_residual(const Var<T>& x, const NonLocalParams& p, Binding<T>& b,
                               const WeightSource<T>& weight = {}) {
  require_4d(x->value, "self_attention_residual");
  if (p.g_channels != x->value.dim(1))
    throw DimensionError("self_attention_residual: g has " + std::to_string(p.g_channels) +
                         " channels but the input has " + std::to_string(x->value.dim(1)));
  auto e = nonlocal_embeddings(x, p, b, weight);
  auto y = full_attention(e.theta, e.phi, e.g);
  return add(scale_by(b(p.name("gamma")), y), x);
}

// [x ; y] along channels; the merge conv that follows belongs to the network.
template <class T>
Var<T> fuse_concat(const Var<T>& x, const Var<T>& y) {
  return concat_channels(x, y);
}

// Normalized attention weights, [N,H,W,(2r+1)^2]; clipped positions are 0.
// Window index is (dh + r) * (2r + 1) + (dw + r).
inline Tensor attention_weights_debug(const Tensor& x, const NonLocalParams& p, const NeighborhoodSpec& spec,
                                      const ParamMap<float>& params) {
  Binding<float> b(params);
  auto e = nonlocal_embeddings(constant(x), p, b);
  const std::size_t N = x.dim(0), E = p.embed_dim, H = x.dim(2), W = x.dim(3);
  const std::size_t r = spec.effective(H, W);
  const std::size_t side = 2 * r + 1;
  const std::size_t kmax = std::min(side, H) * std::min(side, W);
  Tensor out({N, H, W, side * side});
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> a;
    detail::attention_rows(detail::to_hwc(e.theta->value, n), detail::to_hwc(e.phi->value, n), E, H, W, r, kmax, a);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        const auto win = detail::window_at(h, w, r, H, W);
        std::size_t k = 0;
        for (std::size_t jh = win.h0; jh <= win.h1; ++jh)
          for (std::size_t jw = win.w0; jw <= win.w1; ++jw, ++k) {
            const std::size_t slot = (jh + r - h) * side + (jw + r - w);
            out[((n * H + h) * W + w) * side * side + slot] = float(a[(h * W + w) * kmax + k]);
          }
      }
  }
  return out;
}

}  // namespace nlden
