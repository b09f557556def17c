#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "nlden/tensor.hpp"

namespace nlden {

struct HUWindow {
  double lo = -160.0;
  double hi = 240.0;

  void validate() const {
    if (!(lo < hi)) throw ConfigError("HU window needs lo < hi");
  }
};

// Clip to [lo, hi] and map linearly onto [0, 1].
inline Tensor hu_window(const Tensor& hu, const HUWindow& w = {}) {
  w.validate();
  Tensor out = hu;
  for (auto& v : out.data()) v = float((std::clamp(double(v), w.lo, w.hi) - w.lo) / (w.hi - w.lo));
  return out;
}

// Inverse of the affine part of hu_window.
inline Tensor hu_unwindow(const Tensor& unit, const HUWindow& w = {}) {
  Tensor out = unit;
  for (auto& v : out.data()) v = float(w.lo + double(v) * (w.hi - w.lo));
  return out;
}

inline double mse_value(const Tensor& x, const Tensor& g) {
  if (x.shape() != g.shape()) throw DimensionError("metric inputs differ in shape");
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = double(x[i]) - double(g[i]);
    acc += d * d;
  }
  return acc / double(x.size());
}

inline double rmse(const Tensor& x, const Tensor& g) { return std::sqrt(mse_value(x, g)); }

// 20 log10(max / RMSE); identical inputs give +infinity.
inline double psnr(const Tensor& x, const Tensor& g, double max_val = 1.0) {
  const double e = rmse(x, g);
  if (e == 0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(max_val / e);
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double dynamic_range = 1.0;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Mean SSIM over every fully contained Gaussian window position. Leading
// dimensions are treated as separate images; the last two are (H, W).
inline double ssim(const Tensor& x, const Tensor& g, const SsimOptions& o = {}) {
  if (x.shape() != g.shape()) throw DimensionError("ssim inputs differ in shape");
  if (x.rank() < 2) throw DimensionError("ssim needs at least 2 dimensions");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1), planes = x.size() / (H * W);
  const std::size_t k = std::size_t(o.window);
  if (H < k || W < k) throw DimensionError("ssim: image smaller than the window");
  std::vector<double> w1(k);
  double z = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double d = double(i) - double(k / 2);
    z += w1[i] = std::exp(-d * d / (2 * o.sigma * o.sigma));
  }
  for (auto& v : w1) v /= z;
  const double c1 = std::pow(o.k1 * o.dynamic_range, 2), c2 = std::pow(o.k2 * o.dynamic_range, 2);
  const std::size_t Ho = H - k + 1, Wo = W - k + 1;

  // Separable valid filtering of one plane.
  auto filt = [&](const std::vector<double>& src) {
    std::vector<double> tmp(H * Wo), out(Ho * Wo);
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double a = 0;
        for (std::size_t q = 0; q < k; ++q) a += w1[q] * src[i * W + j + q];
        tmp[i * Wo + j] = a;
      }
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double a = 0;
        for (std::size_t q = 0; q < k; ++q) a += w1[q] * tmp[(i + q) * Wo + j];
        out[i * Wo + j] = a;
      }
    return out;
  };

  double total = 0;
  std::vector<double> a(H * W), b(H * W), aa(H * W), bb(H * W), ab(H * W);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t i = 0; i < H * W; ++i) {
      a[i] = x[pl * H * W + i];
      b[i] = g[pl * H * W + i];
      aa[i] = a[i] * a[i];
      bb[i] = b[i] * b[i];
      ab[i] = a[i] * b[i];
    }
    const auto ma = filt(a), mb = filt(b), maa = filt(aa), mbb = filt(bb), mab = filt(ab);
    for (std::size_t i = 0; i < Ho * Wo; ++i) {
      const double va = maa[i] - ma[i] * ma[i], vb = mbb[i] - mb[i] * mb[i], cov = mab[i] - ma[i] * mb[i];
      total += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
  }
  return total / double(planes * Ho * Wo);
}

// Lesion (foreground) and background masks over one H x W image.
struct RegionPair {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> foreground;
  std::vector<std::uint8_t> background;
};

// (mu_fg - mu_bg) / sqrt(var_fg + var_bg), population variances.
inline double cnr(const Tensor& image, const RegionPair& r) {
  const std::size_t n = r.height * r.width;
  if (image.size() != n || r.foreground.size() != n || r.background.size() != n)
    throw DimensionError("cnr: image and masks differ in size");
  auto in = [&](int k, std::size_t i) { return (k == 0 ? r.foreground[i] : r.background[i]) != 0; };
  double mu[2] = {0, 0}, var[2] = {0, 0};
  std::size_t cnt[2] = {0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    if (r.foreground[i] && r.background[i]) throw ContractError("cnr: masks overlap");
    for (int k = 0; k < 2; ++k)
      if (in(k, i)) {
        mu[k] += image[i];
        ++cnt[k];
      }
  }
  if (cnt[0] == 0 || cnt[1] == 0) throw ContractError("cnr: empty region mask");
  for (int k = 0; k < 2; ++k) mu[k] /= double(cnt[k]);
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < 2; ++k)
      if (in(k, i)) var[k] += (image[i] - mu[k]) * (image[i] - mu[k]);
  for (int k = 0; k < 2; ++k) var[k] /= double(cnt[k]);
  const double den = std::sqrt(var[0] + var[1]);
  if (den == 0) return mu[0] == mu[1] ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mu[0] - mu[1]);
  return (mu[0] - mu[1]) / den;
}

}  // namespace nlden
