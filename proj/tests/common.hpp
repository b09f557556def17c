#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "nlden/nlden.hpp"

namespace nlden::testing {

inline Tensor random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = float(rng.normal() * scale);
  return t;
}

inline Tensor uniform_tensor(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = float(rng.uniform(lo, hi));
  return t;
}

inline double max_abs(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

// Largest singular value of w viewed as [dim0, rest]: cyclic Jacobi
// eigen-decomposition of W W^T in double precision.
inline double spectral_norm_oracle(const Tensor& w) {
  const std::size_t m = w.dim(0), n = w.size() / m;
  std::vector<double> a(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < n; ++k) a[i * m + j] += double(w[i * n + k]) * double(w[j * n + k]);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t q = p + 1; q < m; ++q) off += a[p * m + q] * a[p * m + q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t q = p + 1; q < m; ++q) {
        const double apq = a[p * m + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * m + q] - a[p * m + p]) / (2 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < m; ++k) {
          const double akp = a[k * m + p], akq = a[k * m + q];
          a[k * m + p] = c * akp - s * akq;
          a[k * m + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < m; ++k) {
          const double apk = a[p * m + k], aqk = a[q * m + k];
          a[p * m + k] = c * apk - s * aqk;
          a[q * m + k] = s * apk + c * aqk;
        }
      }
  }
  double mx = 0;
  for (std::size_t i = 0; i < m; ++i) mx = std::max(mx, a[i * m + i]);
  return std::sqrt(mx);
}

// Explicit gather per pixel, f64 softmax, explicit weighted sum.
inline Tensor gather_oracle(const Tensor& th, const Tensor& ph, const Tensor& g, int r) {
  const std::size_t N = th.dim(0), E = th.dim(1), H = th.dim(2), W = th.dim(3), C = g.dim(1);
  Tensor y({N, C, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (long h = 0; h < long(H); ++h)
      for (long w = 0; w < long(W); ++w) {
        std::vector<std::pair<long, long>> nb;
        for (long dh = -r; dh <= r; ++dh)
          for (long dw = -r; dw <= r; ++dw)
            if (h + dh >= 0 && h + dh < long(H) && w + dw >= 0 && w + dw < long(W)) nb.emplace_back(h + dh, w + dw);
        std::vector<double> s(nb.size());
        double mx = -1e300;
        for (std::size_t k = 0; k < nb.size(); ++k) {
          double d = 0;
          for (std::size_t q = 0; q < E; ++q)
            d += double(th.at(n, q, h, w)) * double(ph.at(n, q, nb[k].first, nb[k].second));
          s[k] = d;
          mx = std::max(mx, d);
        }
        double z = 0;
        for (auto& v : s) z += v = std::exp(v - mx);
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0;
          for (std::size_t k = 0; k < nb.size(); ++k) acc += s[k] / z * g.at(n, c, nb[k].first, nb[k].second);
          y.at(n, c, h, w) = float(acc);
        }
      }
  return y;
}

// Luminance * contrast * structure per window position with c3 = c2 / 2,
// using a direct 2-D Gaussian window.
inline double ssim_oracle(const Tensor& x, const Tensor& g) {
  const long H = long(x.dim(x.rank() - 2)), W = long(x.dim(x.rank() - 1)), k = 11;
  std::vector<double> w(std::size_t(k * k));
  double z = 0;
  for (long a = 0; a < k; ++a)
    for (long b = 0; b < k; ++b) z += w[std::size_t(a * k + b)] = std::exp(-double((a - 5) * (a - 5) + (b - 5) * (b - 5)) / 4.5);
  for (auto& v : w) v /= z;
  const double c1 = 1e-4, c2 = 9e-4, c3 = c2 / 2;
  double total = 0;
  long count = 0;
  for (long i = 0; i + k <= H; ++i)
    for (long j = 0; j + k <= W; ++j) {
      double mx = 0, my = 0;
      for (long a = 0; a < k; ++a)
        for (long b = 0; b < k; ++b) {
          const double wt = w[std::size_t(a * k + b)];
          mx += wt * x[std::size_t((i + a) * W + j + b)];
          my += wt * g[std::size_t((i + a) * W + j + b)];
        }
      double vx = 0, vy = 0, cxy = 0;
      for (long a = 0; a < k; ++a)
        for (long b = 0; b < k; ++b) {
          const double wt = w[std::size_t(a * k + b)];
          const double dx = x[std::size_t((i + a) * W + j + b)] - mx, dy = g[std::size_t((i + a) * W + j + b)] - my;
          vx += wt * dx * dx;
          vy += wt * dy * dy;
          cxy += wt * dx * dy;
        }
      const double sx = std::sqrt(vx), sy = std::sqrt(vy);
      const double l = (2 * mx * my + c1) / (mx * mx + my * my + c1);
      const double c = (2 * sx * sy + c2) / (vx + vy + c2);
      const double s = (cxy + c3) / (sx * sy + c3);
      total += l * c * s;
      ++count;
    }
  return total / double(count);
}

// Per-pixel weight map straight from the definition, one image, f64.
inline std::vector<double> weight_oracle(const Tensor& I, const Tensor& R, int hg, double sg) {
  const long H = long(I.dim(2)), W = long(I.dim(3)), r = hg / 2;
  auto refl = [](long i, long n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
  std::vector<double> s(std::size_t(H * W));
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      std::vector<double> g;
      double wz = 0;
      for (long a = -r; a <= r; ++a)
        for (long b = -r; b <= r; ++b) wz += std::exp(-double(a * a + b * b) / (2 * sg * sg));
      for (long a = -r; a <= r; ++a)
        for (long b = -r; b <= r; ++b) {
          const long yy = refl(y + a, H), xx = refl(x + b, W);
          const double w = std::exp(-double(a * a + b * b) / (2 * sg * sg)) / wz;
          g.push_back(w * (double(I.at(0, 0, yy, xx)) - double(R.at(0, 0, yy, xx))));
        }
      double mu = 0;
      for (double v : g) mu += v;
      mu /= double(g.size());
      double var = 0;
      for (double v : g) var += (v - mu) * (v - mu);
      s[std::size_t(y * W + x)] = std::sqrt(var / double(g.size()));
    }
  double z = 0;
  for (double v : s) z += std::exp(v);
  for (auto& v : s) v = std::exp(v) / z;
  return s;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nlden_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace nlden::testing
