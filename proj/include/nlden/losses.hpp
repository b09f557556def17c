#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "nlden/conv.hpp"
#include "nlden/networks.hpp"
#include "nlden/ops.hpp"
#include "nlden/rng.hpp"

namespace nlden {

enum class WeightScale { paper, mean_one };

struct NoiseWeightConfig {
  int h_g = 5;
  double sigma_g = 1.5;
  WeightScale scale_mode = WeightScale::mean_one;

  void validate() const {
    if (h_g < 1 || h_g % 2 == 0) throw ConfigError("h_g must be odd and positive, got " + std::to_string(h_g));
    if (!(sigma_g > 0)) throw ConfigError("sigma_g must be positive");
  }
};

// Per-pixel weights p, [N,C,H,W], non-negative.
struct WeightMap {
  Tensor p;
};

// Centred h x h Gaussian normalized to unit sum.
inline BasicTensor<double> gaussian_window(int h, double sigma) {
  if (h < 1 || h % 2 == 0) throw ConfigError("gaussian_window side must be odd, got " + std::to_string(h));
  if (!(sigma > 0)) throw ConfigError("gaussian_window sigma must be positive");
  const int r = h / 2;
  BasicTensor<double> w({std::size_t(h), std::size_t(h)});
  double z = 0;
  for (int a = -r; a <= r; ++a)
    for (int b = -r; b <= r; ++b) z += w[std::size_t((a + r) * h + b + r)] = std::exp(-(a * a + b * b) / (2 * sigma * sigma));
  for (auto& v : w.data()) v /= z;
  return w;
}

// p = softmax over the pixels of one image of s(x,y), where s is the
// population standard deviation of the h_g^2 values of W_g (.) (I - R) in the
// window at (x,y); borders reflect. mean_one rescales the map by H*W.
inline WeightMap noise_weight_map(const Tensor& I, const Tensor& R, const NoiseWeightConfig& cfg) {
  cfg.validate();
  if (I.shape() != R.shape()) throw DimensionError("noise_weight_map: " + shape_str(I.shape()) + " vs " + shape_str(R.shape()));
  require_4d(I, "noise_weight_map");
  const std::size_t planes = I.dim(0) * I.dim(1), H = I.dim(2), W = I.dim(3), HW = H * W;
  const int r = cfg.h_g / 2;
  if (std::size_t(r) >= H || std::size_t(r) >= W) throw DimensionError("noise_weight_map: window larger than image");
  const auto win = gaussian_window(cfg.h_g, cfg.sigma_g);
  const double M = double(cfg.h_g) * cfg.h_g;
  WeightMap out{Tensor(I.shape())};
  std::vector<double> s(HW), resid(HW);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t i = 0; i < HW; ++i) resid[i] = double(I[pl * HW + i]) - double(R[pl * HW + i]);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double sum = 0, sq = 0;
        for (int a = -r; a <= r; ++a) {
          const std::size_t yy = detail::reflect_index(std::ptrdiff_t(y) + a, H);
          for (int b = -r; b <= r; ++b) {
            const std::size_t xx = detail::reflect_index(std::ptrdiff_t(x) + b, W);
            const double g = win[std::size_t((a + r) * cfg.h_g + b + r)] * resid[yy * W + xx];
            sum += g;
            sq += g * g;
          }
        }
        const double mu = sum / M;
        s[y * W + x] = std::sqrt(std::max(0.0, sq / M - mu * mu));
      }
    double mx = s[0];
    for (double v : s) mx = std::max(mx, v);
    double z = 0;
    for (auto& v : s) z += v = std::exp(v - mx);
    const double scale = cfg.scale_mode == WeightScale::mean_one ? double(HW) : 1.0;
    for (std::size_t i = 0; i < HW; ++i) out.p[pl * HW + i] = float(s[i] / z * scale);
  }
  return out;
}

// (1/N) sum p (I - R)^2 over all N elements. p is a constant of the graph.
template <class T>
Var<T> noise_aware_mse(const Var<T>& I, const Var<T>& R, const BasicTensor<T>& p) {
  if (I->value.shape() != R->value.shape() || p.shape() != R->value.shape())
    throw DimensionError("noise_aware_mse: shapes differ");
  for (T v : p.data())
    if (v < T(0)) throw ContractError("noise_aware_mse: negative weight");
  auto sq = square(sub(R, I));
  return scale(sum(mul(sq, constant(p))), 1.0 / double(p.size()));
}

template <class T>
Var<T> mse(const Var<T>& I, const Var<T>& R) {
  return mean(square(sub(R, I)));
}

// L_GA = -E[D(G(z))]
template <class T>
Var<T> wgan_generator_loss(const Var<T>& fake_scores) {
  return scale(mean(fake_scores), -1.0);
}

// L_D = -E[D(x)] + E[D(G(z))]
template <class T>
Var<T> wgan_discriminator_loss(const Var<T>& real_scores, const Var<T>& fake_scores) {
  return sub(mean(fake_scores), mean(real_scores));
}

// Fixed, never-trained conv stack whose activations feed the Gram matrices.
struct FeatureExtractor {
  struct Layer {
    Tensor weight;  // [Cout, Cin, k, k]
    Tensor bias;    // [Cout]
    bool relu = true;
  };
  std::vector<Layer> layers;
  std::uint64_t seed = 0;

  // Three 3x3 ReLU layers, 1 -> 8 -> 16 -> 16 channels, He-normal weights.
  static FeatureExtractor random(std::uint64_t seed, std::vector<std::size_t> widths = {8, 16, 16}) {
    FeatureExtractor f;
    f.seed = seed;
    Rng rng(seed);
    std::size_t cin = 1;
    for (auto c : widths) {
      Layer l{Tensor({c, cin, 3, 3}), Tensor({c}), true};
      const double sd = std::sqrt(2.0 / double(cin * 9));
      for (auto& v : l.weight.data()) v = float(rng.normal() * sd);
      f.layers.push_back(std::move(l));
      cin = c;
    }
    return f;
  }

  // Activation after every layer.
  template <class T>
  std::vector<Var<T>> features(const Var<T>& img) const {
    std::vector<Var<T>> out;
    Var<T> cur = img;
    for (const auto& l : layers) {
      const std::size_t k = l.weight.dim(2);
      cur = conv2d(cur, constant(l.weight.cast<T>()), constant(l.bias.cast<T>()), 1, Padding::same(k, PadMode::reflect));
      if (l.relu) cur = relu(cur);
      out.push_back(cur);
    }
    return out;
  }
};

// Gram matrices F F^T per image: [N,C,P] -> [N,C,C].
template <class T>
Var<T> gram(const Var<T>& feat) {
  const auto& s = feat->value.shape();
  auto f = reshape(feat, {s[0], s[1], s[2] * s[3]});
  return bmm(f, transpose_last2(f));
}

// sum over layers of ||Gram(phi_l(g)) - Gram(phi_l(x))||_F^2, summed over the batch.
template <class T>
Var<T> texture_matching_loss(const Var<T>& g_img, const Var<T>& x_img, const FeatureExtractor& fx) {
  if (g_img->value.shape() != x_img->value.shape()) throw DimensionError("texture_matching_loss: shapes differ");
  auto fg = fx.features(g_img);
  auto fxs = fx.features(x_img);
  Var<T> total;
  for (std::size_t l = 0; l < fg.size(); ++l) {
    auto d = sum(square(sub(gram(fg[l]), gram(fxs[l]))));
    total = total ? add(total, d) : d;
  }
  return total;
}

struct GeneratorLossConfig {
  LossKind loss = LossKind::nc_mse;
  bool adversarial = false;
  double lambda_adv = 1.0;
  NoiseWeightConfig weights;
};

template <class T>
struct GeneratorLoss {
  Var<T> total;
  Var<T> pixel;                // L_Gp (or plain MSE)
  Var<T> adversarial;          // L_GA, null without an adversary
  BasicTensor<T> weights;      // p used for L_Gp
};

// L_G = L_Gp + lambda * L_GA. The weight map is computed from the current
// residual and enters the graph as a constant.
template <class T>
GeneratorLoss<T> total_generator_loss(const Var<T>& I, const Var<T>& R, const Var<T>& fake_scores,
                                      const GeneratorLossConfig& cfg) {
  if (cfg.adversarial && !fake_scores) throw ConfigError("adversarial variant needs discriminator scores");
  if (!cfg.adversarial && fake_scores) throw ConfigError("discriminator scores given to a non-adversarial variant");
  GeneratorLoss<T> out;
  if (cfg.loss == LossKind::nc_mse) {
    auto wm = noise_weight_map(I->value.template cast<float>(), R->value.template cast<float>(), cfg.weights);
    out.weights = wm.p.template cast<T>();
  } else {
    out.weights = BasicTensor<T>(R->value.shape(), T(1));
  }
  out.pixel = noise_aware_mse(I, R, out.weights);
  out.total = out.pixel;
  if (cfg.adversarial) {
    out.adversarial = wgan_generator_loss(fake_scores);
    if (cfg.lambda_adv != 0) out.total = add(out.pixel, scale(out.adversarial, cfg.lambda_adv));
  }
  return out;
}

}  // namespace nlden
