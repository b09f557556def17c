#include <gtest/gtest.h>

#include <cmath>

#include "common.hpp"

using namespace nlden;
using nlden::testing::random_tensor;
using nlden::testing::uniform_tensor;
using nlden::testing::weight_oracle;

namespace {

NoiseWeightConfig weights(WeightScale mode) {
  NoiseWeightConfig c;
  c.scale_mode = mode;
  return c;
}

std::size_t argmax(const Tensor& t) {
  return std::size_t(std::max_element(t.data().begin(), t.data().end()) - t.data().begin());
}

}  // namespace

TEST(GaussianWindow, DegenerateAndSymmetric) {
  const auto w1 = gaussian_window(1, 1.5);
  EXPECT_EQ(w1.size(), 1u);
  EXPECT_DOUBLE_EQ(w1[0], 1.0);
  const auto w = gaussian_window(5, 1.5);
  double s = 0;
  for (double v : w.data()) s += v;
  EXPECT_NEAR(s, 1.0, 1e-6);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_DOUBLE_EQ(w[i * 5 + j], w[j * 5 + (4 - i)]);  // 90 degree rotation
      EXPECT_DOUBLE_EQ(w[i * 5 + j], w[i * 5 + (4 - j)]);  // reflection
    }
  EXPECT_NEAR(w[12] / w[0], std::exp(0.0) / std::exp(-8.0 / (2 * 1.5 * 1.5)), 1e-6);
  EXPECT_THROW(gaussian_window(4, 1.5), ConfigError);
}

TEST(WeightMap, ZeroResidualIsUniform) {
  const Tensor I = uniform_tensor({2, 1, 12, 10}, 1);
  const auto paper = noise_weight_map(I, I, weights(WeightScale::paper));
  for (float v : paper.p.data()) EXPECT_NEAR(v, 1.0 / 120.0, 1e-9);
  const auto one = noise_weight_map(I, I, weights(WeightScale::mean_one));
  for (float v : one.p.data()) EXPECT_FLOAT_EQ(v, 1.0f);
}

TEST(WeightMap, SumContractPerMode) {
  const Tensor I = uniform_tensor({3, 1, 16, 16}, 2), R = uniform_tensor({3, 1, 16, 16}, 3);
  const auto paper = noise_weight_map(I, R, weights(WeightScale::paper));
  const auto one = noise_weight_map(I, R, weights(WeightScale::mean_one));
  for (std::size_t n = 0; n < 3; ++n) {
    double sp = 0, so = 0;
    for (std::size_t i = 0; i < 256; ++i) {
      EXPECT_GE(paper.p[n * 256 + i], 0.0f);
      sp += paper.p[n * 256 + i];
      so += one.p[n * 256 + i];
    }
    EXPECT_NEAR(sp, 1.0, 1e-5);
    EXPECT_NEAR(so, 256.0, 1e-3);
  }
}

TEST(WeightMap, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor I = uniform_tensor({1, 1, 11, 13}, 10 + seed), R = uniform_tensor({1, 1, 11, 13}, 20 + seed);
    for (int hg : {3, 5}) {
      NoiseWeightConfig c = weights(WeightScale::paper);
      c.h_g = hg;
      const auto p = noise_weight_map(I, R, c).p;
      const auto ref = weight_oracle(I, R, hg, c.sigma_g);
      for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(p[i], ref[i], 1e-7);
    }
  }
}

TEST(WeightMap, LocalizedResidualPeaksInsideBlock) {
  const Tensor I = uniform_tensor({1, 1, 24, 24}, 4);
  Tensor R = I;
  Rng rng(5);
  for (std::size_t y = 14; y < 19; ++y)
    for (std::size_t x = 6; x < 11; ++x) R.at(0, 0, y, x) += float(rng.normal() * 0.5);
  for (double k : {1.0, 3.0, 0.2}) {
    Tensor Rk = I;
    for (std::size_t i = 0; i < I.size(); ++i) Rk[i] = I[i] + float(k * (double(R[i]) - double(I[i])));
    const auto p = noise_weight_map(I, Rk, weights(WeightScale::paper)).p;
    const std::size_t am = argmax(p);
    const std::size_t y = am / 24, x = am % 24;
    EXPECT_GE(y, 14u);
    EXPECT_LT(y, 19u);
    EXPECT_GE(x, 6u);
    EXPECT_LT(x, 11u);
    EXPECT_GT(p.at(0, 0, 16, 8), p.at(0, 0, 2, 20));
  }
}

TEST(WeightMap, ArgmaxInvariantToResidualScale) {
  const Tensor I = uniform_tensor({1, 1, 16, 16}, 6), R = uniform_tensor({1, 1, 16, 16}, 7);
  Tensor R2 = I;
  for (std::size_t i = 0; i < I.size(); ++i) R2[i] = I[i] + 2.5f * (R[i] - I[i]);
  const auto p1 = noise_weight_map(I, R, weights(WeightScale::paper)).p;
  const auto p2 = noise_weight_map(I, R2, weights(WeightScale::paper)).p;
  EXPECT_EQ(argmax(p1), argmax(p2));
  EXPECT_NE(p1, p2);
}

TEST(WeightMap, AirWeightedBelowBodyOnPhantom) {
  const auto ph = generate_phantom(31, 64, 64);
  DoseModel d;
  d.seed = 32;
  const Tensor clean = hu_window(ph.clean).reshaped({1, 1, 64, 64});
  const Tensor low = hu_window(simulate_low_dose(ph, d)).reshaped({1, 1, 64, 64});
  const auto p = noise_weight_map(clean, low, weights(WeightScale::mean_one)).p;
  const auto& body = ph.geometry.front();
  ASSERT_EQ(body.kind, Primitive::Kind::body);
  double air = 0, tissue = 0;
  std::size_t na = 0, nt = 0;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      if (body.contains(double(x), double(y))) {
        tissue += p.at(0, 0, y, x);
        ++nt;
      } else {
        air += p.at(0, 0, y, x);
        ++na;
      }
    }
  ASSERT_GT(na, 0u);
  ASSERT_GT(nt, 0u);
  EXPECT_LT(air / double(na), tissue / double(nt));
}

TEST(WeightMap, Errors) {
  NoiseWeightConfig c;
  c.h_g = 4;
  EXPECT_THROW(noise_weight_map(Tensor({1, 1, 8, 8}), Tensor({1, 1, 8, 8}), c), ConfigError);
  EXPECT_THROW(noise_weight_map(Tensor({1, 1, 8, 8}), Tensor({1, 1, 8, 9}), NoiseWeightConfig{}), DimensionError);
}

TEST(NoiseAwareMse, ReducesToMseAndMatchesOracle) {
  const Tensor I = uniform_tensor({2, 1, 8, 8}, 8), R = uniform_tensor({2, 1, 8, 8}, 9);
  const auto plain = mse(constant(I), constant(R))->value[0];
  EXPECT_NEAR(noise_aware_mse(constant(I), constant(R), Tensor(I.shape(), 1.0f))->value[0], plain, 1e-6);
  EXPECT_EQ(noise_aware_mse(constant(I), constant(I), Tensor(I.shape(), 1.0f))->value[0], 0.0f);
  const auto p = noise_weight_map(I, R, weights(WeightScale::mean_one)).p;
  double ref = 0;
  for (std::size_t i = 0; i < I.size(); ++i) {
    const double d = double(I[i]) - double(R[i]);
    ref += double(p[i]) * d * d;
  }
  ref /= double(I.size());
  EXPECT_NEAR(noise_aware_mse(constant(I), constant(R), p)->value[0], ref, 1e-6);
}

TEST(NoiseAwareMse, NegativeWeightIsContractError) {
  Tensor p({1, 1, 2, 2}, 1.0f);
  p[3] = -0.1f;
  EXPECT_THROW(noise_aware_mse(constant(Tensor({1, 1, 2, 2})), constant(Tensor({1, 1, 2, 2})), p), ContractError);
}

TEST(NoiseAwareMse, GradientFlowsThroughReconstructionOnly) {
  const Tensor I = uniform_tensor({1, 1, 6, 6}, 10);
  ParamMap<float> params{{"R", uniform_tensor({1, 1, 6, 6}, 11)}};
  Binding<float> b(params);
  const auto p = noise_weight_map(I, params["R"], weights(WeightScale::mean_one)).p;
  const auto g = b.backward(noise_aware_mse(constant(I), b("R"), p)).at("R");
  for (std::size_t i = 0; i < I.size(); ++i)
    EXPECT_NEAR(g[i], 2.0 * p[i] * (double(params["R"][i]) - I[i]) / 36.0, 1e-7);
}

TEST(Wgan, GeneratorLoss) {
  EXPECT_FLOAT_EQ(wgan_generator_loss(constant(Tensor({2, 1, 3, 3}, 1.0f)))->value[0], -1.0f);
  EXPECT_FLOAT_EQ(wgan_generator_loss(constant(Tensor({2, 1, 3, 3})))->value[0], 0.0f);
  const Tensor s = random_tensor({3, 1, 5, 5}, 12);
  double m = 0;
  for (float v : s.data()) m += v;
  m /= double(s.size());
  EXPECT_NEAR(wgan_generator_loss(constant(s))->value[0], -m, 1e-7);
}

TEST(Wgan, DiscriminatorLoss) {
  const Tensor a = random_tensor({2, 1, 4, 4}, 13), b = random_tensor({2, 1, 4, 4}, 14);
  EXPECT_FLOAT_EQ(wgan_discriminator_loss(constant(a), constant(a))->value[0], 0.0f);
  EXPECT_FLOAT_EQ(wgan_discriminator_loss(constant(Tensor({1, 1, 2, 2}, 1.0f)), constant(Tensor({1, 1, 2, 2})))->value[0],
                  -1.0f);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= double(a.size());
  mb /= double(b.size());
  const float ab = wgan_discriminator_loss(constant(a), constant(b))->value[0];
  EXPECT_NEAR(ab, mb - ma, 1e-7);
  EXPECT_FLOAT_EQ(ab, -wgan_discriminator_loss(constant(b), constant(a))->value[0]);
}

TEST(TextureMatching, IdentitySymmetryAndHandOracle) {
  const auto fx = FeatureExtractor::random(1234);
  const Tensor a = uniform_tensor({1, 1, 16, 16}, 15), b = uniform_tensor({1, 1, 16, 16}, 16);
  EXPECT_EQ(texture_matching_loss(constant(a), constant(a), fx)->value[0], 0.0f);
  const float ab = texture_matching_loss(constant(a), constant(b), fx)->value[0];
  const float ba = texture_matching_loss(constant(b), constant(a), fx)->value[0];
  EXPECT_GT(ab, 0.0f);
  EXPECT_FLOAT_EQ(ab, ba);

  FeatureExtractor id;
  id.layers.push_back({Tensor({1, 1, 1, 1}, 1.0f), Tensor({1}), false});
  const Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}), y({1, 1, 2, 2}, std::vector<float>{0.5f, -1, 2, 0});
  const double sx = 1 + 4 + 9 + 16, sy = 0.25 + 1 + 4;
  EXPECT_NEAR(texture_matching_loss(constant(x), constant(y), id)->value[0], (sx - sy) * (sx - sy), 1e-3);
}

TEST(TextureMatching, ExtractorIsDeterministic) {
  const auto a = FeatureExtractor::random(7), b = FeatureExtractor::random(7), c = FeatureExtractor::random(8);
  ASSERT_EQ(a.layers.size(), 3u);
  EXPECT_EQ(a.layers[1].weight, b.layers[1].weight);
  EXPECT_NE(a.layers[1].weight, c.layers[1].weight);
}

TEST(GeneratorLossTotal, Composition) {
  const Tensor I = uniform_tensor({2, 1, 8, 8}, 17), R = uniform_tensor({2, 1, 8, 8}, 18);
  const Tensor scores = random_tensor({2, 1, 2, 2}, 19);
  GeneratorLossConfig c;
  const auto m3 = total_generator_loss(constant(I), constant(R), Var<float>{}, c);
  const auto p = noise_weight_map(I, R, c.weights).p;
  EXPECT_EQ(m3.total->value[0], noise_aware_mse(constant(I), constant(R), p)->value[0]);

  c.adversarial = true;
  const auto m6 = total_generator_loss(constant(I), constant(R), constant(scores), c);
  EXPECT_NEAR(m6.total->value[0], m6.pixel->value[0] + m6.adversarial->value[0], 1e-6);
  EXPECT_NEAR(m6.adversarial->value[0], wgan_generator_loss(constant(scores))->value[0], 1e-7);
  c.lambda_adv = 0.5;
  const auto half = total_generator_loss(constant(I), constant(R), constant(scores), c);
  EXPECT_NEAR(half.total->value[0], half.pixel->value[0] + 0.5 * half.adversarial->value[0], 1e-6);
  c.lambda_adv = 0;
  EXPECT_EQ(total_generator_loss(constant(I), constant(R), constant(scores), c).total->value[0], m3.total->value[0]);
  EXPECT_THROW(total_generator_loss(constant(I), constant(R), Var<float>{}, c), ConfigError);
  c.adversarial = false;
  EXPECT_THROW(total_generator_loss(constant(I), constant(R), constant(scores), c), ConfigError);
}
