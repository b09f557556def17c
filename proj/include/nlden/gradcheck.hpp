#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "nlden/losses.hpp"
#include "nlden/networks.hpp"
#include "nlden/nonlocal.hpp"

namespace nlden {

// Inputs whose names start with "const." are held fixed and not checked.
struct GradCase {
  std::string name;
  double tolerance;
  std::function<ParamMap<float>(Rng&)> inputs;
  std::function<Var<float>(Binding<float>&)> f32;
  std::function<Var<double>(Binding<double>&)> f64;
};

template <class F>
GradCase make_case(std::string name, double tol, std::function<ParamMap<float>(Rng&)> inputs, F f) {
  return {std::move(name), tol, std::move(inputs), [f](Binding<float>& b) { return f(b); },
          [f](Binding<double>& b) { return f(b); }};
}

struct GradResult {
  std::string name;
  double tolerance = 0;
  double max_rel_error = 0;
  std::size_t seeds = 0;
  bool passed = true;
};

struct GradcheckOptions {
  std::size_t seeds = 50;
  std::size_t coords_per_tensor = 12;
  double step = 1e-6;
  std::uint64_t base_seed = 7;
};

namespace detail {
inline Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = float(rng.normal() * scale);
  return t;
}

// sum(proj * y) with a fixed random projection.
template <class T>
Var<T> project(Binding<T>& b, const Var<T>& y) {
  return sum(mul(y, b("const.proj")));
}

inline void add_projection(ParamMap<float>& p, const Shape& out, Rng& rng) { p["const.proj"] = random_tensor(out, rng); }
}  // namespace detail

// Central differences in f64 against f32 reverse mode. The error for one
// seed is ||a - n|| / max(||a||, ||n||) over a random subset of coordinates.
inline double gradcheck_error(const GradCase& c, std::uint64_t seed, const GradcheckOptions& o) {
  Rng rng(seed);
  const ParamMap<float> in = c.inputs(rng);
  Binding<float> bf(in);
  const auto grads = bf.backward(c.f32(bf));
  ParamMap<double> pd = cast_params<double>(in);
  auto eval = [&] {
    Binding<double> bd(pd);
    return double(c.f64(bd)->value[0]);
  };
  double num2 = 0, diff2 = 0, an2 = 0;
  for (const auto& [name, t] : in) {
    if (name.rfind("const.", 0) == 0) continue;
    std::vector<std::size_t> idx;
    if (t.size() <= o.coords_per_tensor) {
      for (std::size_t i = 0; i < t.size(); ++i) idx.push_back(i);
    } else {
      for (std::size_t k = 0; k < o.coords_per_tensor; ++k) idx.push_back(rng.below(t.size()));
    }
    auto& x = pd.at(name);
    const auto& g = grads.at(name);
    for (auto i : idx) {
      const double x0 = x[i];
      x[i] = x0 + o.step;
      const double fp = eval();
      x[i] = x0 - o.step;
      const double fm = eval();
      x[i] = x0;
      const double n = (fp - fm) / (2 * o.step), a = g[i];
      num2 += n * n;
      an2 += a * a;
      diff2 += (a - n) * (a - n);
    }
  }
  const double den = std::sqrt(std::max(num2, an2));
  return den < 1e-12 ? std::sqrt(diff2) : std::sqrt(diff2) / den;
}

inline GradResult run_gradcase(const GradCase& c, const GradcheckOptions& o) {
  GradResult r{c.name, c.tolerance, 0, o.seeds, true};
  for (std::size_t s = 0; s < o.seeds; ++s) {
    const double e = gradcheck_error(c, derive_seed(o.base_seed, s), o);
    r.max_rel_error = std::max(r.max_rel_error, std::isnan(e) ? INFINITY : e);
  }
  r.passed = r.max_rel_error <= c.tolerance;
  return r;
}

// Every differentiable operation of the library, on small random inputs.
inline std::vector<GradCase> gradcheck_cases() {
  using detail::add_projection;
  using detail::project;
  using detail::random_tensor;
  std::vector<GradCase> cases;

  cases.push_back(make_case(
      "conv2d", 1e-4,
      [](Rng& rng) {
        ParamMap<float> p;
        p["x"] = random_tensor({2, 3, 7, 7}, rng);
        p["w"] = random_tensor({4, 3, 3, 3}, rng, 0.5);
        p["b"] = random_tensor({4}, rng);
        p["const.mode"] = Tensor({1}, float(rng.below(2)));
        const bool strided = p["const.mode"][0] != 0;
        add_projection(p, {2, 4, strided ? 4u : 7u, strided ? 4u : 7u}, rng);
        return p;
      },
      [](auto& b) {
        const bool strided = b.value("const.mode")[0] != 0;
        const Padding pad = strided ? Padding::reflect(1) : Padding::zeros(1);
        return project(b, conv2d(b("x"), b("w"), b("b"), strided ? 2 : 1, pad));
      }));

  cases.push_back(make_case(
      "maxpool2", 1e-4,
      [](Rng& rng) {
        ParamMap<float> p;
        p["x"] = random_tensor({2, 3, 8, 6}, rng);
        add_projection(p, {2, 3, 4, 3}, rng);
        return p;
      },
      [](auto& b) { return project(b, maxpool2(b("x"))); }));

  cases.push_back(make_case(
      "upsample_nearest2", 1e-4,
      [](Rng& rng) {
        ParamMap<float> p;
        p["x"] = random_tensor({2, 2, 3, 4}, rng);
        add_projection(p, {2, 2, 6, 8}, rng);
        return p;
      },
      [](auto& b) { return project(b, upsample_nearest2(b("x"))); }));

  cases.push_back(make_case(
      "softmax", 1e-4,
      [](Rng& rng) {
        ParamMap<float> p;
        p["x"] = random_tensor({3, 7}, rng, 2.0);
        p["const.axis"] = Tensor({1}, float(rng.below(2)));
        add_projection(p, {3, 7}, rng);
        return p;
      },
      [](auto& b) { return project(b, softmax(b("x"), std::size_t(b.value("const.axis")[0]))); }));

  cases.push_back(make_case(
      "neighborhood_attention", 1e-4,
      [](Rng& rng) {
        ParamMap<float> p;
        init_nonlocal(p, "nl", 4, 3, 4, rng);
        p["x"] = random_tensor({2, 4, 6, 5}, rng);
        p["const.radius"] = Tensor({1}, float(rng.below(3)));
        add_projection(p, {2, 4, 6, 5}, rng);
        return p;
      },
      [](auto& b) {
        const NeighborhoodSpec spec{int(b.value("const.radius")[0]), 1};
        return project(b, neighborhood_attention(b("x"), NonLocalParams{"nl", 4, 3, 4}, spec, b));
      }));

  cases.push_back(make_case(
      "self_attention_residual", 1e-4,
      [](Rng& rng) {
        ParamMap<float> p;
        init_nonlocal(p, "sa", 4, 2, 4, rng);
        p["sa.gamma"] = random_tensor({1}, rng);
        p["x"] = random_tensor({2, 4, 5, 5}, rng);
        add_projection(p, {2, 4, 5, 5}, rng);
        return p;
      },
      [](auto& b) { return project(b, self_attention_residual(b("x"), NonLocalParams{"sa", 4, 2, 4}, b)); }));

  cases.push_back(make_case(
      "spectral_normalize", 1e-4,
      [](Rng& rng) {
        ParamMap<float> p;
        p["w"] = random_tensor({5, 3, 3, 3}, rng);
        p["const.u"] = random_unit_vector(5, rng);
        add_projection(p, {5, 3, 3, 3}, rng);
        return p;
      },
      [](auto& b) {
        Tensor u = b.value("const.u").template cast<float>();
        return project(b, spectral_normalize(b("w"), u, 0));
      }));

  cases.push_back(make_case(
      "discriminator_sn", 1e-4,
      [](Rng& rng) {
        DiscriminatorSpec s;
        s.widths = {4, 4, 8, 8, 8, 1};
        auto d = init_discriminator(s, rng.next());
        ParamMap<float> p = d.params;
        for (auto& [k, u] : d.spectral.u) p["const.u." + k] = u;
        for (auto& [k, v] : p)
          if (k.find(".gamma") != std::string::npos) v = random_tensor({1}, rng, 0.5);
        p["x"] = random_tensor({2, 1, 16, 16}, rng);
        add_projection(p, {2, 1, 4, 4}, rng);
        return p;
      },
      [](auto& b) {
        DiscriminatorSpec s;
        s.widths = {4, 4, 8, 8, 8, 1};
        SpectralState st;
        for (const auto& n : {"disc.l1.w", "disc.l2.w", "disc.l3.w", "disc.l4.w", "disc.l5.w", "disc.l6.w",
                              "disc.sa.theta.w", "disc.sa.phi.w", "disc.sa.g1.w", "disc.sa.g2.w"})
          st.u[n] = b.value(std::string("const.u.") + n).template cast<float>();
        return project(b, discriminator_forward(b("x"), s, b, st, false));
      }));

  cases.push_back(make_case(
      "noise_aware_mse", 1e-4,
      [](Rng& rng) {
        ParamMap<float> p;
        p["I"] = random_tensor({2, 1, 8, 8}, rng);
        p["R"] = random_tensor({2, 1, 8, 8}, rng);
        p["const.p"] = noise_weight_map(p["I"], p["R"], NoiseWeightConfig{}).p;
        return p;
      },
      [](auto& b) {
        return noise_aware_mse(b("I"), b("R"), b.value("const.p"));
      }));

  cases.push_back(make_case(
      "wgan_losses", 1e-4,
      [](Rng& rng) {
        ParamMap<float> p;
        p["real"] = random_tensor({2, 1, 4, 4}, rng);
        p["fake"] = random_tensor({2, 1, 4, 4}, rng);
        return p;
      },
      [](auto& b) {
        return add(scale(wgan_discriminator_loss(b("real"), b("fake")), 0.7), wgan_generator_loss(b("fake")));
      }));

  cases.push_back(make_case(
      "texture_matching_loss", 1e-4,
      [](Rng& rng) {
        ParamMap<float> p;
        p["g"] = random_tensor({1, 1, 10, 10}, rng, 0.3);
        p["x"] = random_tensor({1, 1, 10, 10}, rng, 0.3);
        p["const.seed"] = Tensor({1}, float(rng.below(1000)));
        return p;
      },
      [](auto& b) {
        const auto fx = FeatureExtractor::random(std::uint64_t(b.value("const.seed")[0]), {4, 4});
        return texture_matching_loss(b("g"), b("x"), fx);
      }));

  cases.push_back(make_case(
      "generator", 1e-3,
      [](Rng& rng) {
        GeneratorSpec s;
        s.base_channels = 8;
        s.nl_radius = {1, 4};
        ParamMap<float> p = init_generator(s, rng.next());
        p["x"] = random_tensor({1, 1, 16, 16}, rng);
        p["const.target"] = random_tensor({1, 1, 16, 16}, rng);
        return p;
      },
      [](auto& b) {
        GeneratorSpec s;
        s.base_channels = 8;
        s.nl_radius = {1, 4};
        return mse(b("const.target"), generator_forward(b("x"), s, b));
      }));
  return cases;
}

struct GradcheckReport {
  std::vector<GradResult> results;
  double seconds = 0;
  bool passed() const {
    for (const auto& r : results)
      if (!r.passed) return false;
    return true;
  }
  std::string text() const {
    std::string out;
    char buf[256];
    for (const auto& r : results) {
      std::snprintf(buf, sizeof buf, "%-26s %s  max_rel_err=%.3e  tol=%.0e  seeds=%zu\n", r.name.c_str(),
                    r.passed ? "PASS" : "FAIL", r.max_rel_error, r.tolerance, r.seeds);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, "%s in %.1f s\n", passed() ? "all passed" : "FAILED", seconds);
    return out + buf;
  }
};

inline GradcheckReport run_gradcheck(const GradcheckOptions& o = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport rep;
  for (const auto& c : gradcheck_cases()) rep.results.push_back(run_gradcase(c, o));
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace nlden
