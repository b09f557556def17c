#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nlden/conv.hpp"
#include "nlden/nonlocal.hpp"
#include "nlden/ops.hpp"
#include "nlden/rng.hpp"

namespace nlden {

// ---------------------------------------------------------------------------
// Spectral normalization

// Left singular-vector estimates, one per normalized weight, keyed by the
// weight's parameter name.
struct SpectralState {
  std::map<std::string, Tensor> u;
  int power_iterations = 1;
};

namespace detail {

inline double norm2(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// W viewed as [rows, cols]; returns W^T u.
template <class T>
std::vector<double> wt_times(const BasicTensor<T>& w, const std::vector<double>& u, std::size_t rows, std::size_t cols) {
  std::vector<double> out(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += double(w[r * cols + c]) * u[r];
  return out;
}

template <class T>
std::vector<double> w_times(const BasicTensor<T>& w, const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += double(w[r * cols + c]) * v[c];
  return out;
}

}  // namespace detail

inline Tensor random_unit_vector(std::size_t n, Rng& rng) {
  Tensor u({n});
  double s = 0;
  for (auto& v : u.data()) {
    v = float(rng.normal());
    s += double(v) * v;
  }
  s = std::sqrt(s);
  for (auto& v : u.data()) v = float(v / s);
  return u;
}

// Returns W / sigma with sigma = ||W^T u|| for W reshaped to [out, rest].
// With iterations > 0, u is first refined by that many power iterations
// (v = W^T u / |.|, u = W v / |.|) and written back. u is a constant of the
// graph; the gradient is exact for the frozen u.
template <class T>
Var<T> spectral_normalize(const Var<T>& weight, Tensor& u, int iterations = 1) {
  const auto& w = weight->value;
  if (w.rank() < 2) throw DimensionError("spectral_normalize needs rank >= 2");
  const std::size_t rows = w.dim(0), cols = w.size() / rows;
  if (u.size() != rows) throw DimensionError("spectral state u has wrong length for weight");
  std::vector<double> uu(u.data().begin(), u.data().end());
  for (int it = 0; it < iterations; ++it) {
    auto v = detail::wt_times(w, uu, rows, cols);
    const double nv = detail::norm2(v);
    if (nv == 0) throw NumericError("spectral_normalize: zero weight matrix");
    for (auto& x : v) x /= nv;
    uu = detail::w_times(w, v, rows, cols);
    const double nu = detail::norm2(uu);
    if (nu == 0) throw NumericError("spectral_normalize: zero weight matrix");
    for (auto& x : uu) x /= nu;
  }
  if (iterations > 0)
    for (std::size_t i = 0; i < rows; ++i) u[i] = float(uu[i]);
  // The graph sees the stored (f32) u so that a recompute with the same state
  // reproduces the value bit-for-bit.
  for (std::size_t i = 0; i < rows; ++i) uu[i] = u[i];
  auto v = detail::wt_times(w, uu, rows, cols);
  const double sigma = detail::norm2(v);
  if (!(sigma > 0)) throw NumericError("spectral_normalize: sigma estimate is zero");
  for (auto& x : v) x /= sigma;
  BasicTensor<T> y = w;
  for (auto& x : y.data()) x = T(double(x) / sigma);
  return make_node<T>(std::move(y), "spectral_normalize", {weight}, [uu, v, sigma, rows, cols](Node<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    const auto& G = *n.grad;
    const auto& W = p->value;
    double gw = 0;
    for (std::size_t i = 0; i < G.size(); ++i) gw += double(G[i]) * double(W[i]);
    const double k = gw / (sigma * sigma);
    auto& g = p->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        g[i] += T(double(G[i]) / sigma - k * uu[r] * v[c]);
      }
  });
}

// ---------------------------------------------------------------------------
// Specs and variants

struct GeneratorSpec {
  std::size_t base_channels = 64;
  std::size_t kernel = 5;
  std::size_t downsample_factor = 4;
  NeighborhoodSpec nl_radius{5, 4};
  bool use_nonlocal = true;
  std::size_t embed_dim = 0;  // 0: base_channels / 2

  std::size_t levels() const {
    std::size_t l = 0, f = downsample_factor;
    while (f > 1) {
      if (f % 2) throw ConfigError("downsample_factor must be a power of 2");
      f /= 2;
      ++l;
    }
    return l;
  }
  std::size_t resolved_embed_dim() const { return embed_dim ? embed_dim : std::max<std::size_t>(1, base_channels / 2); }
};

struct DiscriminatorSpec {
  std::vector<std::size_t> widths{64, 64, 128, 128, 256, 1};
  std::vector<std::size_t> strides{1, 2, 1, 2, 1, 1};
  std::size_t kernel = 3;
  double leaky_slope = 0.2;
  int self_attention_after = 5;  // 1-based layer index; 0 disables
  bool global_mean_head = false;  // vanilla critic: one score per image
  bool spectral_norm = true;

  std::size_t out_channels() const { return widths.back(); }
  std::size_t reduction() const {
    std::size_t r = 1;
    for (auto s : strides) r *= s;
    return r;
  }
};

enum class LossKind { mse, nc_mse };
enum class Adversary { none, vanilla, snmp, sa_snmp };

struct VariantConfig {
  std::string name;
  bool use_nonlocal = true;
  LossKind loss = LossKind::mse;
  Adversary adversary = Adversary::none;
};

inline const char* to_string(LossKind k) { return k == LossKind::mse ? "mse" : "nc_mse"; }
inline const char* to_string(Adversary a) {
  switch (a) {
    case Adversary::none: return "none";
    case Adversary::vanilla: return "vanilla";
    case Adversary::snmp: return "snmp";
    case Adversary::sa_snmp: return "sa_snmp";
  }
  return "?";
}

inline VariantConfig variant_config(const std::string& name) {
  if (name == "M1") return {name, false, LossKind::mse, Adversary::none};
  if (name == "M2") return {name, true, LossKind::mse, Adversary::none};
  if (name == "M3") return {name, true, LossKind::nc_mse, Adversary::none};
  if (name == "M4") return {name, true, LossKind::nc_mse, Adversary::vanilla};
  if (name == "M5") return {name, true, LossKind::nc_mse, Adversary::snmp};
  if (name == "M6") return {name, true, LossKind::nc_mse, Adversary::sa_snmp};
  throw ConfigError("unknown variant '" + name + "' (expected M1..M6)");
}

struct ResolvedVariant {
  VariantConfig cfg;
  GeneratorSpec generator;
  std::optional<DiscriminatorSpec> discriminator;
};

// Applies a variant's toggles on top of base architecture settings.
inline ResolvedVariant build_variant(const VariantConfig& cfg, GeneratorSpec gen = {}, DiscriminatorSpec disc = {}) {
  ResolvedVariant r{cfg, gen, std::nullopt};
  r.generator.use_nonlocal = cfg.use_nonlocal;
  if (cfg.adversary != Adversary::none) {
    disc.spectral_norm = true;
    disc.global_mean_head = cfg.adversary == Adversary::vanilla;
    if (cfg.adversary != Adversary::sa_snmp) disc.self_attention_after = 0;
    else if (disc.self_attention_after == 0) disc.self_attention_after = int(disc.widths.size()) - 1;
    r.discriminator = disc;
  }
  return r;
}

inline ResolvedVariant build_variant(const std::string& name, GeneratorSpec gen = {}, DiscriminatorSpec disc = {}) {
  return build_variant(variant_config(name), std::move(gen), std::move(disc));
}

inline std::size_t parameter_count(const ParamMap<float>& p) {
  std::size_t n = 0;
  for (const auto& [k, v] : p) n += v.size();
  return n;
}

// ---------------------------------------------------------------------------
// Generator

inline NonLocalParams generator_nonlocal(const GeneratorSpec& s) {
  return {"gen.nl", s.base_channels, s.resolved_embed_dim(), s.base_channels};
}

inline ParamMap<float> init_generator(const GeneratorSpec& s, std::uint64_t seed) {
  ParamMap<float> p;
  Rng rng(seed);
  const std::size_t C = s.base_channels, k = s.kernel, L = s.levels();
  if (C == 0 || k % 2 == 0) throw ConfigError("generator needs positive width and an odd kernel");
  detail::init_conv(p, "gen.enc0", C, 1, k, rng);
  for (std::size_t l = 1; l <= L + 1; ++l) detail::init_conv(p, "gen.enc" + std::to_string(l), C, C, k, rng);
  std::size_t mid_in = C;
  if (s.use_nonlocal) {
    const auto nl = generator_nonlocal(s);
    init_nonlocal(p, nl.prefix, C, nl.embed_dim, nl.g_channels, rng);
    p.erase(nl.name("gamma"));  // concat fusion has no residual scale
    mid_in += nl.g_channels;
  }
  detail::init_conv(p, "gen.mid", C, mid_in, k, rng);
  for (std::size_t l = 1; l <= L; ++l) detail::init_conv(p, "gen.dec" + std::to_string(l), C, C, k, rng);
  detail::init_conv(p, "gen.dec_last", C, C, k, rng);
  detail::init_conv(p, "gen.out", 1, C, k, rng);
  return p;
}

template <class T>
struct Encoded {
  Var<T> first;               // full-resolution features after the first conv
  std::vector<Var<T>> skips;  // one per level; skips.back() is the bottleneck
};

// Encoder: conv-conv at full resolution, then (maxpool, conv) per level.
template <class T>
Encoded<T> generator_encode(const Var<T>& image, const GeneratorSpec& s, Binding<T>& b) {
  const auto& x = image->value;
  require_4d(x, "generator input");
  if (x.dim(1) != 1) throw DimensionError("generator expects one input channel");
  if (x.dim(2) % s.downsample_factor || x.dim(3) % s.downsample_factor)
    throw DimensionError("generator input " + shape_str(x.shape()) + " is not divisible by " +
                         std::to_string(s.downsample_factor));
  const Padding pad = Padding::same(s.kernel);
  auto conv = [&](const Var<T>& in, const std::string& n) { return conv2d(in, b(n + ".w"), b(n + ".b"), 1, pad); };
  Encoded<T> e;
  e.first = relu(conv(image, "gen.enc0"));
  e.skips.push_back(relu(conv(e.first, "gen.enc1")));
  for (std::size_t l = 1; l <= s.levels(); ++l)
    e.skips.push_back(relu(conv(maxpool2(e.skips.back()), "gen.enc" + std::to_string(l + 1))));
  return e;
}

// Bottleneck: [x ; nonlocal(x)] -> merge conv (or a plain conv without the
// non-local block). Decoder: (upsample, conv, + encoder skip) per level, a
// full-resolution conv with the first skip, and a linear output conv.
template <class T>
Var<T> generator_forward(const Var<T>& image, const GeneratorSpec& s, Binding<T>& b) {
  const auto e = generator_encode(image, s, b);
  const Padding pad = Padding::same(s.kernel);
  auto conv = [&](const Var<T>& in, const std::string& n) { return conv2d(in, b(n + ".w"), b(n + ".b"), 1, pad); };
  Var<T> bottleneck = e.skips.back();
  if (s.use_nonlocal) {
    auto y = neighborhood_attention(bottleneck, generator_nonlocal(s), s.nl_radius, b);
    bottleneck = fuse_concat(bottleneck, y);
  }
  Var<T> cur = relu(conv(bottleneck, "gen.mid"));
  for (std::size_t l = s.levels(); l >= 1; --l)
    cur = relu(add(conv(upsample_nearest2(cur), "gen.dec" + std::to_string(l)), e.skips[l - 1]));
  cur = relu(add(conv(cur, "gen.dec_last"), e.first));
  return conv(cur, "gen.out");
}

// ---------------------------------------------------------------------------
// Discriminator

inline NonLocalParams discriminator_attention(const DiscriminatorSpec& s) {
  const std::size_t c = s.widths.at(std::size_t(s.self_attention_after) - 1);
  return {"disc.sa", c, std::max<std::size_t>(1, c / 2), c};
}

inline void validate(const DiscriminatorSpec& s) {
  if (s.widths.empty() || s.widths.size() != s.strides.size())
    throw ConfigError("discriminator widths and strides must have equal non-zero length");
  if (s.self_attention_after < 0 || s.self_attention_after > int(s.widths.size()))
    throw ConfigError("discriminator self_attention_after out of range");
  if (s.kernel % 2 == 0) throw ConfigError("discriminator kernel must be odd");
}

struct DiscriminatorParams {
  ParamMap<float> params;
  SpectralState spectral;
};

inline DiscriminatorParams init_discriminator(const DiscriminatorSpec& s, std::uint64_t seed) {
  validate(s);
  DiscriminatorParams d;
  Rng rng(seed);
  std::size_t cin = 1;
  for (std::size_t i = 0; i < s.widths.size(); ++i) {
    detail::init_conv(d.params, "disc.l" + std::to_string(i + 1), s.widths[i], cin, s.kernel, rng);
    cin = s.widths[i];
  }
  if (s.self_attention_after > 0) {
    const auto sa = discriminator_attention(s);
    init_nonlocal(d.params, sa.prefix, sa.in_channels, sa.embed_dim, sa.g_channels, rng);
  }
  for (const auto& [name, t] : d.params)
    if (t.rank() == 4) d.spectral.u.emplace(name, random_unit_vector(t.dim(0), rng));
  return d;
}

// Score map [N, c, H/r, W/r] (or [N,1,1,1] with the global-mean head).
// When update_u is true every u is advanced by spectral.power_iterations
// before use; otherwise the stored u is used as is.
template <class T>
Var<T> discriminator_forward(const Var<T>& image, const DiscriminatorSpec& s, Binding<T>& b, SpectralState& spectral,
                             bool update_u) {
  validate(s);
  const auto& x = image->value;
  require_4d(x, "discriminator input");
  const std::size_t red = s.reduction();
  if (x.dim(2) % red || x.dim(3) % red)
    throw DimensionError("discriminator input " + shape_str(x.shape()) + " is not divisible by " + std::to_string(red));
  WeightSource<T> weight = [&](const std::string& name) -> Var<T> {
    if (!s.spectral_norm) return b(name);
    auto it = spectral.u.find(name);
    if (it == spectral.u.end()) throw ConfigError("no spectral state for '" + name + "'");
    return spectral_normalize(b(name), it->second, update_u ? spectral.power_iterations : 0);
  };
  const Padding pad = Padding::same(s.kernel);
  Var<T> cur = image;
  for (std::size_t i = 0; i < s.widths.size(); ++i) {
    const std::string n = "disc.l" + std::to_string(i + 1);
    cur = conv2d(cur, weight(n + ".w"), b(n + ".b"), s.strides[i], pad);
    if (i + 1 < s.widths.size()) cur = leaky_relu(cur, s.leaky_slope);
    if (int(i + 1) == s.self_attention_after) cur = self_attention_residual(cur, discriminator_attention(s), b, weight);
  }
  if (s.global_mean_head) cur = mean_per_sample(cur);
  return cur;
}

}  // namespace nlden
