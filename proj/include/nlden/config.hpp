#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nlden/losses.hpp"
#include "nlden/metrics.hpp"
#include "nlden/networks.hpp"
#include "nlden/phantom.hpp"

namespace nlden {

struct TrainConfig {
  std::string preset = "paper";
  std::string variant = "M3";
  std::size_t batch_size = 64;
  double lr_g = 1e-6;
  double lr_d = 4e-6;
  std::size_t lr_decay_every = 5000;
  double lr_decay_factor = 0.5;
  std::size_t patch_size = 120;
  std::size_t patches_per_slice = 10;
  std::size_t patience = 15000;
  std::size_t loss_window = 200;
  std::size_t max_iters = 100000;
  std::uint64_t seed = 1;
  std::string data_dir = "data";
  std::string out_dir = "run";

  std::size_t base_channels = 64;
  std::size_t kernel = 5;
  std::size_t embed_dim = 0;
  int nl_radius = 5;  // at bottleneck resolution; NeighborhoodSpec::full for the whole map
  std::vector<std::size_t> disc_widths{64, 64, 128, 128, 256, 1};
  NoiseWeightConfig weights;
  double lambda_adv = 1.0;
  std::size_t n_critic = 1;
  int power_iterations = 1;
  double stability_bound = 50.0;
  HUWindow window;

  // phantom-gen
  std::size_t phantoms = 200;
  std::size_t image_size = 64;
  int complexity = 1;
  double test_fraction = 0.1;
  double dose_factor = 0.25;
  double noise_gain = 600.0;
  double noise_floor = 25.0;

  GeneratorSpec generator_spec() const {
    GeneratorSpec g;
    g.base_channels = base_channels;
    g.kernel = kernel;
    g.embed_dim = embed_dim;
    g.nl_radius = NeighborhoodSpec{nl_radius, int(g.downsample_factor)};
    return g;
  }

  DiscriminatorSpec discriminator_spec() const {
    DiscriminatorSpec d;
    d.widths = disc_widths;
    return d;
  }

  DatasetOptions dataset_options() const {
    DatasetOptions o;
    o.count = phantoms;
    o.height = o.width = image_size;
    o.complexity = complexity;
    o.test_fraction = test_fraction;
    o.dose.dose_factor = dose_factor;
    o.dose.gain = noise_gain;
    o.dose.floor = noise_floor;
    o.seed = seed;
    return o;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    variant_config(variant);
    if (!(lr_g > 0) || !(lr_d > 0)) fail("learning rates must be > 0");
    if (!(lr_decay_factor > 0 && lr_decay_factor < 1)) fail("lr_decay_factor must be in (0, 1)");
    if (lr_decay_every == 0) fail("lr_decay_every must be > 0");
    if (patience == 0) fail("patience must be > 0");
    if (batch_size == 0 || patches_per_slice == 0 || loss_window == 0 || n_critic == 0) fail("counts must be > 0");
    if (patch_size == 0 || patch_size % 4) fail("patch_size must be a positive multiple of 4");
    if (patch_size > image_size) fail("patch_size exceeds image_size");
    if (nl_radius < 0 && nl_radius != NeighborhoodSpec::full) fail("nl_radius must be >= 0 or 'full'");
    if (power_iterations < 1) fail("power_iterations must be >= 1");
    if (!(stability_bound > 0)) fail("stability_bound must be > 0");
    if (disc_widths.size() != 6) fail("disc_widths needs 6 entries");
    weights.validate();
    window.validate();
    dataset_options().dose.validate();
  }
};

// Small, fast settings for a single CPU core.
inline void apply_desk_preset(TrainConfig& c) {
  c.preset = "desk";
  c.batch_size = 16;
  c.lr_g = 2e-3;
  c.lr_d = 8e-3;
  c.patch_size = 32;
  c.max_iters = 500;
  c.base_channels = 8;
  c.nl_radius = 2;
  c.disc_widths = {8, 8, 16, 16, 32, 1};
  c.phantoms = 200;
  c.image_size = 64;
}

namespace detail {
inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("bad number for " + key + ": '" + v + "'");
  return d;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long d = 0;
  try {
    d = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("bad integer for " + key + ": '" + v + "'");
  return d;
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  const long long d = parse_int(key, v);
  if (d < 0) throw ConfigError(key + " must be non-negative");
  return std::size_t(d);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}
}  // namespace detail

inline int parse_radius(const std::string& v) {
  if (v == "full") return NeighborhoodSpec::full;
  const long long r = detail::parse_int("nl_radius", v);
  if (r < 0) throw ConfigError("nl_radius must be >= 0 or 'full'");
  return int(r);
}

inline std::string radius_str(int r) { return r == NeighborhoodSpec::full ? "full" : std::to_string(r); }

inline void set_option(TrainConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "preset") {
    if (v == "desk") apply_desk_preset(c);
    else if (v == "paper") c = TrainConfig{};
    else throw ConfigError("unknown preset '" + v + "' (expected desk or paper)");
  } else if (key == "variant") c.variant = v;
  else if (key == "batch_size") c.batch_size = parse_count(key, v);
  else if (key == "lr_g") c.lr_g = parse_double(key, v);
  else if (key == "lr_d") c.lr_d = parse_double(key, v);
  else if (key == "lr_decay_every") c.lr_decay_every = parse_count(key, v);
  else if (key == "lr_decay_factor") c.lr_decay_factor = parse_double(key, v);
  else if (key == "patch_size") c.patch_size = parse_count(key, v);
  else if (key == "patches_per_slice") c.patches_per_slice = parse_count(key, v);
  else if (key == "patience") c.patience = parse_count(key, v);
  else if (key == "loss_window") c.loss_window = parse_count(key, v);
  else if (key == "max_iters") c.max_iters = parse_count(key, v);
  else if (key == "seed") c.seed = std::uint64_t(parse_count(key, v));
  else if (key == "data_dir") c.data_dir = v;
  else if (key == "out_dir") c.out_dir = v;
  else if (key == "base_channels") c.base_channels = parse_count(key, v);
  else if (key == "kernel") c.kernel = parse_count(key, v);
  else if (key == "embed_dim") c.embed_dim = parse_count(key, v);
  else if (key == "nl_radius") c.nl_radius = parse_radius(v);
  else if (key == "disc_widths") {
    c.disc_widths.clear();
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) c.disc_widths.push_back(parse_count(key, trim(item)));
  } else if (key == "h_g") c.weights.h_g = int(parse_int(key, v));
  else if (key == "sigma_g") c.weights.sigma_g = parse_double(key, v);
  else if (key == "weight_scale") {
    if (v == "paper") c.weights.scale_mode = WeightScale::paper;
    else if (v == "mean_one") c.weights.scale_mode = WeightScale::mean_one;
    else throw ConfigError("weight_scale must be paper or mean_one");
  } else if (key == "lambda_adv") c.lambda_adv = parse_double(key, v);
  else if (key == "n_critic") c.n_critic = parse_count(key, v);
  else if (key == "power_iterations") c.power_iterations = int(parse_int(key, v));
  else if (key == "stability_bound") c.stability_bound = parse_double(key, v);
  else if (key == "hu_lo") c.window.lo = parse_double(key, v);
  else if (key == "hu_hi") c.window.hi = parse_double(key, v);
  else if (key == "phantoms") c.phantoms = parse_count(key, v);
  else if (key == "image_size") c.image_size = parse_count(key, v);
  else if (key == "complexity") c.complexity = int(parse_int(key, v));
  else if (key == "test_fraction") c.test_fraction = parse_double(key, v);
  else if (key == "dose_factor") c.dose_factor = parse_double(key, v);
  else if (key == "noise_gain") c.noise_gain = parse_double(key, v);
  else if (key == "noise_floor") c.noise_floor = parse_double(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

// `key = value` lines, `#` starts a comment. A preset line is applied first
// so that the other keys override it.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string k = detail::trim(line.substr(0, eq)), v = detail::trim(line.substr(eq + 1));
    if (k.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(k, v);
  }
  return out;
}

inline void apply_config_text(TrainConfig& c, const std::string& text) {
  const auto kv = parse_config_text(text);
  for (const auto& [k, v] : kv)
    if (k == "preset") set_option(c, k, v);
  for (const auto& [k, v] : kv)
    if (k != "preset") set_option(c, k, v);
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  TrainConfig c;
  apply_config_text(c, ss.str());
  return c;
}

// Variant plus architecture. A radius of 0 means no non-local block at all.
inline ResolvedVariant resolve_variant(const TrainConfig& c) {
  auto vc = variant_config(c.variant);
  if (c.nl_radius == 0) vc.use_nonlocal = false;
  return build_variant(vc, c.generator_spec(), c.discriminator_spec());
}

// Resolved configuration, one `key = value` per line in a fixed order.
inline std::string config_text(const TrainConfig& c) {
  using detail::fmt;
  std::string widths;
  for (std::size_t i = 0; i < c.disc_widths.size(); ++i) widths += (i ? "," : "") + std::to_string(c.disc_widths[i]);
  const auto vc = resolve_variant(c).cfg;
  std::vector<std::pair<std::string, std::string>> kv{
      {"preset", c.preset},
      {"variant", c.variant},
      {"use_nonlocal", vc.use_nonlocal ? "true" : "false"},
      {"loss", to_string(vc.loss)},
      {"adversary", to_string(vc.adversary)},
      {"batch_size", std::to_string(c.batch_size)},
      {"lr_g", fmt(c.lr_g)},
      {"lr_d", fmt(c.lr_d)},
      {"lr_decay_every", std::to_string(c.lr_decay_every)},
      {"lr_decay_factor", fmt(c.lr_decay_factor)},
      {"patch_size", std::to_string(c.patch_size)},
      {"patches_per_slice", std::to_string(c.patches_per_slice)},
      {"patience", std::to_string(c.patience)},
      {"loss_window", std::to_string(c.loss_window)},
      {"max_iters", std::to_string(c.max_iters)},
      {"seed", std::to_string(c.seed)},
      {"base_channels", std::to_string(c.base_channels)},
      {"kernel", std::to_string(c.kernel)},
      {"embed_dim", std::to_string(c.embed_dim)},
      {"nl_radius", radius_str(c.nl_radius)},
      {"disc_widths", widths},
      {"h_g", std::to_string(c.weights.h_g)},
      {"sigma_g", fmt(c.weights.sigma_g)},
      {"weight_scale", c.weights.scale_mode == WeightScale::paper ? "paper" : "mean_one"},
      {"lambda_adv", fmt(c.lambda_adv)},
      {"n_critic", std::to_string(c.n_critic)},
      {"power_iterations", std::to_string(c.power_iterations)},
      {"stability_bound", fmt(c.stability_bound)},
      {"hu_lo", fmt(c.window.lo)},
      {"hu_hi", fmt(c.window.hi)},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

}  // namespace nlden
