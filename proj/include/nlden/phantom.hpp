#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <optional>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nlden/io.hpp"
#include "nlden/metrics.hpp"
#include "nlden/rng.hpp"

namespace nlden {

inline constexpr float kAirHU = -1000.0f;

// Rasterized shape with a constant HU value. Disks are ellipses with a == b.
struct Primitive {
  enum class Kind { body, organ, vessel, bone, lesion } kind;
  double cx, cy, a, b, angle;
  float hu;

  // Pixel (x, y) belongs to the primitive when its centre lies inside.
  bool contains(std::size_t x, std::size_t y) const {
    const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
    return u * u + v * v <= 1.0;
  }
};

inline const char* to_string(Primitive::Kind k) {
  switch (k) {
    case Primitive::Kind::body: return "body";
    case Primitive::Kind::organ: return "organ";
    case Primitive::Kind::vessel: return "vessel";
    case Primitive::Kind::bone: return "bone";
    case Primitive::Kind::lesion: return "lesion";
  }
  return "?";
}

// Lesion disk plus a surrounding background ring, both inside one
// homogeneous host region.
struct LesionGeometry {
  double cx = 0, cy = 0, radius = 0;
  double ring_inner = 0, ring_outer = 0;
  float host_hu = 0, lesion_hu = 0;
  double contrast_hu = 0;  // host_hu - lesion_hu, > 0 (low-attenuation lesion)

  std::array<std::size_t, 4> bbox(std::size_t H, std::size_t W) const {
    auto lo = [](double v) { return std::size_t(std::max(0.0, std::floor(v))); };
    auto hi = [](double v, std::size_t n) { return std::min(n - 1, std::size_t(std::max(0.0, std::ceil(v)))); };
    return {lo(cx - radius), lo(cy - radius), hi(cx + radius, W), hi(cy + radius, H)};
  }

  RegionPair regions(std::size_t H, std::size_t W) const {
    RegionPair r{H, W, std::vector<std::uint8_t>(H * W, 0), std::vector<std::uint8_t>(H * W, 0)};
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
        const double d2 = dx * dx + dy * dy;
        if (d2 <= radius * radius) r.foreground[y * W + x] = 1;
        else if (d2 >= ring_inner * ring_inner && d2 <= ring_outer * ring_outer) r.background[y * W + x] = 1;
      }
    return r;
  }
};

struct Phantom {
  Tensor clean;  // [1,H,W], HU in [-1000, 400]
  std::vector<Primitive> geometry;
  LesionGeometry lesion;
  std::uint64_t seed = 0;
};

// Signal-dependent Gaussian noise: sigma(v) = sqrt(a * vhat / dose + b) with
// vhat = clip((v + 1000) / 1400, 0, 1).
struct DoseModel {
  double dose_factor = 0.25;
  double gain = 600.0;   // a, HU^2
  double floor = 25.0;   // b, HU^2
  std::uint64_t seed = 0;

  void validate() const {
    if (!(dose_factor > 0 && dose_factor <= 1)) throw ConfigError("dose_factor must be in (0, 1]");
    if (gain < 0 || floor < 0) throw ConfigError("noise gain and floor must be non-negative");
  }
  static double mapped_intensity(double hu) { return std::clamp((hu + 1000.0) / 1400.0, 0.0, 1.0); }
  double sigma(double hu) const { return std::sqrt(gain * mapped_intensity(hu) / dose_factor + floor); }
};

namespace detail {
inline void paint(Tensor& img, std::size_t H, std::size_t W, const Primitive& p) {
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      if (p.contains(x, y)) img[y * W + x] = p.hu;
}
}  // namespace detail

namespace detail {
inline std::optional<Phantom> try_phantom(Rng& rng, std::uint64_t seed, std::size_t H, std::size_t W, int complexity) {
  Phantom ph;
  ph.seed = seed;
  ph.clean = Tensor({1, H, W}, kAirHU);
  const double fw = double(W), fh = double(H), scale = std::min(fw, fh) / 64.0;

  Primitive body{Primitive::Kind::body, fw / 2 + rng.uniform(-0.03, 0.03) * fw, fh / 2 + rng.uniform(-0.03, 0.03) * fh,
                 rng.uniform(0.38, 0.46) * fw, rng.uniform(0.30, 0.40) * fh, rng.uniform(-0.2, 0.2),
                 float(std::round(rng.uniform(20.0, 50.0)))};
  ph.geometry.push_back(body);

  // Point uniformly inside the body ellipse shrunk by `shrink`.
  auto inside_body = [&](double shrink) {
    const double t = rng.uniform(0, 2 * std::numbers::pi), rad = std::sqrt(rng.uniform()) * shrink;
    const double u = rad * std::cos(t) * body.a, v = rad * std::sin(t) * body.b;
    const double c = std::cos(body.angle), s = std::sin(body.angle);
    return std::pair{body.cx + c * u - s * v, body.cy + s * u + c * v};
  };

  const int organs = 2 + complexity;
  const float organ_hu[] = {60, -90, 35, 75, 45, 20};
  for (int k = 0; k < organs; ++k) {
    auto [x, y] = inside_body(0.55);
    ph.geometry.push_back({Primitive::Kind::organ, x, y, rng.uniform(0.18, 0.32) * body.a,
                           rng.uniform(0.18, 0.32) * body.b, rng.uniform(0, std::numbers::pi),
                           organ_hu[k % 6] + float(std::round(rng.uniform(-8.0, 8.0)))});
  }
  const int vessels = 2 + int(rng.below(3)) + complexity;
  for (int k = 0; k < vessels; ++k) {
    auto [x, y] = inside_body(0.75);
    const double r = rng.uniform(1.0, 2.5) * scale;
    ph.geometry.push_back({Primitive::Kind::vessel, x, y, r, r, 0.0, float(std::round(rng.uniform(150.0, 250.0)))});
  }
  {
    const double r = rng.uniform(3.0, 4.5) * scale;
    ph.geometry.push_back({Primitive::Kind::bone, body.cx + rng.uniform(-2, 2) * scale, body.cy + body.b * 0.7 - r, r, r,
                           0.0, float(std::round(rng.uniform(300.0, 400.0)))});
  }
  for (const auto& p : ph.geometry) detail::paint(ph.clean, H, W, p);

  // Lesion: the disk and its ring must land on pixels that all share one
  // non-air value.
  const double contrast = std::round(rng.uniform(10.0, 40.0));
  const double radius = rng.uniform(2.0, 3.5) * scale;
  LesionGeometry les{0, 0, radius, radius + 1.5 * scale, radius + 4.0 * scale, 0, 0, contrast};
  bool placed = false;
  for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
    auto [x, y] = inside_body(0.9);
    les.cx = x;
    les.cy = y;
    if (x - les.ring_outer < 0 || y - les.ring_outer < 0 || x + les.ring_outer > fw || y + les.ring_outer > fh) continue;
    const float host = ph.clean[std::size_t(y) * W + std::size_t(x)];
    if (host == kAirHU) continue;
    const auto r = les.regions(H, W);
    placed = true;
    for (std::size_t i = 0; i < H * W && placed; ++i)
      if ((r.foreground[i] || r.background[i]) && ph.clean[i] != host) placed = false;
    les.host_hu = host;
  }
  if (!placed) return std::nullopt;
  les.lesion_hu = float(double(les.host_hu) - contrast);
  ph.lesion = les;
  ph.geometry.push_back({Primitive::Kind::lesion, les.cx, les.cy, radius, radius, 0.0, les.lesion_hu});
  const auto fg = les.regions(H, W).foreground;
  for (std::size_t i = 0; i < H * W; ++i)
    if (fg[i]) ph.clean[i] = les.lesion_hu;
  return ph;
}
}  // namespace detail

// Deterministic CT-like slice: air background, a body ellipse, internal
// organs, vessels, one bone disk and a low-contrast lesion (10-40 HU below
// its host) whose ring neighbourhood lies in a single homogeneous region.
// Layouts with no room for the lesion are redrawn from the same stream.
inline Phantom generate_phantom(std::uint64_t seed, std::size_t H, std::size_t W, int complexity = 1) {
  if (H < 32 || W < 32) throw ConfigError("phantom needs H, W >= 32");
  if (complexity < 0) throw ConfigError("complexity must be >= 0");
  Rng rng(seed);
  for (int draw = 0; draw < 64; ++draw)
    if (auto ph = detail::try_phantom(rng, seed, H, W, complexity)) return *std::move(ph);
  throw NumericError("could not place a lesion in phantom seed " + std::to_string(seed));
}

// Noise field eta with eta ~ N(0, sigma(clean)^2) per pixel.
inline Tensor noise_field(const Tensor& clean, const DoseModel& d) {
  d.validate();
  Rng rng(d.seed);
  Tensor eta(clean.shape());
  for (std::size_t i = 0; i < clean.size(); ++i) eta[i] = float(d.sigma(clean[i]) * rng.normal());
  return eta;
}

inline Tensor simulate_low_dose(const Tensor& clean, const DoseModel& d) {
  Tensor noisy = clean;
  const Tensor eta = noise_field(clean, d);
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += eta[i];
  return noisy;
}

inline Tensor simulate_low_dose(const Phantom& p, const DoseModel& d) { return simulate_low_dose(p.clean, d); }

// Aligned (clean, noisy) crops.
struct PatchBatch {
  Tensor clean;  // [B,1,s,s]
  Tensor noisy;
  std::vector<std::size_t> slice_ids;
  std::vector<std::pair<std::size_t, std::size_t>> offsets;  // (row, col)
};

inline Tensor crop(const Tensor& img, std::size_t row, std::size_t col, std::size_t s) {
  const std::size_t H = img.dim(img.rank() - 2), W = img.dim(img.rank() - 1);
  if (row + s > H || col + s > W) throw DimensionError("crop out of range");
  Tensor out({1, 1, s, s});
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j) out[i * s + j] = img[(row + i) * W + col + j];
  return out;
}

// n uniformly placed s x s crops taken at identical offsets from both images.
inline PatchBatch extract_patches(const Tensor& clean, const Tensor& noisy, std::size_t n, std::size_t s,
                                  std::uint64_t seed, std::size_t slice_id = 0) {
  if (clean.shape() != noisy.shape()) throw DimensionError("extract_patches: pair shapes differ");
  if (clean.rank() < 2) throw DimensionError("extract_patches needs an image");
  const std::size_t H = clean.dim(clean.rank() - 2), W = clean.dim(clean.rank() - 1);
  if (s == 0 || s > std::min(H, W))
    throw ConfigError("patch size " + std::to_string(s) + " exceeds image " + std::to_string(H) + "x" + std::to_string(W));
  Rng rng(seed);
  PatchBatch b{Tensor({n, 1, s, s}), Tensor({n, 1, s, s}), {}, {}};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t r = rng.below(H - s + 1), c = rng.below(W - s + 1);
    const Tensor cc = crop(clean, r, c, s), nn = crop(noisy, r, c, s);
    std::copy_n(cc.ptr(), s * s, b.clean.ptr() + k * s * s);
    std::copy_n(nn.ptr(), s * s, b.noisy.ptr() + k * s * s);
    b.slice_ids.push_back(slice_id);
    b.offsets.emplace_back(r, c);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Dataset directory
//
//   <dir>/manifest.txt            "<id> <train|test>" per line
//   <dir>/phantoms/<id>_clean.nlt1
//   <dir>/phantoms/<id>_low.nlt1
//   <dir>/phantoms/<id>_meta.txt  key=value

struct DatasetOptions {
  std::size_t count = 200;
  std::size_t height = 64, width = 64;
  int complexity = 1;
  double test_fraction = 0.1;
  DoseModel dose;
  std::uint64_t seed = 1;
};

struct ManifestEntry {
  std::string id;
  std::string split;
};

inline std::string phantom_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "p%04zu", i);
  return buf;
}

using Meta = std::map<std::string, std::string>;

inline Meta read_meta(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Meta m;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (line.empty() || line[0] == '#' || eq == std::string::npos) continue;
    m[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return m;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw IoError("cannot open manifest " + (dir / "manifest.txt").string());
  std::vector<ManifestEntry> out;
  std::string id, split;
  while (in >> id >> split) out.push_back({id, split});
  return out;
}

inline std::vector<std::string> split_ids(const std::vector<ManifestEntry>& m, const std::string& split) {
  std::vector<std::string> ids;
  for (const auto& e : m)
    if (e.split == split) ids.push_back(e.id);
  return ids;
}

// Writes the whole dataset. Phantom i uses seed derive_seed(seed, i) and its
// noise uses derive_seed(seed, i + 2^32).
inline std::vector<ManifestEntry> write_dataset(const std::filesystem::path& dir, const DatasetOptions& o) {
  o.dose.validate();
  if (o.count == 0) throw ConfigError("dataset needs at least one phantom");
  const std::size_t n_test = std::max<std::size_t>(1, std::size_t(std::lround(double(o.count) * o.test_fraction)));
  if (n_test >= o.count && o.count > 1) throw ConfigError("test_fraction leaves no training data");
  std::filesystem::create_directories(dir / "phantoms");
  std::vector<ManifestEntry> manifest;
  std::ostringstream mf;
  for (std::size_t i = 0; i < o.count; ++i) {
    const std::string id = phantom_id(i);
    const std::uint64_t pseed = derive_seed(o.seed, i);
    const Phantom ph = generate_phantom(pseed, o.height, o.width, o.complexity);
    DoseModel d = o.dose;
    d.seed = derive_seed(o.seed, i + (std::uint64_t(1) << 32));
    const Tensor low = simulate_low_dose(ph, d);
    write_tensor(dir / "phantoms" / (id + "_clean.nlt1"), ph.clean);
    write_tensor(dir / "phantoms" / (id + "_low.nlt1"), low);
    const auto& L = ph.lesion;
    const auto bb = L.bbox(o.height, o.width);
    std::ostringstream meta;
    meta << "id=" << id << "\nseed=" << pseed << "\nnoise_seed=" << d.seed << "\ndose_factor=" << format_double(d.dose_factor)
         << "\nnoise_gain=" << format_double(d.gain) << "\nnoise_floor=" << format_double(d.floor)
         << "\nheight=" << o.height << "\nwidth=" << o.width << "\nlesion_cx=" << format_double(L.cx)
         << "\nlesion_cy=" << format_double(L.cy) << "\nlesion_r=" << format_double(L.radius)
         << "\nlesion_ring_inner=" << format_double(L.ring_inner) << "\nlesion_ring_outer=" << format_double(L.ring_outer)
         << "\nlesion_bbox=" << bb[0] << "," << bb[1] << "," << bb[2] << "," << bb[3]
         << "\nlesion_contrast_hu=" << format_double(L.contrast_hu) << "\nhost_hu=" << format_double(L.host_hu) << "\n";
    const std::string s = meta.str();
    write_bytes(dir / "phantoms" / (id + "_meta.txt"), {s.begin(), s.end()});
    const std::string split = i >= o.count - n_test ? "test" : "train";
    manifest.push_back({id, split});
    mf << id << " " << split << "\n";
  }
  const std::string ms = mf.str();
  write_bytes(dir / "manifest.txt", {ms.begin(), ms.end()});
  return manifest;
}

struct SlicePair {
  std::string id;
  Tensor clean;  // HU, [1,H,W]
  Tensor low;
  Meta meta;
};

inline SlicePair load_slice(const std::filesystem::path& dir, const std::string& id) {
  const auto base = dir / "phantoms";
  SlicePair s{id, read_tensor(base / (id + "_clean.nlt1")), read_tensor(base / (id + "_low.nlt1")),
              read_meta(base / (id + "_meta.txt"))};
  if (s.clean.shape() != s.low.shape()) throw FormatError(id + ": clean and low-dose shapes differ");
  return s;
}

// Lesion/background masks recorded in a slice's metadata, if any.
inline std::optional<RegionPair> lesion_regions(const Meta& m, std::size_t H, std::size_t W) {
  if (!m.count("lesion_cx") || !m.count("lesion_bbox")) return std::nullopt;
  LesionGeometry L;
  L.cx = std::stod(m.at("lesion_cx"));
  L.cy = std::stod(m.at("lesion_cy"));
  L.radius = std::stod(m.at("lesion_r"));
  L.ring_inner = std::stod(m.at("lesion_ring_inner"));
  L.ring_outer = std::stod(m.at("lesion_ring_outer"));
  return L.regions(H, W);
}

}  // namespace nlden
