#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nlden/io.hpp"
#include "nlden/networks.hpp"
#include "nlden/optim.hpp"

namespace nlden {

// "NLCK", u16 count, then count x [u16 name length, UTF-8 name, NLT1 block].
// Entries are written in name order.
using TensorMap = std::map<std::string, Tensor>;

inline std::vector<unsigned char> encode_checkpoint(const TensorMap& entries) {
  if (entries.size() > 0xFFFF) throw FormatError("checkpoint holds more than 65535 tensors");
  std::vector<unsigned char> out{'N', 'L', 'C', 'K'};
  auto put16 = [&](std::size_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xFF));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
  };
  put16(entries.size());
  for (const auto& [name, t] : entries) {
    if (name.empty() || name.size() > 0xFFFF) throw FormatError("bad checkpoint entry name '" + name + "'");
    put16(name.size());
    out.insert(out.end(), name.begin(), name.end());
    nlt1::encode(t, out);
  }
  return out;
}

inline TensorMap decode_checkpoint(const std::vector<unsigned char>& buf) {
  if (buf.size() < 6 || buf[0] != 'N' || buf[1] != 'L' || buf[2] != 'C' || buf[3] != 'K')
    throw FormatError("not an NLCK checkpoint (bad magic at offset 0)");
  std::size_t off = 4;
  auto get16 = [&]() {
    if (off + 2 > buf.size())
      throw FormatError("checkpoint truncated at offset " + std::to_string(off) + ": expected 2 bytes, have " +
                        std::to_string(buf.size() - off));
    const std::size_t v = std::size_t(buf[off]) | (std::size_t(buf[off + 1]) << 8);
    off += 2;
    return v;
  };
  const std::size_t count = get16();
  TensorMap out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = get16();
    if (off + len > buf.size())
      throw FormatError("checkpoint truncated at offset " + std::to_string(off) + ": expected " + std::to_string(len) +
                        " name bytes, have " + std::to_string(buf.size() - off));
    std::string name(buf.begin() + std::ptrdiff_t(off), buf.begin() + std::ptrdiff_t(off + len));
    off += len;
    if (!out.emplace(name, nlt1::decode(buf, off)).second) throw FormatError("duplicate checkpoint entry '" + name + "'");
  }
  if (off != buf.size())
    throw FormatError("checkpoint has " + std::to_string(buf.size() - off) + " trailing bytes at offset " +
                      std::to_string(off));
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const TensorMap& entries) {
  write_bytes(path, encode_checkpoint(entries));
}

inline TensorMap load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_bytes(path)); }

// ---------------------------------------------------------------------------
// Architecture fields are stored as one-element tensors under "spec.".

inline Tensor scalar_tensor(double v) { return Tensor({1}, float(v)); }

inline void put_generator_spec(TensorMap& m, const GeneratorSpec& s) {
  m["spec.gen.base_channels"] = scalar_tensor(double(s.base_channels));
  m["spec.gen.kernel"] = scalar_tensor(double(s.kernel));
  m["spec.gen.downsample_factor"] = scalar_tensor(double(s.downsample_factor));
  m["spec.gen.nl_radius"] = scalar_tensor(double(s.nl_radius.radius_module));
  m["spec.gen.use_nonlocal"] = scalar_tensor(s.use_nonlocal ? 1.0 : 0.0);
  m["spec.gen.embed_dim"] = scalar_tensor(double(s.resolved_embed_dim()));
}

inline GeneratorSpec get_generator_spec(const TensorMap& m) {
  auto field = [&](const std::string& k) {
    auto it = m.find("spec.gen." + k);
    if (it == m.end() || it->second.size() != 1) throw ConfigError("checkpoint lacks generator field " + k);
    return double(it->second[0]);
  };
  GeneratorSpec s;
  s.base_channels = std::size_t(field("base_channels"));
  s.kernel = std::size_t(field("kernel"));
  s.downsample_factor = std::size_t(field("downsample_factor"));
  s.nl_radius = NeighborhoodSpec{int(field("nl_radius")), int(s.downsample_factor)};
  s.use_nonlocal = field("use_nonlocal") != 0;
  s.embed_dim = std::size_t(field("embed_dim"));
  return s;
}

// Throws a config error naming the first field where the two specs differ.
inline void require_same_generator(const GeneratorSpec& expected, const GeneratorSpec& stored) {
  auto check = [](const char* field, double a, double b) {
    if (a != b) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "checkpoint/architecture mismatch in %s: expected %g, checkpoint has %g", field, a, b);
      throw ConfigError(buf);
    }
  };
  check("base_channels", double(expected.base_channels), double(stored.base_channels));
  check("kernel", double(expected.kernel), double(stored.kernel));
  check("downsample_factor", double(expected.downsample_factor), double(stored.downsample_factor));
  check("use_nonlocal", expected.use_nonlocal, stored.use_nonlocal);
  check("nl_radius", expected.nl_radius.radius_module, stored.nl_radius.radius_module);
  check("embed_dim", double(expected.resolved_embed_dim()), double(stored.resolved_embed_dim()));
}

inline ParamMap<float> select_prefix(const TensorMap& m, const std::string& prefix) {
  ParamMap<float> out;
  for (const auto& [k, v] : m)
    if (k.rfind(prefix, 0) == 0 && k.find(".sn_u") == std::string::npos) out.emplace(k, v);
  return out;
}

// Every parameter the spec expects must be present with the expected shape.
inline void require_parameters(const ParamMap<float>& expected, const ParamMap<float>& stored) {
  for (const auto& [k, v] : expected) {
    auto it = stored.find(k);
    if (it == stored.end()) throw ConfigError("checkpoint/architecture mismatch: missing parameter " + k);
    if (it->second.shape() != v.shape())
      throw ConfigError("checkpoint/architecture mismatch in " + k + ": expected " + shape_str(v.shape()) +
                        ", checkpoint has " + shape_str(it->second.shape()));
  }
}

inline void put_adam(TensorMap& m, const std::string& tag, const AdamState& st) {
  m["adam." + tag + ".t"] = scalar_tensor(double(st.t));
  for (const auto& [k, v] : st.m) m["adam." + tag + ".m." + k] = v;
  for (const auto& [k, v] : st.v) m["adam." + tag + ".v." + k] = v;
}

inline AdamState get_adam(const TensorMap& m, const std::string& tag) {
  AdamState st;
  const std::string base = "adam." + tag + ".";
  if (auto it = m.find(base + "t"); it != m.end()) st.t = std::int64_t(it->second[0]);
  for (const auto& [k, v] : m) {
    if (k.rfind(base + "m.", 0) == 0) st.m.emplace(k.substr(base.size() + 2), v);
    if (k.rfind(base + "v.", 0) == 0) st.v.emplace(k.substr(base.size() + 2), v);
  }
  return st;
}

inline void put_spectral(TensorMap& m, const SpectralState& s) {
  for (const auto& [k, u] : s.u) m[k + ".sn_u"] = u;
}

inline SpectralState get_spectral(const TensorMap& m, int power_iterations = 1) {
  SpectralState s;
  s.power_iterations = power_iterations;
  const std::string suffix = ".sn_u";
  for (const auto& [k, v] : m)
    if (k.size() > suffix.size() && k.compare(k.size() - suffix.size(), suffix.size(), suffix) == 0)
      s.u.emplace(k.substr(0, k.size() - suffix.size()), v);
  return s;
}

}  // namespace nlden
