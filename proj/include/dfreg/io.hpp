#pragma once

// Raw float32 payloads with a JSON sidecar, and 8-bit PGM export.
//
//   foo.raw   little-endian float32, x fastest, z slowest; deformations
//             interleave 3 components per node
//   foo.json  {"dims": [nx, ny(, nz)], "box": [Lx, Ly(, Lz)], "kind": ...}

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfreg/error.hpp"
#include "dfreg/grid.hpp"

namespace dfreg {

enum class FieldKind { volume, image2d, deformation };

inline const char* to_string(FieldKind k) {
  switch (k) {
    case FieldKind::volume: return "volume";
    case FieldKind::image2d: return "image2d";
    case FieldKind::deformation: return "deformation";
  }
  return "unknown";
}

struct FieldHeader {
  FieldKind kind = FieldKind::volume;
  std::vector<long> dims;  // 2 entries for image2d, else 3
  std::vector<double> box;

  int components() const { return kind == FieldKind::deformation ? 3 : 1; }
  std::size_t value_count() const {
    std::size_t n = static_cast<std::size_t>(components());
    for (long d : dims) n *= static_cast<std::size_t>(d);
    return n;
  }
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& raw) {
  auto p = raw;
  return p.replace_extension(".json");
}

namespace detail {

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& p, const char* data, std::size_t n) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + p.string() + " for writing");
  out.write(data, static_cast<std::streamsize>(n));
  if (!out) throw std::runtime_error("write failed for " + p.string());
}

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  return v;
}

template <int Dim>
Grid<Dim> grid_from_header(const FieldHeader& h) {
  std::array<long, Dim> nodes;
  std::array<double, Dim> extent;
  for (int a = 0; a < Dim; ++a) {
    nodes[a] = h.dims[a];
    extent[a] = h.box[a];
    if (!is_dyadic_node_count(nodes[a]))
      throw FormatError("dimension " + std::to_string(nodes[a]) + " is not of the form 2^k+1");
    if (!(extent[a] > 0.0) || !std::isfinite(extent[a])) throw FormatError("box extents must be positive");
  }
  return Grid<Dim>::from_nodes(nodes, extent);
}

}  // namespace detail

inline FieldHeader read_header(const std::filesystem::path& raw) {
  const auto sc = sidecar_path(raw);
  const std::string text = detail::read_file(sc);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("malformed sidecar " + sc.string() + ": " + e.what(), e.byte);
  }
  FieldHeader h;
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "volume")
      h.kind = FieldKind::volume;
    else if (kind == "image2d")
      h.kind = FieldKind::image2d;
    else if (kind == "deformation")
      h.kind = FieldKind::deformation;
    else
      throw FormatError("unknown field kind \"" + kind + "\" in " + sc.string());
    h.dims = j.at("dims").get<std::vector<long>>();
    h.box = j.at("box").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid sidecar " + sc.string() + ": " + e.what());
  }
  const std::size_t want = h.kind == FieldKind::image2d ? 2 : 3;
  // a 2D image may carry a trailing unit depth
  if (h.kind == FieldKind::image2d && h.dims.size() == 3 && h.dims[2] == 1) h.dims.resize(2);
  if (h.kind == FieldKind::image2d && h.box.size() == 3) h.box.resize(2);
  if (h.dims.size() != want || h.box.size() != want)
    throw FormatError("sidecar " + sc.string() + " needs " + std::to_string(want) + " dims and box entries");
  return h;
}

/// Payload as doubles, validated against the header.
inline std::vector<double> read_payload(const std::filesystem::path& raw, const FieldHeader& h) {
  const std::string bytes = detail::read_file(raw);
  const std::size_t expected = 4 * h.value_count();
  if (bytes.size() != expected)
    throw FormatError("payload " + raw.string() + " has " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(expected),
                      std::min(bytes.size(), expected));
  std::vector<double> out(h.value_count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, bytes.data() + 4 * i, 4);
    const float f = std::bit_cast<float>(detail::to_little(u));
    if (!std::isfinite(f)) throw FormatError("non-finite value in " + raw.string(), 4 * i);
    out[i] = f;
  }
  return out;
}

template <int Dim, int C>
void write_field(const std::filesystem::path& raw, const NodalField<Dim, C>& f) {
  static_assert((Dim == 3 && (C == 1 || C == 3)) || (Dim == 2 && C == 1), "unsupported field type");
  if (!f.all_finite()) throw std::invalid_argument("refusing to write a non-finite field");
  std::string bytes(4 * f.size(), '\0');
  for (std::size_t i = 0; i < f.size(); ++i) {
    const std::uint32_t u = detail::to_little(std::bit_cast<std::uint32_t>(static_cast<float>(f[i])));
    std::memcpy(bytes.data() + 4 * i, &u, 4);
  }
  nlohmann::json j;
  std::vector<long> dims;
  std::vector<double> box;
  for (int a = 0; a < Dim; ++a) {
    dims.push_back(f.grid().nodes(a));
    box.push_back(f.grid().extent(a));
  }
  j["dims"] = dims;
  j["box"] = box;
  j["kind"] = Dim == 2 ? "image2d" : (C == 3 ? "deformation" : "volume");
  const std::string side = j.dump(2) + "\n";
  if (raw.has_parent_path()) std::filesystem::create_directories(raw.parent_path());
  detail::write_file(raw, bytes.data(), bytes.size());
  detail::write_file(sidecar_path(raw), side.data(), side.size());
}

namespace detail {

template <int Dim, int C>
NodalField<Dim, C> read_typed(const std::filesystem::path& raw, FieldKind want) {
  const FieldHeader h = read_header(raw);
  if (h.kind != want)
    throw FormatError(raw.string() + " holds a " + to_string(h.kind) + ", expected a " + to_string(want));
  const Grid<Dim> g = grid_from_header<Dim>(h);
  return NodalField<Dim, C>(g, read_payload(raw, h));
}

}  // namespace detail

inline ScalarField3D read_volume(const std::filesystem::path& raw) {
  return detail::read_typed<3, 1>(raw, FieldKind::volume);
}
inline ScalarField2D read_image(const std::filesystem::path& raw) {
  return detail::read_typed<2, 1>(raw, FieldKind::image2d);
}
inline Deformation read_deformation(const std::filesystem::path& raw) {
  return detail::read_typed<3, 3>(raw, FieldKind::deformation);
}

/// 8-bit binary PGM with linear windowing [lo, hi] -> [0, 255]; row j = 0 first.
inline std::string encode_pgm(const ScalarField2D& f, double lo, double hi) {
  if (!(hi != lo) || !std::isfinite(lo) || !std::isfinite(hi)) throw std::invalid_argument("PGM window has zero width");
  if (!f.all_finite()) throw std::invalid_argument("cannot export a non-finite image");
  const int nx = f.grid().nodes(0), ny = f.grid().nodes(1);
  std::string out = "P5\n" + std::to_string(nx) + " " + std::to_string(ny) + "\n255\n";
  out.reserve(out.size() + f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double v = std::clamp((f[i] - lo) / (hi - lo), 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
  }
  return out;
}

inline void export_pgm(const ScalarField2D& f, const std::filesystem::path& path, double lo, double hi) {
  const std::string data = encode_pgm(f, lo, hi);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, data.data(), data.size());
}

/// 64-bit FNV-1a, used to fingerprint exported images.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace dfreg
