#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "restlab/numcore/tensor.hpp"
#include "restlab/util.hpp"

// Layout (all integers little-endian u32):
//   magic "RSTLCKPT" | version | arch id (len + bytes) | param count
//   per param: name (len + bytes) | rank | dims... | float32 values (LE)

namespace restlab::nc {

inline constexpr std::array<char, 8> kCheckpointMagic = {'R', 'S', 'T', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::istream& is) {
  const std::uint32_t n = get_u32(is);
  if (n > (1u << 20)) throw DataError("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw DataError("checkpoint: truncated file");
  return s;
}

}  // namespace detail

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string arch_id;
  std::vector<NamedArray> arrays;
};

template <typename Real>
void save_checkpoint(std::ostream& os, const std::string& arch_id, std::span<const Parameter<Real>> params) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u32(os, kCheckpointVersion);
  detail::put_str(os, arch_id);
  detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put_str(os, p.name);
    detail::put_u32(os, static_cast<std::uint32_t>(p.value.rank()));
    for (int d : p.value.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (Real v : p.value.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!os) throw DataError("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw DataError("checkpoint: bad magic");
  }
  const std::uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.arch_id = detail::get_str(is);
  const std::uint32_t count = detail::get_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray arr;
    arr.name = detail::get_str(is);
    const std::uint32_t rank = detail::get_u32(is);
    if (rank > 8) throw DataError("checkpoint: implausible rank for '" + arr.name + "'");
    for (std::uint32_t r = 0; r < rank; ++r) arr.shape.push_back(static_cast<int>(detail::get_u32(is)));
    arr.values.resize(shape_size(arr.shape));
    for (float& v : arr.values) v = std::bit_cast<float>(detail::get_u32(is));
    ck.arrays.push_back(std::move(arr));
  }
  return ck;
}

/// Loads values into an existing parameter list; names, order and shapes must match.
template <typename Real>
void load_checkpoint(std::istream& is, const std::string& expected_arch, std::span<Parameter<Real>> params) {
  const Checkpoint ck = read_checkpoint(is);
  if (ck.arch_id != expected_arch) {
    throw DataError("checkpoint: architecture '" + ck.arch_id + "' does not match expected '" + expected_arch + "'");
  }
  if (ck.arrays.size() != params.size()) throw DataError("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& arr = ck.arrays[i];
    if (arr.name != params[i].name || arr.shape != params[i].value.shape()) {
      throw DataError("checkpoint: parameter '" + arr.name + "' " + shape_str(arr.shape) +
                      " does not match '" + params[i].name + "' " + shape_str(params[i].value.shape()));
    }
    auto dst = params[i].value.data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<Real>(arr.values[j]);
  }
}

/// Hash of parameter names, shapes and value bits.
template <typename Real>
std::uint64_t parameter_digest(std::span<const Parameter<Real>> params) {
  Fnv1a h;
  for (const auto& p : params) {
    h.update(p.name);
    h.update_values(std::span<const int>(p.value.shape()));
    h.update_values(p.value.data());
  }
  return h.digest();
}

}  // namespace restlab::nc
