#pragma once

// Binary tensor I/O.
//
// Layout: magic "FTSR", version u32, rank u32, dims u32 x rank, dtype
// tag u32 (1 = float32, 2 = float64), then the raw element bytes in
// little-endian row-major order. All integers are little-endian u32.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "fvit/errors.hpp"
#include "fvit/tensor.hpp"

namespace fvit {

constexpr uint32_t kTensorFormatVersion = 1;

enum class DType : uint32_t { f32 = 1, f64 = 2 };

template <typename Real>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::f32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::f64;
}

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is)
    throw FormatError(std::string("tensor read: truncated ") + what);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 |
         uint32_t(b[3]) << 24;
}

inline void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, uint32_t(v));
  write_u32(os, uint32_t(v >> 32));
}

inline uint64_t read_u64(std::istream& is, const char* what) {
  const uint64_t lo = read_u32(is, what);
  const uint64_t hi = read_u32(is, what);
  return lo | hi << 32;
}

}  // namespace detail

template <typename Real>
void write_tensor(std::ostream& os, const Tensor<Real>& t) {
  os.write("FTSR", 4);
  detail::write_u32(os, kTensorFormatVersion);
  detail::write_u32(os, uint32_t(t.rank()));
  for (size_t d : t.shape()) detail::write_u32(os, uint32_t(d));
  detail::write_u32(os, uint32_t(dtype_of<Real>()));
  // serialize portably regardless of host float layout assumptions
  static_assert(sizeof(Real) == 4 || sizeof(Real) == 8);
  for (Real v : t.data()) {
    if constexpr (sizeof(Real) == 4) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::write_u32(os, bits);
    } else {
      uint64_t bits;
      std::memcpy(&bits, &v, 8);
      detail::write_u64(os, bits);
    }
  }
  if (!os) throw FormatError("tensor write: stream failure");
}

template <typename Real>
Tensor<Real> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FTSR", 4) != 0)
    throw FormatError("tensor read: bad magic");
  const uint32_t version = detail::read_u32(is, "version");
  if (version != kTensorFormatVersion)
    throw FormatError("tensor read: unsupported version " +
                      std::to_string(version));
  const uint32_t rank = detail::read_u32(is, "rank");
  if (rank > 8) throw FormatError("tensor read: implausible rank " +
                                  std::to_string(rank));
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i)
    shape[i] = detail::read_u32(is, "dims");
  const uint32_t tag = detail::read_u32(is, "dtype");
  if (tag != uint32_t(dtype_of<Real>()))
    throw FormatError("tensor read: dtype tag " + std::to_string(tag) +
                      " does not match requested element type");
  std::vector<Real> data(numel(shape));
  for (Real& v : data) {
    if constexpr (sizeof(Real) == 4) {
      const uint32_t bits = detail::read_u32(is, "values");
      std::memcpy(&v, &bits, 4);
    } else {
      const uint64_t bits = detail::read_u64(is, "values");
      std::memcpy(&v, &bits, 8);
    }
  }
  return Tensor<Real>::from(shape, std::move(data));
}

}  // namespace fvit
