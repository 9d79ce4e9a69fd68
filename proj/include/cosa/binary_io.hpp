#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <type_traits>

namespace cosa::io {

template <std::size_t N>
using UintOf = std::conditional_t<
    N == 8, std::uint64_t,
    std::conditional_t<N == 4, std::uint32_t, std::conditional_t<N == 2, std::uint16_t, std::uint8_t>>>;

template <class T>
void put_le(std::string& out, T value) {
  using U = UintOf<sizeof(T)>;
  U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>(bits & 0xFF));
    if constexpr (sizeof(U) > 1) bits = static_cast<U>(bits >> 8);
  }
}

/// Throws DataError naming `what` when the buffer is exhausted.
template <class T>
T get_le(const std::string& buf, std::size_t& pos, const char* what);

/// Whole-file helpers; both throw DataError with the path on failure.
std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace cosa::io

#include "cosa/errors.hpp"

namespace cosa::io {

template <class T>
T get_le(const std::string& buf, std::size_t& pos, const char* what) {
  using U = UintOf<sizeof(T)>;
  if (pos + sizeof(U) > buf.size()) throw DataError(std::string(what) + ": truncated file");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(buf[pos + i])) << (8 * i));
  }
  pos += sizeof(U);
  return std::bit_cast<T>(bits);
}

}  // namespace cosa::io
