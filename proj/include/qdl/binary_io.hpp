#pragma once

// Little-endian primitives shared by the EMBD and PRMS formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "qdl/error.hpp"

namespace qdl::binary {

namespace detail {

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::little) {
    return value;
  } else {
    std::array<unsigned char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
  }
}

}  // namespace detail

template <typename T>
void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  value = detail::to_little(value);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

// Returns false on short read; the caller decides what "truncated" means.
template <typename T>
bool get(std::istream& is, T& value) {
  static_assert(std::is_trivially_copyable_v<T>);
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) return false;
  value = detail::to_little(value);
  return true;
}

inline void put_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline bool get_magic(std::istream& is, std::string& magic) {
  magic.assign(4, '\0');
  return static_cast<bool>(is.read(magic.data(), 4));
}

}  // namespace qdl::binary
