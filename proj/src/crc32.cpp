#include "cicada/crc32.hpp"

#include <zlib.h>

#include <algorithm>
#include <limits>

namespace cicada {

std::uint32_t crc32(std::span<const std::byte> data, std::uint32_t crc) noexcept {
  uLong c = crc;
  const auto* p = reinterpret_cast<const Bytef*>(data.data());
  std::size_t left = data.size();
  while (left > 0) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(left, std::numeric_limits<uInt>::max()));
    c = ::crc32(c, p, n);
    p += n;
    left -= n;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace cicada
