#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace cicada {

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320), as used by zlib.
std::uint32_t crc32(std::span<const std::byte> data, std::uint32_t crc = 0) noexcept;

}  // namespace cicada
