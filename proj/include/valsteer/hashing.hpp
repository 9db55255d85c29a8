#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace valsteer {

std::string sha256_hex(std::string_view bytes);
std::uint32_t crc32(std::span<const unsigned char> bytes);

std::string base64_encode(std::span<const unsigned char> bytes);
/// Throws Error(ParseError) on malformed input.
std::vector<unsigned char> base64_decode(std::string_view text);

/// Little-endian f32 array <-> base64.
std::string encode_f32(std::span<const float> values);
std::vector<float> decode_f32(std::string_view text);

}  // namespace valsteer
