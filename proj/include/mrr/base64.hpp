#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mrr::base64 {

std::string encode(std::span<const unsigned char> bytes);
std::vector<unsigned char> decode(std::string_view text);

// float64 arrays are stored as little-endian IEEE-754 bytes.
std::string encode_doubles(std::span<const double> values);
std::vector<double> decode_doubles(std::string_view text);

}  // namespace mrr::base64
