#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mrr/network.hpp"

namespace mrr {

struct ConvToken {
  std::size_t channels;
  std::size_t kernel;
  friend bool operator==(const ConvToken&, const ConvToken&) = default;
};
struct PoolToken {
  std::size_t window;
  friend bool operator==(const PoolToken&, const PoolToken&) = default;
};
struct FCToken {
  std::size_t units;
  friend bool operator==(const FCToken&, const FCToken&) = default;
};
struct GAPToken {
  friend bool operator==(const GAPToken&, const GAPToken&) = default;
};

using ArchToken = std::variant<ConvToken, PoolToken, FCToken, GAPToken>;

// Architecture in the compact dash notation, e.g. "1x28x28-20C5-MP2-50C5-MP2-500FC-10FC".
struct ArchSpec {
  Shape input_shape;  // (channels, height, width)
  std::vector<ArchToken> tokens;
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

class ArchParseError : public std::invalid_argument {
 public:
  ArchParseError(std::size_t position, const std::string& message);
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

// Parses text with a leading "CxHxW" (optionally "(input) CxHxW") shape token.
ArchSpec parse_arch(std::string_view text);
// Parses tokens only, for an input shape supplied separately.
ArchSpec parse_arch(std::string_view text, const Shape& input_shape);

std::string render(const ArchSpec& spec);

// Per-token shapes: element 0 is the input, element i+1 the output of token i.
std::vector<Shape> token_shapes(const ArchSpec& spec);

// Realized network: every hidden Conv/FC is followed by ReLU, the last FC emits logits.
Network realize(const ArchSpec& spec, std::uint64_t seed);

namespace arch {
inline constexpr std::string_view kMnist = "1x28x28-20C5-MP2-50C5-MP2-500FC-10FC";
inline constexpr std::string_view kSvhn = "3x32x32-20C5-MP2-50C5-MP2-1000FC-500FC-10FC";
inline constexpr std::string_view kCifar10 =
    "3x32x32-96C3-96C3-96C3-MP2-192C3-192C3-192C3-MP2-192C3-192C1-10C1-GAP-10FC";
}  // namespace arch

}  // namespace mrr
