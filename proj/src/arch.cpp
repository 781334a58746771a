#include "mrr/arch.hpp"

#include <cctype>
#include <charconv>
#include <sstream>

#include "mrr/error.hpp"

namespace mrr {
namespace {

std::vector<std::string_view> split_dashes(std::string_view text) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t dash = text.find('-', start);
    parts.push_back(text.substr(start, dash == std::string_view::npos ? std::string_view::npos : dash - start));
    if (dash == std::string_view::npos) break;
    start = dash + 1;
  }
  return parts;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool parse_count(std::string_view s, std::size_t& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && out > 0;
}

ArchToken parse_token(std::string_view tok, std::size_t position) {
  std::size_t a = 0, b = 0;
  if (tok == "GAP") return GAPToken{};
  if (tok.starts_with("MP") && parse_count(tok.substr(2), a)) return PoolToken{a};
  if (tok.ends_with("FC") && parse_count(tok.substr(0, tok.size() - 2), a)) return FCToken{a};
  if (const auto c = tok.find('C'); c != std::string_view::npos && parse_count(tok.substr(0, c), a) &&
                                    parse_count(tok.substr(c + 1), b)) {
    return ConvToken{a, b};
  }
  throw ArchParseError(position, "unknown token '" + std::string(tok) + "'");
}

bool parse_shape(std::string_view tok, Shape& out) {
  out.clear();
  std::size_t start = 0;
  while (true) {
    const std::size_t x = tok.find('x', start);
    std::size_t v = 0;
    if (!parse_count(tok.substr(start, x == std::string_view::npos ? std::string_view::npos : x - start), v)) {
      return false;
    }
    out.push_back(v);
    if (x == std::string_view::npos) break;
    start = x + 1;
  }
  return out.size() == 3;
}

ArchSpec parse_tokens(const std::vector<std::string_view>& parts, std::size_t first, Shape input_shape) {
  ArchSpec spec{std::move(input_shape), {}};
  for (std::size_t i = first; i < parts.size(); ++i) {
    spec.tokens.push_back(parse_token(trim(parts[i]), i));
  }
  if (spec.tokens.empty()) throw ArchParseError(parts.size(), "no layer tokens");
  if (!std::holds_alternative<FCToken>(spec.tokens.back())) {
    throw ArchParseError(parts.size() - 1, "last token must be an FC classifier head");
  }
  // Shape-check with token positions relative to the original text.
  try {
    token_shapes(spec);
  } catch (const ArchParseError& e) {
    throw ArchParseError(e.position() + first, e.what());
  }
  return spec;
}

}  // namespace

ArchParseError::ArchParseError(std::size_t position, const std::string& message)
    : std::invalid_argument("token " + std::to_string(position) + ": " + message), position_(position) {}

ArchSpec parse_arch(std::string_view text) {
  text = trim(text);
  if (text.starts_with("(input)")) text = trim(text.substr(7));
  const auto parts = split_dashes(text);
  Shape input;
  if (!parse_shape(trim(parts[0]), input)) {
    throw ArchParseError(0, "expected an input shape CxHxW, got '" + std::string(parts[0]) + "'");
  }
  return parse_tokens(parts, 1, std::move(input));
}

ArchSpec parse_arch(std::string_view text, const Shape& input_shape) {
  if (input_shape.size() != 3) throw ArchParseError(0, "input shape must be (channels, height, width)");
  return parse_tokens(split_dashes(trim(text)), 0, input_shape);
}

std::string render(const ArchSpec& spec) {
  std::ostringstream out;
  out << spec.input_shape.at(0) << 'x' << spec.input_shape.at(1) << 'x' << spec.input_shape.at(2);
  for (const auto& tok : spec.tokens) {
    out << '-';
    std::visit(
        [&](const auto& t) {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, ConvToken>) out << t.channels << 'C' << t.kernel;
          if constexpr (std::is_same_v<T, PoolToken>) out << "MP" << t.window;
          if constexpr (std::is_same_v<T, FCToken>) out << t.units << "FC";
          if constexpr (std::is_same_v<T, GAPToken>) out << "GAP";
        },
        tok);
  }
  return out.str();
}

std::vector<Shape> token_shapes(const ArchSpec& spec) {
  std::vector<Shape> shapes{spec.input_shape};
  for (std::size_t i = 0; i < spec.tokens.size(); ++i) {
    const Shape& in = shapes.back();
    const bool spatial = in.size() == 3;
    Shape out = std::visit(
        [&](const auto& t) -> Shape {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, ConvToken>) {
            if (!spatial) throw ArchParseError(i, "convolution after a flattened layer");
            if (in[1] < t.kernel || in[2] < t.kernel) throw ArchParseError(i, "kernel larger than feature map");
            return {t.channels, in[1] - t.kernel + 1, in[2] - t.kernel + 1};
          } else if constexpr (std::is_same_v<T, PoolToken>) {
            if (!spatial) throw ArchParseError(i, "pooling after a flattened layer");
            if (in[1] < t.window || in[2] < t.window) throw ArchParseError(i, "pool window larger than feature map");
            return {in[0], in[1] / t.window, in[2] / t.window};
          } else if constexpr (std::is_same_v<T, GAPToken>) {
            if (!spatial) throw ArchParseError(i, "global average pooling after a flattened layer");
            return {in[0]};
          } else {
            return {t.units};
          }
        },
        spec.tokens[i]);
    shapes.push_back(std::move(out));
  }
  return shapes;
}

Network realize(const ArchSpec& spec, std::uint64_t seed) {
  const auto shapes = token_shapes(spec);
  Network net;
  net.input_shape = spec.input_shape;
  for (std::size_t i = 0; i < spec.tokens.size(); ++i) {
    const bool last = i + 1 == spec.tokens.size();
    const Shape& in = shapes[i];
    std::visit(
        [&](const auto& t) {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, ConvToken>) {
            net.layers.push_back(Layer::conv2d(in[0], t.channels, t.kernel));
            net.layers.push_back(Layer::relu());
          } else if constexpr (std::is_same_v<T, PoolToken>) {
            net.layers.push_back(Layer::max_pool(t.window));
          } else if constexpr (std::is_same_v<T, GAPToken>) {
            net.layers.push_back(Layer::global_avg_pool());
          } else {
            net.layers.push_back(Layer::dense(shape_size(in), t.units));
            if (!last) net.layers.push_back(Layer::relu());
          }
        },
        spec.tokens[i]);
  }
  initialize(net, seed);
  return net;
}

}  // namespace mrr
