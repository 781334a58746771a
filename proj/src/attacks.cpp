#include "mrr/attacks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "mrr/error.hpp"

namespace mrr {
namespace {

constexpr std::size_t kChunk = 256;

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double parse_number(std::string_view key, std::string_view text) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw DataError("attack parameter " + std::string(key) + " is not a number: '" + std::string(text) + "'");
  }
  return v;
}

}  // namespace

void AttackConfig::validate() const {
  if (!(epsilon > 0.0)) throw DataError("attack epsilon must be positive");
  if (kind == AttackKind::BIM && n_iters < 1) throw DataError("BIM needs at least one iteration");
  if (step < 0.0) throw DataError("BIM step must be non-negative");
}

double AttackConfig::effective_step() const {
  if (kind == AttackKind::FGS) return epsilon;
  return step > 0.0 ? step : 2.5 * epsilon / static_cast<double>(n_iters);
}

std::string AttackConfig::describe() const {
  std::ostringstream s;
  if (kind == AttackKind::FGS) {
    s << "fgs:eps=" << epsilon;
  } else {
    s << "bim:eps=" << epsilon << ",iters=" << n_iters << ",step=" << effective_step();
  }
  return s.str();
}

AttackConfig parse_attack(std::string_view text) {
  AttackConfig cfg;
  const auto colon = text.find(':');
  const std::string_view kind = text.substr(0, colon);
  if (kind == "fgs") {
    cfg.kind = AttackKind::FGS;
  } else if (kind == "bim") {
    cfg.kind = AttackKind::BIM;
    cfg.n_iters = 10;
  } else {
    throw DataError("unknown attack kind '" + std::string(kind) + "' (expected fgs or bim)");
  }
  std::string_view rest = colon == std::string_view::npos ? std::string_view{} : text.substr(colon + 1);
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string_view item = rest.substr(0, comma);
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    const auto eq = item.find('=');
    if (eq == std::string_view::npos) throw DataError("attack parameter without value: '" + std::string(item) + "'");
    const std::string_view key = item.substr(0, eq), value = item.substr(eq + 1);
    const double v = parse_number(key, value);
    if (key == "eps") {
      cfg.epsilon = v;
    } else if (key == "iters" && cfg.kind == AttackKind::BIM) {
      if (v < 1 || v != std::floor(v)) throw DataError("iters must be a positive integer");
      cfg.n_iters = static_cast<std::size_t>(v);
    } else if (key == "step" && cfg.kind == AttackKind::BIM) {
      cfg.step = v;
    } else {
      throw DataError("unknown parameter '" + std::string(key) + "' for " + std::string(kind));
    }
  }
  cfg.validate();
  return cfg;
}

AttackConfig bim_from_step(double step, std::size_t n_iters) {
  AttackConfig cfg{AttackKind::BIM, step * static_cast<double>(n_iters), n_iters, step};
  cfg.validate();
  return cfg;
}

Tensor input_gradient(const Network& victim, const Tensor& x, std::span<const int> labels) {
  if (labels.size() != x.rows()) throw ShapeError("one label per attacked sample required");
  Tensor grad(x.shape);
  const std::size_t width = x.row_size();
  for (std::size_t first = 0; first < x.rows(); first += kChunk) {
    const std::size_t last = std::min(x.rows(), first + kChunk);
    const ForwardTrace trace = forward_trace(victim, slice_rows(x, first, last));
    const LossAndGrad ce = cross_entropy(trace.output(), labels.subspan(first, last - first));
    const Gradients g = backward(victim, trace, ce.grad);
    std::copy(g.input.data.begin(), g.input.data.end(), grad.data.begin() + first * width);
  }
  return grad;
}

Tensor fgs(const Network& victim, const Tensor& x, std::span<const int> labels, double epsilon) {
  const Tensor g = input_gradient(victim, x, labels);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i] + epsilon * sign(g[i]), 0.0, 1.0);
  return out;
}

Tensor bim(const Network& victim, const Tensor& x, std::span<const int> labels, double epsilon, std::size_t n_iters,
           double step) {
  Tensor out = x;
  for (std::size_t it = 0; it < n_iters; ++it) {
    const Tensor g = input_gradient(victim, out, labels);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double v = out[i] + step * sign(g[i]);
      out[i] = std::clamp(std::clamp(v, x[i] - epsilon, x[i] + epsilon), 0.0, 1.0);
    }
  }
  return out;
}

Tensor run_attack(const Network& victim, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.kind == AttackKind::FGS) return fgs(victim, x, labels, cfg.epsilon);
  return bim(victim, x, labels, cfg.epsilon, cfg.n_iters, cfg.effective_step());
}

Json attack_to_json(const AttackConfig& cfg) {
  Json j = {{"kind", cfg.kind == AttackKind::FGS ? "fgs" : "bim"}, {"epsilon", cfg.epsilon}};
  if (cfg.kind == AttackKind::BIM) {
    j["n_iters"] = cfg.n_iters;
    j["step"] = cfg.effective_step();
    j["budget_rule"] = "clip to epsilon-ball each iteration";
  }
  return j;
}

AttackConfig attack_from_json(const Json& j) {
  try {
    AttackConfig cfg;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "fgs") {
      cfg.kind = AttackKind::FGS;
    } else if (kind == "bim") {
      cfg.kind = AttackKind::BIM;
      cfg.n_iters = j.at("n_iters").get<std::size_t>();
      cfg.step = j.at("step").get<double>();
    } else {
      throw DataError("unknown attack kind '" + kind + "'");
    }
    cfg.epsilon = j.at("epsilon").get<double>();
    cfg.validate();
    return cfg;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed attack JSON: ") + e.what());
  }
}

}  // namespace mrr
