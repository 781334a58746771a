#pragma once

#include <span>
#include <string>
#include <string_view>

#include "mrr/model_io.hpp"
#include "mrr/network.hpp"

namespace mrr {

enum class AttackKind { FGS, BIM };

struct AttackConfig {
  AttackKind kind = AttackKind::FGS;
  double epsilon = 0.1;      // L-inf budget
  std::size_t n_iters = 1;   // BIM only
  double step = 0.0;         // BIM per-iteration size; 0 selects 2.5 * epsilon / n_iters

  void validate() const;
  double effective_step() const;
  std::string describe() const;
};

// "fgs:eps=0.1" or "bim:eps=0.01,iters=10[,step=0.0025]".
AttackConfig parse_attack(std::string_view text);

// A BIM grid entry given as (per-iteration size, iterations): budget = iters * size.
AttackConfig bim_from_step(double step, std::size_t n_iters);

// d mean-CE / dx for a batch.
Tensor input_gradient(const Network& victim, const Tensor& x, std::span<const int> labels);

Tensor fgs(const Network& victim, const Tensor& x, std::span<const int> labels, double epsilon);
Tensor bim(const Network& victim, const Tensor& x, std::span<const int> labels, double epsilon, std::size_t n_iters,
           double step);
Tensor run_attack(const Network& victim, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg);

Json attack_to_json(const AttackConfig& cfg);
AttackConfig attack_from_json(const Json& j);

}  // namespace mrr
