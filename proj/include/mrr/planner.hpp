#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrr/arch.hpp"
#include "mrr/model_io.hpp"

namespace mrr {

// Input-defender OMP sizes: signal length n, dictionary atoms l, sparsity k.
struct OmpParams {
  std::size_t n = 64;
  std::size_t l = 225;
  std::size_t k = 8;
  bool enabled = true;
};

struct ResourceBudget {
  double latency_s = 0.0;         // T_u, seconds per sample
  std::size_t dsp = 0;            // R_u
  std::size_t memory_words = 0;   // M_u
  std::size_t dsp_per_pu = 1;
  double beta_cycles = 1.0;       // cycles per MAC
  double clock_hz = 1.0;
  std::size_t dsp_per_pe = 1;

  void validate() const;
};

struct DefenderCostProfile {
  std::vector<std::size_t> layer_params;  // size(W^i) per token, bias included
  std::vector<std::size_t> layer_macs;
  std::vector<std::size_t> activations;   // |X^i|, element 0 is the input
  std::size_t total_macs = 0;
  std::size_t max_params = 0;             // max_i size(W^i)
  std::size_t max_activation_pair = 0;    // max_i |X^i| + |X^{i+1}|
  std::size_t num_classes = 0;
  OmpParams omp;

  std::size_t memory_per_pu() const { return max_params + max_activation_pair; }
};

DefenderCostProfile profile_costs(const ArchSpec& spec, const OmpParams& omp = {});

double omp_cost_cycles(std::size_t n, std::size_t l, std::size_t k, double beta_cycles);
double omp_cost(std::size_t n, std::size_t l, std::size_t k, double beta_cycles, double clock_hz);
// Dictionary storage for every class.
std::size_t omp_memory_words(const DefenderCostProfile& profile);

enum class Layout { Sequential, Parallel };
std::string to_string(Layout layout);

std::size_t processing_elements(const ResourceBudget& budget);

// DNN part only: beta * MACs / (N_PU * N_PE * clock), times N_def when sequential.
double dnn_latency(const DefenderCostProfile& profile, std::size_t n_pu, std::size_t n_pe, Layout layout,
                   std::size_t n_def, double clock_hz, double beta_cycles);
// DNN part plus the fixed OMP term.
double latency_model(const DefenderCostProfile& profile, std::size_t n_pu, std::size_t n_pe, Layout layout,
                     std::size_t n_def, double clock_hz, double beta_cycles);

struct DefensePlan {
  std::size_t n_def = 0;
  std::size_t n_pu = 0;
  std::size_t n_pe = 0;
  Layout layout = Layout::Parallel;
  double latency_s = 0.0;  // T_def_max including OMP
  double omp_latency_s = 0.0;
  std::size_t dsp_used = 0;
  std::size_t memory_used = 0;  // words, OMP dictionaries included
  std::size_t omp_memory = 0;

  friend bool operator==(const DefensePlan&, const DefensePlan&) = default;
};

enum class Binding { Dsp, Memory, Latency };
std::string to_string(Binding b);

class InfeasiblePlan : public std::runtime_error {
 public:
  InfeasiblePlan(Binding binding, const std::string& message) : std::runtime_error(message), binding_(binding) {}
  Binding binding() const { return binding_; }

 private:
  Binding binding_;
};

// Names of the resource constraints a candidate violates; empty when it is feasible.
std::vector<std::string> plan_violations(const ResourceBudget& budget, const DefenderCostProfile& profile,
                                         std::size_t n_def, std::size_t n_pu, Layout layout);

DefensePlan make_plan(const ResourceBudget& budget, const DefenderCostProfile& profile, std::size_t n_def,
                      std::size_t n_pu, Layout layout);

// Most defenders that fit; ties go to more PUs, then to the parallel layout. Throws InfeasiblePlan.
DefensePlan plan(const ResourceBudget& budget, const DefenderCostProfile& profile);

ResourceBudget budget_from_json(const Json& j, OmpParams* omp = nullptr);
Json budget_to_json(const ResourceBudget& b, const OmpParams& omp);
Json plan_to_json(const DefensePlan& p);
std::string plan_table(const DefensePlan& p, const ResourceBudget& budget);

}  // namespace mrr
