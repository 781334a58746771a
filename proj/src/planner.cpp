#include "mrr/planner.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <variant>

#include "mrr/error.hpp"

namespace mrr {

void ResourceBudget::validate() const {
  if (!(latency_s > 0.0)) throw DataError("latency budget must be positive");
  if (dsp_per_pu == 0) throw DataError("dsp_per_pu must be positive");
  if (dsp_per_pe == 0) throw DataError("dsp_per_pe must be positive");
  if (!(beta_cycles > 0.0)) throw DataError("beta_cycles must be positive");
  if (!(clock_hz > 0.0)) throw DataError("clock_hz must be positive");
}

DefenderCostProfile profile_costs(const ArchSpec& spec, const OmpParams& omp) {
  const auto shapes = token_shapes(spec);
  DefenderCostProfile p;
  p.omp = omp;
  for (const auto& s : shapes) p.activations.push_back(shape_size(s));
  for (std::size_t i = 0; i < spec.tokens.size(); ++i) {
    const Shape& in = shapes[i];
    const Shape& out = shapes[i + 1];
    std::size_t params = 0, macs = 0;
    if (const auto* c = std::get_if<ConvToken>(&spec.tokens[i])) {
      const std::size_t taps = in[0] * c->kernel * c->kernel;
      params = c->channels * taps + c->channels;
      macs = shape_size(out) * taps;
    } else if (const auto* f = std::get_if<FCToken>(&spec.tokens[i])) {
      params = shape_size(in) * f->units + f->units;
      macs = shape_size(in) * f->units;
    }
    p.layer_params.push_back(params);
    p.layer_macs.push_back(macs);
    p.total_macs += macs;
    p.max_params = std::max(p.max_params, params);
  }
  for (std::size_t i = 0; i + 1 < p.activations.size(); ++i) {
    p.max_activation_pair = std::max(p.max_activation_pair, p.activations[i] + p.activations[i + 1]);
  }
  p.num_classes = p.activations.back();
  return p;
}

double omp_cost_cycles(std::size_t n, std::size_t l, std::size_t k, double beta_cycles) {
  const auto dn = static_cast<double>(n), dl = static_cast<double>(l), dk = static_cast<double>(k);
  return beta_cycles * dn * (dk * dl + dk * dk);
}

double omp_cost(std::size_t n, std::size_t l, std::size_t k, double beta_cycles, double clock_hz) {
  return omp_cost_cycles(n, l, k, beta_cycles) / clock_hz;
}

std::size_t omp_memory_words(const DefenderCostProfile& p) {
  return p.omp.enabled ? p.omp.n * p.omp.l * p.num_classes : 0;
}

std::string to_string(Layout layout) { return layout == Layout::Parallel ? "parallel" : "sequential"; }

std::string to_string(Binding b) {
  switch (b) {
    case Binding::Dsp: return "dsp";
    case Binding::Memory: return "memory";
    case Binding::Latency: return "latency";
  }
  return "?";
}

std::size_t processing_elements(const ResourceBudget& budget) { return budget.dsp_per_pu / budget.dsp_per_pe; }

double dnn_latency(const DefenderCostProfile& profile, std::size_t n_pu, std::size_t n_pe, Layout layout,
                   std::size_t n_def, double clock_hz, double beta_cycles) {
  if (n_pu == 0 || n_pe == 0) throw DataError("latency model needs at least one PU and one PE");
  const double one = beta_cycles * static_cast<double>(profile.total_macs) /
                     (static_cast<double>(n_pu) * static_cast<double>(n_pe) * clock_hz);
  return layout == Layout::Sequential ? one * static_cast<double>(n_def) : one;
}

namespace {

double omp_latency(const DefenderCostProfile& p, const ResourceBudget& b) {
  return p.omp.enabled ? omp_cost(p.omp.n, p.omp.l, p.omp.k, b.beta_cycles, b.clock_hz) : 0.0;
}

}  // namespace

double latency_model(const DefenderCostProfile& profile, std::size_t n_pu, std::size_t n_pe, Layout layout,
                     std::size_t n_def, double clock_hz, double beta_cycles) {
  const double omp = profile.omp.enabled ? omp_cost(profile.omp.n, profile.omp.l, profile.omp.k, beta_cycles, clock_hz)
                                         : 0.0;
  return dnn_latency(profile, n_pu, n_pe, layout, n_def, clock_hz, beta_cycles) + omp;
}

std::vector<std::string> plan_violations(const ResourceBudget& b, const DefenderCostProfile& p, std::size_t n_def,
                                         std::size_t n_pu, Layout layout) {
  std::vector<std::string> out;
  const std::size_t n_pe = processing_elements(b);
  if (n_def == 0 || n_pu == 0 || n_pe == 0) {
    out.emplace_back("dsp");
    return out;
  }
  if (n_def * n_pu * b.dsp_per_pu > b.dsp) out.emplace_back("dsp");
  const double mem_budget = static_cast<double>(b.memory_words) - static_cast<double>(omp_memory_words(p));
  if (static_cast<double>(n_pu * p.memory_per_pu()) > mem_budget) out.emplace_back("memory");
  const double time_budget = b.latency_s - omp_latency(p, b);
  if (dnn_latency(p, n_pu, n_pe, layout, n_def, b.clock_hz, b.beta_cycles) > time_budget) out.emplace_back("latency");
  return out;
}

DefensePlan make_plan(const ResourceBudget& b, const DefenderCostProfile& p, std::size_t n_def, std::size_t n_pu,
                      Layout layout) {
  DefensePlan plan;
  plan.n_def = n_def;
  plan.n_pu = n_pu;
  plan.n_pe = processing_elements(b);
  plan.layout = layout;
  plan.omp_latency_s = omp_latency(p, b);
  plan.latency_s = dnn_latency(p, n_pu, plan.n_pe, layout, n_def, b.clock_hz, b.beta_cycles) + plan.omp_latency_s;
  plan.dsp_used = n_def * n_pu * b.dsp_per_pu;
  plan.omp_memory = omp_memory_words(p);
  plan.memory_used = n_pu * p.memory_per_pu() + plan.omp_memory;
  return plan;
}

DefensePlan plan(const ResourceBudget& b, const DefenderCostProfile& p) {
  b.validate();
  const std::size_t n_pe = processing_elements(b);
  const std::size_t max_pu = b.dsp / b.dsp_per_pu;
  if (n_pe == 0 || max_pu == 0) {
    throw InfeasiblePlan(Binding::Dsp, "DSP budget " + std::to_string(b.dsp) + " cannot host one processing unit of " +
                                           std::to_string(b.dsp_per_pu) + " DSPs");
  }
  const double mem_budget = static_cast<double>(b.memory_words) - static_cast<double>(omp_memory_words(p));
  const double time_budget = b.latency_s - omp_latency(p, b);
  if (mem_budget < static_cast<double>(p.memory_per_pu())) {
    throw InfeasiblePlan(Binding::Memory, "memory budget " + std::to_string(b.memory_words) +
                                              " words cannot hold one processing unit (" +
                                              std::to_string(p.memory_per_pu()) + " words) plus the OMP dictionaries (" +
                                              std::to_string(omp_memory_words(p)) + " words)");
  }

  std::optional<DefensePlan> best;
  auto better = [](const DefensePlan& a, const DefensePlan& cur) {
    if (a.n_def != cur.n_def) return a.n_def > cur.n_def;
    if (a.n_pu != cur.n_pu) return a.n_pu > cur.n_pu;
    return a.layout == Layout::Parallel && cur.layout == Layout::Sequential;
  };
  for (std::size_t n_pu = 1; n_pu <= max_pu; ++n_pu) {
    if (static_cast<double>(n_pu * p.memory_per_pu()) > mem_budget) break;  // grows with N_PU
    const std::size_t dsp_cap = b.dsp / (n_pu * b.dsp_per_pu);
    const double t1 = dnn_latency(p, n_pu, n_pe, Layout::Parallel, 1, b.clock_hz, b.beta_cycles);
    for (Layout layout : {Layout::Sequential, Layout::Parallel}) {
      std::size_t n_def = dsp_cap;
      if (layout == Layout::Parallel) {
        if (t1 > time_budget) n_def = 0;
      } else if (t1 > 0.0) {
        const double by_time = std::floor(time_budget / t1);
        n_def = by_time <= 0.0 ? 0 : std::min<std::size_t>(dsp_cap, static_cast<std::size_t>(by_time));
      }
      // Floating-point guard around the closed form.
      while (n_def > 0 && !plan_violations(b, p, n_def, n_pu, layout).empty()) --n_def;
      while (n_def < dsp_cap && plan_violations(b, p, n_def + 1, n_pu, layout).empty()) ++n_def;
      if (n_def == 0) continue;
      const DefensePlan cand = make_plan(b, p, n_def, n_pu, layout);
      if (!best || better(cand, *best)) best = cand;
    }
  }
  if (!best) {
    std::ostringstream msg;
    msg << "latency budget " << b.latency_s << " s cannot fit one defender (OMP alone takes " << omp_latency(p, b)
        << " s)";
    throw InfeasiblePlan(Binding::Latency, msg.str());
  }
  return *best;
}

ResourceBudget budget_from_json(const Json& j, OmpParams* omp) {
  try {
    ResourceBudget b;
    b.latency_s = j.at("T_u").get<double>();
    b.dsp = j.at("R_u").get<std::size_t>();
    b.memory_words = j.at("M_u").get<std::size_t>();
    b.dsp_per_pu = j.at("dsp_per_pu").get<std::size_t>();
    b.beta_cycles = j.value("beta_cycles", 1.0);
    b.clock_hz = j.at("clock_hz").get<double>();
    b.dsp_per_pe = j.value("dsp_per_pe", std::size_t{1});
    if (omp) {
      *omp = OmpParams{};
      if (j.contains("omp")) {
        const Json& o = j.at("omp");
        omp->n = o.value("n", omp->n);
        omp->l = o.value("l", omp->l);
        omp->k = o.value("k", omp->k);
        omp->enabled = o.value("enabled", true);
      }
    }
    b.validate();
    return b;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed budget JSON: ") + e.what());
  }
}

Json budget_to_json(const ResourceBudget& b, const OmpParams& omp) {
  return {{"T_u", b.latency_s},
          {"R_u", b.dsp},
          {"M_u", b.memory_words},
          {"dsp_per_pu", b.dsp_per_pu},
          {"beta_cycles", b.beta_cycles},
          {"clock_hz", b.clock_hz},
          {"dsp_per_pe", b.dsp_per_pe},
          {"omp", {{"n", omp.n}, {"l", omp.l}, {"k", omp.k}, {"enabled", omp.enabled}}}};
}

Json plan_to_json(const DefensePlan& p) {
  return {{"n_def", p.n_def},
          {"n_pu", p.n_pu},
          {"n_pe", p.n_pe},
          {"layout", to_string(p.layout)},
          {"latency_s", p.latency_s},
          {"omp_latency_s", p.omp_latency_s},
          {"dsp_used", p.dsp_used},
          {"memory_used", p.memory_used},
          {"omp_memory", p.omp_memory}};
}

std::string plan_table(const DefensePlan& p, const ResourceBudget& b) {
  std::ostringstream s;
  s << std::left << std::setw(12) << "N_def" << p.n_def << "\n"
    << std::setw(12) << "N_PU" << p.n_pu << "\n"
    << std::setw(12) << "N_PE" << p.n_pe << "\n"
    << std::setw(12) << "layout" << to_string(p.layout) << "\n"
    << std::setw(12) << "latency" << p.latency_s << " s of " << b.latency_s << " s (OMP " << p.omp_latency_s
    << " s)\n"
    << std::setw(12) << "DSP" << p.dsp_used << " of " << b.dsp << "\n"
    << std::setw(12) << "memory" << p.memory_used << " of " << b.memory_words << " words\n";
  return s.str();
}

}  // namespace mrr
