// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>

#include "mrr/arch.hpp"
#include "mrr/pipeline.hpp"
#include "mrr/planner.hpp"
#include "mrr/sparse.hpp"
#include "oracles.hpp"

using namespace mrr;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

int failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

void info(const std::string& text) {
  std::printf("    info: %s\n", text.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Eigen::MatrixXd unit_columns(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd D(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) D(i, j) = rng.normal();
    D.col(j).normalize();
  }
  return D;
}

Eigen::VectorXd random_vector(Eigen::Index n, Rng& rng) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

// --- 1 ---------------------------------------------------------------------

void gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    for (const auto& net : oracle::layer_zoo()) worst = std::max(worst, oracle::network_gradient_error(net, seed));
    worst = std::max(worst, oracle::cross_entropy_gradient_error(seed));
    const auto c = oracle::center_loss_gradient_error(seed);
    worst = std::max({worst, c.features, c.centers});
    worst = std::max(worst, oracle::composite_gradient_error(seed));
  }
  const double t = seconds_since(t0);
  verdict(1, worst <= 1e-4 && t < 60.0, fmt("worst relative error %.2e over 50 seeds, %.1f s", worst, t));
}

// --- 2 ---------------------------------------------------------------------

void omp_suite() {
  const auto t0 = Clock::now();
  Rng rng(1002);
  double worst = 0.0;
  for (int t = 0; t < 500; ++t) {
    const auto dim = static_cast<Eigen::Index>(2 + rng.below(7));
    const auto atoms = static_cast<Eigen::Index>(1 + rng.below(12));
    const std::size_t k = 1 + rng.below(2);
    const Eigen::MatrixXd D = unit_columns(dim, atoms, rng);
    const Eigen::VectorXd z = random_vector(dim, rng);
    const double r = omp(D, z, k, 1e-12).residual_norm;
    worst = std::max(worst, std::abs(r - oracle::brute_force_omp(D, z, k, 1e-12).residual_norm));
  }
  const double t = seconds_since(t0);
  verdict(2, worst <= 1e-6 && t < 60.0, fmt("max residual gap %.2e on 500 instances, %.2f s", worst, t));
}

// --- 3 ---------------------------------------------------------------------

void lasso_suite() {
  Rng rng(1003);
  double kkt = 0.0, gap = 0.0;
  for (int t = 0; t < 200; ++t) {
    const auto dim = static_cast<Eigen::Index>(2 + rng.below(7));
    const auto atoms = static_cast<Eigen::Index>(1 + rng.below(12));
    const Eigen::MatrixXd D = unit_columns(dim, atoms, rng);
    const Eigen::VectorXd z = random_vector(dim, rng);
    const double beta = rng.uniform(0.01, 1.0) * (D.transpose() * z).cwiseAbs().maxCoeff();
    const Eigen::VectorXd v = lars_lasso(D, z, beta);
    kkt = std::max(kkt, lasso_kkt_violation(D, z, v, beta));
    const Eigen::VectorXd ref = oracle::cd_lasso(D, z, beta);
    gap = std::max(gap, std::abs(lasso_objective(D, z, v, beta) - lasso_objective(D, z, ref, beta)));
  }
  verdict(3, kkt <= 1e-6 && gap <= 1e-6, fmt("max KKT violation %.2e, max objective gap %.2e", kkt, gap));
}

// --- 8 ---------------------------------------------------------------------

double fuse(const std::vector<bool>& flags, const std::vector<double>& p) {
  auto owned = std::make_unique<bool[]>(flags.size());
  std::copy(flags.begin(), flags.end(), owned.get());
  return noisy_or(std::span<const bool>(owned.get(), flags.size()), p);
}

void fusion_suite() {
  bool ok = fuse({false, false, false}, {0.9, 0.5, 0.3}) == 0.0;
  ok = ok && fuse({false, true, false}, {0.2, 1.0, 0.3}) == 1.0;
  ok = ok && std::abs(fuse({true, true}, {0.5, 0.5}) - 0.75) <= 1e-15;
  const bool examples = ok;
  Rng rng(1008);
  int bad = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(6);
    std::vector<bool> d(n);
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      d[i] = rng.below(2) == 1;
      p[i] = rng.uniform();
    }
    const double base = fuse(d, p);
    const std::size_t i = rng.below(n);
    std::vector<bool> up = d;
    up[i] = true;
    std::vector<double> q = p;
    q[i] = std::min(1.0, q[i] + 0.5 * rng.uniform());
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span(perm));
    std::vector<bool> dp(n);
    std::vector<double> pp(n);
    for (std::size_t j = 0; j < n; ++j) {
      dp[j] = d[perm[j]];
      pp[j] = p[perm[j]];
    }
    if (fuse(up, p) < base || fuse(d, q) < base || std::abs(fuse(dp, pp) - base) > 1e-12 || base < 0.0 || base > 1.0)
      ++bad;
  }
  verdict(8, examples && bad == 0, fmt("examples %s, %d of 1000 random cases violate a property",
                                       examples ? "exact" : "WRONG", bad));
}

// --- 9 ---------------------------------------------------------------------

ResourceBudget random_budget(Rng& rng, const DefenderCostProfile& p) {
  ResourceBudget b;
  b.dsp_per_pu = 1 + rng.below(8);
  b.dsp_per_pe = 1 + rng.below(3);
  b.dsp = rng.below(65) * b.dsp_per_pu + rng.below(b.dsp_per_pu);
  b.memory_words = omp_memory_words(p) + rng.below(70) * p.memory_per_pu() / 2;
  b.beta_cycles = rng.uniform(0.5, 2.0);
  b.clock_hz = 1e6;
  b.latency_s = rng.uniform(0.0, 0.02);
  return b;
}

std::optional<DefensePlan> try_plan(const ResourceBudget& b, const DefenderCostProfile& p) {
  try {
    return plan(b, p);
  } catch (const InfeasiblePlan&) {
    return std::nullopt;
  }
}

void planner_suite() {
  const DefenderCostProfile p = profile_costs(parse_arch("1x8x8-4C3-MP2-10FC"), {16, 20, 2, true});
  Rng rng(1009);
  int mismatch = 0, invalid = 0, feasible = 0;
  for (int t = 0; t < 200; ++t) {
    const ResourceBudget b = random_budget(rng, p);
    const auto got = try_plan(b, p);
    const auto ref = oracle::brute_force_plan(b, p, 64);
    if (got.has_value() != ref.has_value() || (got && !(*got == *ref))) ++mismatch;
    if (got) {
      ++feasible;
      if (!plan_violations(b, p, got->n_def, got->n_pu, got->layout).empty()) ++invalid;
    }
  }
  int regressions = 0;
  for (int t = 0; t < 100; ++t) {
    const ResourceBudget b = random_budget(rng, p);
    ResourceBudget big = b;
    switch (t % 3) {
      case 0: big.latency_s *= 1.0 + rng.uniform(); break;
      case 1: big.dsp += rng.below(64); break;
      default: big.memory_words += rng.below(10) * p.memory_per_pu(); break;
    }
    const auto small = try_plan(b, p), large = try_plan(big, p);
    if (small && (!large || large->n_def < small->n_def)) ++regressions;
  }
  verdict(9, mismatch == 0 && invalid == 0 && regressions == 0,
          fmt("%d oracle mismatches (%d feasible of 200), %d invalid plans, %d monotonicity regressions of 100",
              mismatch, feasible, invalid, regressions));
}

// --- 10 --------------------------------------------------------------------

void arithmetic_suite() {
  const auto mnist = profile_costs(parse_arch(arch::kMnist));
  const double cycles = omp_cost_cycles(64, 225, 8, 1.0);
  verdict(10, mnist.max_params == 400500 && cycles == 119296.0,
          fmt("max size(W) = %zu, OMP cycles = %.0f", mnist.max_params, cycles));
}

// --- 4, 5, 6, 7, 11 --------------------------------------------------------

std::size_t min_profile_count(const Pipeline& p, std::size_t d) {
  std::size_t m = SIZE_MAX;
  if (d < p.latent.size()) {
    for (const auto& c : p.latent[d].percentile_table) m = std::min(m, c.size());
  } else {
    for (const auto& dict : p.input->dictionaries) m = std::min(m, dict.psnr_percentiles.size());
  }
  return m;
}

void calibration_criterion(const Pipeline& p, const ScoreTable& profile, const ScoreTable& heldout) {
  const auto ids = p.defender_ids();
  const std::size_t n_latent = p.latent.size();
  bool ok = true;
  for (double sp : {1.0, 5.0, 10.0}) {
    const auto fp = defender_flags(p, profile, SecurityParameter(sp), n_latent);
    const auto fh = defender_flags(p, heldout, SecurityParameter(sp), n_latent);
    std::string line = fmt("SP %2.0f", sp);
    for (std::size_t d = 0; d < fp.size(); ++d) {
      const double tol = 1.0 / static_cast<double>(min_profile_count(p, d));
      const double rp = flag_rate(fp[d]), rh = flag_rate(fh[d]);
      const bool prof_ok = std::abs(rp - sp / 100.0) <= tol;
      const bool held_ok = rh * 100.0 >= 0.5 * sp && rh * 100.0 <= 3.5 * sp;
      ok = ok && prof_ok && held_ok;
      line += fmt("  %s profile %.4f (+-%.4f)%s held-out %.4f%s", ids[d].c_str(), rp, tol, prof_ok ? "" : "!", rh,
                  held_ok ? "" : "!");
    }
    info(line);
    std::string fused = fmt("SP %2.0f fused held-out FP:", sp);
    for (std::size_t n = 1; n <= n_latent; ++n)
      fused += fmt(" N=%zu %.4f", n, flag_rate(fused_rejections(p, heldout, SecurityParameter(sp), n)));
    info(fused);
  }
  verdict(4, ok, "per-defender profiling flag rate = SP/100 within 1/min class count; held-out FP within "
                 "[0.5 SP, 3.5 SP]% for SP in {1, 5, 10}");
}

void fp_growth_criterion(const Pipeline& p, const ScoreTable& heldout) {
  bool ok = true;
  std::string line;
  for (double sp : {1.0, 5.0, 10.0}) {
    double prev = -1.0;
    line += fmt(" SP %.0f:", sp);
    for (std::size_t n = 1; n <= p.latent.size(); ++n) {
      const double fp = flag_rate(fused_rejections(p, heldout, SecurityParameter(sp), n));
      ok = ok && fp >= prev;
      prev = fp;
      line += fmt(" %.4f", fp);
    }
  }
  verdict(7, ok, "fused held-out FP for N = 1.." + std::to_string(p.latent.size()) + line);
}

void serialization_criterion(const Pipeline& p, const Dataset& eval) {
  const fs::path dir = fs::temp_directory_path() / "mrr_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  bool bytes_ok = true;
  auto twice = [&](const fs::path& a, const fs::path& b, auto save_back) {
    save_back(b);
    const bool same = file_bytes(a) == file_bytes(b);
    if (!same) info("round trip changed " + a.filename().string());
    bytes_ok = bytes_ok && same;
  };

  PipelineManifest m;
  m.victim = dir / "victim.json";
  save_network(m.victim, p.victim);
  twice(m.victim, dir / "victim.2.json", [&](const fs::path& out) { save_network(out, load_network(m.victim)); });
  for (std::size_t d = 0; d < p.latent.size(); ++d) {
    const fs::path path = dir / fmt("latent%zu.json", d);
    save_latent_defender(path, p.latent[d]);
    m.defenders.push_back(path);
    twice(path, dir / fmt("latent%zu.2.json", d),
          [&](const fs::path& out) { save_latent_defender(out, load_latent_defender(path)); });
  }
  for (const auto& dict : p.input->dictionaries) {
    const fs::path path = dir / fmt("dict%d.json", dict.class_id);
    save_dictionary(path, dict, p.input->omp);
    m.dictionaries.push_back(path);
    twice(path, dir / fmt("dict%d.2.json", dict.class_id), [&](const fs::path& out) {
      OmpConfig omp;
      const Dictionary back = load_dictionary(path, &omp);
      save_dictionary(out, back, omp);
    });
  }
  m.fusion.defender_ids = p.defender_ids();
  m.fusion.reliabilities = p.fusion.reliabilities;
  m.fusion.calibration_attacks = {"fgs:eps=0.1", "bim:eps=0.1,iters=10"};
  m.sp = p.sp;
  m.seeds["split"] = 1;
  save_manifest(dir / "manifest.json", m);
  twice(dir / "manifest.json", dir / "manifest.2.json",
        [&](const fs::path& out) { save_manifest(out, load_manifest(dir / "manifest.json")); });

  const Pipeline back = load_pipeline(load_manifest(dir / "manifest.json"));
  std::vector<std::size_t> rows(std::min<std::size_t>(1000, eval.size()));
  std::iota(rows.begin(), rows.end(), 0);
  const Tensor images = subset(eval, rows).images;
  const auto before = detect_batch(p, images), after = detect_batch(back, images);
  std::size_t differ = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& a = before[i];
    const auto& b = after[i];
    if (a.predicted != b.predicted || a.flags != b.flags || a.probability != b.probability || a.alarm != b.alarm)
      ++differ;
  }
  fs::remove_all(dir);
  verdict(11, bytes_ok && differ == 0 && before.size() == 1000,
          fmt("artifacts byte-identical: %s, %zu of %zu verdicts differ after reload", bytes_ok ? "yes" : "no", differ,
              before.size()));
}

void desk_pipeline() {
  const auto t0 = Clock::now();
  const fs::path data = MRR_DATA_DIR;
  const Dataset all = load_idx(data / "mnist-desk-images.idx", data / "mnist-desk-labels.idx");
  const DeskSplit s = desk_split(all, {}, 1);
  info(fmt("desk split train %zu / profiling %zu / calibration %zu / eval %zu", s.train.size(), s.val.size(),
           s.calibration.size(), s.eval.size()));

  const Network victim = train_victim(std::string(arch::kMnist), s.train, {0.05, 32, 4, 1});
  info(fmt("victim accuracy on eval %.4f (%.0f s)", accuracy(victim, s.eval.images, s.eval.labels),
           seconds_since(t0)));

  LatentBuildConfig lc;
  lc.fine_tune.train.epochs = 3;
  std::vector<FineTuneReport> reports;
  Pipeline p;
  p.victim = victim;
  p.latent = train_latent_chain(victim, default_checkpoint(victim), s.train, s.val, 4, lc, &reports);
  for (std::size_t d = 0; d < reports.size(); ++d)
    info(fmt("latent%zu fine-tune: mean intra-class distance %.4f -> %.4f, PCA dim %zu", d,
             reports[d].intra_distance_before, reports[d].intra_distance_after, p.latent[d].pca.output_dim()));

  p.input = train_input_defender(victim, s.train, s.val, {}, {}, {}, 5.0);
  calibrate(p, s.calibration, {parse_attack("fgs:eps=0.1"), parse_attack("bim:eps=0.1,iters=10")},
            SecurityParameter(5));
  std::string rel = "reliabilities";
  for (double r : p.fusion.reliabilities) rel += fmt(" %.3f", r);
  info(rel + fmt(" (%.0f s)", seconds_since(t0)));

  const ScoreTable profile = compute_scores(p, s.val.images);
  const ScoreTable heldout = compute_scores(p, s.eval.images);
  calibration_criterion(p, profile, heldout);

  std::map<std::string, ScoreTable> adv;
  std::string det_line;
  std::vector<double> det;
  for (double eps : {0.01, 0.05, 0.1, 0.2}) {
    AttackConfig c;
    c.epsilon = eps;
    const AdversarialSet a = successful_adversarial(victim, s.eval, {c});
    const std::string name = fmt("fgs%.2f", eps);
    adv[name] = compute_scores(p, a.images);
    det.push_back(flag_rate(fused_rejections(p, adv[name], SecurityParameter(5), p.latent.size())));
    det_line += fmt(" eps %.2f: %.3f (n=%zu)", eps, det.back(), a.labels.size());
  }

  const EvalReport rep =
      evaluate(p, heldout, {{"fgs0.10", adv["fgs0.10"]}, {"fgs0.20", adv["fgs0.20"]}}, parse_sp_grid("0:100:5"),
               {1, 4});
  std::map<std::pair<std::string, std::size_t>, double> auc;
  for (const auto& r : rep.records) auc[{r.attack, r.n_def}] = r.auc;
  bool auc_ok = true;
  std::string auc_line;
  for (const std::string a : {"fgs0.10", "fgs0.20"}) {
    const double a1 = auc[{a, 1}], a4 = auc[{a, 4}];
    auc_ok = auc_ok && a4 >= a1 - 0.02 && a4 >= 0.85;
    auc_line += fmt(" %s AUC N=1 %.4f N=4 %.4f;", a.c_str(), a1, a4);
  }
  const double t = seconds_since(t0);
  verdict(5, auc_ok && t <= 1800.0, auc_line + fmt(" pipeline %.0f s", t));

  bool mono = true;
  for (std::size_t i = 1; i < det.size(); ++i) mono = mono && det[i] >= det[i - 1];
  verdict(6, mono && det.back() - det.front() >= 0.20, "SP 5 fused detection" + det_line);

  fp_growth_criterion(p, heldout);
  serialization_criterion(p, s.eval);
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  const std::pair<int, void (*)()> suites[] = {{1, gradient_suite}, {2, omp_suite},     {3, lasso_suite},
                                               {8, fusion_suite},   {9, planner_suite}, {10, arithmetic_suite}};
  for (const auto& [id, run] : suites) {
    try {
      run();
    } catch (const std::exception& e) {
      verdict(id, false, std::string("aborted: ") + e.what());
    }
  }
  try {
    desk_pipeline();
  } catch (const std::exception& e) {
    std::printf("desk pipeline aborted: %s\n", e.what());
    for (int id : {4, 5, 6, 7, 11}) verdict(id, false, "not evaluated");
  }
  std::printf("acceptance: %d failing criteria, %.0f s\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
