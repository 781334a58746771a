#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mrr/fusion.hpp"
#include "mrr/input_defender.hpp"
#include "mrr/latent_defender.hpp"
#include "mrr/network.hpp"

namespace mrr {

// Victim plus its defenders. Fusion order: latent defenders first, then the input defender.
struct Pipeline {
  Network victim;
  std::vector<LatentDefender> latent;
  std::optional<InputDefender> input;
  FusionModel fusion;
  double sp = 5.0;

  std::size_t num_defenders() const { return latent.size() + (input ? 1 : 0); }
  std::vector<std::string> defender_ids() const;
};

// Raw per-defender scores; thresholds are applied later so SP sweeps need no recomputation.
struct ScoreTable {
  std::vector<int> predicted;
  std::vector<std::vector<double>> latent_distance;  // [defender][sample]
  std::vector<double> psnr;                          // empty without an input defender

  std::size_t size() const { return predicted.size(); }
};

ScoreTable compute_scores(const Pipeline& p, const Tensor& images);
ScoreTable subset(const ScoreTable& s, std::span<const std::size_t> indices);

// flags[d][i] for the first `n_latent` latent defenders and (if present) the input defender.
std::vector<std::vector<bool>> defender_flags(const Pipeline& p, const ScoreTable& s, SecurityParameter sp,
                                              std::size_t n_latent);
std::vector<double> fused_probability(const Pipeline& p, const ScoreTable& s, SecurityParameter sp,
                                      std::size_t n_latent);
std::vector<bool> fused_rejections(const Pipeline& p, const ScoreTable& s, SecurityParameter sp, std::size_t n_latent);

struct Verdict {
  int predicted = 0;
  std::vector<bool> flags;
  double probability = 0.0;
  Alarm alarm = Alarm::Accept;
};

std::vector<Verdict> detect_batch(const Pipeline& p, const Tensor& images);
std::vector<Verdict> verdicts_from_scores(const Pipeline& p, const ScoreTable& s, SecurityParameter sp);

double flag_rate(const std::vector<bool>& flags);

// Per-defender reliabilities from calibration scores at the given SP.
std::vector<double> calibrate_reliabilities(const Pipeline& p, const ScoreTable& benign, const ScoreTable& adversarial,
                                            SecurityParameter sp);

// Indices whose clean prediction was right and whose adversarial prediction is wrong.
std::vector<std::size_t> successful_attacks(std::span<const int> clean_predicted, std::span<const int> adv_predicted,
                                            std::span<const int> labels);

struct RocPoint {
  double sp = 0.0;
  double fp_rate = 0.0;
  double tp_rate = 0.0;
};

// Adds the (0,0) and (1,1) endpoints and orders by (fp, tp).
std::vector<RocPoint> roc_with_endpoints(std::vector<RocPoint> points);
// Trapezoid rule; points must be sorted by fp then tp.
double auc(const std::vector<RocPoint>& points);

std::vector<double> parse_sp_grid(const std::string& text);  // "0:100:5" or "1,5,10"

struct EvalRecord {
  std::string attack;
  std::size_t n_def = 0;  // latent defenders in the fused pipeline
  std::vector<RocPoint> roc;
  double auc = 0.0;
};

struct EvalReport {
  std::vector<EvalRecord> records;
  Json metadata;
};

EvalReport evaluate(const Pipeline& p, const ScoreTable& benign, const std::map<std::string, ScoreTable>& adversarial,
                    const std::vector<double>& sp_grid, const std::vector<std::size_t>& n_def_values);

void write_report(const EvalReport& report, const std::filesystem::path& out_dir);

}  // namespace mrr
