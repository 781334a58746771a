#include "mrr/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

#include "mrr/error.hpp"

namespace mrr {

std::vector<std::string> Pipeline::defender_ids() const {
  std::vector<std::string> ids;
  for (std::size_t n = 0; n < latent.size(); ++n) ids.push_back("latent-" + std::to_string(n + 1));
  if (input) ids.emplace_back("input");
  return ids;
}

ScoreTable compute_scores(const Pipeline& p, const Tensor& images) {
  ScoreTable s;
  s.predicted = predict(p.victim, images);
  for (const auto& d : p.latent) s.latent_distance.push_back(latent_distances(d, images, s.predicted));
  if (p.input) s.psnr = input_psnr(*p.input, images, s.predicted);
  return s;
}

ScoreTable subset(const ScoreTable& s, std::span<const std::size_t> indices) {
  ScoreTable out;
  out.latent_distance.resize(s.latent_distance.size());
  for (std::size_t i : indices) {
    out.predicted.push_back(s.predicted.at(i));
    for (std::size_t d = 0; d < s.latent_distance.size(); ++d) out.latent_distance[d].push_back(s.latent_distance[d][i]);
    if (!s.psnr.empty()) out.psnr.push_back(s.psnr[i]);
  }
  return out;
}

std::vector<std::vector<bool>> defender_flags(const Pipeline& p, const ScoreTable& s, SecurityParameter sp,
                                              std::size_t n_latent) {
  if (n_latent > p.latent.size() || n_latent > s.latent_distance.size()) {
    throw DataError("requested " + std::to_string(n_latent) + " latent defenders, pipeline has " +
                    std::to_string(p.latent.size()));
  }
  std::vector<std::vector<bool>> flags;
  for (std::size_t d = 0; d < n_latent; ++d) {
    const auto thr = thresholds_for_sp(p.latent[d].percentile_table, sp);
    std::vector<bool> f(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) f[i] = latent_flag(s.latent_distance[d][i], thr[s.predicted[i]], sp);
    flags.push_back(std::move(f));
  }
  if (p.input) {
    if (s.psnr.size() != s.size()) throw DataError("score table lacks input-defender PSNRs");
    std::vector<double> thr;
    for (const auto& dict : p.input->dictionaries) thr.push_back(threshold_for_sp(dict.psnr_percentiles, sp));
    std::vector<bool> f(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) f[i] = input_flag(s.psnr[i], thr[s.predicted[i]], sp);
    flags.push_back(std::move(f));
  }
  return flags;
}

namespace {

std::vector<double> reliabilities_for(const Pipeline& p, std::size_t n_latent) {
  if (p.fusion.size() != p.num_defenders()) {
    throw DataError("fusion model has " + std::to_string(p.fusion.size()) + " reliabilities for " +
                    std::to_string(p.num_defenders()) + " defenders; run calibration first");
  }
  std::vector<double> r(p.fusion.reliabilities.begin(), p.fusion.reliabilities.begin() + n_latent);
  if (p.input) r.push_back(p.fusion.reliabilities.back());
  return r;
}

}  // namespace

std::vector<double> fused_probability(const Pipeline& p, const ScoreTable& s, SecurityParameter sp,
                                      std::size_t n_latent) {
  const auto flags = defender_flags(p, s, sp, n_latent);
  const auto rel = reliabilities_for(p, n_latent);
  std::vector<double> out(s.size());
  auto row = std::make_unique<bool[]>(flags.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t d = 0; d < flags.size(); ++d) row[d] = flags[d][i];
    out[i] = noisy_or(std::span<const bool>(row.get(), flags.size()), rel);
  }
  return out;
}

std::vector<bool> fused_rejections(const Pipeline& p, const ScoreTable& s, SecurityParameter sp, std::size_t n_latent) {
  const auto prob = fused_probability(p, s, sp, n_latent);
  std::vector<bool> out(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = decide(prob[i], p.fusion.decision_threshold) == Alarm::Reject;
  return out;
}

std::vector<Verdict> verdicts_from_scores(const Pipeline& p, const ScoreTable& s, SecurityParameter sp) {
  const auto flags = defender_flags(p, s, sp, p.latent.size());
  const auto prob = fused_probability(p, s, sp, p.latent.size());
  std::vector<Verdict> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    out[i].predicted = s.predicted[i];
    for (const auto& f : flags) out[i].flags.push_back(f[i]);
    out[i].probability = prob[i];
    out[i].alarm = decide(prob[i], p.fusion.decision_threshold);
  }
  return out;
}

std::vector<Verdict> detect_batch(const Pipeline& p, const Tensor& images) {
  return verdicts_from_scores(p, compute_scores(p, images), SecurityParameter(p.sp));
}

double flag_rate(const std::vector<bool>& flags) {
  if (flags.empty()) throw DataError("flag rate of an empty set");
  return static_cast<double>(std::count(flags.begin(), flags.end(), true)) / static_cast<double>(flags.size());
}

std::vector<double> calibrate_reliabilities(const Pipeline& p, const ScoreTable& benign, const ScoreTable& adversarial,
                                            SecurityParameter sp) {
  const auto fb = defender_flags(p, benign, sp, p.latent.size());
  const auto fa = defender_flags(p, adversarial, sp, p.latent.size());
  const auto ids = p.defender_ids();
  std::vector<double> out;
  for (std::size_t d = 0; d < fb.size(); ++d) {
    CalibrationCounts c;
    c.benign_flagged = static_cast<std::size_t>(std::count(fb[d].begin(), fb[d].end(), true));
    c.adversarial_flagged = static_cast<std::size_t>(std::count(fa[d].begin(), fa[d].end(), true));
    try {
      out.push_back(estimate_pn(c));
    } catch (const CalibrationError& e) {
      throw CalibrationError(ids[d] + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::size_t> successful_attacks(std::span<const int> clean_predicted, std::span<const int> adv_predicted,
                                            std::span<const int> labels) {
  if (clean_predicted.size() != labels.size() || adv_predicted.size() != labels.size()) {
    throw ShapeError("prediction and label counts differ");
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (clean_predicted[i] == labels[i] && adv_predicted[i] != labels[i]) out.push_back(i);
  }
  return out;
}

std::vector<RocPoint> roc_with_endpoints(std::vector<RocPoint> points) {
  points.push_back({0.0, 0.0, 0.0});
  points.push_back({100.0, 1.0, 1.0});
  std::stable_sort(points.begin(), points.end(), [](const RocPoint& a, const RocPoint& b) {
    return a.fp_rate != b.fp_rate ? a.fp_rate < b.fp_rate : a.tp_rate < b.tp_rate;
  });
  return points;
}

double auc(const std::vector<RocPoint>& pts) {
  if (pts.size() < 2) throw DataError("AUC needs at least two ROC points");
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const auto& a = pts[i - 1];
    const auto& b = pts[i];
    if (b.fp_rate < a.fp_rate || (b.fp_rate == a.fp_rate && b.tp_rate < a.tp_rate)) {
      throw DataError("ROC points are not sorted by false-positive rate");
    }
    area += (b.fp_rate - a.fp_rate) * (a.tp_rate + b.tp_rate) / 2.0;
  }
  return area;
}

std::vector<double> parse_sp_grid(const std::string& text) {
  auto num = [&](std::string_view t) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size()) throw DataError("bad SP grid '" + text + "'");
    return v;
  };
  std::vector<double> out;
  std::string_view t = text;
  if (t.find(':') != std::string_view::npos) {
    const auto a = t.find(':'), b = t.find(':', a + 1);
    if (b == std::string_view::npos) throw DataError("SP grid range needs start:stop:step");
    const double lo = num(t.substr(0, a)), hi = num(t.substr(a + 1, b - a - 1)), step = num(t.substr(b + 1));
    if (!(step > 0.0) || hi < lo) throw DataError("bad SP grid range '" + text + "'");
    for (std::size_t i = 0;; ++i) {
      const double v = lo + static_cast<double>(i) * step;
      if (v > hi + 1e-9) break;
      out.push_back(std::min(v, hi));
    }
  } else {
    while (!t.empty()) {
      const auto c = t.find(',');
      out.push_back(num(t.substr(0, c)));
      t = c == std::string_view::npos ? std::string_view{} : t.substr(c + 1);
    }
  }
  for (double v : out) SecurityParameter{v};
  if (out.empty()) throw DataError("empty SP grid");
  return out;
}

EvalReport evaluate(const Pipeline& p, const ScoreTable& benign, const std::map<std::string, ScoreTable>& adversarial,
                    const std::vector<double>& sp_grid, const std::vector<std::size_t>& n_def_values) {
  if (benign.size() == 0) throw DataError("benign evaluation set is empty");
  EvalReport report;
  for (const auto& [name, adv] : adversarial) {
    if (adv.size() == 0) throw DataError("adversarial set '" + name + "' is empty");
    for (std::size_t n : n_def_values) {
      EvalRecord rec{name, n, {}, 0.0};
      for (double sp : sp_grid) {
        const SecurityParameter s(sp);
        rec.roc.push_back({sp, flag_rate(fused_rejections(p, benign, s, n)), flag_rate(fused_rejections(p, adv, s, n))});
      }
      rec.auc = auc(roc_with_endpoints(rec.roc));
      report.records.push_back(std::move(rec));
    }
  }
  report.metadata = {{"benign_samples", benign.size()},
                     {"adversarial_filter", "clean prediction correct and adversarial prediction wrong"},
                     {"sp_grid", sp_grid},
                     {"defender_ids", p.defender_ids()},
                     {"reliabilities", p.fusion.reliabilities}};
  for (const auto& [name, adv] : adversarial) report.metadata["adversarial_samples"][name] = adv.size();
  return report;
}

void write_report(const EvalReport& report, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ostringstream summary;
  summary << "attack,n_def,auc\n";
  for (const auto& rec : report.records) {
    std::ostringstream roc;
    roc.precision(17);
    roc << "sp,fp_rate,tp_rate\n";
    for (const auto& pt : rec.roc) roc << pt.sp << "," << pt.fp_rate << "," << pt.tp_rate << "\n";
    write_text_file(out_dir / ("roc_" + rec.attack + "_" + std::to_string(rec.n_def) + ".csv"), roc.str());
    summary.precision(17);
    summary << rec.attack << "," << rec.n_def << "," << rec.auc << "\n";
  }
  write_text_file(out_dir / "auc_summary.csv", summary.str());
  write_text_file(out_dir / "report.json", dump_json(report.metadata));
}

}  // namespace mrr
