// Command-line front end: training, calibration, attacks, detection, evaluation, planning.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mrr/arch.hpp"
#include "mrr/pipeline.hpp"
#include "mrr/planner.hpp"

namespace fs = std::filesystem;
using namespace mrr;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kInfeasible = 3 };

struct DataFlags {
  std::string images, labels;
};

void add_data_flags(CLI::App* cmd, DataFlags& d, const std::string& prefix = "") {
  cmd->add_option("--" + prefix + "images", d.images, "IDX images file")->required();
  cmd->add_option("--" + prefix + "labels", d.labels, "IDX labels file")->required();
}

PipelineManifest open_manifest(const std::string& path) {
  if (path.empty() || !fs::exists(path)) return {};
  return load_manifest(path);
}

fs::path absolute(const std::string& p) { return fs::absolute(p).lexically_normal(); }

// Benign profiling data: an explicit set, or a stratified hold-out of the training data.
std::pair<Dataset, Dataset> train_and_profile(const DataFlags& train, const DataFlags& profile, double fraction,
                                              std::uint64_t seed) {
  Dataset data = load_idx(train.images, train.labels);
  if (!profile.images.empty()) {
    if (profile.labels.empty()) throw DataError("--profile-images needs --profile-labels");
    return {std::move(data), load_idx(profile.images, profile.labels)};
  }
  if (!(fraction > 0.0 && fraction < 1.0)) throw DataError("--profile-fraction must lie in (0, 1)");
  const double fractions[] = {1.0 - fraction, fraction};
  const auto parts = stratified_split(data.labels, data.num_classes, fractions, seed);
  return {subset(data, parts[0]), subset(data, parts[1])};
}

// --- train-victim ------------------------------------------------------------

struct TrainVictimArgs {
  std::string arch{arch::kMnist};
  DataFlags data;
  std::string out, manifest;
  TrainConfig cfg{0.05, 32, 4, 1};
};

int train_victim_cmd(const TrainVictimArgs& a) {
  const Dataset data = load_idx(a.data.images, a.data.labels);
  std::vector<double> loss;
  const Network victim = train_victim(a.arch, data, a.cfg, &loss);
  for (std::size_t e = 0; e < loss.size(); ++e) std::cerr << "epoch " << e + 1 << " loss " << loss[e] << "\n";
  std::cerr << "training accuracy " << accuracy(victim, data.images, data.labels) << "\n";
  save_network(a.out, victim);
  if (!a.manifest.empty()) {
    PipelineManifest m = open_manifest(a.manifest);
    m.victim = absolute(a.out);
    m.datasets["train"] = {absolute(a.data.images), absolute(a.data.labels)};
    m.seeds["victim"] = a.cfg.seed;
    m.run["train-victim"] = {{"arch", a.arch},
                             {"learning_rate", a.cfg.learning_rate},
                             {"batch_size", a.cfg.batch_size},
                             {"epochs", a.cfg.epochs},
                             {"optimizer", "sgd"}};
    save_manifest(a.manifest, m);
  }
  return kOk;
}

// --- train-defender ----------------------------------------------------------

struct TrainDefenderArgs {
  std::string victim, out_dir, manifest;
  DataFlags data, profile;
  long layer = -1;
  std::size_t chain = 1;
  double gamma = 0.01, lr = 0.0, step = 0.1, sp = 5.0, profile_fraction = 0.2;
  std::size_t epochs = 10, batch = 32;
  std::uint64_t seed = 7;
};

int train_defender_cmd(const TrainDefenderArgs& a) {
  const Network victim = load_network(a.victim);
  const std::size_t layer = a.layer < 0 ? default_checkpoint(victim) : static_cast<std::size_t>(a.layer);
  auto [train, profile] = train_and_profile(a.data, a.profile, a.profile_fraction, a.seed);
  LatentBuildConfig cfg;
  cfg.fine_tune.gamma = a.gamma;
  cfg.fine_tune.train = {a.lr > 0.0 ? a.lr : 0.005, a.batch, a.epochs, a.seed};
  cfg.sp = a.sp;
  cfg.chain_step = a.step;
  std::vector<FineTuneReport> reports;
  const auto chain = train_latent_chain(victim, layer, train, profile, a.chain, cfg, &reports);
  std::vector<fs::path> paths;
  for (std::size_t n = 0; n < chain.size(); ++n) {
    const fs::path path = fs::path(a.out_dir) / ("latent-" + std::to_string(n + 1) + ".json");
    save_latent_defender(path, chain[n]);
    paths.push_back(absolute(path.string()));
    std::cerr << path.string() << ": PCA " << chain[n].pca.input_dim() << " -> " << chain[n].pca.output_dim()
              << ", intra-class distance " << reports[n].intra_distance_before << " -> "
              << reports[n].intra_distance_after << "\n";
  }
  if (!a.manifest.empty()) {
    PipelineManifest m = open_manifest(a.manifest);
    if (m.victim.empty()) m.victim = absolute(a.victim);
    m.defenders = paths;
    m.fusion.reliabilities.clear();
    m.sp = a.sp;
    m.seeds["defenders"] = a.seed;
    m.run["train-defender"] = {{"layer", layer},
                               {"gamma", a.gamma},
                               {"chain", a.chain},
                               {"learning_rate", cfg.fine_tune.train.learning_rate},
                               {"epochs", a.epochs},
                               {"chain_step", a.step}};
    save_manifest(a.manifest, m);
  }
  return kOk;
}

// --- learn-dicts -------------------------------------------------------------

struct LearnDictsArgs {
  std::string victim, out_dir, manifest;
  DataFlags data, profile;
  std::size_t classes = 10;
  PatchConfig patch;
  DictionaryConfig dict;
  OmpConfig omp;
  double sp = 5.0, profile_fraction = 0.2;
};

int learn_dicts_cmd(const LearnDictsArgs& a) {
  const Network victim = load_network(a.victim);
  auto [train, profile] = train_and_profile(a.data, a.profile, a.profile_fraction, a.dict.seed);
  if (train.num_classes > a.classes || victim.num_classes() != a.classes) {
    throw DataError("--classes " + std::to_string(a.classes) + " disagrees with the data (" +
                    std::to_string(train.num_classes) + ") or the victim (" + std::to_string(victim.num_classes()) +
                    ")");
  }
  train.num_classes = a.classes;
  const InputDefender d = train_input_defender(victim, train, profile, a.patch, a.dict, a.omp, a.sp);
  std::vector<fs::path> paths;
  for (const auto& dict : d.dictionaries) {
    const fs::path path = fs::path(a.out_dir) / ("dict-" + std::to_string(dict.class_id) + ".json");
    save_dictionary(path, dict, d.omp);
    paths.push_back(absolute(path.string()));
  }
  std::cerr << "wrote " << paths.size() << " dictionaries to " << a.out_dir << "\n";
  if (!a.manifest.empty()) {
    PipelineManifest m = open_manifest(a.manifest);
    if (m.victim.empty()) m.victim = absolute(a.victim);
    m.dictionaries = paths;
    m.fusion.reliabilities.clear();
    m.sp = a.sp;
    m.seeds["dictionaries"] = a.dict.seed;
    m.run["learn-dicts"] = {{"k_max", a.dict.k_max},       {"beta", a.dict.beta},
                            {"iterations", a.dict.iterations}, {"patch_size", a.patch.patch_size},
                            {"stride", a.patch.stride},    {"max_patches_per_class", a.patch.max_patches_per_class},
                            {"omp_k", a.omp.k},            {"omp_tol", a.omp.tol}};
    save_manifest(a.manifest, m);
  }
  return kOk;
}

// --- calibrate ---------------------------------------------------------------

struct CalibrateArgs {
  std::string manifest;
  std::vector<std::string> attacks{"fgs:eps=0.1", "bim:eps=0.1,iters=10"};
  double sp = 5.0;
  DataFlags data;
};

int calibrate_cmd(const CalibrateArgs& a) {
  PipelineManifest m = load_manifest(a.manifest);
  DatasetRef ref;
  if (!a.data.images.empty()) {
    ref = {absolute(a.data.images), absolute(a.data.labels)};
  } else if (m.datasets.count("calibration")) {
    ref = m.datasets.at("calibration");
  } else {
    throw DataError("no calibration data: pass --images/--labels or add a 'calibration' dataset to the manifest");
  }
  const Dataset benign = load_idx(ref.images, ref.labels);
  std::vector<AttackConfig> attacks;
  for (const auto& text : a.attacks) attacks.push_back(parse_attack(text));
  Pipeline p = load_pipeline(m);
  calibrate(p, benign, attacks, SecurityParameter(a.sp));
  m.fusion.defender_ids = p.defender_ids();
  m.fusion.reliabilities = p.fusion.reliabilities;
  m.fusion.calibration_attacks.clear();
  for (const auto& c : attacks) m.fusion.calibration_attacks.push_back(c.describe());
  m.fusion.calibration_sp = a.sp;
  m.datasets["calibration"] = ref;
  save_manifest(a.manifest, m);
  for (std::size_t n = 0; n < p.fusion.size(); ++n) {
    std::cout << m.fusion.defender_ids[n] << " P_n=" << p.fusion.reliabilities[n] << "\n";
  }
  return kOk;
}

// --- attack ------------------------------------------------------------------

struct AttackArgs {
  std::string victim, kind = "fgs", out;
  DataFlags data;
  double eps = 0.1, step = 0.0;
  std::size_t iters = 10;
};

int attack_cmd(const AttackArgs& a) {
  const Network victim = load_network(a.victim);
  const Dataset data = load_idx(a.data.images, a.data.labels);
  AttackConfig cfg;
  if (a.kind == "fgs") {
    cfg = {AttackKind::FGS, a.eps, 1, 0.0};
  } else if (a.kind == "bim") {
    cfg = {AttackKind::BIM, a.eps, a.iters, a.step};
  } else {
    throw DataError("unknown attack kind '" + a.kind + "'");
  }
  cfg.validate();
  const Tensor adv = run_attack(victim, data.images, data.labels, cfg);
  const auto clean = predict(victim, data.images);
  const auto fooled = predict(victim, adv);
  const auto ok = successful_attacks(clean, fooled, data.labels);

  const fs::path json_path(a.out);
  const fs::path stem = json_path.parent_path() / json_path.stem();
  const fs::path images = stem.string() + "-images.idx", labels = stem.string() + "-labels.idx";
  if (!json_path.parent_path().empty()) fs::create_directories(json_path.parent_path());
  write_idx_images_f64(images, adv);
  write_idx_labels(labels, data.labels);
  const Json j = {{"format_version", kModelFormatVersion},
                  {"attack", attack_to_json(cfg)},
                  {"images", images.filename().string()},
                  {"labels", labels.filename().string()},
                  {"samples", data.size()},
                  {"successful", ok}};
  write_text_file(json_path, dump_json(j));
  std::cerr << cfg.describe() << ": " << ok.size() << " of " << data.size() << " samples fool the victim\n";
  return kOk;
}

// --- detect ------------------------------------------------------------------

struct DetectArgs {
  std::string manifest, input, out;
  double sp = -1.0;
};

int detect_cmd(const DetectArgs& a) {
  const PipelineManifest m = load_manifest(a.manifest);
  Pipeline p = load_pipeline(m);
  if (p.fusion.size() != p.num_defenders()) throw DataError("manifest is not calibrated; run calibrate first");
  if (a.sp >= 0.0) p.sp = SecurityParameter(a.sp).value();
  const Tensor images = read_idx_images(a.input);
  const auto verdicts = verdicts_from_scores(p, compute_scores(p, images), SecurityParameter(p.sp));
  std::ostringstream csv;
  csv << "index,predicted";
  for (const auto& id : p.defender_ids()) csv << "," << id;
  csv << ",probability,verdict\n";
  csv.precision(17);
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    csv << i << "," << verdicts[i].predicted;
    for (bool f : verdicts[i].flags) csv << "," << (f ? 1 : 0);
    csv << "," << verdicts[i].probability << "," << to_string(verdicts[i].alarm) << "\n";
  }
  if (a.out.empty()) {
    std::cout << csv.str();
  } else {
    write_text_file(a.out, csv.str());
  }
  return kOk;
}

// --- evaluate ----------------------------------------------------------------

struct EvaluateArgs {
  std::string manifest, out_dir, sp_grid = "0:100:5";
  DataFlags benign;
  std::vector<std::string> adversarial;
  std::vector<std::size_t> n_def;
};

int evaluate_cmd(const EvaluateArgs& a) {
  const PipelineManifest m = load_manifest(a.manifest);
  const Pipeline p = load_pipeline(m);
  if (p.fusion.size() != p.num_defenders()) throw DataError("manifest is not calibrated; run calibrate first");
  const Dataset benign = load_idx(a.benign.images, a.benign.labels);
  const ScoreTable benign_scores = compute_scores(p, benign.images);
  std::map<std::string, ScoreTable> adv;
  for (const auto& path : a.adversarial) {
    const Json j = read_json_file(path);
    const fs::path dir = fs::path(path).parent_path();
    const AttackConfig cfg = attack_from_json(j.at("attack"));
    const Tensor images = read_idx_images(dir / j.at("images").get<std::string>());
    const auto ok = j.at("successful").get<std::vector<std::size_t>>();
    for (std::size_t i : ok) {
      if (i >= images.rows()) throw DataError(path + ": successful index out of range");
    }
    const std::string name = fs::path(path).stem().string();
    adv[name] = compute_scores(p, gather_rows(images, ok));
    std::cerr << name << " (" << cfg.describe() << "): " << ok.size() << " successful samples\n";
  }
  std::vector<std::size_t> n_def = a.n_def;
  if (n_def.empty()) {
    for (std::size_t n = p.input ? 0 : 1; n <= p.latent.size(); ++n) n_def.push_back(n);
  }
  EvalReport report = evaluate(p, benign_scores, adv, parse_sp_grid(a.sp_grid), n_def);
  report.metadata["manifest"] = fs::absolute(a.manifest).string();
  write_report(report, a.out_dir);
  for (const auto& r : report.records) std::cout << r.attack << " n_def=" << r.n_def << " auc=" << r.auc << "\n";
  return kOk;
}

// --- plan --------------------------------------------------------------------

struct PlanArgs {
  std::string budget, arch{arch::kMnist}, out;
};

int plan_cmd(const PlanArgs& a) {
  OmpParams omp;
  const ResourceBudget budget = budget_from_json(read_json_file(a.budget), &omp);
  const DefenderCostProfile profile = profile_costs(parse_arch(a.arch), omp);
  try {
    const DefensePlan plan = mrr::plan(budget, profile);
    std::cout << plan_table(plan, budget);
    if (!a.out.empty()) write_text_file(a.out, dump_json(plan_to_json(plan)));
    return kOk;
  } catch (const InfeasiblePlan& e) {
    std::cerr << "infeasible (" << to_string(e.binding()) << " constraint): " << e.what() << "\n";
    return kInfeasible;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial-input detection with latent and input defenders"};
  app.require_subcommand(1);

  TrainVictimArgs tv;
  auto* c_tv = app.add_subcommand("train-victim", "Train the victim classifier");
  c_tv->add_option("--arch", tv.arch, "Architecture string")->capture_default_str();
  add_data_flags(c_tv, tv.data);
  c_tv->add_option("--out", tv.out, "Output model JSON")->required();
  c_tv->add_option("--manifest", tv.manifest, "Manifest to create or update");
  c_tv->add_option("--epochs", tv.cfg.epochs)->capture_default_str();
  c_tv->add_option("--lr", tv.cfg.learning_rate)->capture_default_str();
  c_tv->add_option("--batch", tv.cfg.batch_size)->capture_default_str();
  c_tv->add_option("--seed", tv.cfg.seed)->capture_default_str();

  TrainDefenderArgs td;
  auto* c_td = app.add_subcommand("train-defender", "Train a chain of latent defenders");
  c_td->add_option("--victim", td.victim)->required();
  c_td->add_option("--layer", td.layer, "Checkpoint layer index (default: the layer before the head)");
  c_td->add_option("--gamma", td.gamma)->capture_default_str();
  c_td->add_option("--chain", td.chain, "Number of chained defenders")->capture_default_str();
  c_td->add_option("--out-dir", td.out_dir)->required();
  add_data_flags(c_td, td.data);
  c_td->add_option("--profile-images", td.profile.images, "Benign profiling images (default: hold-out)");
  c_td->add_option("--profile-labels", td.profile.labels);
  c_td->add_option("--profile-fraction", td.profile_fraction)->capture_default_str();
  c_td->add_option("--epochs", td.epochs)->capture_default_str();
  c_td->add_option("--lr", td.lr, "Fine-tuning learning rate (default 0.005, a tenth of the victim's)");
  c_td->add_option("--batch", td.batch)->capture_default_str();
  c_td->add_option("--step", td.step, "Max-abs of the chain perturbation")->capture_default_str();
  c_td->add_option("--sp", td.sp)->capture_default_str();
  c_td->add_option("--seed", td.seed)->capture_default_str();
  c_td->add_option("--manifest", td.manifest);

  LearnDictsArgs ld;
  auto* c_ld = app.add_subcommand("learn-dicts", "Learn per-class patch dictionaries");
  add_data_flags(c_ld, ld.data);
  c_ld->add_option("--victim", ld.victim, "Victim whose predictions select the profiling class")->required();
  c_ld->add_option("--classes", ld.classes)->capture_default_str();
  c_ld->add_option("--out-dir", ld.out_dir)->required();
  c_ld->add_option("--profile-images", ld.profile.images);
  c_ld->add_option("--profile-labels", ld.profile.labels);
  c_ld->add_option("--profile-fraction", ld.profile_fraction)->capture_default_str();
  c_ld->add_option("--k-max", ld.dict.k_max)->capture_default_str();
  c_ld->add_option("--beta", ld.dict.beta)->capture_default_str();
  c_ld->add_option("--iterations", ld.dict.iterations)->capture_default_str();
  c_ld->add_option("--patch", ld.patch.patch_size)->capture_default_str();
  c_ld->add_option("--stride", ld.patch.stride)->capture_default_str();
  c_ld->add_option("--max-patches", ld.patch.max_patches_per_class)->capture_default_str();
  c_ld->add_option("--omp-k", ld.omp.k)->capture_default_str();
  c_ld->add_option("--omp-tol", ld.omp.tol)->capture_default_str();
  c_ld->add_option("--sp", ld.sp)->capture_default_str();
  c_ld->add_option("--seed", ld.dict.seed)->capture_default_str();
  c_ld->add_option("--manifest", ld.manifest);

  CalibrateArgs ca;
  auto* c_ca = app.add_subcommand("calibrate", "Estimate defender reliabilities into the manifest");
  c_ca->add_option("--manifest", ca.manifest)->required();
  c_ca->add_option("--attack", ca.attacks, "e.g. fgs:eps=0.1 or bim:eps=0.1,iters=10 (repeatable)")
      ->capture_default_str();
  c_ca->add_option("--sp", ca.sp)->capture_default_str();
  c_ca->add_option("--images", ca.data.images, "Benign calibration images (default: manifest dataset)");
  c_ca->add_option("--labels", ca.data.labels);

  AttackArgs at;
  auto* c_at = app.add_subcommand("attack", "Generate adversarial samples");
  c_at->add_option("--victim", at.victim)->required();
  c_at->add_option("--kind", at.kind)->check(CLI::IsMember({"fgs", "bim"}))->capture_default_str();
  c_at->add_option("--eps", at.eps)->capture_default_str();
  c_at->add_option("--iters", at.iters)->capture_default_str();
  c_at->add_option("--step", at.step, "BIM step (default 2.5 * eps / iters)");
  add_data_flags(c_at, at.data);
  c_at->add_option("--out", at.out, "Attack manifest JSON; IDX files are written beside it")->required();

  DetectArgs de;
  auto* c_de = app.add_subcommand("detect", "Per-sample verdicts as CSV");
  c_de->add_option("--manifest", de.manifest)->required();
  c_de->add_option("--input", de.input, "IDX images")->required();
  c_de->add_option("--sp", de.sp, "Override the manifest security parameter");
  c_de->add_option("--out", de.out, "CSV path (default: stdout)");

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "ROC/AUC over a security-parameter sweep");
  c_ev->add_option("--manifest", ev.manifest)->required();
  c_ev->add_option("--benign", ev.benign.images, "Benign IDX images")->required();
  c_ev->add_option("--benign-labels", ev.benign.labels, "Benign IDX labels")->required();
  c_ev->add_option("--adversarial", ev.adversarial, "Attack manifest JSON (repeatable)")->required();
  c_ev->add_option("--sp-grid", ev.sp_grid)->capture_default_str();
  c_ev->add_option("--n-def", ev.n_def, "Latent defender counts to evaluate (default: all prefixes)");
  c_ev->add_option("--out-dir", ev.out_dir)->required();

  PlanArgs pl;
  auto* c_pl = app.add_subcommand("plan", "Choose defender count and parallelism under resource budgets");
  c_pl->add_option("--budget", pl.budget, "Budget JSON")->required();
  c_pl->add_option("--arch", pl.arch)->capture_default_str();
  c_pl->add_option("--out", pl.out, "Plan JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (c_tv->parsed()) return train_victim_cmd(tv);
    if (c_td->parsed()) return train_defender_cmd(td);
    if (c_ld->parsed()) return learn_dicts_cmd(ld);
    if (c_ca->parsed()) return calibrate_cmd(ca);
    if (c_at->parsed()) return attack_cmd(at);
    if (c_de->parsed()) return detect_cmd(de);
    if (c_ev->parsed()) return evaluate_cmd(ev);
    if (c_pl->parsed()) return plan_cmd(pl);
  } catch (const InfeasiblePlan& e) {
    std::cerr << "infeasible (" << to_string(e.binding()) << " constraint): " << e.what() << "\n";
    return kInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
