#include "mrr/pipeline.hpp"

#include <algorithm>

#include "mrr/arch.hpp"
#include "mrr/error.hpp"

namespace mrr {
namespace fs = std::filesystem;

namespace {

std::string rel(const fs::path& p, const fs::path& base) {
  if (p.empty()) return "";
  const fs::path r = p.lexically_normal().lexically_relative(base.lexically_normal());
  return (r.empty() ? p : r).generic_string();
}

fs::path resolve(const std::string& s, const fs::path& base) {
  if (s.empty()) return {};
  const fs::path p(s);
  return (p.is_absolute() ? p : base / p).lexically_normal();
}

fs::path absolute_dir(const fs::path& file) {
  return fs::absolute(file).lexically_normal().parent_path();
}

}  // namespace

Json manifest_to_json(const PipelineManifest& m, const fs::path& base) {
  Json j;
  j["format_version"] = m.format_version;
  j["victim"] = rel(m.victim, base);
  j["defenders"] = Json::array();
  for (const auto& p : m.defenders) j["defenders"].push_back(rel(p, base));
  j["dictionaries"] = Json::array();
  for (const auto& p : m.dictionaries) j["dictionaries"].push_back(rel(p, base));
  j["fusion"] = {{"defender_ids", m.fusion.defender_ids},
                 {"reliabilities", m.fusion.reliabilities},
                 {"calibration_attacks", m.fusion.calibration_attacks},
                 {"calibration_sp", m.fusion.calibration_sp},
                 {"decision_threshold", m.fusion.decision_threshold}};
  j["sp"] = m.sp;
  j["datasets"] = Json::object();
  for (const auto& [name, ref] : m.datasets) {
    j["datasets"][name] = {{"images", rel(ref.images, base)}, {"labels", rel(ref.labels, base)}};
  }
  j["seeds"] = m.seeds;
  j["run"] = m.run;
  return j;
}

PipelineManifest manifest_from_json(const Json& j, const fs::path& base) {
  try {
    PipelineManifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kManifestFormatVersion) {
      throw DataError("unsupported manifest format_version " + std::to_string(m.format_version));
    }
    m.victim = resolve(j.at("victim").get<std::string>(), base);
    for (const auto& p : j.at("defenders")) m.defenders.push_back(resolve(p.get<std::string>(), base));
    for (const auto& p : j.at("dictionaries")) m.dictionaries.push_back(resolve(p.get<std::string>(), base));
    const Json& f = j.at("fusion");
    m.fusion.defender_ids = f.at("defender_ids").get<std::vector<std::string>>();
    m.fusion.reliabilities = f.at("reliabilities").get<std::vector<double>>();
    m.fusion.calibration_attacks = f.at("calibration_attacks").get<std::vector<std::string>>();
    m.fusion.calibration_sp = f.at("calibration_sp").get<double>();
    m.fusion.decision_threshold = f.at("decision_threshold").get<double>();
    m.sp = j.at("sp").get<double>();
    for (const auto& [name, ref] : j.at("datasets").items()) {
      m.datasets[name] = {resolve(ref.at("images").get<std::string>(), base),
                          resolve(ref.at("labels").get<std::string>(), base)};
    }
    m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    m.run = j.value("run", Json::object());
    return m;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
}

PipelineManifest load_manifest(const fs::path& path) {
  return manifest_from_json(read_json_file(path), absolute_dir(path));
}

void save_manifest(const fs::path& path, const PipelineManifest& m) {
  write_text_file(path, dump_json(manifest_to_json(m, absolute_dir(path))));
}

void save_latent_defender(const fs::path& path, const LatentDefender& d) {
  write_text_file(path, dump_json(latent_defender_to_json(d)));
}

LatentDefender load_latent_defender(const fs::path& path) { return latent_defender_from_json(read_json_file(path)); }

void save_dictionary(const fs::path& path, const Dictionary& d, const OmpConfig& omp) {
  write_text_file(path, dump_json(dictionary_to_json(d, omp)));
}

Dictionary load_dictionary(const fs::path& path, OmpConfig* omp) {
  return dictionary_from_json(read_json_file(path), omp);
}

Pipeline load_pipeline(const PipelineManifest& m) {
  if (m.victim.empty()) throw DataError("manifest names no victim model");
  Pipeline p;
  p.victim = load_network(m.victim);
  p.sp = m.sp;
  const SecurityParameter sp(m.sp);
  for (const auto& path : m.defenders) {
    p.latent.push_back(load_latent_defender(path));
    if (p.latent.back().num_classes() != p.victim.num_classes()) {
      throw DataError(path.string() + ": defender class count differs from the victim");
    }
    set_security(p.latent.back(), sp);
  }
  if (!m.dictionaries.empty()) {
    InputDefender input;
    for (const auto& path : m.dictionaries) {
      input.dictionaries.push_back(load_dictionary(path, &input.omp));
      if (input.dictionaries.back().class_id != static_cast<int>(input.dictionaries.size()) - 1) {
        throw DataError(path.string() + ": dictionaries must be listed in class order");
      }
    }
    if (input.num_classes() != p.victim.num_classes()) {
      throw DataError("dictionary count differs from the victim's class count");
    }
    set_security(input, sp);
    p.input = std::move(input);
  }
  if (!m.fusion.reliabilities.empty()) {
    if (m.fusion.defender_ids != p.defender_ids()) {
      throw DataError("fusion defender order does not match the manifest's defenders");
    }
    p.fusion.reliabilities = m.fusion.reliabilities;
  }
  p.fusion.decision_threshold = m.fusion.decision_threshold;
  p.fusion.validate();
  return p;
}

DeskSplit desk_split(const Dataset& all, const DeskFractions& f, std::uint64_t seed) {
  const double fractions[] = {f.train, f.val, f.calibration, f.eval};
  const auto parts = stratified_split(all.labels, all.num_classes, fractions, seed);
  return {subset(all, parts[0]), subset(all, parts[1]), subset(all, parts[2]), subset(all, parts[3])};
}

Network train_victim(const std::string& arch_text, const Dataset& train, const TrainConfig& cfg,
                     std::vector<double>* epoch_loss) {
  const ArchSpec spec = parse_arch(arch_text);
  Network net = realize(spec, cfg.seed);
  if (net.input_shape != Shape(train.images.shape.begin() + 1, train.images.shape.end())) {
    throw ShapeError("architecture input " + shape_to_string(net.input_shape) + " does not match images " +
                     shape_to_string(train.images.shape));
  }
  const TrainResult r = mrr::train(net, train.images, train.labels, cfg);
  if (epoch_loss) *epoch_loss = r.epoch_loss;
  return net;
}

std::vector<LatentDefender> train_latent_chain(const Network& victim, std::size_t layer, const Dataset& train,
                                               const Dataset& profile, std::size_t n, const LatentBuildConfig& cfg,
                                               std::vector<FineTuneReport>* reports) {
  if (n < 1) throw DataError("a defender chain needs at least one defender");
  const std::vector<int> predicted = predict(victim, profile.images);
  FineTuneReport first_report;
  LatentDefender first =
      build_latent_defender(victim, layer, train, train.images, profile, predicted, cfg, &first_report);
  if (reports) reports->push_back(std::move(first_report));
  return build_chain(victim, std::move(first), train, profile, predicted, n, cfg, reports);
}

InputDefender train_input_defender(const Network& victim, const Dataset& train, const Dataset& profile,
                                   const PatchConfig& patch, const DictionaryConfig& dict, const OmpConfig& omp,
                                   double sp, std::vector<DictionaryTrace>* traces) {
  InputDefender d = learn_dictionaries(train, patch, dict, omp, traces);
  d.sp = sp;
  const std::vector<int> predicted = predict(victim, profile.images);
  profile_psnr(d, profile.images, predicted);
  return d;
}

AdversarialSet successful_adversarial(const Network& victim, const Dataset& data,
                                      const std::vector<AttackConfig>& attacks) {
  AdversarialSet out;
  const std::vector<int> clean = predict(victim, data.images);
  std::vector<double> pixels;
  for (const auto& cfg : attacks) {
    const Tensor adv = run_attack(victim, data.images, data.labels, cfg);
    const std::vector<int> pred = predict(victim, adv);
    out.attempted += data.size();
    for (std::size_t i : successful_attacks(clean, pred, data.labels)) {
      const auto row = adv.row(i);
      pixels.insert(pixels.end(), row.begin(), row.end());
      out.labels.push_back(data.labels[i]);
      out.source_index.push_back(i);
    }
  }
  Shape shape = data.images.shape;
  shape[0] = out.labels.size();
  out.images = Tensor(shape, std::move(pixels));
  return out;
}

void calibrate(Pipeline& p, const Dataset& benign, const std::vector<AttackConfig>& attacks, SecurityParameter sp) {
  const AdversarialSet adv = successful_adversarial(p.victim, benign, attacks);
  if (adv.labels.empty()) throw CalibrationError("no calibration attack succeeded; nothing to calibrate against");
  const ScoreTable b = compute_scores(p, benign.images);
  const ScoreTable a = compute_scores(p, adv.images);
  p.fusion.reliabilities = calibrate_reliabilities(p, b, a, sp);
}

}  // namespace mrr
