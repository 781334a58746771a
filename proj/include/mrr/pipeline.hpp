#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mrr/attacks.hpp"
#include "mrr/dataset.hpp"
#include "mrr/harness.hpp"

namespace mrr {

inline constexpr int kManifestFormatVersion = 1;

struct DatasetRef {
  std::filesystem::path images;
  std::filesystem::path labels;
};

struct FusionRecord {
  std::vector<std::string> defender_ids;
  std::vector<double> reliabilities;  // empty until calibrated
  std::vector<std::string> calibration_attacks;
  double calibration_sp = 5.0;
  double decision_threshold = 0.5;
};

// Paths are absolute in memory and stored relative to the manifest's directory on disk.
struct PipelineManifest {
  int format_version = kManifestFormatVersion;
  std::filesystem::path victim;
  std::vector<std::filesystem::path> defenders;
  std::vector<std::filesystem::path> dictionaries;
  FusionRecord fusion;
  double sp = 5.0;
  std::map<std::string, DatasetRef> datasets;
  std::map<std::string, std::uint64_t> seeds;
  Json run = Json::object();  // free-form settings of the commands that produced the artifacts
};

Json manifest_to_json(const PipelineManifest& m, const std::filesystem::path& base_dir);
PipelineManifest manifest_from_json(const Json& j, const std::filesystem::path& base_dir);
PipelineManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const PipelineManifest& m);

// Loads every artifact; an uncalibrated manifest gives an empty fusion model.
Pipeline load_pipeline(const PipelineManifest& m);

void save_latent_defender(const std::filesystem::path& path, const LatentDefender& d);
LatentDefender load_latent_defender(const std::filesystem::path& path);
void save_dictionary(const std::filesystem::path& path, const Dictionary& d, const OmpConfig& omp);
Dictionary load_dictionary(const std::filesystem::path& path, OmpConfig* omp = nullptr);

// Stratified train / profiling / calibration / evaluation partition of one labelled pool.
struct DeskSplit {
  Dataset train;
  Dataset val;
  Dataset calibration;
  Dataset eval;
};

struct DeskFractions {
  double train = 0.6;
  double val = 0.15;
  double calibration = 0.05;
  double eval = 0.2;
};

DeskSplit desk_split(const Dataset& all, const DeskFractions& f, std::uint64_t seed);

Network train_victim(const std::string& arch_text, const Dataset& train, const TrainConfig& cfg,
                     std::vector<double>* epoch_loss = nullptr);

// Latent chain of `n` defenders at `layer`, profiled on `profile` under the victim's predictions.
std::vector<LatentDefender> train_latent_chain(const Network& victim, std::size_t layer, const Dataset& train,
                                               const Dataset& profile, std::size_t n, const LatentBuildConfig& cfg,
                                               std::vector<FineTuneReport>* reports = nullptr);

InputDefender train_input_defender(const Network& victim, const Dataset& train, const Dataset& profile,
                                   const PatchConfig& patch, const DictionaryConfig& dict, const OmpConfig& omp,
                                   double sp, std::vector<DictionaryTrace>* traces = nullptr);

// Successful adversarial examples of `data` under each attack, stacked.
struct AdversarialSet {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> source_index;  // row of the clean sample in `data`
  std::size_t attempted = 0;
};

AdversarialSet successful_adversarial(const Network& victim, const Dataset& data,
                                      const std::vector<AttackConfig>& attacks);

// Scores the calibration sets and stores P_n for every defender in `p.fusion`.
void calibrate(Pipeline& p, const Dataset& benign, const std::vector<AttackConfig>& attacks, SecurityParameter sp);

}  // namespace mrr
