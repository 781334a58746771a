#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mrr/dataset.hpp"
#include "mrr/model_io.hpp"
#include "mrr/network.hpp"
#include "mrr/security.hpp"

namespace mrr {

// Per-class centers on (approximately) the unit sphere of the checkpoint features.
struct CenterSet {
  Tensor centers;  // (num_classes, feature_dim)
  double gamma = 0.01;

  std::size_t num_classes() const { return centers.rows(); }
  std::size_t dim() const { return centers.row_size(); }
};

struct PcaProjection {
  std::vector<double> mean;  // feature_dim
  Tensor components;         // (feature_dim, L), orthonormal columns
  double energy_kept = 1.0;

  std::size_t input_dim() const { return mean.size(); }
  std::size_t output_dim() const { return components.rank() == 2 ? components.dim(1) : 0; }
};

PcaProjection fit_pca(const Tensor& features, double min_energy = 0.99);
// (rows, p) -> (rows, L)
Tensor project(const PcaProjection& pca, const Tensor& rows);

// Components of the centre loss for one batch (all batch means).
struct MrrLoss {
  double value = 0.0;  // gamma * (loss1 - loss2 + loss3)
  double loss1 = 0.0, loss2 = 0.0, loss3 = 0.0;
  Tensor grad_features;  // same shape as features
  Tensor grad_centers;   // same shape as centers
};

MrrLoss mrr_loss(const Tensor& features, std::span<const int> labels, const CenterSet& centers);

// Deep copy of the victim with an L2Normalize layer spliced after `layer`.
Network attach(const Network& victim, std::size_t layer);
// Multiplies the weights of the first parametric layer after the checkpoint by the
// mean pre-normalization feature norm on `images`, so the replica's logits start
// close to the victim's. Returns the factor.
double rescale_head(Network& defender, std::size_t checkpoint, const Tensor& images);
// The hidden layer feeding the classifier head (the "second-to-last layer").
std::size_t default_checkpoint(const Network& victim);

struct FineTuneConfig {
  TrainConfig train{0.005, 32, 10, 7};
  double gamma = 0.01;
  double divergence_limit = 10.0;  // abort when loss3 exceeds this after an epoch
};

struct FineTuneReport {
  std::vector<double> epoch_loss;  // cross-entropy + centre loss
  std::vector<double> epoch_loss3;
  double intra_distance_before = 0.0;  // mean |f(x) - C^y| on the training data
  double intra_distance_after = 0.0;
};

// Class means of the normalized checkpoint features, rescaled to unit norm.
CenterSet initial_centers(const Network& defender, std::size_t checkpoint, const Dataset& data, double gamma);

Tensor checkpoint_features(const Network& defender, std::size_t checkpoint, const Tensor& images);
double mean_intra_distance(const Tensor& features, std::span<const int> labels, const CenterSet& centers);

// Joint SGD on weights and centers with cross-entropy + centre loss.
FineTuneReport fine_tune(Network& defender, std::size_t checkpoint, CenterSet& centers, const Dataset& data,
                         const FineTuneConfig& cfg);

// Defender network truncated at the checkpoint with the PCA projection appended as a Dense layer.
Network fold_pca(const Network& defender, std::size_t checkpoint, const PcaProjection& pca);

struct LatentDefender {
  Network network;               // victim replica with L2Normalize at `checkpoint_layer`
  std::size_t checkpoint_layer = 0;  // index of the L2Normalize layer inside `network`
  CenterSet centers;
  PcaProjection pca;
  double sp = 5.0;
  std::vector<double> thresholds;                    // per class, PCA-space radius
  std::vector<std::vector<double>> percentile_table;  // per class, ascending benign radii
  Network folded;                                     // derived: fold_pca(network, ...)
  Tensor projected_centers;                           // derived: (num_classes, L)

  void rebuild_derived();
  std::size_t num_classes() const { return centers.num_classes(); }
};

// Distances between projected features and the projected center of each predicted class.
std::vector<double> latent_distances(const LatentDefender& d, const Tensor& images, std::span<const int> predicted);

std::vector<std::vector<double>> profile_radii(const LatentDefender& d, const Tensor& images,
                                               std::span<const int> predicted,
                                               std::size_t min_per_class = kMinProfileSamples);

// threshold[i] = (100 - SP)-th percentile of class-i radii.
std::vector<double> thresholds_for_sp(const std::vector<std::vector<double>>& table, SecurityParameter sp);
void set_security(LatentDefender& d, SecurityParameter sp);

inline bool latent_flag(double distance, double threshold, SecurityParameter sp) {
  return sp.flags_everything() || distance > threshold;
}

struct LatentVerdict {
  bool flag = false;
  double distance = 0.0;
};

LatentVerdict detect_latent(const LatentDefender& d, const Tensor& x, int predicted_class);

struct LatentBuildConfig {
  FineTuneConfig fine_tune;
  double min_energy = 0.99;
  double sp = 5.0;
  double chain_step = 0.1;  // max-abs of the chain perturbation per sample
  bool rescale_head = true;
};

// Trains one defender: attach, centers, fine-tune, PCA on clean features, profile on `profile`.
LatentDefender build_latent_defender(const Network& victim, std::size_t layer, const Dataset& train_data,
                                     const Tensor& pca_images, const Dataset& profile,
                                     std::span<const int> profile_predicted, const LatentBuildConfig& cfg,
                                     FineTuneReport* report = nullptr);

// clip(x + eta) with eta = d loss1 / dx through `d`, scaled per sample to max-abs `step`.
Tensor chain_perturbation(const LatentDefender& d, const Tensor& images, std::span<const int> labels, double step);

// Markov chain of N defenders starting from an already built `first`; defender n+1
// trains (from a fresh victim replica) on the perturbed dataset produced by defender n.
// Every member is profiled on the same clean benign data.
std::vector<LatentDefender> build_chain(const Network& victim, LatentDefender first, const Dataset& train_data,
                                        const Dataset& profile, std::span<const int> profile_predicted,
                                        std::size_t num_defenders, const LatentBuildConfig& cfg,
                                        std::vector<FineTuneReport>* reports = nullptr);

Json latent_defender_to_json(const LatentDefender& d);
LatentDefender latent_defender_from_json(const Json& j);

}  // namespace mrr
