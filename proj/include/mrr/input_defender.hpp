#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mrr/dataset.hpp"
#include "mrr/model_io.hpp"
#include "mrr/security.hpp"
#include "mrr/tensor.hpp"

namespace mrr {

struct PatchConfig {
  std::size_t patch_size = 8;
  std::size_t stride = 4;
  std::size_t max_patches_per_class = 3000;  // training cap

  void validate() const;
};

// Columns are flattened (channel, row, col) patches in raster order of their top-left corner.
Eigen::MatrixXd extract_patches(const Tensor& image, const PatchConfig& cfg);
std::size_t patches_per_image(const Shape& image_shape, const PatchConfig& cfg);
// Averages overlapping columns back into an image; pixels outside every patch come from `fallback`.
Tensor assemble_patches(const Eigen::MatrixXd& columns, const Tensor& fallback, const PatchConfig& cfg);

struct DictionaryConfig {
  std::size_t k_max = 225;
  double beta = 0.15;
  std::size_t iterations = 10;
  std::uint64_t seed = 11;
};

struct DictionaryTrace {
  std::vector<double> objective;  // after each alternation, starting with the initial dictionary
  std::size_t dead_atom_resets = 0;
};

// Alternating minimization of 1/2 |Z - D V|^2 + beta |V|_1 subject to unit-norm columns.
Eigen::MatrixXd learn_dictionary(const Eigen::MatrixXd& Z, const DictionaryConfig& cfg,
                                 DictionaryTrace* trace = nullptr);

// Per-column lasso codes of Z under D.
Eigen::MatrixXd sparse_code(const Eigen::MatrixXd& D, const Eigen::MatrixXd& Z, double beta);
double dictionary_objective(const Eigen::MatrixXd& D, const Eigen::MatrixXd& Z, const Eigen::MatrixXd& V,
                            double beta);

struct Dictionary {
  int class_id = 0;
  PatchConfig patch;
  double beta = 0.15;
  Eigen::MatrixXd atoms;                // (patch_dim, k_max), unit-norm columns
  double psnr_threshold = 0.0;
  std::vector<double> psnr_percentiles;  // ascending benign PSNRs of this predicted class
};

inline constexpr double kPsnrSentinel = 200.0;

double psnr_from_mse(double mse);

struct OmpConfig {
  std::size_t k = 8;
  double tol = 1e-4;
};

// OMP-reconstructs every patch, averages overlaps, scores the whole image.
double reconstruct_and_psnr(const Tensor& image, const Dictionary& dict, const OmpConfig& omp_cfg);

struct InputDefender {
  std::vector<Dictionary> dictionaries;  // indexed by class
  OmpConfig omp;
  double sp = 5.0;

  std::size_t num_classes() const { return dictionaries.size(); }
};

// Patches of the images of `class_id` (zero patches skipped), capped and subsampled by seed.
Eigen::MatrixXd class_patches(const Dataset& data, int class_id, const PatchConfig& cfg, std::uint64_t seed);

InputDefender learn_dictionaries(const Dataset& data, const PatchConfig& patch, const DictionaryConfig& cfg,
                                 const OmpConfig& omp_cfg, std::vector<DictionaryTrace>* traces = nullptr);

// PSNR of each image under the dictionary of its predicted class.
std::vector<double> input_psnr(const InputDefender& d, const Tensor& images, std::span<const int> predicted);

// Stores sorted per-predicted-class PSNRs; at least kMinProfileSamples per class.
void profile_psnr(InputDefender& d, const Tensor& images, std::span<const int> predicted);

// SP-th percentile of the benign PSNRs.
double threshold_for_sp(std::span<const double> sorted_psnr, SecurityParameter sp);
void set_security(InputDefender& d, SecurityParameter sp);

inline bool input_flag(double psnr, double threshold, SecurityParameter sp) {
  return sp.flags_everything() || psnr < threshold;
}

struct InputVerdict {
  bool flag = false;
  double psnr = 0.0;
};

InputVerdict detect_input(const InputDefender& d, const Tensor& x, int predicted_class);

Json dictionary_to_json(const Dictionary& d, const OmpConfig& omp_cfg);
Dictionary dictionary_from_json(const Json& j, OmpConfig* omp_cfg = nullptr);

}  // namespace mrr
