#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mrr/error.hpp"
#include "mrr/tensor.hpp"

namespace mrr {

// Images (N, C, H, W) scaled to [0, 1] with integer labels.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
};

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

// --- IDX files -------------------------------------------------------------

class IdxError : public DataError {
 public:
  enum class Kind { Open, WrongMagic, Truncated, CountMismatch };
  IdxError(Kind kind, const std::string& message) : DataError(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;      // unsigned byte, 3 dims
inline constexpr std::uint32_t kIdxImagesF64Magic = 0x00000E03;   // float64, 3 dims
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;      // unsigned byte, 1 dim

// Byte images become b / 255.0; float64 images are read as stored. Output (N, 1, H, W).
Tensor read_idx_images(const std::filesystem::path& path);
std::vector<int> read_idx_labels(const std::filesystem::path& path);
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

// Writes round(v * 255) bytes; values must lie in [0, 1].
void write_idx_images_u8(const std::filesystem::path& path, const Tensor& images);
// Exact float64 payload, used for adversarial batches whose perturbations are sub-byte.
void write_idx_images_f64(const std::filesystem::path& path, const Tensor& images);
void write_idx_labels(const std::filesystem::path& path, std::span<const int> labels);

// --- splitting ---------------------------------------------------------------

// Stratified partition of sample indices. Every per-class, per-part count is the
// floor or ceiling of its proportional share, and the part sizes follow
// largest-remainder rounding of N * fraction whenever such a table exists.
std::vector<std::vector<std::size_t>> stratified_split(std::span<const int> labels, std::size_t num_classes,
                                                       std::span<const double> fractions, std::uint64_t seed);

struct SplitDataset {
  Dataset train;
  Dataset val;          // threshold profiling
  Dataset calibration;  // fusion reliabilities
};

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double calibration = 0.1;
};

SplitDataset split(const Dataset& ds, const SplitFractions& fractions, std::uint64_t seed,
                   bool calibration_required = true);

}  // namespace mrr
