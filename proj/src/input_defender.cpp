#include "mrr/input_defender.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mrr/error.hpp"
#include "mrr/rng.hpp"
#include "mrr/sparse.hpp"

namespace mrr {
namespace {

Tensor image_at(const Tensor& images, std::size_t i) {
  Shape s(images.shape.begin() + 1, images.shape.end());
  return Tensor(s, std::vector<double>(images.row(i).begin(), images.row(i).end()));
}

void check_image(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("expected an image of shape (C, H, W), got " + shape_to_string(image.shape));
}

Json matrix_to_json(const Eigen::MatrixXd& m) {
  // row-major (rows, cols) like every other tensor
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return tensor_to_json(t);
}

Eigen::MatrixXd matrix_from_json(const Json& j) {
  const Tensor t = tensor_from_json(j);
  if (t.rank() != 2) throw DataError("dictionary atoms must be a matrix");
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t[static_cast<std::size_t>(r * m.cols() + c)];
  return m;
}

}  // namespace

void PatchConfig::validate() const {
  if (patch_size == 0) throw DataError("patch size must be positive");
  if (stride == 0) throw DataError("patch stride must be positive");
}

std::size_t patches_per_image(const Shape& s, const PatchConfig& cfg) {
  cfg.validate();
  if (s.size() != 3) throw ShapeError("expected an image shape (C, H, W)");
  if (cfg.patch_size > s[1] || cfg.patch_size > s[2]) {
    throw ShapeError("patch size " + std::to_string(cfg.patch_size) + " larger than image " + shape_to_string(s));
  }
  return ((s[1] - cfg.patch_size) / cfg.stride + 1) * ((s[2] - cfg.patch_size) / cfg.stride + 1);
}

Eigen::MatrixXd extract_patches(const Tensor& image, const PatchConfig& cfg) {
  check_image(image);
  const std::size_t n = patches_per_image(image.shape, cfg);
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2), P = cfg.patch_size;
  Eigen::MatrixXd Z(static_cast<Eigen::Index>(C * P * P), static_cast<Eigen::Index>(n));
  Eigen::Index col = 0;
  for (std::size_t y = 0; y + P <= H; y += cfg.stride) {
    for (std::size_t x = 0; x + P <= W; x += cfg.stride, ++col) {
      Eigen::Index r = 0;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t dy = 0; dy < P; ++dy)
          for (std::size_t dx = 0; dx < P; ++dx) Z(r++, col) = image[(c * H + y + dy) * W + x + dx];
    }
  }
  return Z;
}

Tensor assemble_patches(const Eigen::MatrixXd& columns, const Tensor& fallback, const PatchConfig& cfg) {
  check_image(fallback);
  if (static_cast<std::size_t>(columns.cols()) != patches_per_image(fallback.shape, cfg)) {
    throw ShapeError("patch count does not match image geometry");
  }
  const std::size_t C = fallback.dim(0), H = fallback.dim(1), W = fallback.dim(2), P = cfg.patch_size;
  Tensor sum(fallback.shape), count(fallback.shape);
  Eigen::Index col = 0;
  for (std::size_t y = 0; y + P <= H; y += cfg.stride) {
    for (std::size_t x = 0; x + P <= W; x += cfg.stride, ++col) {
      Eigen::Index r = 0;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t dy = 0; dy < P; ++dy)
          for (std::size_t dx = 0; dx < P; ++dx) {
            const std::size_t at = (c * H + y + dy) * W + x + dx;
            sum[at] += columns(r++, col);
            count[at] += 1.0;
          }
    }
  }
  Tensor out = fallback;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (count[i] > 0.0) out[i] = sum[i] / count[i];
  }
  return out;
}

Eigen::MatrixXd sparse_code(const Eigen::MatrixXd& D, const Eigen::MatrixXd& Z, double beta) {
  const Eigen::MatrixXd G = D.transpose() * D;
  const Eigen::MatrixXd C = D.transpose() * Z;
  const auto max_active = static_cast<std::size_t>(std::min(D.rows(), D.cols()));
  Eigen::MatrixXd V(D.cols(), Z.cols());
#pragma omp parallel for schedule(dynamic, 16)
  for (Eigen::Index j = 0; j < Z.cols(); ++j) {
    V.col(j) = lars_lasso_gram(G, C.col(j), beta, max_active);
  }
  return V;
}

double dictionary_objective(const Eigen::MatrixXd& D, const Eigen::MatrixXd& Z, const Eigen::MatrixXd& V,
                            double beta) {
  return 0.5 * (Z - D * V).squaredNorm() + beta * V.cwiseAbs().sum();
}

Eigen::MatrixXd learn_dictionary(const Eigen::MatrixXd& Z, const DictionaryConfig& cfg, DictionaryTrace* trace) {
  const auto k = static_cast<Eigen::Index>(cfg.k_max);
  if (cfg.k_max == 0) throw DataError("dictionary needs at least one atom");
  if (Z.cols() < k) {
    throw DataError("dictionary learning needs at least k_max = " + std::to_string(cfg.k_max) + " patches, got " +
                    std::to_string(Z.cols()));
  }

  // Seed atoms with distinct non-zero data columns.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(Z.cols()));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.seed);
  rng.shuffle(std::span(order));
  Eigen::MatrixXd D(Z.rows(), k);
  Eigen::Index filled = 0;
  for (Eigen::Index idx : order) {
    if (filled == k) break;
    const double n = Z.col(idx).norm();
    if (n > 0.0) D.col(filled++) = Z.col(idx) / n;
  }
  if (filled < k) throw DataError("not enough non-zero patches to seed the dictionary");

  DictionaryTrace local;
  Eigen::MatrixXd V = sparse_code(D, Z, cfg.beta);
  local.objective.push_back(dictionary_objective(D, Z, V, cfg.beta));

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const Eigen::MatrixXd A = V * V.transpose();
    const Eigen::MatrixXd B = Z * V.transpose();
    std::vector<Eigen::Index> worst;  // data columns by descending residual, built on demand
    std::size_t next_worst = 0;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (A(j, j) <= 1e-15) {
        if (worst.empty()) {
          const Eigen::VectorXd err = (Z - D * V).colwise().squaredNorm().transpose();
          worst.resize(static_cast<std::size_t>(Z.cols()));
          std::iota(worst.begin(), worst.end(), 0);
          std::stable_sort(worst.begin(), worst.end(), [&](Eigen::Index a, Eigen::Index b) { return err(a) > err(b); });
        }
        while (next_worst < worst.size() && Z.col(worst[next_worst]).norm() == 0.0) ++next_worst;
        if (next_worst < worst.size()) {
          D.col(j) = Z.col(worst[next_worst]) / Z.col(worst[next_worst]).norm();
          ++next_worst;
          ++local.dead_atom_resets;
        }
        continue;
      }
      Eigen::VectorXd u = B.col(j) - D * A.col(j) + D.col(j) * A(j, j);
      const double n = u.norm();
      if (n > 0.0) D.col(j) = u / n;
    }
    V = sparse_code(D, Z, cfg.beta);
    local.objective.push_back(dictionary_objective(D, Z, V, cfg.beta));
  }
  if (trace) *trace = std::move(local);
  return D;
}

double psnr_from_mse(double mse) {
  if (mse <= 0.0) return kPsnrSentinel;
  return std::min(kPsnrSentinel, 10.0 * std::log10(1.0 / mse));
}

double reconstruct_and_psnr(const Tensor& image, const Dictionary& dict, const OmpConfig& omp_cfg) {
  const Eigen::MatrixXd Z = extract_patches(image, dict.patch);
  if (Z.rows() != dict.atoms.rows()) throw ShapeError("dictionary patch dimension does not match the image");
  Eigen::MatrixXd R(Z.rows(), Z.cols());
  for (Eigen::Index j = 0; j < Z.cols(); ++j) {
    R.col(j) = omp(dict.atoms, Z.col(j), omp_cfg.k, omp_cfg.tol).reconstruction;
  }
  const Tensor rec = assemble_patches(R, image, dict.patch);
  double se = 0.0;
  for (std::size_t i = 0; i < image.size(); ++i) se += (rec[i] - image[i]) * (rec[i] - image[i]);
  return psnr_from_mse(se / static_cast<double>(image.size()));
}

Eigen::MatrixXd class_patches(const Dataset& data, int class_id, const PatchConfig& cfg, std::uint64_t seed) {
  std::vector<Eigen::VectorXd> cols;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] != class_id) continue;
    const Eigen::MatrixXd Z = extract_patches(image_at(data.images, i), cfg);
    for (Eigen::Index j = 0; j < Z.cols(); ++j) {
      if (Z.col(j).squaredNorm() > 0.0) cols.emplace_back(Z.col(j));
    }
  }
  std::vector<std::size_t> keep(cols.size());
  std::iota(keep.begin(), keep.end(), 0);
  if (cfg.max_patches_per_class > 0 && keep.size() > cfg.max_patches_per_class) {
    Rng rng(seed);
    rng.shuffle(std::span(keep));
    keep.resize(cfg.max_patches_per_class);
    std::sort(keep.begin(), keep.end());
  }
  const Eigen::Index rows = cols.empty() ? 0 : cols.front().size();
  Eigen::MatrixXd out(rows, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = cols[keep[j]];
  return out;
}

InputDefender learn_dictionaries(const Dataset& data, const PatchConfig& patch, const DictionaryConfig& cfg,
                                 const OmpConfig& omp_cfg, std::vector<DictionaryTrace>* traces) {
  patch.validate();
  if (data.num_classes == 0) throw DataError("dataset has no classes");
  InputDefender d;
  d.omp = omp_cfg;
  for (std::size_t c = 0; c < data.num_classes; ++c) {
    const Eigen::MatrixXd Z = class_patches(data, static_cast<int>(c), patch, cfg.seed + 1000 * (c + 1));
    DictionaryConfig member = cfg;
    member.seed = cfg.seed + c;
    DictionaryTrace trace;
    Dictionary dict;
    dict.class_id = static_cast<int>(c);
    dict.patch = patch;
    dict.beta = cfg.beta;
    try {
      dict.atoms = learn_dictionary(Z, member, &trace);
    } catch (const DataError& e) {
      throw DataError("class " + std::to_string(c) + ": " + e.what());
    }
    d.dictionaries.push_back(std::move(dict));
    if (traces) traces->push_back(std::move(trace));
  }
  return d;
}

std::vector<double> input_psnr(const InputDefender& d, const Tensor& images, std::span<const int> predicted) {
  if (predicted.size() != images.rows()) throw ShapeError("one predicted class per image required");
  for (int p : predicted) {
    if (p < 0 || static_cast<std::size_t>(p) >= d.num_classes()) {
      throw DataError("predicted class " + std::to_string(p) + " has no dictionary");
    }
  }
  std::vector<double> out(images.rows());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::size_t i = 0; i < images.rows(); ++i) {
    out[i] = reconstruct_and_psnr(image_at(images, i), d.dictionaries[predicted[i]], d.omp);
  }
  return out;
}

void profile_psnr(InputDefender& d, const Tensor& images, std::span<const int> predicted) {
  const auto psnr = input_psnr(d, images, predicted);
  std::vector<std::vector<double>> table(d.num_classes());
  for (std::size_t i = 0; i < psnr.size(); ++i) table[predicted[i]].push_back(psnr[i]);
  for (std::size_t c = 0; c < table.size(); ++c) {
    if (table[c].size() < kMinProfileSamples) {
      throw DataError("insufficient profile for class " + std::to_string(c) + ": " + std::to_string(table[c].size()) +
                      " benign samples, need " + std::to_string(kMinProfileSamples));
    }
    std::sort(table[c].begin(), table[c].end());
    d.dictionaries[c].psnr_percentiles = std::move(table[c]);
  }
  set_security(d, SecurityParameter(d.sp));
}

double threshold_for_sp(std::span<const double> sorted_psnr, SecurityParameter sp) {
  if (sp.flags_everything()) return kPsnrSentinel + 1.0;
  return percentile(sorted_psnr, sp.value());
}

void set_security(InputDefender& d, SecurityParameter sp) {
  d.sp = sp.value();
  for (auto& dict : d.dictionaries) {
    if (!dict.psnr_percentiles.empty()) dict.psnr_threshold = threshold_for_sp(dict.psnr_percentiles, sp);
  }
}

InputVerdict detect_input(const InputDefender& d, const Tensor& x, int predicted_class) {
  const Tensor image = x.rank() == 4 ? image_at(x, 0) : x;
  if (predicted_class < 0 || static_cast<std::size_t>(predicted_class) >= d.num_classes()) {
    throw DataError("predicted class " + std::to_string(predicted_class) + " has no dictionary");
  }
  const Dictionary& dict = d.dictionaries[predicted_class];
  const double psnr = reconstruct_and_psnr(image, dict, d.omp);
  return {input_flag(psnr, dict.psnr_threshold, SecurityParameter(d.sp)), psnr};
}

Json dictionary_to_json(const Dictionary& d, const OmpConfig& omp_cfg) {
  return {{"format_version", kModelFormatVersion},
          {"class_id", d.class_id},
          {"patch_config",
           {{"patch_size", d.patch.patch_size},
            {"stride", d.patch.stride},
            {"max_patches_per_class", d.patch.max_patches_per_class}}},
          {"omp", {{"k", omp_cfg.k}, {"tol", omp_cfg.tol}}},
          {"beta", d.beta},
          {"atoms", matrix_to_json(d.atoms)},
          {"threshold", d.psnr_threshold},
          {"percentiles", doubles_to_json(d.psnr_percentiles)}};
}

Dictionary dictionary_from_json(const Json& j, OmpConfig* omp_cfg) {
  try {
    Dictionary d;
    d.class_id = j.at("class_id").get<int>();
    const Json& pc = j.at("patch_config");
    d.patch = {pc.at("patch_size").get<std::size_t>(), pc.at("stride").get<std::size_t>(),
               pc.at("max_patches_per_class").get<std::size_t>()};
    d.patch.validate();
    d.beta = j.at("beta").get<double>();
    d.atoms = matrix_from_json(j.at("atoms"));
    if (static_cast<std::size_t>(d.atoms.rows()) % (d.patch.patch_size * d.patch.patch_size) != 0) {
      throw DataError("dictionary atom length does not match its patch size");
    }
    d.psnr_threshold = j.at("threshold").get<double>();
    d.psnr_percentiles = doubles_from_json(j.at("percentiles"));
    if (omp_cfg) *omp_cfg = {j.at("omp").at("k").get<std::size_t>(), j.at("omp").at("tol").get<double>()};
    return d;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed dictionary JSON: ") + e.what());
  }
}

}  // namespace mrr
