#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mrr/input_defender.hpp"
#include "mrr/rng.hpp"

using namespace mrr;

namespace {

Tensor random_image(std::size_t h, std::size_t w, Rng& rng) {
  Tensor t({1, h, w});
  for (double& v : t.data) v = rng.uniform();
  return t;
}

Eigen::MatrixXd unit_columns(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd D(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) D(i, j) = rng.normal();
    D.col(j).normalize();
  }
  return D;
}

// Class 0: vertical one-pixel stripes, class 1: horizontal ones, plus noise.
Dataset stripe_digits(std::size_t per_class, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.num_classes = 2;
  ds.images = Tensor({2 * per_class, 1, 12, 12});
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const int y = static_cast<int>(i % 2);
    ds.labels.push_back(y);
    for (std::size_t r = 0; r < 12; ++r)
      for (std::size_t c = 0; c < 12; ++c) {
        const bool on = y == 0 ? c % 2 == 0 : r % 2 == 0;
        ds.images[i * 144 + r * 12 + c] = on ? 0.8 + 0.2 * rng.uniform() : 0.05 * rng.uniform();
      }
  }
  return ds;
}

}  // namespace

TEST_CASE("patch geometry") {
  Rng rng(1);
  const Tensor img = random_image(28, 28, rng);
  const PatchConfig cfg;
  const Eigen::MatrixXd Z = extract_patches(img, cfg);
  CHECK(Z.rows() == 64);
  CHECK(Z.cols() == 36);
  CHECK(patches_per_image(img.shape, cfg) == 36);
  CHECK(Z(0, 1) == img[4]);   // second patch starts at column 4
  CHECK(Z(63, 0) == img[7 * 28 + 7]);

  Tensor flat({1, 28, 28}, 0.37);
  const Eigen::MatrixXd F = extract_patches(flat, cfg);
  for (Eigen::Index j = 1; j < F.cols(); ++j) CHECK(F.col(j) == F.col(0));

  CHECK_THROWS_AS(extract_patches(random_image(6, 6, rng), cfg), ShapeError);
  CHECK_THROWS_AS((PatchConfig{8, 0, 10}.validate()), DataError);
}

TEST_CASE("non-overlapping patches reassemble exactly") {
  Rng rng(2);
  const Tensor img = random_image(16, 16, rng);
  const PatchConfig cfg{4, 4, 0};
  CHECK(assemble_patches(extract_patches(img, cfg), Tensor(img.shape), cfg) == img);
  // overlapping columns of the same image average back to the image
  const PatchConfig over{8, 4, 0};
  const Tensor back = assemble_patches(extract_patches(img, over), Tensor(img.shape), over);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(back[i] - img[i]) <= 1e-15);
  // pixels no patch covers come from the fallback
  const Tensor odd = random_image(13, 13, rng);
  const Tensor rebuilt = assemble_patches(extract_patches(odd, over), odd, over);
  CHECK(rebuilt[12] == odd[12]);
}

TEST_CASE("dictionary learning keeps unit atoms and a non-increasing objective") {
  Rng rng(3);
  const Eigen::MatrixXd Z = Eigen::MatrixXd::Random(16, 300).cwiseAbs();
  DictionaryTrace tr;
  const Eigen::MatrixXd D = learn_dictionary(Z, {20, 0.1, 6, 5}, &tr);
  for (Eigen::Index j = 0; j < D.cols(); ++j) CHECK(std::abs(D.col(j).norm() - 1.0) <= 1e-12);
  REQUIRE(tr.objective.size() == 7);
  for (std::size_t i = 1; i < tr.objective.size(); ++i) CHECK(tr.objective[i] <= tr.objective[i - 1] + 1e-6);
  CHECK_THROWS_AS(learn_dictionary(Z.leftCols(10), {20, 0.1, 1, 5}), DataError);
}

TEST_CASE("planted dictionary is recovered to within 5% of its objective") {
  Rng rng(4);
  const Eigen::Index dim = 16, atoms = 12, n = 600;
  const double beta = 0.05;
  const Eigen::MatrixXd Dstar = unit_columns(dim, atoms, rng);
  Eigen::MatrixXd Vstar = Eigen::MatrixXd::Zero(atoms, n);
  for (Eigen::Index j = 0; j < n; ++j) Vstar(static_cast<Eigen::Index>(rng.below(atoms)), j) = rng.uniform(1.0, 2.0);
  const Eigen::MatrixXd Z = Dstar * Vstar;
  const double planted = dictionary_objective(Dstar, Z, sparse_code(Dstar, Z, beta), beta);
  DictionaryTrace tr;
  learn_dictionary(Z, {static_cast<std::size_t>(atoms), beta, 50, 9}, &tr);
  CHECK(tr.objective.back() <= 1.05 * planted);
}

TEST_CASE("a huge sparsity weight zeroes every code") {
  Rng rng(5);
  const Eigen::MatrixXd Z = Eigen::MatrixXd::Random(8, 40);
  DictionaryTrace tr;
  const Eigen::MatrixXd D = learn_dictionary(Z, {10, 1e6, 2, 1}, &tr);
  CHECK(sparse_code(D, Z, 1e6).isZero(0.0));
  CHECK(tr.objective.back() == doctest::Approx(0.5 * Z.squaredNorm()).epsilon(1e-12));
}

TEST_CASE("psnr formula and sentinel") {
  CHECK(psnr_from_mse(0.01) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(psnr_from_mse(1.0) == 0.0);
  CHECK(psnr_from_mse(0.0) == kPsnrSentinel);

  // an image made of one atom per patch position reconstructs exactly
  Dictionary dict;
  dict.patch = {4, 4, 0};
  dict.atoms = Eigen::MatrixXd::Zero(16, 2);
  dict.atoms.col(0).setConstant(0.25);
  dict.atoms(5, 1) = 1.0;
  Tensor img({1, 8, 8}, 0.5);
  CHECK(reconstruct_and_psnr(img, dict, {2, 1e-12}) == kPsnrSentinel);
}

TEST_CASE("psnr thresholds follow linear percentiles") {
  std::vector<double> psnr(10);
  std::iota(psnr.begin(), psnr.end(), 1.0);
  for (double& v : psnr) v *= 10.0;
  CHECK(threshold_for_sp(psnr, SecurityParameter(10)) == doctest::Approx(19.0).epsilon(1e-12));
  CHECK(threshold_for_sp(psnr, SecurityParameter(0)) == 10.0);
  std::size_t flagged = 0;
  for (double v : psnr) flagged += input_flag(v, threshold_for_sp(psnr, SecurityParameter(0)), SecurityParameter(0));
  CHECK(flagged == 0);
  CHECK(input_flag(kPsnrSentinel, threshold_for_sp(psnr, SecurityParameter(100)), SecurityParameter(100)));
}

TEST_CASE("input defender on stripe images") {
  const Dataset train = stripe_digits(60, 1), profile = stripe_digits(40, 2);
  const PatchConfig patch{4, 4, 600};
  std::vector<DictionaryTrace> traces;
  InputDefender d = learn_dictionaries(train, patch, {12, 0.02, 4, 3}, {4, 1e-6}, &traces);
  REQUIRE(d.num_classes() == 2);
  CHECK(traces.size() == 2);

  // own-class dictionaries fit better on average
  const auto own = input_psnr(d, profile.images, profile.labels);
  std::vector<int> swapped(profile.labels);
  for (int& y : swapped) y = 1 - y;
  const auto other = input_psnr(d, profile.images, swapped);
  CHECK(std::accumulate(own.begin(), own.end(), 0.0) > std::accumulate(other.begin(), other.end(), 0.0));

  profile_psnr(d, profile.images, profile.labels);
  set_security(d, SecurityParameter(5));
  Rng rng(9);
  const Tensor noise = random_image(12, 12, rng);
  CHECK(detect_input(d, noise, 0).flag);
  set_security(d, SecurityParameter(100));
  CHECK(detect_input(d, slice_rows(profile.images, 0, 1), profile.labels[0]).flag);

  SUBCASE("json round trip") {
    set_security(d, SecurityParameter(5));
    const std::string text = dump_json(dictionary_to_json(d.dictionaries[1], d.omp));
    OmpConfig omp_back;
    const Dictionary back = dictionary_from_json(Json::parse(text), &omp_back);
    CHECK(dump_json(dictionary_to_json(back, omp_back)) == text);
    CHECK(back.atoms == d.dictionaries[1].atoms);
    CHECK(omp_back.k == 4);
  }

  CHECK_THROWS_AS(profile_psnr(d, slice_rows(profile.images, 0, 10), std::span(profile.labels).first(10)),
                  DataError);
}
