#include <doctest.h>

#include <algorithm>
#include <memory>
#include <numeric>

#include "mrr/fusion.hpp"
#include "mrr/rng.hpp"

using namespace mrr;

namespace {

std::vector<bool> to_vec(std::span<const bool> s) { return {s.begin(), s.end()}; }

double fuse(const std::vector<bool>& flags, const std::vector<double>& p) {
  auto owned = std::make_unique<bool[]>(flags.size());
  std::copy(flags.begin(), flags.end(), owned.get());
  return noisy_or(std::span<const bool>(owned.get(), flags.size()), p);
}

}  // namespace

TEST_CASE("noisy-or examples") {
  CHECK(fuse({false, false, false}, {0.9, 0.5, 0.3}) == 0.0);
  CHECK(fuse({false, true, false}, {0.2, 1.0, 0.3}) == 1.0);
  CHECK(fuse({true, true}, {0.5, 0.5}) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK_THROWS_AS(fuse({true}, {0.5, 0.5}), ShapeError);
  CHECK_THROWS_AS((FusionModel{{0.5, 1.5}}.validate()), DataError);
}

TEST_CASE("noisy-or is monotone, permutation invariant and reduces to OR") {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(6);
    std::vector<bool> d(n);
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      d[i] = rng.below(2) == 1;
      p[i] = rng.uniform();
    }
    const double base = fuse(d, p);
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);

    // raising a flag never lowers the probability
    const std::size_t i = rng.below(n);
    std::vector<bool> up = d;
    up[i] = true;
    CHECK(fuse(up, p) >= base);
    // neither does raising a reliability
    std::vector<double> q = p;
    q[i] = std::min(1.0, q[i] + rng.uniform() * 0.5);
    CHECK(fuse(d, q) >= base);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span(perm));
    std::vector<bool> dp(n);
    std::vector<double> pp(n);
    for (std::size_t k = 0; k < n; ++k) {
      dp[k] = d[perm[k]];
      pp[k] = p[perm[k]];
    }
    CHECK(fuse(dp, pp) == doctest::Approx(base).epsilon(1e-12));

    const std::vector<double> ones(n, 1.0);
    CHECK(fuse(d, ones) == (std::find(d.begin(), d.end(), true) != d.end() ? 1.0 : 0.0));
  }
}

TEST_CASE("reliability estimate") {
  CHECK(estimate_pn({25, 75}) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK_THROWS_AS(estimate_pn({0, 0}), CalibrationError);
  const bool benign[] = {true, false, false, false};
  const bool adv[] = {true, true, true, false};
  CHECK(estimate_pn(benign, adv) == doctest::Approx(0.75).epsilon(1e-15));
  const bool none[] = {false, false};
  CHECK_THROWS_AS(estimate_pn(none, none), CalibrationError);
}

TEST_CASE("alarm boundary is inclusive") {
  CHECK(decide(0.5) == Alarm::Reject);
  CHECK(decide(0.49) == Alarm::Accept);
  CHECK(decide(0.0) == Alarm::Accept);
  CHECK(to_string(Alarm::Reject) != to_string(Alarm::Accept));
}
