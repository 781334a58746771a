#include "mrr/sparse.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "mrr/error.hpp"

namespace mrr {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

Eigen::VectorXd lars_lasso(const Eigen::MatrixXd& D, const Eigen::VectorXd& z, double beta) {
  if (D.rows() != z.size()) throw ShapeError("lars_lasso: dictionary rows do not match signal length");
  const Eigen::MatrixXd G = D.transpose() * D;
  const Eigen::VectorXd c = D.transpose() * z;
  return lars_lasso_gram(G, c, beta, static_cast<std::size_t>(std::min(D.rows(), D.cols())));
}

Eigen::VectorXd lars_lasso_gram(const Eigen::MatrixXd& G, const Eigen::VectorXd& c0, double beta,
                                std::size_t max_active) {
  if (beta < 0.0) throw DataError("lasso penalty must be non-negative");
  const Eigen::Index p = G.rows();
  Eigen::VectorXd v = Eigen::VectorXd::Zero(p);
  if (p == 0) return v;

  Eigen::Index first = 0;
  double lambda = c0.cwiseAbs().maxCoeff(&first);
  if (lambda <= beta) return v;

  std::vector<Eigen::Index> active{first};
  std::vector<char> in_active(static_cast<std::size_t>(p), 0);
  in_active[static_cast<std::size_t>(first)] = 1;
  std::vector<double> sign{c0(first) > 0 ? 1.0 : -1.0};

  auto solve_active = [&](const Eigen::VectorXd& rhs) {
    const auto m = static_cast<Eigen::Index>(active.size());
    Eigen::MatrixXd Gaa(m, m);
    for (Eigen::Index a = 0; a < m; ++a)
      for (Eigen::Index b = 0; b < m; ++b) Gaa(a, b) = G(active[a], active[b]);
    return Eigen::VectorXd(Gaa.ldlt().solve(rhs));
  };

  const std::size_t max_steps = 8 * static_cast<std::size_t>(p) + 16;
  for (std::size_t step = 0; step < max_steps; ++step) {
    const auto m = static_cast<Eigen::Index>(active.size());
    Eigen::VectorXd s(m);
    for (Eigen::Index a = 0; a < m; ++a) s(a) = sign[a];
    const Eigen::VectorXd w = solve_active(s);
    // a = G[:, A] w, the rate at which correlations fall along the path
    Eigen::VectorXd rate = Eigen::VectorXd::Zero(p);
    for (Eigen::Index a = 0; a < m; ++a) rate += G.col(active[a]) * w(a);
    const Eigen::VectorXd c = c0 - G * v;

    double gamma = lambda - beta;  // reaching the target penalty ends the path
    enum { Stop, Join, Drop } event = Stop;
    Eigen::Index who = -1;
    if (active.size() < max_active) {
      for (Eigen::Index j = 0; j < p; ++j) {
        if (in_active[static_cast<std::size_t>(j)]) continue;
        for (double g : {(lambda - c(j)) / (1.0 - rate(j)), (lambda + c(j)) / (1.0 + rate(j))}) {
          if (g > 1e-14 && g < gamma) {
            gamma = g;
            event = Join;
            who = j;
          }
        }
      }
    }
    for (Eigen::Index a = 0; a < m; ++a) {
      const double x = v(active[a]);
      if (w(a) == 0.0 || x == 0.0) continue;
      const double g = -x / w(a);
      if (g > 1e-14 && g < gamma) {
        gamma = g;
        event = Drop;
        who = a;
      }
    }

    for (Eigen::Index a = 0; a < m; ++a) v(active[a]) += gamma * w(a);
    lambda -= gamma;
    if (event == Stop) break;
    if (event == Join) {
      active.push_back(who);
      in_active[static_cast<std::size_t>(who)] = 1;
      sign.push_back((c(who) - gamma * rate(who)) > 0 ? 1.0 : -1.0);
    } else {
      v(active[who]) = 0.0;
      in_active[static_cast<std::size_t>(active[who])] = 0;
      active.erase(active.begin() + who);
      sign.erase(sign.begin() + who);
      if (active.empty()) break;
    }
  }

  // Polish: exact solution of the optimality system on the final active set and signs.
  if (!active.empty()) {
    const auto m = static_cast<Eigen::Index>(active.size());
    Eigen::VectorXd rhs(m);
    for (Eigen::Index a = 0; a < m; ++a) rhs(a) = c0(active[a]) - beta * sign[a];
    const Eigen::VectorXd x = solve_active(rhs);
    bool consistent = true;
    for (Eigen::Index a = 0; a < m; ++a) consistent = consistent && x(a) * sign[a] >= 0.0;
    if (consistent) {
      v.setZero();
      for (Eigen::Index a = 0; a < m; ++a) v(active[a]) = x(a);
    }
  }
  return v;
}

double lasso_objective(const Eigen::MatrixXd& D, const Eigen::VectorXd& z, const Eigen::VectorXd& v, double beta) {
  return 0.5 * (z - D * v).squaredNorm() + beta * v.lpNorm<1>();
}

double lasso_kkt_violation(const Eigen::MatrixXd& D, const Eigen::VectorXd& z, const Eigen::VectorXd& v,
                           double beta) {
  const Eigen::VectorXd corr = D.transpose() * (z - D * v);
  double worst = 0.0;
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    if (v(j) != 0.0) {
      worst = std::max(worst, std::abs(corr(j) - beta * (v(j) > 0 ? 1.0 : -1.0)));
    } else {
      worst = std::max(worst, std::abs(corr(j)) - beta);
    }
  }
  return worst;
}

OmpResult omp(const Eigen::MatrixXd& D, const Eigen::VectorXd& z, std::size_t k, double tol) {
  if (D.rows() != z.size()) throw ShapeError("omp: dictionary rows do not match signal length");
  if (k > static_cast<std::size_t>(D.rows())) throw DataError("omp: sparsity exceeds signal dimension");
  const Eigen::Index n = D.rows();
  OmpResult r;
  Eigen::VectorXd res = z;
  Eigen::MatrixXd Q(n, static_cast<Eigen::Index>(k));
  std::vector<char> used(static_cast<std::size_t>(D.cols()), 0);
  r.residual_history.push_back(res.norm());

  while (r.support.size() < k && res.norm() > tol) {
    const Eigen::VectorXd corr = D.transpose() * res;
    Eigen::Index best = -1;
    double best_abs = 0.0;
    for (Eigen::Index j = 0; j < corr.size(); ++j) {
      if (std::abs(corr(j)) > best_abs) {  // strict: ties keep the lowest index
        best_abs = std::abs(corr(j));
        best = j;
      }
    }
    if (best < 0 || best_abs <= 1e-13 * std::max(1.0, z.norm())) break;
    if (used[static_cast<std::size_t>(best)]) {
      throw std::logic_error("omp reselected atom " + std::to_string(best));
    }
    const auto m = static_cast<Eigen::Index>(r.support.size());
    Eigen::VectorXd q = D.col(best);
    for (int pass = 0; pass < 2; ++pass) {
      for (Eigen::Index a = 0; a < m; ++a) q -= Q.col(a).dot(q) * Q.col(a);
    }
    const double qn = q.norm();
    if (qn <= 1e-12) break;  // atom already in the span
    Q.col(m) = q / qn;
    res -= Q.col(m).dot(res) * Q.col(m);
    used[static_cast<std::size_t>(best)] = 1;
    r.support.push_back(static_cast<std::size_t>(best));
    r.residual_history.push_back(res.norm());
  }
  r.residual_norm = res.norm();
  r.reconstruction = z - res;
  return r;
}

}  // namespace mrr
