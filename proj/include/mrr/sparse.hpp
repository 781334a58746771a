#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace mrr {

// argmin_v 1/2 |z - D v|^2 + beta |v|_1 by the LARS homotopy with lasso drops.
// D columns are expected to have unit norm.
Eigen::VectorXd lars_lasso(const Eigen::MatrixXd& D, const Eigen::VectorXd& z, double beta);

// Same, reusing a precomputed Gram matrix G = D^T D and correlations c = D^T z.
Eigen::VectorXd lars_lasso_gram(const Eigen::MatrixXd& G, const Eigen::VectorXd& c, double beta,
                                std::size_t max_active);

double lasso_objective(const Eigen::MatrixXd& D, const Eigen::VectorXd& z, const Eigen::VectorXd& v, double beta);

// Largest violation of the lasso optimality conditions:
// |D_j^T r| = beta with sign(v_j) on the support, |D_j^T r| <= beta elsewhere.
double lasso_kkt_violation(const Eigen::MatrixXd& D, const Eigen::VectorXd& z, const Eigen::VectorXd& v,
                           double beta);

struct OmpResult {
  double residual_norm = 0.0;
  std::vector<std::size_t> support;       // selection order
  std::vector<double> residual_history;   // |res| after each selection, starting with |z|
  Eigen::VectorXd reconstruction;         // projection of z onto span(D_support)
};

// Greedy orthogonal matching pursuit; least squares kept by incremental Gram-Schmidt.
OmpResult omp(const Eigen::MatrixXd& D, const Eigen::VectorXd& z, std::size_t k, double tol);

}  // namespace mrr
