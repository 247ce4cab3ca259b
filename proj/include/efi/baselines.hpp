#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "efi/synthetic_csi.hpp"
#include "efi/tensor.hpp"

namespace efi {

// Sparse recovery problem min_x 0.5*||y - Ax||^2 + lambda*||x||_1 with a
// column-normalized sensing matrix, m < n.
struct CSProblem {
  Eigen::MatrixXd A;
  Eigen::VectorXd y;
  double lambda_l1 = 0.01;
  int max_iterations = 2000;
  double tolerance = 1e-10;

  void validate() const;
};

struct IstaResult {
  Eigen::VectorXd x;
  int iterations = 0;
  double objective = 0.0;
  bool converged = false;
};

double soft_threshold(double v, double t);

// Seeded Gaussian matrix with unit-norm columns.
Eigen::MatrixXd gaussian_sensing_matrix(int m, int n, std::uint64_t seed);

// Proximal-gradient iterations x <- soft_threshold(x + (1/L) A^T (y - Ax),
// lambda/L) with L the top eigenvalue of A^T A from power iteration. The
// objective never increases; stops when its decrease drops below tolerance.
IstaResult ista_solve(const CSProblem& problem);

double lasso_objective(const CSProblem& problem, const Eigen::VectorXd& x);

enum class SparsityBasis { identity, dct };

struct CsFrameConfig {
  double rate = 0.25;  // m/n per column
  double lambda_l1 = 0.01;
  int max_iterations = 2000;
  double tolerance = 1e-10;
  SparsityBasis basis = SparsityBasis::identity;
  std::uint64_t seed = 7;
};

struct CsFrameResult {
  Tensor reconstruction;
  double nmse_db = 0.0;
  int measurements_per_column = 0;
  int column_length = 0;
  double rate = 0.0;
};

// Column-wise compressive sensing of one frame: each time step becomes a
// length 3*subcarriers vector measured with a shared seeded matrix and
// reconstructed independently.
CsFrameResult cs_compress_reconstruct(const CSIFrame& frame, const CsFrameConfig& cfg);

}  // namespace efi
